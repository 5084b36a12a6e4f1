"""Command-line driver: phantom, simulate, dataset, train, correct, score, eval.

Options can come from a JSON file (``--config``); explicit flags win.
Relative output paths are resolved under ``$CALCMOTION_OUTPUT_ROOT`` when
that variable is set. Exit codes: 0 success, 1 invalid input, 2 I/O
failure, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import io, motion, score
from .bridge import (
    MODES,
    BridgeCorrector,
    IdentityDenoiser,
    load_checkpoint,
    save_checkpoint,
    schedule_new,
    sliding_window_correct,
)
from .exceptions import NumericalError, ValidationError
from .grid import HU_MAX, HU_MIN, hu_from_normalized, normalize
from .simulate import PhantomSpec, SimConfig, build_dataset, load_manifest, make_phantom, simulate_motion

OUTPUT_ROOT_ENV = "CALCMOTION_OUTPUT_ROOT"
logger = logging.getLogger("calcmotion")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def out_path(p):
    p = Path(p)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return p if p.is_absolute() or not root else Path(root) / p


def _dump(path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _to_uint8(values):
    v = (np.clip(values, HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN)
    return np.round(255.0 * v).astype(np.uint8)


def write_preview(path, *grids):
    """Middle axial slice of each grid side by side, HU window [-200, 800]."""
    from PIL import Image

    slices = [_to_uint8(g.values[:, :, g.dims[2] // 2]).T for g in grids]
    gap = np.full((slices[0].shape[0], 2), 255, dtype=np.uint8)
    row = slices[0]
    for s in slices[1:]:
        row = np.hstack([row, gap, s])
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(row, mode="L").save(path, format="PNG")
    return path


# --- commands ---------------------------------------------------------------

def cmd_phantom(a):
    spec = PhantomSpec(dims=tuple(a.dims), spacing=tuple(a.spacing),
                       n_lesions=tuple(a.n_lesions), peak_hu=tuple(a.peak_hu))
    grid, mask = make_phantom(spec, a.seed)
    out = out_path(a.out)
    io.write_volume(out / "clean", grid)
    io.write_mask(out / "mask", mask)
    write_preview(out / "clean.png", grid)
    report = score.agatston(grid)
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def _read_pair(volume, mask):
    grid = io.read_volume(volume)
    m = io.read_mask(mask)
    return grid, m


def cmd_simulate(a):
    if a.n_angles is not None and a.n_angles not in motion.ALLOWED_N:
        raise ValidationError(f"--n-angles must be one of {motion.ALLOWED_N}")
    if a.preset not in motion.preset_catalog():
        raise ValidationError(f"unknown preset {a.preset!r}")
    grid, m = _read_pair(a.volume, a.mask)
    cfg = SimConfig(preset=a.preset, n_angles=a.n_angles, seed=a.seed, amplitude=a.amplitude,
                    reconstruct_clean=a.reconstruct_clean, window=a.filter)
    sample = simulate_motion(grid, m, cfg, keep_sinogram=a.dump_sinogram)
    out = out_path(a.out)
    io.write_volume(out / "corrupted", sample.corrupted)
    _dump(out / "trajectory.json", dict(sample.trajectory.to_dict(), config=cfg.to_dict()))
    if a.reconstruct_clean:
        io.write_volume(out / "clean_recon", sample.clean)
    if a.dump_sinogram:
        io.write_sinogram(out / "sinogram", sample.sinogram, sample.trajectory.angles, grid.spacing[0])
    write_preview(out / "preview.png", grid, sample.corrupted)
    before, after = score.agatston(grid), score.agatston(sample.corrupted)
    print(json.dumps({"N": len(sample.trajectory), "clean": before.to_dict(),
                      "corrupted": after.to_dict()}, sort_keys=True))
    return 0


def cmd_dataset(a):
    presets = a.presets or None
    spec = PhantomSpec(dims=tuple(a.dims), spacing=tuple(a.spacing), n_lesions=tuple(a.n_lesions))
    path = build_dataset(out_path(a.out), a.n_cases, spec, presets, a.seed,
                         a.test_fraction, a.reconstruct_clean, a.threads)
    print(path)
    return 0


def _split(entries, split):
    chosen = [e for e in entries if split in (None, "all") or e["split"] == split]
    if not chosen:
        raise ValidationError(f"no manifest entries in split {split!r}")
    return chosen


def _load_entries(manifest, split):
    root, entries = load_manifest(manifest)
    chosen = _split(entries, split)
    clean = [io.read_volume(root / e["clean_path"]) for e in chosen]
    corrupt = [io.read_volume(root / e["corrupt_path"]) for e in chosen]
    masks = [io.read_mask(root / e["mask_path"]) for e in chosen]
    return root, chosen, clean, corrupt, masks


def cmd_train(a):
    est = BridgeCorrector(T=a.T, interval=a.interval, lam=a.lam, tau=a.tau, k=a.k, width=a.width,
                          depth=a.depth, lr=a.lr, weight_decay=a.weight_decay,
                          batch_size=a.batch_size, n_steps=a.steps, crop=a.crop, mode=a.mode,
                          random_state=a.seed)
    schedule_new(a.T, a.interval)  # validate before any work
    _, _, clean, corrupt, _ = _load_entries(a.manifest, "train")
    out = out_path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "loss.csv"
    with log_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "mse", "calc", "total"])

        def log(row):
            writer.writerow([row["step"], repr(row["mse"]), repr(row["calc"]), repr(row["total"])])

        est.fit(corrupt, clean, callback=log)
    H, W = clean[0].dims[:2]
    save_checkpoint(out / "checkpoint", est.denoiser_, est.state_.step, est.state_.hparams,
                    est.schedule_, extra={"window": [H, W, a.k], "mode": a.mode})
    metrics = {"steps": est.state_.step, "train_windows": est.n_windows_}
    if a.eval_split:
        _, chosen, tclean, tcorrupt, tmasks = _load_entries(a.manifest, a.eval_split)
        if a.eval_limit:
            tclean, tcorrupt, tmasks = tclean[:a.eval_limit], tcorrupt[:a.eval_limit], tmasks[:a.eval_limit]
        if len(tclean) >= 2:
            pred = est.predict(tcorrupt)
            metrics["corrected"] = score.evaluate(list(zip(pred, tclean)), tmasks).to_dict()
            metrics["uncorrected"] = score.evaluate(list(zip(tcorrupt, tclean)), tmasks).to_dict()
    _dump(out / "metrics.json", metrics)
    print(json.dumps({k: metrics[k] for k in ("steps", "train_windows")}))
    return 0


def _denoiser(a, in_plane):
    if a.denoiser == "identity":
        return IdentityDenoiser(), schedule_new(a.T, a.interval), a.k
    if not a.checkpoint:
        raise ValidationError("--checkpoint is required unless --denoiser identity")
    den, header = load_checkpoint(a.checkpoint)
    window = header.get("extra", {}).get("window")
    if window and tuple(window[:2]) != tuple(in_plane):
        raise ValidationError(f"volume in-plane size {tuple(in_plane)} does not match the "
                              f"checkpoint window {tuple(window[:2])}")
    sched = header.get("schedule") or {"T": a.T, "interval": a.interval}
    return den, schedule_new(sched["T"], sched["interval"]), den.config.k


def _correct_one(grid, den, sched, k, a):
    rng = np.random.default_rng(a.seed)
    corrected, traces = sliding_window_correct(normalize(grid), den, sched, k, a.mode, rng,
                                               a.stochastic)
    out = grid.with_values(hu_from_normalized(corrected.values), unit="HU")
    return out, len(traces[0]) - 1


def cmd_correct(a):
    if a.mode not in MODES:
        raise ValidationError(f"--mode must be one of {MODES}")
    if bool(a.volume) == bool(a.manifest):
        raise ValidationError("give exactly one of --volume or --manifest")
    out = out_path(a.out)
    if a.volume:
        grid = io.read_volume(a.volume)
        den, sched, k = _denoiser(a, grid.dims[:2])
        fixed, n = _correct_one(grid, den, sched, k, a)
        io.write_volume(out / "corrected", fixed)
        write_preview(out / "before_after.png", grid, fixed)
        logger.info("trace length %d", n)
        print(json.dumps({"trace_steps": n, "mode": a.mode,
                          "before": score.agatston(grid).to_dict(),
                          "after": score.agatston(fixed).to_dict()}, sort_keys=True))
        return 0
    root, entries = load_manifest(a.manifest)
    chosen = _split(entries, a.split)
    grids = [io.read_volume(root / e["corrupt_path"]) for e in chosen]
    den, sched, k = _denoiser(a, grids[0].dims[:2])
    for e, grid in zip(chosen, grids):
        fixed, n = _correct_one(grid, den, sched, k, a)
        io.write_volume(out / e["corrupt_path"], fixed)
    print(json.dumps({"corrected": len(chosen), "trace_steps": n, "mode": a.mode}))
    return 0


def cmd_score(a):
    grid = io.read_volume(a.volume)
    report = score.agatston(grid, min_area=a.min_area, tau=a.tau)
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def cmd_eval(a):
    if a.manifest:
        root, entries = load_manifest(a.manifest)
        chosen = _split(entries, a.split)
        truth = [io.read_volume(root / e["clean_path"]) for e in chosen]
        masks = [io.read_mask(root / e["mask_path"]) for e in chosen]
        pred_root = Path(a.pred_dir) if a.pred_dir else root
        pred = [io.read_volume(pred_root / e["corrupt_path"]) for e in chosen]
    else:
        if not a.pred or not a.truth:
            raise ValidationError("give --manifest or both --pred and --truth")
        if len(a.pred) != len(a.truth):
            raise ValidationError(f"{len(a.pred)} predictions for {len(a.truth)} references")
        pred = [io.read_volume(p) for p in a.pred]
        truth = [io.read_volume(p) for p in a.truth]
        masks = None
    report = score.evaluate(list(zip(pred, truth)), masks)
    out = out_path(a.out)
    _dump(out / "report.json", report.to_dict())
    (out / "report.txt").write_text(report.to_text(a.name))
    if a.png:
        score.plot_confusion(report, out / "confusion.png")
    sys.stdout.write(report.to_text(a.name))
    return 0


# --- parser -----------------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="JSON file of option defaults (flags override)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1, help="BLAS / worker threads")
    p.add_argument("-v", "--verbose", action="store_true")


def _bridge_opts(p):
    p.add_argument("--T", type=int, default=1000)
    p.add_argument("--interval", type=int, default=100)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--mode", default="posterior", choices=MODES)


def build_parser():
    parser = _Parser(prog="calcmotion", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", help="generate a phantom volume and mask")
    _common(p)
    p.add_argument("--out", default="phantom")
    p.add_argument("--dims", type=int, nargs=3, default=[64, 64, 16])
    p.add_argument("--spacing", type=float, nargs=3, default=[0.7, 0.7, 2.5])
    p.add_argument("--n-lesions", type=int, nargs=2, default=[1, 4])
    p.add_argument("--peak-hu", type=float, nargs=2, default=[150.0, 1000.0])
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("simulate", help="corrupt a volume with lesion motion")
    _common(p)
    p.add_argument("--volume", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", default="simulated")
    p.add_argument("--preset", default="oscillation-xy-strong")
    p.add_argument("--n-angles", type=int, default=None)
    p.add_argument("--amplitude", type=float, default=None)
    p.add_argument("--filter", default="ramlak", choices=("ramlak", "hann"))
    p.add_argument("--reconstruct-clean", action="store_true")
    p.add_argument("--dump-sinogram", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("dataset", help="build a paired phantom dataset and manifest")
    _common(p)
    p.add_argument("--out", default="dataset")
    p.add_argument("--n-cases", type=int, default=10)
    p.add_argument("--presets", nargs="*", default=None)
    p.add_argument("--dims", type=int, nargs=3, default=[64, 64, 16])
    p.add_argument("--spacing", type=float, nargs=3, default=[0.7, 0.7, 2.5])
    p.add_argument("--n-lesions", type=int, nargs=2, default=[1, 4])
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--reconstruct-clean", action="store_true")
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", help="train the denoiser on a manifest")
    _common(p)
    _bridge_opts(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default="run")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--crop", type=int, default=None)
    p.add_argument("--lam", type=float, default=20.0)
    p.add_argument("--tau", type=float, default=60.0)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--eval-split", default="test", help="split scored after training ('' to skip)")
    p.add_argument("--eval-limit", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("correct", help="run sliding-window correction")
    _common(p)
    _bridge_opts(p)
    p.add_argument("--volume")
    p.add_argument("--manifest")
    p.add_argument("--split", default="test")
    p.add_argument("--checkpoint")
    p.add_argument("--denoiser", default="checkpoint", choices=("checkpoint", "identity"))
    p.add_argument("--stochastic", action="store_true")
    p.add_argument("--out", default="corrected")
    p.set_defaults(func=cmd_correct)

    p = sub.add_parser("score", help="Agatston and volume score of a volume")
    _common(p)
    p.add_argument("--volume", required=True)
    p.add_argument("--min-area", type=float, default=1.0)
    p.add_argument("--tau", type=float, default=60.0)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="dataset metrics of predictions against references")
    _common(p)
    p.add_argument("--manifest")
    p.add_argument("--split", default="test")
    p.add_argument("--pred-dir", help="root holding predictions named like the corrupted files")
    p.add_argument("--pred", nargs="*")
    p.add_argument("--truth", nargs="*")
    p.add_argument("--name", default="method")
    p.add_argument("--png", action="store_true", help="also render the confusion matrix")
    p.add_argument("--out", default="eval")
    p.set_defaults(func=cmd_eval)
    return parser


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"malformed config {args.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ValidationError("config must be a JSON object")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(k.replace("-", "_") for k in cfg) - known)
        if unknown:
            raise ValidationError(f"unknown config keys: {unknown}")
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
        args = parser.parse_args(argv)
    if args.threads < 1:
        raise ValidationError("--threads must be >= 1")
    return args


def main(argv=None):
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
