import csv
import json

import jsonschema
import numpy as np
import pytest

from calcmotion import cli, io, score
from calcmotion.simulate import file_digest


def run(argv, capsys=None):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr() if capsys else None
    return code, out


def digests(folder):
    return {p.relative_to(folder).as_posix(): file_digest(p)
            for p in sorted(folder.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["dataset", "--out", str(root / "ds"), "--n-cases", "4", "--dims", "32", "32", "6", "--n-lesions", "1", "2",
                     "--presets", "oscillation-xy-strong", "translation-xy-strong",
                     "--test-fraction", "0.5", "--seed", "2"]) == 0
    return root, root / "ds" / "manifest.json"


class TestPhantom:
    def test_outputs_and_grade(self, tmp_path, capsys):
        code, out = run(["phantom", "--out", tmp_path / "p", "--dims", 32, 32, 6, "--n-lesions", 1, 2, "--seed", 1,
                         "--peak-hu", 500, 500], capsys)
        assert code == 0
        printed = json.loads(out.out)
        assert printed["grade"] == score.grade(printed["agatston"])
        g = io.read_volume(tmp_path / "p" / "clean")
        assert score.agatston(g).agatston == pytest.approx(printed["agatston"], rel=1e-5)
        assert (tmp_path / "p" / "clean.png").exists() and (tmp_path / "p" / "mask.json").exists()

    def test_reproducible(self, tmp_path):
        for name in ("a", "b"):
            assert run(["phantom", "--out", tmp_path / name, "--seed", 1])[0] == 0
        assert digests(tmp_path / "a") == digests(tmp_path / "b")

    def test_invalid_dims(self, tmp_path, capsys):
        code, out = run(["phantom", "--out", tmp_path / "p", "--dims", 0, 32, 6], capsys)
        assert code == 1 and "error" in out.err
        assert not (tmp_path / "p").exists()


class TestSimulate:
    @pytest.fixture
    def phantom_dir(self, tmp_path):
        run(["phantom", "--out", tmp_path / "p", "--dims", 32, 32, 6, "--n-lesions", 1, 2, "--seed", 3])
        return tmp_path / "p"

    def test_deterministic(self, phantom_dir, tmp_path):
        for name in ("a", "b"):
            code, _ = run(["simulate", "--volume", phantom_dir / "clean", "--mask", phantom_dir / "mask",
                           "--preset", "oscillation-xy-strong", "--n-angles", 360, "--seed", 7,
                           "--out", tmp_path / name, "--dump-sinogram"])
            assert code == 0
        assert digests(tmp_path / "a") == digests(tmp_path / "b")
        assert (tmp_path / "a" / "sinogram.json").exists()

    def test_invalid_n(self, phantom_dir, tmp_path, capsys):
        code, _ = run(["simulate", "--volume", phantom_dir / "clean", "--mask", phantom_dir / "mask",
                       "--n-angles", 100, "--out", tmp_path / "x"], capsys)
        assert code == 1 and not (tmp_path / "x").exists()

    def test_zero_amplitude(self, phantom_dir, tmp_path, capsys):
        code, out = run(["simulate", "--volume", phantom_dir / "clean", "--mask", phantom_dir / "mask",
                         "--n-angles", 360, "--amplitude", 0, "--reconstruct-clean", "--out", tmp_path / "z"],
                        capsys)
        assert code == 0
        a = io.read_volume(tmp_path / "z" / "corrupted")
        b = io.read_volume(tmp_path / "z" / "clean_recon")
        np.testing.assert_array_equal(a.values, b.values)
        assert score.agatston(a).agatston == score.agatston(b).agatston

    def test_missing_input(self, tmp_path, capsys):
        code, _ = run(["simulate", "--volume", tmp_path / "none", "--mask", tmp_path / "none"], capsys)
        assert code == 2


class TestTrainCorrectEval:
    @pytest.fixture(scope="class")
    @classmethod
    def trained(cls, data, tmp_path_factory):
        root, manifest = data
        runs = tmp_path_factory.mktemp("runs")
        for name in ("a", "b"):
            assert cli.main(["train", "--manifest", str(manifest), "--out", str(runs / name), "--steps", "6",
                             "--batch-size", "2", "--crop", "16", "--width", "4", "--depth", "2",
                             "--seed", "5", "--eval-limit", "2"]) == 0
        assert cli.main(["train", "--manifest", str(manifest), "--out", str(runs / "lam0"), "--steps", "4",
                         "--batch-size", "2", "--crop", "16", "--width", "4", "--depth", "2", "--lam", "0",
                         "--eval-split", ""]) == 0
        return runs

    def test_train_deterministic(self, trained):
        assert digests(trained / "a") == digests(trained / "b")
        rows = list(csv.DictReader((trained / "a" / "loss.csv").open()))
        assert len(rows) == 6 and float(rows[0]["calc"]) >= 0
        metrics = json.loads((trained / "a" / "metrics.json").read_text())
        assert metrics["steps"] == 6 and "corrected" in metrics

    def test_lambda_zero_calc_column(self, trained):
        rows = list(csv.DictReader((trained / "lam0" / "loss.csv").open()))
        assert all(float(r["calc"]) == 0.0 for r in rows)

    @pytest.mark.parametrize("mode", ["direct", "posterior"])
    def test_correct_volume(self, trained, data, tmp_path, capsys, mode):
        root, _ = data
        vol = next((root / "ds").rglob("oscillation-xy-strong.json"))
        code, out = run(["correct", "--volume", vol, "--checkpoint", trained / "a" / "checkpoint.json",
                         "--mode", mode, "--out", tmp_path / mode], capsys)
        assert code == 0
        assert json.loads(out.out)["trace_steps"] == 10
        fixed = io.read_volume(tmp_path / mode / "corrected")
        assert fixed.values.min() >= -200 and fixed.values.max() <= 800

    def test_identity_correct(self, data, tmp_path):
        root, _ = data
        vol = next((root / "ds").rglob("oscillation-xy-strong.json"))
        assert run(["correct", "--volume", vol, "--denoiser", "identity", "--mode", "direct",
                    "--out", tmp_path / "id"])[0] == 0
        before = io.read_volume(vol).values
        after = io.read_volume(tmp_path / "id" / "corrected").values
        np.testing.assert_allclose(after, np.clip(before, -200, 800), atol=1e-3)

    def test_checkpoint_geometry_mismatch(self, trained, tmp_path, capsys):
        run(["phantom", "--out", tmp_path / "p", "--dims", 24, 24, 4, "--n-lesions", 1, 1])
        code, out = run(["correct", "--volume", tmp_path / "p" / "clean",
                         "--checkpoint", trained / "a" / "checkpoint.json"], capsys)
        assert code == 1 and "checkpoint window" in out.err

    def test_manifest_correct_and_eval(self, trained, data, tmp_path, capsys):
        root, manifest = data
        assert run(["correct", "--manifest", manifest, "--denoiser", "identity", "--mode", "direct",
                    "--out", tmp_path / "pred"])[0] == 0
        code, out = run(["eval", "--manifest", manifest, "--pred-dir", tmp_path / "pred", "--png",
                         "--out", tmp_path / "ev"], capsys)
        assert code == 0
        report = json.loads((tmp_path / "ev" / "report.json").read_text())
        jsonschema.validate(report, score.report_schema())
        assert (tmp_path / "ev" / "confusion.png").exists()
        assert "Agatston MAE" in out.out
        # numbers equal the library on the same inputs
        from calcmotion.simulate import load_manifest

        r, entries = load_manifest(manifest)
        test = [e for e in entries if e["split"] == "test"]
        pairs = [(io.read_volume(tmp_path / "pred" / e["corrupt_path"]), io.read_volume(r / e["clean_path"]))
                 for e in test]
        masks = [io.read_mask(r / e["mask_path"]) for e in test]
        assert report == score.evaluate(pairs, masks).to_dict()

    def test_eval_perfect(self, data, tmp_path, capsys):
        root, _ = data
        vols = sorted(str(p) for p in (root / "ds").rglob("clean.json"))[:3]
        code, _ = run(["eval", "--pred", *vols, "--truth", *vols, "--out", tmp_path / "e"], capsys)
        assert code == 0
        report = json.loads((tmp_path / "e" / "report.json").read_text())
        assert report["agatston_mae"] == 0 and report["grade_accuracy"] == 100
        assert report["dice_loss"] == 0 and report["pearson"] == pytest.approx(1.0)

    def test_eval_uncorrected_dice(self, data, tmp_path, capsys):
        _, manifest = data
        code, _ = run(["eval", "--manifest", manifest, "--split", "all", "--out", tmp_path / "e"], capsys)
        assert code == 0
        assert json.loads((tmp_path / "e" / "report.json").read_text())["dice_loss"] > 0.3


class TestOptions:
    def test_config_and_flag_override(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"dims": [24, 24, 4], "seed": 9, "out": str(tmp_path / "fromcfg")}))
        args = cli.parse_args(["phantom", "--config", str(cfg)])
        assert args.dims == [24, 24, 4] and args.seed == 9
        args = cli.parse_args(["phantom", "--config", str(cfg), "--seed", "2"])
        assert args.seed == 2 and args.dims == [24, 24, 4]

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"nope": 1}))
        assert run(["phantom", "--config", cfg], capsys)[0] == 1

    def test_bad_flag_is_validation(self, capsys):
        assert run(["phantom", "--dims", "x"], capsys)[0] == 1
        assert run(["frobnicate"], capsys)[0] == 1

    def test_output_root_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path))
        assert run(["phantom", "--out", "rel", "--dims", 24, 24, 4, "--n-lesions", 1, 1])[0] == 0
        assert (tmp_path / "rel" / "clean.json").exists()

    def test_score_command(self, tmp_path, capsys):
        run(["phantom", "--out", tmp_path / "p", "--dims", 24, 24, 4, "--n-lesions", 1, 1, "--seed", 4])
        capsys.readouterr()
        code, out = run(["score", "--volume", tmp_path / "p" / "clean"], capsys)
        assert code == 0
        g = io.read_volume(tmp_path / "p" / "clean")
        assert json.loads(out.out) == score.agatston(g).to_dict()

    def test_threads_validated(self, capsys):
        assert run(["phantom", "--threads", 0], capsys)[0] == 1
