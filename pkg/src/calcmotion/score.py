"""Calcium quantification and the evaluation metric suite.

Two scores live here. The Agatston score is the clinical one: per axial
slice, connected regions at or above 130 HU are weighted by their peak
intensity. The volume score is its smooth stand-in, a sigmoid-softened
voxel count that can be differentiated and so used as a training loss.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np
from scipy import ndimage
from scipy.special import expit
from sklearn.metrics import confusion_matrix, precision_recall_fscore_support

from .exceptions import ValidationError
from .grid import BinaryMask, VoxelGrid
from .validation import check_same_geometry

THRESHOLD_HU = 130.0
DEFAULT_TAU = 60.0
GRADES = ("none", "minimal", "mild", "moderate", "severe")
GRADE_LABELS = {
    "none": "No calcification",
    "minimal": "Minimal",
    "mild": "Mild",
    "moderate": "Moderate",
    "severe": "Severe",
}
# upper bounds of minimal, mild and moderate; anything above is severe
GRADE_BOUNDS = (10.0, 100.0, 400.0)
# (lower HU bound, weight); a lesion takes the weight of the last bound its peak reaches
DENSITY_WEIGHTS = ((130.0, 1), (200.0, 2), (300.0, 3), (400.0, 4))


def _check_tau(tau):
    if not (math.isfinite(tau) and tau > 0):
        raise ValidationError(f"softness tau must be positive, got {tau}")
    return float(tau)


def soft_mask(x, tau=DEFAULT_TAU, threshold=THRESHOLD_HU):
    """Smooth membership ``sigmoid((x - threshold) / tau)`` of HU values."""
    tau = _check_tau(tau)
    return expit((np.asarray(x, dtype=np.float64) - threshold) / tau)


def _grid_values(v, spacing=None):
    if isinstance(v, VoxelGrid):
        if v.unit != "HU":
            raise ValidationError("scoring expects a volume in HU")
        return v.values, v.spacing
    if spacing is None:
        raise ValidationError("voxel spacing is required for plain arrays")
    return np.asarray(v, dtype=np.float64), tuple(float(s) for s in spacing)


def volume_score(v, tau=DEFAULT_TAU, spacing=None):
    """Soft calcium volume in mm^3: voxel volume times the summed soft mask."""
    values, sp = _grid_values(v, spacing)
    return float(np.prod(sp) * soft_mask(values, tau).sum())


def _log_volume_and_grad(x_hu, tau, voxel_volume):
    """log(1 + S) per item of a batch and its gradient wrt every voxel."""
    s = expit((x_hu - THRESHOLD_HU) / tau)
    axes = tuple(range(1, x_hu.ndim))
    S = voxel_volume * s.sum(axis=axes)
    dlog = (voxel_volume / tau) * s * (1.0 - s) / (1.0 + S).reshape((-1,) + (1,) * len(axes))
    return np.log1p(S), dlog


def calcium_consistency_loss(x0, x0_hat, tau=DEFAULT_TAU, voxel_volume=1.0):
    """Squared log-volume mismatch between reference and estimate.

    Inputs are HU arrays with a leading batch axis; the loss is averaged
    over the batch. Returns ``(loss, grad)`` where ``grad`` has the shape
    of ``x0_hat``.
    """
    tau = _check_tau(tau)
    x0 = np.asarray(x0, dtype=np.float64)
    x0_hat = np.asarray(x0_hat, dtype=np.float64)
    if x0.shape != x0_hat.shape:
        raise ValidationError(f"shape mismatch {x0.shape} vs {x0_hat.shape}")
    if x0.ndim < 2:
        raise ValidationError("inputs need a leading batch axis")
    ref, _ = _log_volume_and_grad(x0, tau, voxel_volume)
    est, dlog = _log_volume_and_grad(x0_hat, tau, voxel_volume)
    diff = est - ref
    n = x0.shape[0]
    grad = (2.0 / n) * diff.reshape((-1,) + (1,) * (x0.ndim - 1)) * dlog
    return float(np.mean(diff ** 2)), grad


@dataclass
class Lesion:
    slice: int
    voxels: np.ndarray = field(repr=False)  # (n, 2) in-plane indices
    area_mm2: float
    max_hu: float
    weight: int

    @property
    def score(self):
        return self.area_mm2 * self.weight


@dataclass
class ScoreReport:
    agatston: float
    volume_mm3: float
    grade: str
    lesions: list = field(default_factory=list, repr=False)

    def to_dict(self):
        return {
            "agatston": self.agatston,
            "volume_mm3": self.volume_mm3,
            "grade": self.grade,
            "grade_label": GRADE_LABELS[self.grade],
            "n_lesions": len(self.lesions),
        }


def density_weight(max_hu):
    w = 0
    for bound, weight in DENSITY_WEIGHTS:
        if max_hu >= bound:
            w = weight
    return w


def grade(score):
    """Risk category of an Agatston score."""
    score = float(score)
    if not math.isfinite(score) or score < 0:
        raise ValidationError(f"Agatston score must be a non-negative number, got {score}")
    if score == 0:
        return "none"
    for name, bound in zip(GRADES[1:], GRADE_BOUNDS):
        if score <= bound:
            return name
    return "severe"


_EIGHT = np.ones((3, 3), dtype=bool)


def find_lesions(v, threshold=THRESHOLD_HU, min_area=1.0, spacing=None):
    values, sp = _grid_values(v, spacing)
    pixel_area = sp[0] * sp[1]
    lesions = []
    for k in range(values.shape[2]):
        sl = values[:, :, k]
        labels, count = ndimage.label(sl >= threshold, structure=_EIGHT)
        if count == 0:
            continue
        ids = np.arange(1, count + 1)
        sizes = ndimage.sum_labels(np.ones_like(sl), labels, ids)
        peaks = ndimage.maximum(sl, labels, ids)
        for i, n, peak in zip(ids, sizes, peaks):
            area = n * pixel_area
            if area < min_area:
                continue
            lesions.append(Lesion(k, np.argwhere(labels == i), float(area), float(peak),
                                  density_weight(peak)))
    return lesions


def agatston(v, threshold=THRESHOLD_HU, min_area=1.0, tau=DEFAULT_TAU, spacing=None):
    """Agatston score (area in mm^2 times peak-density weight, summed over
    per-slice 8-connected lesions) with its grade and the volume score."""
    if spacing is None and not isinstance(v, VoxelGrid):
        raise ValidationError("Agatston scoring needs the in-plane spacing")
    lesions = find_lesions(v, threshold, min_area, spacing)
    total = float(sum(les.score for les in lesions))
    return ScoreReport(total, volume_score(v, tau, spacing), grade(total), lesions)


def threshold_mask(v, threshold=THRESHOLD_HU):
    values, sp = _grid_values(v, getattr(v, "spacing", (1.0, 1.0, 1.0)))
    return BinaryMask(values >= threshold, sp)


def dice_loss(pred, ref_mask, threshold=THRESHOLD_HU):
    """1 - Dice between ``pred >= threshold`` and ``ref_mask``; 0 if both are empty."""
    check_same_geometry(pred, ref_mask, "prediction and mask")
    p = pred.values >= threshold
    r = ref_mask.bits
    total = int(p.sum()) + int(r.sum())
    if total == 0:
        return 0.0
    return 1.0 - 2.0 * int((p & r).sum()) / total


def pearson(a, b):
    """Pearson correlation, or ``(nan, False)`` when either side is constant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.size < 2:
        raise ValidationError("Pearson needs two equally long vectors of at least 2 values")
    da, db = a - a.mean(), b - b.mean()
    denom = math.sqrt(float(da @ da) * float(db @ db))
    if denom == 0.0:
        return float("nan"), False
    return float(np.clip((da @ db) / denom, -1.0, 1.0)), True


@dataclass
class EvalReport:
    n_cases: int
    agatston_mae: float
    grade_accuracy: float  # percent
    dice_loss: float
    pearson: float
    pearson_defined: bool
    confusion_pct: list  # rows = true grade, columns = predicted grade
    confusion_counts: list
    per_class: dict
    pred_scores: list = field(default_factory=list)
    true_scores: list = field(default_factory=list)

    def to_dict(self):
        d = asdict(self)
        d["grades"] = list(GRADES)
        if not self.pearson_defined:
            d["pearson"] = None
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_text(self, name="method"):
        head = f"{'Method':<16}{'Agatston MAE':>14}{'Grade acc. (%)':>16}{'Dice loss':>11}{'Pearson':>9}"
        r = f"{self.pearson:.3f}" if self.pearson_defined else "n/a"
        row = (f"{name:<16}{self.agatston_mae:>14.3f}{self.grade_accuracy:>16.3f}"
               f"{self.dice_loss:>11.3f}{r:>9}")
        lines = [head, row, "", f"{'Grade':<18}{'Prec':>8}{'Rec':>8}{'F1':>8}{'Support':>9}"]
        for g in GRADES:
            c = self.per_class[g]
            lines.append(f"{GRADE_LABELS[g]:<18}{c['precision']:>8.3f}{c['recall']:>8.3f}"
                         f"{c['f1']:>8.3f}{c['support']:>9d}")
        lines += ["", "Confusion matrix (% of true grade; rows true, columns predicted)",
                  " " * 18 + "".join(f"{g[:8]:>9}" for g in GRADES)]
        for g, row_pct in zip(GRADES, self.confusion_pct):
            lines.append(f"{GRADE_LABELS[g]:<18}" + "".join(f"{x:>9.1f}" for x in row_pct))
        return "\n".join(lines) + "\n"


def grade_confusion(true_grades, pred_grades):
    """Counts and row percentages over the five grades (empty rows stay 0)."""
    counts = confusion_matrix(true_grades, pred_grades, labels=list(GRADES))
    rows = counts.sum(axis=1, keepdims=True)
    pct = np.divide(100.0 * counts, rows, out=np.zeros(counts.shape), where=rows > 0)
    return counts, pct


def evaluate(pairs, masks=None, threshold=THRESHOLD_HU):
    """Dataset metrics over ``(pred, truth)`` HU volume pairs.

    Dice compares the thresholded prediction with ``masks[i]`` when given,
    otherwise with the thresholded truth.
    """
    pairs = list(pairs)
    if len(pairs) < 2:
        raise ValidationError("evaluation needs at least two pairs")
    if masks is not None and len(masks) != len(pairs):
        raise ValidationError(f"{len(masks)} masks for {len(pairs)} pairs")
    pred_scores, true_scores, dice = [], [], []
    for i, (pred, truth) in enumerate(pairs):
        check_same_geometry(pred, truth, f"pair {i}")
        pred_scores.append(agatston(pred, threshold).agatston)
        true_scores.append(agatston(truth, threshold).agatston)
        ref = masks[i] if masks is not None else threshold_mask(truth, threshold)
        dice.append(dice_loss(pred, ref, threshold))
    ps, ts = np.array(pred_scores), np.array(true_scores)
    pg = [grade(s) for s in ps]
    tg = [grade(s) for s in ts]
    counts, pct = grade_confusion(tg, pg)
    prec, rec, f1, support = precision_recall_fscore_support(
        tg, pg, labels=list(GRADES), zero_division=0)
    r, defined = pearson(ps, ts)
    return EvalReport(
        n_cases=len(pairs),
        agatston_mae=float(np.mean(np.abs(ps - ts))),
        grade_accuracy=100.0 * float(np.mean([a == b for a, b in zip(pg, tg)])),
        dice_loss=float(np.mean(dice)),
        pearson=r,
        pearson_defined=defined,
        confusion_pct=pct.tolist(),
        confusion_counts=counts.tolist(),
        per_class={g: {"precision": float(p), "recall": float(q), "f1": float(f), "support": int(s)}
                   for g, p, q, f, s in zip(GRADES, prec, rec, f1, support)},
        pred_scores=ps.tolist(),
        true_scores=ts.tolist(),
    )


def report_schema():
    text = resources.files("calcmotion").joinpath("data/eval_report.schema.json").read_text()
    return json.loads(text)


def plot_confusion(report, path, title="Grade confusion (%)"):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4.2))
    pct = np.asarray(report.confusion_pct)
    im = ax.imshow(pct, cmap="Blues", vmin=0, vmax=100)
    labels = [GRADE_LABELS[g] for g in GRADES]
    ax.set_xticks(range(5), labels, rotation=35, ha="right")
    ax.set_yticks(range(5), labels)
    ax.set_xlabel("Predicted grade")
    ax.set_ylabel("True grade")
    for i in range(5):
        for j in range(5):
            ax.text(j, i, f"{pct[i, j]:.0f}", ha="center", va="center",
                    color="white" if pct[i, j] > 50 else "black", fontsize=8)
    fig.colorbar(im, ax=ax)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path
