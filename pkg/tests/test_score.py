import json

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from calcmotion import score
from calcmotion.exceptions import ValidationError
from calcmotion.grid import BinaryMask, VoxelGrid

from oracles import (
    agatston_bruteforce,
    central_difference,
    count_above,
    dice_bruteforce,
    grade_bruteforce,
    pearson_bruteforce,
    tally,
)


def random_volume(rng, shape=(8, 8, 3)):
    vals = rng.integers(-200, 700, size=shape).astype(float)
    vals[rng.random(shape) < 0.6] = rng.integers(-200, 129)
    return VoxelGrid(vals, (1.0, 1.0, 1.0))


class TestSoftMask:
    def test_examples(self):
        assert score.soft_mask(130.0) == 0.5
        assert score.soft_mask(190.0, 60.0) == pytest.approx(0.7310585786, abs=1e-9)
        assert score.soft_mask(-1e6) == 0.0 and score.soft_mask(1e6) == 1.0

    @given(st.floats(-2000, 3000), st.floats(0.01, 5), st.floats(1, 200))
    def test_increasing_and_bounded(self, x, dx, tau):
        a, b = score.soft_mask(x, tau), score.soft_mask(x + dx, tau)
        assert 0.0 <= a <= b <= 1.0

    @pytest.mark.parametrize("tau", [0.0, -1.0, float("nan")])
    def test_bad_tau(self, tau):
        with pytest.raises(ValidationError):
            score.soft_mask(0.0, tau)


class TestVolumeScore:
    def test_background_tail(self):
        v = VoxelGrid(np.full((4, 4, 2), -200.0))
        assert score.volume_score(v) <= 32 * expit(-5.5) + 1e-15

    def test_single_voxel_at_threshold(self):
        vals = np.full((5, 5, 1), -1000.0)
        vals[2, 2, 0] = 130.0
        tail = 24 * expit(-1130.0 / 60.0)
        assert score.volume_score(VoxelGrid(vals)) == pytest.approx(0.5 + tail, abs=1e-12)

    def test_spacing(self):
        v = VoxelGrid(np.full((2, 2, 2), 1000.0), (0.5, 0.5, 2.0))
        assert score.volume_score(v) == pytest.approx(8 * 0.5, rel=1e-6)

    def test_hard_limit(self, rng):
        for _ in range(20):
            v = random_volume(rng)
            assert score.volume_score(v, tau=0.01) == pytest.approx(count_above(v.values), abs=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 47), st.floats(0, 300))
    def test_monotone(self, idx, bump):
        vals = np.linspace(-100, 400, 48).reshape(4, 4, 3)
        before = score.volume_score(VoxelGrid(vals))
        vals.flat[idx] += bump
        assert score.volume_score(VoxelGrid(vals)) >= before

    def test_plain_array_needs_spacing(self):
        with pytest.raises(ValidationError):
            score.volume_score(np.zeros((2, 2, 2)))


class TestConsistencyLoss:
    def test_exact_match(self, rng):
        x = rng.normal(130, 100, (2, 4, 4, 1))
        loss, grad = score.calcium_consistency_loss(x, x)
        assert loss == 0.0 and not grad.any()

    def test_gradient(self, rng):
        for _ in range(20):
            x0 = rng.normal(130, 80, (2, 4, 4, 1))
            xh = rng.normal(130, 80, (2, 4, 4, 1))
            _, grad = score.calcium_consistency_loss(x0, xh, voxel_volume=0.7)
            fd = central_difference(lambda z: score.calcium_consistency_loss(x0, z, voxel_volume=0.7)[0],
                                    xh.copy(), 1e-3)
            rel = np.linalg.norm(grad - fd) / np.linalg.norm(fd)
            assert rel <= 1e-4

    def test_permutation_invariant(self, rng):
        x0 = rng.normal(130, 80, (1, 16))
        xh = rng.normal(130, 80, (1, 16))
        perm = rng.permutation(16)
        a = score.calcium_consistency_loss(x0, xh)[0]
        b = score.calcium_consistency_loss(x0[:, perm], xh[:, perm])[0]
        assert a == pytest.approx(b, rel=1e-12)

    def test_batch_mean(self, rng):
        x0 = rng.normal(130, 80, (3, 5, 1))
        xh = rng.normal(130, 80, (3, 5, 1))
        per = [score.calcium_consistency_loss(x0[i:i + 1], xh[i:i + 1])[0] for i in range(3)]
        assert score.calcium_consistency_loss(x0, xh)[0] == pytest.approx(np.mean(per))

    def test_shape_errors(self):
        with pytest.raises(ValidationError):
            score.calcium_consistency_loss(np.zeros((2, 3)), np.zeros((2, 4)))
        with pytest.raises(ValidationError):
            score.calcium_consistency_loss(np.zeros(3), np.zeros(3))


class TestAgatston:
    def test_empty(self):
        r = score.agatston(VoxelGrid(np.full((8, 8, 2), -100.0)))
        assert r.agatston == 0 and r.grade == "none" and r.lesions == []

    def test_four_voxels_at_320(self):
        vals = np.full((8, 8, 1), 0.0)
        vals[2:4, 2:4, 0] = [[150, 200], [320, 250]]
        r = score.agatston(VoxelGrid(vals))
        assert r.agatston == 12 and r.grade == "mild"
        assert r.to_dict()["grade_label"] == "Mild"

    def test_min_area_excludes(self):
        vals = np.zeros((8, 8, 1))
        vals[3, 3, 0] = 500
        r = score.agatston(VoxelGrid(vals, (0.5, 1.0, 1.0)))  # area 0.5 mm^2
        assert r.agatston == 0

    def test_eight_connectivity(self):
        vals = np.zeros((6, 6, 1))
        vals[1, 1, 0] = vals[2, 2, 0] = 150
        vals[2, 2, 0] = 420
        lesions = score.find_lesions(VoxelGrid(vals))
        assert len(lesions) == 1 and lesions[0].weight == 4
        assert score.agatston(VoxelGrid(vals)).agatston == 8

    def test_slices_independent(self):
        vals = np.zeros((4, 4, 2))
        vals[1, 1, :] = 250
        assert len(score.find_lesions(VoxelGrid(vals))) == 2

    def test_weight_step_at_200(self):
        vals = np.zeros((6, 6, 1))
        vals[2:4, 2:4, 0] = 180
        vals[2, 2, 0] = 199
        low = score.agatston(VoxelGrid(vals)).agatston
        vals[2, 2, 0] = 200
        assert score.agatston(VoxelGrid(vals)).agatston > low

    def test_translation_invariant(self, rng):
        v = random_volume(rng, (12, 12, 3))
        vals = np.full((20, 20, 3), -100.0)
        vals[:12, :12] = v.values
        moved = np.roll(vals, (5, 3), axis=(0, 1))
        assert score.agatston(VoxelGrid(vals)).agatston == score.agatston(VoxelGrid(moved)).agatston

    def test_spacing_required(self):
        with pytest.raises(ValidationError):
            score.agatston(np.zeros((2, 2, 1)))
        assert score.agatston(np.full((2, 2, 1), 300.0), spacing=(1, 1, 1)).agatston == 12

    def test_hu_required(self):
        with pytest.raises(ValidationError):
            score.agatston(VoxelGrid(np.zeros((2, 2, 1)), unit="normalized"))

    def test_bruteforce(self, rng):
        for _ in range(100):
            v = random_volume(rng)
            r = score.agatston(v)
            assert r.agatston == agatston_bruteforce(v.values, v.spacing)
            assert r.grade == score.grade(r.agatston)

    def test_bruteforce_anisotropic(self, rng):
        for _ in range(20):
            vals = random_volume(rng).values
            sp = (0.6, 0.8, 3.0)
            got = score.agatston(VoxelGrid(vals, sp)).agatston
            assert got == pytest.approx(agatston_bruteforce(vals, sp), abs=1e-9)


class TestGrade:
    @pytest.mark.parametrize("s,g", [(0, "none"), (1, "minimal"), (5, "minimal"), (10, "minimal"),
                                     (10.5, "mild"), (100, "mild"), (101, "moderate"),
                                     (150, "moderate"), (400, "moderate"), (400.01, "severe")])
    def test_bounds(self, s, g):
        assert score.grade(s) == g

    @given(st.floats(0, 1e5))
    def test_matches_bruteforce(self, s):
        assert score.grade(s) == grade_bruteforce(s)

    @pytest.mark.parametrize("s", [-1e-9, float("nan"), float("inf")])
    def test_invalid(self, s):
        with pytest.raises(ValidationError):
            score.grade(s)


class TestDice:
    def _pair(self, p, r):
        return VoxelGrid(np.where(p, 300.0, 0.0)), BinaryMask(r)

    def test_examples(self):
        a = np.zeros((4, 4, 1), bool)
        a[:2, :2] = True
        b = np.zeros_like(a)
        b[2:, 2:] = True
        c = np.zeros_like(a)
        c[:2, 1:3] = True
        assert score.dice_loss(*self._pair(a, a)) == 0
        assert score.dice_loss(*self._pair(a, b)) == 1
        assert score.dice_loss(*self._pair(a, c)) == 0.5
        assert score.dice_loss(*self._pair(~a & ~a, ~a & ~a)) == 0.0

    @given(st.integers(0, 2 ** 16 - 1), st.integers(0, 2 ** 16 - 1))
    def test_symmetric_and_bounded(self, x, y):
        p = np.array([(x >> i) & 1 for i in range(16)], bool).reshape(4, 4, 1)
        r = np.array([(y >> i) & 1 for i in range(16)], bool).reshape(4, 4, 1)
        d = score.dice_loss(*self._pair(p, r))
        assert 0.0 <= d <= 1.0
        assert d == score.dice_loss(*self._pair(r, p))

    def test_bruteforce(self, rng):
        for _ in range(100):
            v = random_volume(rng)
            ref = rng.random(v.dims) < 0.3
            assert score.dice_loss(v, BinaryMask(ref)) == pytest.approx(
                dice_bruteforce(v.values >= 130, ref), abs=1e-12)

    def test_geometry_mismatch(self):
        with pytest.raises(ValidationError):
            score.dice_loss(VoxelGrid(np.zeros((2, 2, 2))), BinaryMask(np.zeros((2, 2, 3))))


class TestPearson:
    def test_examples(self):
        assert score.pearson([1, 2, 3], [2, 4, 6]) == (1.0, True)
        assert score.pearson([1, 2, 3], [3, 2, 1])[0] == pytest.approx(-1.0)

    def test_constant(self):
        r, ok = score.pearson([1, 1, 1], [1, 2, 3])
        assert np.isnan(r) and not ok

    def test_bruteforce(self, rng):
        for _ in range(100):
            a, b = rng.normal(size=10), rng.normal(size=10)
            assert score.pearson(a, b)[0] == pytest.approx(pearson_bruteforce(a, b), abs=1e-9)

    def test_needs_two(self):
        with pytest.raises(ValidationError):
            score.pearson([1.0], [1.0])


def volume_with_score(target):
    """A 1 mm volume whose Agatston score is ``target`` (weight 1 lesions)."""
    vals = np.zeros((30, 30, 1))
    n = int(target)
    for i in range(n):
        vals[2 * (i % 15), 2 * (i // 15), 0] = 150  # isolated 1 mm^2 lesions
    return VoxelGrid(vals)


class TestEvaluate:
    def test_perfect(self, phantom):
        g, m = phantom
        cases = [volume_with_score(s) for s in (0, 5, 50, 150)] + [g]
        r = score.evaluate([(c, c) for c in cases])
        assert r.agatston_mae == 0 and r.grade_accuracy == 100 and r.dice_loss == 0
        assert r.pearson == pytest.approx(1.0)
        present = {score.grade(s) for s in r.true_scores}
        for i, gname in enumerate(score.GRADES):
            expect = [100.0 * (j == i) for j in range(5)] if gname in present else [0.0] * 5
            assert r.confusion_pct[i] == expect

    def test_hand_built_tally(self):
        true = [0, 5, 5, 50, 150, 220]
        pred = [3, 5, 60, 50, 100, 160]
        pairs = [(volume_with_score(p), volume_with_score(t)) for p, t in zip(pred, true)]
        r = score.evaluate(pairs)
        tg = [grade_bruteforce(t) for t in true]
        pg = [grade_bruteforce(p) for p in pred]
        assert r.confusion_counts == tally(tg, pg)
        assert r.agatston_mae == pytest.approx(np.mean(np.abs(np.subtract(pred, true))))
        assert r.grade_accuracy == pytest.approx(100 * 3 / 6)
        for row, counts in zip(r.confusion_pct, r.confusion_counts):
            if sum(counts):
                assert sum(row) == pytest.approx(100.0)
        mod = r.per_class["moderate"]
        assert mod["support"] == 2 and mod["recall"] == 0.5 and mod["precision"] == 1.0

    def test_random_tallies(self, rng):
        for _ in range(20):
            tg = list(rng.choice(score.GRADES, 12))
            pg = list(rng.choice(score.GRADES, 12))
            counts, pct = score.grade_confusion(tg, pg)
            assert counts.tolist() == tally(tg, pg)
            for row, c in zip(pct, counts):
                assert row.sum() == pytest.approx(100.0 if c.sum() else 0.0)

    def test_undefined_pearson(self):
        z = volume_with_score(0)
        r = score.evaluate([(z, z), (z, z)])
        assert not r.pearson_defined and r.to_dict()["pearson"] is None
        assert "n/a" in r.to_text()

    def test_masks_used_for_dice(self, phantom):
        g, m = phantom
        r = score.evaluate([(g, g), (g, g)], masks=[m, m])
        assert r.dice_loss == pytest.approx(score.dice_loss(g, m))

    def test_errors(self, phantom):
        g, m = phantom
        with pytest.raises(ValidationError):
            score.evaluate([(g, g)])
        with pytest.raises(ValidationError):
            score.evaluate([(g, g), (g, g)], masks=[m])

    def test_schema_and_text(self, phantom, tmp_path):
        g, _ = phantom
        cases = [volume_with_score(s) for s in (0, 5, 50)] + [g]
        r = score.evaluate([(c, c) for c in cases])
        jsonschema.validate(json.loads(r.to_json()), score.report_schema())
        text = r.to_text("none")
        assert "Agatston MAE" in text and "Moderate" in text
        score.plot_confusion(r, tmp_path / "c.png")
        assert (tmp_path / "c.png").read_bytes()[:4] == b"\x89PNG"
