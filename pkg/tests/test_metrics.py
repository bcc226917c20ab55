import numpy as np
import pytest

from finecount.metrics import (EvalReport, build_report, cmae,
                               mae_per_category, omae, segmentation_metrics)


def brute_mae(pred_maps, gt_maps, k):
    """Naive loop re-implementation used as the oracle."""
    n = len(pred_maps)
    out = []
    for j in range(k):
        acc = 0.0
        for i in range(n):
            acc += abs(float(np.sum(pred_maps[i][j])) - float(np.sum(gt_maps[i][j])))
        out.append(acc / n)
    return np.array(out)


def brute_omae(pred_overall, gt_maps):
    acc = 0.0
    for p, g in zip(pred_overall, gt_maps):
        acc += abs(float(np.sum(p)) - float(np.sum(g)))
    return acc / len(pred_overall)


def brute_seg(pred_seg, gt_seg, k):
    correct = total = 0
    cat_correct = np.zeros(k)
    cat_total = np.zeros(k)
    for p, g in zip(pred_seg, gt_seg):
        _, h, w = g.shape
        for y in range(h):
            for x in range(w):
                if g[-1, y, x] != 0:
                    continue
                pl = int(np.argmax(p[:k, y, x]))
                gl = int(np.argmax(g[:k, y, x]))
                total += 1
                cat_total[gl] += 1
                if pl == gl:
                    correct += 1
                    cat_correct[gl] += 1
    acc = correct / total if total else float("nan")
    rec = np.where(cat_total > 0, cat_correct / np.maximum(cat_total, 1), np.nan)
    return acc, rec


def random_case(rng, k=2, n=3, size=(5, 6)):
    pred_fine = [rng.uniform(0, 2, size=(k,) + size) for _ in range(n)]
    gt_fine = [rng.uniform(0, 2, size=(k,) + size) for _ in range(n)]
    pred_overall = [rng.uniform(0, 2, size=size) for _ in range(n)]
    pred_seg, gt_seg = [], []
    for _ in range(n):
        ps = rng.uniform(0, 1, size=(k + 1,) + size)
        gs = rng.uniform(0, 1, size=(k + 1,) + size)
        gs[-1] = (rng.uniform(size=size) < 0.3).astype(float)
        pred_seg.append(ps)
        gt_seg.append(gs)
    return pred_fine, gt_fine, pred_overall, pred_seg, gt_seg


class TestMaePerCategory:
    def test_perfect_prediction_zero(self, rng):
        maps = [rng.uniform(size=(2, 4, 4)) for _ in range(3)]
        np.testing.assert_array_equal(mae_per_category(maps, maps), 0.0)

    def test_hand_case(self):
        pred = [np.array([[[5.0]], [[4.0]]]), np.array([[[3.0]], [[4.0]]])]
        gt = [np.array([[[3.0]], [[4.0]]]), np.array([[[3.0]], [[4.0]]])]
        np.testing.assert_allclose(mae_per_category(pred, gt), [1.0, 0.0])

    def test_different_resolutions_allowed(self):
        pred = [np.full((1, 2, 2), 1.0)]       # sums to 4
        gt = [np.full((1, 4, 4), 0.25)]        # sums to 4
        np.testing.assert_allclose(mae_per_category(pred, gt), [0.0], atol=1e-12)

    def test_count_mismatch_rejected(self):
        with pytest.raises(ValueError):
            mae_per_category([np.zeros((1, 2, 2))], [])


class TestCmae:
    def test_reference_pair(self):
        assert cmae(np.array([8.79, 7.23])) == pytest.approx(8.01, abs=0.005)

    def test_single_category_identity(self):
        assert cmae(np.array([3.7])) == 3.7

    def test_all_zero(self):
        assert cmae(np.zeros(4)) == 0.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            cmae(np.array([]))


class TestOmae:
    def test_perfect(self, rng):
        gt = [rng.uniform(size=(2, 3, 3)) for _ in range(4)]
        pred = [g.sum(axis=0) for g in gt]
        assert omae(pred, gt) == pytest.approx(0.0, abs=1e-12)

    def test_hand_case(self):
        gt = [np.full((2, 2, 2), 2.5)]     # total 20
        pred = [np.full((4, 4), 23.0 / 16)]  # total 23
        assert omae(pred, gt) == pytest.approx(3.0)

    def test_invariant_to_category_split(self, rng):
        base = rng.uniform(size=(2, 4, 4))
        shuffled = base.copy()
        shuffled[0] += 0.7 * base[1]
        shuffled[1] -= 0.7 * base[1]
        pred = [rng.uniform(size=(4, 4))]
        assert omae(pred, [base]) == pytest.approx(omae(pred, [shuffled]))


class TestSegmentationMetrics:
    def test_perfect_prediction(self, rng):
        _, _, _, _, gt_seg = random_case(rng)
        acc, rec = segmentation_metrics(gt_seg, gt_seg, k=2)
        assert acc == 1.0
        np.testing.assert_array_equal(rec[~np.isnan(rec)], 1.0)

    def test_constant_category_prediction(self):
        # predictions always category 1; GT half cat 1, half cat 2
        gt = np.zeros((3, 2, 2))
        gt[0, :, 0] = 1.0
        gt[1, :, 1] = 1.0
        pred = np.zeros((3, 2, 2))
        pred[0] = 1.0
        acc, rec = segmentation_metrics([pred], [gt], k=2)
        assert acc == 0.5
        np.testing.assert_array_equal(rec, [1.0, 0.0])

    def test_all_background_returns_nan_with_warning(self):
        gt = np.zeros((3, 2, 2))
        gt[-1] = 1.0
        with pytest.warns(UserWarning, match="undefined"):
            acc, rec = segmentation_metrics([gt], [gt], k=2)
        assert np.isnan(acc) and np.isnan(rec).all()

    def test_ties_break_to_lowest_category(self):
        gt = np.zeros((3, 1, 1))
        gt[0] = 0.5
        gt[1] = 0.5
        pred = np.full((3, 1, 1), 1.0 / 3)
        acc, _ = segmentation_metrics([pred], [gt], k=2)
        assert acc == 1.0   # both argmaxes resolve to category 1


class TestAgainstBruteForce:
    def test_fifty_random_cases(self, rng):
        for _ in range(50):
            k = int(rng.integers(1, 4))
            n = int(rng.integers(1, 5))
            size = (int(rng.integers(2, 7)), int(rng.integers(2, 7)))
            pf, gf, po, ps, gs = random_case(rng, k=k, n=n, size=size)
            np.testing.assert_allclose(mae_per_category(pf, gf),
                                       brute_mae(pf, gf, k), atol=1e-9)
            assert omae(po, gf) == pytest.approx(brute_omae(po, gf), abs=1e-9)
            acc, rec = segmentation_metrics(ps, gs, k=k)
            bacc, brec = brute_seg(ps, gs, k)
            assert acc == pytest.approx(bacc, abs=1e-9)
            np.testing.assert_allclose(rec, brec, atol=1e-9, equal_nan=True)

    def test_permutation_invariance(self, rng):
        pf, gf, po, ps, gs = random_case(rng, n=5)
        perm = rng.permutation(5)
        np.testing.assert_allclose(
            mae_per_category(pf, gf),
            mae_per_category([pf[i] for i in perm], [gf[i] for i in perm]),
            atol=1e-12)
        assert omae(po, gf) == pytest.approx(
            omae([po[i] for i in perm], [gf[i] for i in perm]), abs=1e-12)

    def test_inputs_not_mutated(self, rng):
        pf, gf, po, ps, gs = random_case(rng)
        copies = [np.copy(a) for group in (pf, gf, po, ps, gs) for a in group]
        mae_per_category(pf, gf)
        omae(po, gf)
        segmentation_metrics(ps, gs, k=2)
        flat = [a for group in (pf, gf, po, ps, gs) for a in group]
        for before, after in zip(copies, flat):
            np.testing.assert_array_equal(before, after)


class TestBuildReport:
    def test_report_fields_and_cmae_consistency(self, rng):
        pf, gf, po, ps, gs = random_case(rng)
        report = build_report(pf, po, ps, gf, gs, k=2)
        assert isinstance(report, EvalReport)
        assert report.n_images == 3
        assert report.cmae == pytest.approx(np.mean(report.mae_per_category))
        d = report.to_dict()
        assert set(d) == {"mae_per_category", "cmae", "omae", "seg_accuracy",
                          "seg_recall_per_category", "n_images"}

    def test_report_without_segmentation(self, rng):
        pf, gf, po, _, _ = random_case(rng)
        report = build_report(pf, po, None, gf, None, k=2)
        assert np.isnan(report.seg_accuracy)

    def test_table_renders(self, rng):
        pf, gf, po, ps, gs = random_case(rng)
        text = build_report(pf, po, ps, gf, gs, k=2).table()
        assert "CMAE" in text and "OMAE" in text
