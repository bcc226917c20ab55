"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line (run with -s to see them live). The expensive end-to-end
criteria (overfit, ablation ordering) sit at the end.
"""

import time

import numpy as np
import pytest
import torch

import finecount as fc
from finecount.groundtruth import make_segmentation_maps
from finecount.losses import compute_losses
from finecount.metrics import cmae, mae_per_category, omae, segmentation_metrics
from finecount.network import ArchConfig, build_model, dampening_matrix
from finecount.synthgen import SceneRanges
from finecount.training import TrainConfig, evaluate, train
from conftest import make_annotation

# Frozen configuration of the synthetic overfit / ordering experiments.
OVERFIT_RANGES = SceneRanges(size=(128, 128), n_queue=(4, 6), n_walkers=(4, 6),
                             queue_spacing=(10.0, 13.0), blob_radius=(2.5, 3.5),
                             noise_level=(0.02, 0.04))
OVERFIT_SCENE_SEED = 7
OVERFIT_KERNEL = fc.KernelSpec(sigma=3.0)

ABLATION_RANGES = SceneRanges(size=(128, 128), n_queue=(3, 7), n_walkers=(3, 6),
                              queue_spacing=(9.0, 13.0), blob_radius=(2.5, 3.5),
                              noise_level=(0.02, 0.05))
ABLATION_SCENE_SEED = 11
ABLATION_STEPS = 1200
ABLATION_SEEDS = (0, 1, 2)


def report(name, ok, detail=""):
    print(f"ACCEPTANCE {name}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, f"{name}: {detail}"


class TestGroundTruthMass:
    def test_density_mass_within_one_percent(self, rng):
        t0 = time.time()
        worst = 0.0
        for _ in range(100):
            h = int(rng.integers(64, 129))
            w = int(rng.integers(64, 129))
            n = int(rng.integers(1, 51))
            margin = 16.0   # 4 sigma: interior dots keep full kernels inside
            pts = [[float(rng.uniform(margin, w - margin)),
                    float(rng.uniform(margin, h - margin)), 1] for _ in range(n)]
            ann = make_annotation(pts, size=(h, w), k=1)
            total = fc.render_density_map(ann, 1, fc.KernelSpec(sigma=4.0)).sum()
            worst = max(worst, abs(total - n) / (0.01 * n))
        elapsed = time.time() - t0
        report("gt-mass", worst <= 1.0 and elapsed < 10.0,
               f"(worst error {worst:.2e} of budget, {elapsed:.1f}s)")


class TestSoftSegFormula:
    def test_matches_naive_per_pixel_oracle(self, rng):
        worst = 0.0
        for _ in range(20):
            k = int(rng.integers(1, 4))
            h, w = int(rng.integers(2, 9)), int(rng.integers(2, 9))
            scale = float(rng.choice([0.002, 0.05, 1.0]))
            maps = [rng.uniform(0, scale, size=(h, w)) for _ in range(k)]
            eps, eta = 1e-3, 1e-6
            seg = make_segmentation_maps(maps, epsilon=eps, eta=eta)
            for y in range(h):
                for x in range(w):
                    total = sum(m[y, x] for m in maps)
                    for j in range(k):
                        ref = maps[j][y, x] / (eta + total)
                        worst = max(worst, abs(seg[j, y, x] - ref))
                    ref_bg = 1.0 if total <= eps else 0.0
                    worst = max(worst, abs(seg[k, y, x] - ref_bg))
        report("soft-seg-formula", worst <= 1e-12, f"(max dev {worst:.2e})")


class TestMetricArithmetic:
    def test_reference_cmae_value(self):
        value = cmae(np.array([8.79, 7.23]))
        report("cmae-reference", abs(value - 8.01) <= 0.005,
               f"(cmae {value:.4f})")

    def test_metrics_match_brute_force(self, rng):
        def brute_mae(pred, gt, k):
            return np.array([np.mean([abs(p[j].sum() - g[j].sum())
                                      for p, g in zip(pred, gt)])
                             for j in range(k)])

        def brute_omae(pred, gt):
            return np.mean([abs(p.sum() - g.sum()) for p, g in zip(pred, gt)])

        def brute_seg(pred, gt, k):
            correct = total = 0
            cat_c = np.zeros(k)
            cat_t = np.zeros(k)
            for p, g in zip(pred, gt):
                for y in range(g.shape[1]):
                    for x in range(g.shape[2]):
                        if g[-1, y, x] != 0:
                            continue
                        pl = int(np.argmax(p[:k, y, x]))
                        gl = int(np.argmax(g[:k, y, x]))
                        total += 1
                        cat_t[gl] += 1
                        if pl == gl:
                            correct += 1
                            cat_c[gl] += 1
            acc = correct / total if total else float("nan")
            rec = np.where(cat_t > 0, cat_c / np.maximum(cat_t, 1), np.nan)
            return acc, rec

        worst = 0.0
        for _ in range(50):
            k = int(rng.integers(1, 4))
            n = int(rng.integers(1, 5))
            size = (int(rng.integers(2, 6)), int(rng.integers(2, 6)))
            pf = [rng.uniform(0, 3, size=(k,) + size) for _ in range(n)]
            gf = [rng.uniform(0, 3, size=(k,) + size) for _ in range(n)]
            po = [rng.uniform(0, 3, size=size) for _ in range(n)]
            ps = [rng.uniform(0, 1, size=(k + 1,) + size) for _ in range(n)]
            gs = []
            for _ in range(n):
                g = rng.uniform(0, 1, size=(k + 1,) + size)
                g[-1] = (rng.uniform(size=size) < 0.4).astype(float)
                gs.append(g)
            worst = max(worst, np.abs(mae_per_category(pf, gf)
                                      - brute_mae(pf, gf, k)).max())
            worst = max(worst, abs(omae(po, gf) - brute_omae(po, gf)))
            acc, rec = segmentation_metrics(ps, gs, k=k)
            bacc, brec = brute_seg(ps, gs, k)
            if not (np.isnan(acc) and np.isnan(bacc)):
                worst = max(worst, abs(acc - bacc))
            both = ~(np.isnan(rec) & np.isnan(brec))
            if both.any():
                worst = max(worst, np.abs(rec[both] - brec[both]).max())
        report("metric-oracles", worst <= 1e-9, f"(max dev {worst:.2e})")


class TestDampening:
    def test_indicator_values_and_isolation(self, rng):
        lam, eps = 0.2, 1e-3
        raw = torch.from_numpy(rng.normal(scale=0.01, size=(1, 1, 24, 24))
                               .astype(np.float32))
        wd = dampening_matrix(raw, lam, eps)
        lam_repr = torch.tensor(lam, dtype=wd.dtype)
        only_two = bool(((wd == 1.0) | (wd == lam_repr)).all()) \
            and wd.unique().numel() == 2
        expected = np.where(np.clip(raw.numpy(), 0, None) >= eps,
                            np.float32(1.0), np.float32(lam))
        entrywise = bool((wd.numpy() == expected).all())

        # lambda = 0: the input of each of the 3 propagation modules is
        # exactly zero wherever the first-stage density is below epsilon
        model = build_model(ArchConfig(k=2, dampening=0.0, epsilon=eps,
                                       iterations=3), seed=1)
        x = torch.from_numpy(rng.uniform(size=(1, 1, 64, 64)).astype(np.float32))
        inputs = []
        with torch.no_grad():
            out = model(x, module_inputs=inputs)
        mask = (out.first_density.clamp(min=0) < eps)[0, 0]
        isolated = len(inputs) == 3 and bool(mask.any())
        for step_input in inputs:
            block = step_input[0, :, mask]
            isolated = isolated and bool((block == 0.0).all())
        report("dampening", only_two and entrywise and isolated,
               f"(two-valued {only_two}, entrywise {entrywise}, "
               f"isolated {isolated})")


class TestGradientCheck:
    def test_reduced_model_gradients_match_finite_differences(self):
        t0 = time.time()
        arch = ArchConfig(k=2, widths=(8, 8, 16, 16, 32), head_width=16,
                          propagation="hourglass", attention="coatt",
                          iterations=1, hourglass_depth=1)
        model = build_model(arch, seed=0).double()
        rng = np.random.default_rng(5)
        x = torch.from_numpy(rng.uniform(size=(1, 1, 8, 8)))
        gt_cat = torch.from_numpy(rng.uniform(0, 0.5, size=(1, 2, 2, 2)))
        gt_total = gt_cat.sum(dim=1, keepdim=True)
        gt_seg = torch.from_numpy(np.concatenate(
            [rng.uniform(0, 1, size=(2, 2, 2)),
             (rng.uniform(size=(1, 2, 2)) < 0.5).astype(float)])[None])

        def loss_value():
            out = model(x)
            return compute_losses(out, gt_cat, gt_total, gt_seg,
                                  alpha=100.0, beta=10.0).total

        model.zero_grad()
        loss_value().backward()

        params = list(model.named_parameters())
        sizes = np.array([p.numel() for _, p in params])
        srng = np.random.default_rng(99)
        take = np.maximum(1, np.round(200 * sizes / sizes.sum()).astype(int))
        while take.sum() < 200:
            take[int(srng.integers(len(params)))] += 1
        coords = []
        for (name, p), n in zip(params, take):
            for i in srng.choice(p.numel(), size=min(int(n), p.numel()),
                                 replace=False):
                coords.append((name, p, int(i)))

        step = 1e-5
        worst = 0.0
        for name, p, idx in coords:
            flat = p.detach().view(-1)
            orig = float(flat[idx])
            with torch.no_grad():
                flat[idx] = orig + step
                up = float(loss_value())
                flat[idx] = orig - step
                down = float(loss_value())
                flat[idx] = orig
            fd = (up - down) / (2 * step)
            an = float(p.grad.view(-1)[idx])
            denom = max(abs(fd), abs(an))
            if denom >= 1e-12:
                worst = max(worst, abs(fd - an) / denom)
        elapsed = time.time() - t0
        report("gradient-check",
               len(coords) >= 200 and worst < 1e-3 and elapsed < 120.0,
               f"({len(coords)} params, max rel err {worst:.2e}, "
               f"{elapsed:.1f}s)")


class TestDeterminism:
    def test_bitwise_identical_checkpoints_and_reports(self, tmp_path):
        train_m, _ = fc.generate_manifest(2, 0, OVERFIT_RANGES,
                                          seed=OVERFIT_SCENE_SEED)
        cfg = TrainConfig(steps=20, crop=64, seed=5, kernel=OVERFIT_KERNEL)
        train(train_m, cfg, checkpoint_path=tmp_path / "a.ckpt")
        train(train_m, cfg, checkpoint_path=tmp_path / "b.ckpt")
        ckpt_equal = (tmp_path / "a.ckpt").read_bytes() \
            == (tmp_path / "b.ckpt").read_bytes()
        ckpt = fc.Checkpoint.load(tmp_path / "a.ckpt")
        rep1 = evaluate(ckpt, train_m).to_dict()
        rep2 = evaluate(fc.Checkpoint.load(tmp_path / "b.ckpt"),
                        train_m).to_dict()
        report("determinism", ckpt_equal and rep1 == rep2,
               f"(checkpoints equal {ckpt_equal}, reports equal {rep1 == rep2})")


class TestMixingIdentity:
    def test_fine_grained_equals_product_bitwise(self, rng):
        ok = True
        for seed in range(4):
            for attention in ("coatt", "naive", "none"):
                model = build_model(ArchConfig(k=2, attention=attention),
                                    seed=seed)
                x = torch.from_numpy(
                    rng.uniform(size=(1, 1, 48, 48)).astype(np.float32))
                with torch.no_grad():
                    out = model(x)
                product = out.refined_seg[:, :2] * out.refined_density
                ok = ok and torch.equal(out.fine_grained, product)
        report("mixing-identity", ok)


class TestOverfit:
    def test_five_scene_overfit(self):
        t0 = time.time()
        train_m, _ = fc.generate_manifest(5, 0, OVERFIT_RANGES,
                                          seed=OVERFIT_SCENE_SEED)
        cfg = TrainConfig(steps=500, crop=128, seed=0, learning_rate=1e-4,
                          dampening=0.2, epsilon=1e-3, iterations=3,
                          propagation="hourglass", attention="coatt",
                          kernel=OVERFIT_KERNEL)
        result = train(train_m, cfg)
        rep = evaluate(result.checkpoint, train_m)
        ratio = result.log[-1]["total"] / result.log[0]["total"]
        elapsed = time.time() - t0
        report("overfit",
               rep.cmae < 1.0 and rep.seg_accuracy > 0.9 and ratio < 0.1
               and elapsed < 600.0,
               f"(CMAE {rep.cmae:.3f}, seg acc {rep.seg_accuracy:.3f}, "
               f"loss ratio {ratio:.4f}, {elapsed:.0f}s)")


class TestContextAblationOrdering:
    def test_full_beats_segment_beats_onenet(self):
        t0 = time.time()
        train_m, test_m = fc.generate_manifest(60, 20, ABLATION_RANGES,
                                               seed=ABLATION_SCENE_SEED)
        means = {}
        for kind in ("ours", "segment", "onenet"):
            cmaes = []
            for seed in ABLATION_SEEDS:
                cfg = TrainConfig(steps=ABLATION_STEPS, crop=96, seed=seed,
                                  model=kind, kernel=fc.KernelSpec(sigma=3.0))
                result = train(train_m, cfg)
                cmaes.append(evaluate(result.checkpoint, test_m).cmae)
            means[kind] = float(np.mean(cmaes))
        elapsed = time.time() - t0
        ordered = means["ours"] <= means["segment"] <= means["onenet"]
        report("context-ablation-ordering", ordered and elapsed < 3600.0,
               f"(ours {means['ours']:.3f} <= segment {means['segment']:.3f} "
               f"<= onenet {means['onenet']:.3f}, {elapsed:.0f}s)")
