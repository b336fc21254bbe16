"""Acceptance criteria 1-11, each at its stated tolerance.

Criteria 7-11 train networks and take most of the suite's run time.
"""

import time

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from satvdet import evaluation as ev, experiments as ex, models, postprocess as pp, registration as reg, \
    targets, trainer
from satvdet import tensorkit as tk

from acceptance_log import record
from oracles import (brute_force_nms, central_difference, exhaustive_otsu, naive_gaussian_max, naive_gaussian_sum,
                     relative_error)

pytestmark = pytest.mark.acceptance

RECIPE = ex.Recipe()


# ---- 1. parameter counts -------------------------------------------------------

def test_criterion_01_parameter_counts():
    fovea = models.build(models.foveanet(5)).parameter_count()
    sat = models.build(models.foveanet4sat(5)).parameter_count()
    ok = fovea == 11_287_297 and abs(fovea - 11.3e6) / 11.3e6 <= 0.002 and sat == 3_044_353
    record(1, ok, f"foveanet(c=5)={fovea:,} foveanet4sat(c=5)={sat:,}")
    assert ok


# ---- 2. gradients --------------------------------------------------------------

def _probe(fn, r):
    return lambda: float(np.sum(fn().astype(np.float64) * r))


def _grad_cases(dtype):
    """Yield (op name, analytic, numeric) for 20 random instances of every op."""
    for seed in range(20):
        rng = np.random.default_rng(seed)
        kh = int(rng.choice([1, 3, 5]))
        x = rng.standard_normal((int(rng.integers(1, 3)), int(rng.integers(1, 3)), 5, 4)).astype(dtype)
        k = rng.standard_normal((2, x.shape[1], kh, kh)).astype(dtype)
        b = rng.standard_normal(2).astype(dtype)
        r = rng.standard_normal((x.shape[0], 2, 5, 4))
        gi, gk, gb = tk.conv2d_backward(r.astype(dtype), x, k)
        f = _probe(lambda: tk.conv2d_forward(x, k, b), r)
        yield "conv2d", np.concatenate([g.ravel() for g in (gi, gk, gb)]), \
            np.concatenate([central_difference(f, v).ravel() for v in (x, k, b)])

        for slope, name in ((0.01, "leaky_relu"), (0.0, "relu")):
            z = rng.standard_normal((2, 2, 3, 3))
            z[np.abs(z) < 0.05] = 0.5
            z = z.astype(dtype)
            r = rng.standard_normal(z.shape)
            yield name, tk.leaky_relu_backward(r.astype(dtype), z, slope), \
                central_difference(_probe(lambda: tk.leaky_relu(z, slope), r), z)

        p = (rng.permutation(64).reshape(1, 1, 8, 8) * 0.1).astype(dtype)
        r = rng.standard_normal((1, 1, 4, 4))
        _, arg = tk.maxpool2x2(p)
        yield "maxpool2x2", tk.maxpool2x2_backward(r.astype(dtype), arg, p.shape), \
            central_difference(_probe(lambda: tk.maxpool2x2(p)[0], r), p, h=1e-2)

        d = rng.standard_normal((1, 2, 4, 4)).astype(dtype)
        r = rng.standard_normal(d.shape)
        _, mask = tk.dropout(d, 0.5, seed)
        yield "dropout", tk.dropout_backward(r.astype(dtype), mask), \
            central_difference(_probe(lambda: tk.dropout(d, 0.5, seed)[0], r), d)

        pr = rng.standard_normal((1, 1, 4, 4)).astype(dtype)
        t = rng.standard_normal((1, 1, 4, 4)).astype(dtype)
        yield "mse", tk.mse_loss_backward(pr, t), central_difference(lambda: tk.mse_loss(pr, t), pr)


def test_criterion_02_gradients():
    t0 = time.perf_counter()
    worst = {}
    for dtype, tol in ((np.float32, 1e-3), (np.float64, 1e-6)):
        for name, analytic, numeric in _grad_cases(dtype):
            key = (name, np.dtype(dtype).name)
            worst[key] = max(worst.get(key, 0.0), relative_error(analytic, numeric))
    bad = {k: v for k, v in worst.items() if v >= (1e-3 if k[1] == "float32" else 1e-6)}
    f32 = max(v for k, v in worst.items() if k[1] == "float32")
    f64 = max(v for k, v in worst.items() if k[1] == "float64")
    record(2, not bad, f"{len(worst)} op/dtype pairs x 20 instances, worst rel err float32 {f32:.1e}, "
                       f"float64 {f64:.1e} ({time.perf_counter() - t0:.0f}s)")
    assert not bad, bad


# ---- 3. heatmap oracles --------------------------------------------------------

def test_criterion_03_heatmaps():
    worst = 0.0
    spec0 = targets.TargetSpec(1.0, 0, "sum", False)
    for seed in range(100):
        rng = np.random.default_rng(seed)
        size = (int(rng.integers(5, 20)), int(rng.integers(5, 20)))
        d = seed % 2
        pts = rng.uniform(-1, max(size) * 2 ** d, size=(int(rng.integers(0, 9)), 2))
        sigma = float(rng.uniform(0.5, 2.0))
        s = targets.TargetSpec(sigma, d, "sum", False)
        worst = max(worst, np.abs(targets.heatmap_sum(pts, s, size) - naive_gaussian_sum(pts, sigma, d, size)).max())
        norm = seed % 4 < 2
        m = targets.TargetSpec(sigma, 0, "max", norm)
        worst = max(worst, np.abs(targets.heatmap_max(pts, m, size) - naive_gaussian_max(pts, sigma, size, norm)).max())
    single = targets.heatmap_sum([(5, 5)], spec0, (11, 11))[5, 5]
    clipped = targets.heatmap_sum([(5, 5)] * 8, spec0, (11, 11))[5, 5]
    ok = worst <= 1e-12 and abs(single - 1 / (2 * np.pi)) < 1e-12 and clipped == 1.0
    record(3, ok, f"max |diff| vs naive {worst:.1e} over 100 configs; peak {single:.5f}; 8 coincident -> {clipped}")
    assert ok


# ---- 4. NMS and Otsu oracles ---------------------------------------------------

def test_criterion_04_nms_and_otsu():
    nms_ok = 0
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        hm = rng.integers(0, 6, size=(32, 32)) / 5.0 if seed % 3 == 0 else rng.random((32, 32))
        alpha = float(rng.uniform(0.2, 0.8))
        got = {(int(d.x), int(d.y)) for d in pp.nms_detect(hm, alpha)}
        nms_ok += got == brute_force_nms(hm, alpha)
    otsu_ok = 0
    for seed in range(200):
        rng = np.random.default_rng(10_000 + seed)
        hist = rng.integers(0, 30, size=256) * (rng.random(256) < rng.uniform(0.1, 1))
        hist[0] += 1
        hist[255] += 1
        vals = np.concatenate([np.full(n, (i + 0.5) / 256) for i, n in enumerate(hist)])
        vals[0], vals[-1] = 0.0, 1.0
        _, t = pp.otsu_threshold(vals.reshape(1, -1))
        best_t, best_v = exhaustive_otsu(hist)
        lv = np.arange(256)
        w0, w1 = hist[:t + 1].sum(), hist[t + 1:].sum()
        v = w0 * w1 * ((hist[:t + 1] * lv[:t + 1]).sum() / w0 - (hist[t + 1:] * lv[t + 1:]).sum() / w1) ** 2
        otsu_ok += t == best_t or np.isclose(v, best_v, rtol=1e-12)
    ok = nms_ok == 1000 and otsu_ok == 200
    record(4, ok, f"NMS exact on {nms_ok}/1000 heatmaps; Otsu optimal on {otsu_ok}/200 histograms")
    assert ok


# ---- 5. matching ---------------------------------------------------------------

def _optimal_tp(det, gt, theta):
    if len(det) == 0 or len(gt) == 0:
        return 0
    ok = (np.hypot(*(gt[:, None, :] - det[None, :, :]).transpose(2, 0, 1)) <= theta).astype(float)
    r, c = linear_sum_assignment(-ok)
    return int(ok[r, c].sum())


def test_criterion_05_matching():
    rng = np.random.default_rng(5)
    violations = 0
    for _ in range(10_000):
        ng, nd = rng.integers(0, 7, size=2)
        gt = rng.integers(0, 10, size=(ng, 2)).astype(float)
        det = rng.integers(0, 10, size=(nd, 2)).astype(float)
        theta = float(rng.choice([1.0, 2.0, 3.0, 4.0]))
        rep = ev.match(det, gt, theta)
        violations += not (rep.tp <= _optimal_tp(det, gt, theta) and rep.tp + rep.fn == ng and rep.tp + rep.fp == nd)
    r1 = ev.match([], [(i, 0) for i in range(7)], 4)
    r2 = ev.match([(1, 0), (2, 0)], [(0, 0)], 4)
    r3 = ev.match([(1, 0), (2, 0)], [(0, 0), (3, 0)], 4)
    examples = ((r1.tp, r1.fp, r1.fn, r1.f1) == (0, 0, 7, 0.0) and (r2.tp, r2.fp, r2.fn) == (1, 1, 0)
                and r2.matched_pairs[0][0] == (1.0, 0.0) and (r3.tp, r3.fp, r3.fn) == (2, 0, 0))
    ok = violations == 0 and examples
    record(5, ok, f"{violations} violations in 10,000 instances; worked examples {'hold' if examples else 'FAIL'}")
    assert ok


# ---- 6. registration -------------------------------------------------------------

def _random_homography(rng, size=256):
    c = (size - 1) / 2
    a = np.deg2rad(rng.uniform(-1, 1))
    s = 1 + rng.uniform(-0.01, 0.01)
    T = np.array([[1, 0, c], [0, 1, c], [0, 0, 1.0]])
    R = np.array([[s * np.cos(a), -s * np.sin(a), 0], [s * np.sin(a), s * np.cos(a), 0], [0, 0, 1]])
    R[2, :2] = rng.uniform(-1e-5, 1e-5, 2)
    H = T @ R @ np.linalg.inv(T)
    H[:2, 2] += rng.uniform(-4, 4, 2)
    return H / H[2, 2]


def test_criterion_06_registration():
    t0 = time.perf_counter()
    errors, recovered, total = [], 0, 0
    for i in range(50):
        rng = np.random.default_rng(600 + i)
        H = _random_homography(rng)
        src = rng.uniform(0, 256, size=(200, 2))
        dst = reg.apply_homography(H, src) + rng.normal(0, 0.5, size=src.shape)
        bad = rng.random(len(src)) < 0.3
        dst[bad] = rng.uniform(0, 256, size=(bad.sum(), 2))
        est, mask = reg.robust_homography(src, dst, seed=i)
        errors.append(reg.corner_error(est, H, (256, 256)))
        recovered += (mask & ~bad).sum()
        total += (~bad).sum()
    mean_err, frac = float(np.mean(errors)), recovered / total
    ok = mean_err < 0.5 and frac >= 0.95
    record(6, ok, f"mean corner error {mean_err:.3f} px, inliers recovered {frac:.1%} over 50 pairs "
                  f"({time.perf_counter() - t0:.0f}s)")
    assert ok


# ---- 7-10. trained networks ------------------------------------------------------

def run_trained_criteria(recipe: ex.Recipe = RECIPE) -> dict:
    """Everything criteria 7-10 measure, from freshly generated data."""
    ex._frame_cache.clear()
    out, t0 = {}, time.perf_counter()
    split = ex.detection_split(recipe)
    w3, log3, res3 = ex.train_and_score(recipe, split)
    out["c7"] = dict(f1=res3.f1, alpha_n=res3.alpha_n, precision=res3.report.precision,
                     recall=res3.report.recall, n_train=len(split.train), n_test=len(split.test),
                     epochs=len(log3.epochs), seconds=time.perf_counter() - t0)

    t1 = time.perf_counter()
    dense = ex.dense_test_stacks(recipe)
    nms = trainer.evaluate(w3, dense, 4.0, alpha_n=res3.alpha_n)
    otsu = trainer.evaluate(w3, dense, 4.0, method="otsu")
    out["c8"] = dict(nms=nms.f1, otsu=otsu.f1, n_test=len(dense), seconds=time.perf_counter() - t1)

    t2 = time.perf_counter()
    r1 = ex.Recipe(**{**recipe.__dict__, "c": 1})
    split1 = ex.detection_split(r1, mid_margin=(recipe.c - 1) // 2 * recipe.k)
    _, _, res1 = ex.train_and_score(r1, split1)
    out["c9"] = dict(c1=res1.f1, c3=res3.f1, n_train=len(split1.train), seconds=time.perf_counter() - t2)

    t3 = time.perf_counter()
    data = ex.transfer_data(recipe)
    pre_cfg = recipe.train_config(max_epochs=recipe.pretrain_epochs)
    pretrained, _ = trainer.train(pre_cfg, data.source_train, data.source_val)
    fine, scratch = ex.few_shot_scores(recipe, data, pretrained)
    out["c10"] = dict(fine=fine, scratch=scratch, n_source=len(data.source_train), seconds=time.perf_counter() - t3)
    return out


@pytest.fixture(scope="module")
def trained():
    return run_trained_criteria()


def test_criterion_07_end_to_end_detection(trained):
    r = trained["c7"]
    ok = r["f1"] >= 0.85
    record(7, ok, f"F1 {r['f1']:.3f} (alpha_N {r['alpha_n']}, P {r['precision']:.3f}, R {r['recall']:.3f}) "
                  f"trained on {r['n_train']} stacks for {r['epochs']} epochs, {r['seconds'] / 60:.1f} min")
    assert ok


def test_criterion_08_nms_beats_otsu_dense(trained):
    r = trained["c8"]
    ok = r["nms"] - r["otsu"] >= 0.05
    record(8, ok, f"dense traffic F1 nms {r['nms']:.3f} vs otsu {r['otsu']:.3f} (diff {r['nms'] - r['otsu']:+.3f})")
    assert ok


def test_criterion_09_channel_ablation(trained):
    r = trained["c9"]
    ok = r["c3"] >= r["c1"] + 0.10
    record(9, ok, f"F1 c=3 {r['c3']:.3f} vs c=1 {r['c1']:.3f} (diff {r['c3'] - r['c1']:+.3f}), "
                  f"{r['seconds'] / 60:.1f} min")
    assert ok


def test_criterion_10_few_shot_transfer(trained):
    r = trained["c10"]
    gain = np.mean(r["fine"]) - np.mean(r["scratch"])
    ok = gain >= 0.20
    record(10, ok, f"5-sample F1 fine-tuned {np.round(r['fine'], 3).tolist()} vs scratch "
                   f"{np.round(r['scratch'], 3).tolist()}, mean gain {gain:+.3f}, {r['seconds'] / 60:.1f} min")
    assert ok


def _f1_values(run):
    return {"c7": run["c7"]["f1"], "c8_nms": run["c8"]["nms"], "c8_otsu": run["c8"]["otsu"], "c9_c1": run["c9"]["c1"],
            **{f"c10_fine{i}": v for i, v in enumerate(run["c10"]["fine"])},
            **{f"c10_scratch{i}": v for i, v in enumerate(run["c10"]["scratch"])}}


def test_criterion_11_determinism(trained):
    first, second = _f1_values(trained), _f1_values(run_trained_criteria())
    diffs = {k: abs(first[k] - second[k]) for k in first}
    ok = max(diffs.values()) <= 0.01
    exact = all(v == 0 for v in diffs.values())
    record(11, ok, f"rerun of criteria 7-10: max F1 difference {max(diffs.values()):.2e} over {len(diffs)} values"
                   f"{' (bit-exact)' if exact else ''}")
    assert ok, diffs
