import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from satvdet import evaluation, postprocess as pp, synth, targets

from oracles import brute_force_nms, exhaustive_otsu


def _points(dets):
    return {(int(d.x), int(d.y)) for d in dets}


def test_single_peak():
    hm = np.zeros((8, 8))
    hm[3, 3] = 0.9
    assert pp.nms_detect(hm, 0.35) == [pp.Detection(3.0, 3.0, 0.9)]


def test_below_threshold_is_empty():
    hm = np.random.default_rng(0).random((10, 10)) * 0.3
    assert pp.nms_detect(hm, 0.35) == []


def test_border_pixel_can_be_maximum():
    hm = np.zeros((5, 5))
    hm[0, 4] = 0.8
    assert _points(pp.nms_detect(hm, 0.5)) == {(4, 0)}


def test_plateau_keeps_smallest_row_major():
    hm = np.zeros((6, 6))
    hm[2, 3] = hm[2, 4] = hm[3, 2] = 0.7
    assert _points(pp.nms_detect(hm, 0.5)) == {(3, 2)}


def _random_heatmap(seed, size=32):
    rng = np.random.default_rng(seed)
    if seed % 3 == 0:
        # coarse quantisation creates plateaus
        return rng.integers(0, 5, size=(size, size)) / 4.0
    return rng.random((size, size))


@pytest.mark.parametrize("block", range(10))
def test_nms_matches_brute_force(block):
    for seed in range(block * 100, block * 100 + 100):
        hm = _random_heatmap(seed)
        alpha = 0.3 + 0.4 * (seed % 7) / 7
        assert _points(pp.nms_detect(hm, alpha)) == brute_force_nms(hm, alpha), seed


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=100, deadline=None)
def test_nms_detections_not_adjacent(seed):
    pts = sorted(_points(pp.nms_detect(_random_heatmap(seed, 16), 0.2)))
    for i, a in enumerate(pts):
        for b in pts[i + 1:]:
            assert max(abs(a[0] - b[0]), abs(a[1] - b[1])) > 1


@given(st.integers(0, 2**32 - 1), st.floats(0.05, 0.95), st.floats(0.05, 0.95))
@settings(max_examples=100, deadline=None)
def test_nms_monotone_in_threshold(seed, a1, a2):
    lo, hi = sorted((a1, a2))
    hm = _random_heatmap(seed, 16)
    assert _points(pp.nms_detect(hm, hi)) <= _points(pp.nms_detect(hm, lo))


def _heatmap_with_histogram(hist, rng):
    """Heatmap in [0, 1] whose 256-bin histogram over [min, max] is ``hist``."""
    vals = [np.full(n, (i + 0.5) / 256) for i, n in enumerate(hist)]
    vals = np.concatenate(vals)
    vals[np.argmin(vals)] = 0.0
    vals[np.argmax(vals)] = 1.0
    rng.shuffle(vals)
    return vals.reshape(1, -1)


@pytest.mark.parametrize("seed", range(200))
def test_otsu_matches_exhaustive_search(seed):
    rng = np.random.default_rng(seed)
    hist = rng.integers(0, 20, size=256) * (rng.random(256) < rng.uniform(0.1, 1))
    hist[0] += 1
    hist[255] += 1
    hm = _heatmap_with_histogram(hist, rng)
    idx, _, _ = pp._bin_indices(hm, 256)
    np.testing.assert_array_equal(np.bincount(idx.ravel(), minlength=256), hist)
    value, t = pp.otsu_threshold(hm)
    best_t, best_v = exhaustive_otsu(hist)
    if t != best_t:
        # only acceptable on an exact tie of the criterion
        w0, w1 = hist[:t + 1].sum(), hist[t + 1:].sum()
        lv = np.arange(256)
        v = w0 * w1 * ((hist[:t + 1] * lv[:t + 1]).sum() / w0 - (hist[t + 1:] * lv[t + 1:]).sum() / w1) ** 2
        assert v == pytest.approx(best_v, rel=1e-12)
    assert value == pytest.approx((t + 1) / 256)


def test_otsu_bimodal():
    hm = np.full((10, 10), 0.1)
    hm[:, 5:] = 0.9
    value, _ = pp.otsu_threshold(hm)
    assert 0.1 < value <= 0.9
    dets = pp.otsu_detect(hm, 3.5)
    assert len(dets) == 1
    assert dets[0].x == pytest.approx(7.0) and dets[0].y == pytest.approx(4.5)


def test_otsu_constant_heatmap():
    assert pp.otsu_threshold(np.full((5, 5), 0.3)) is None
    assert pp.otsu_detect(np.full((5, 5), 0.3), 3.5) == []


def test_otsu_small_blob_discarded():
    hm = np.zeros((10, 10))
    hm[4, 4:7] = 1.0
    assert pp.otsu_detect(hm, 3.5) == []
    hm[5, 4] = 1.0
    assert len(pp.otsu_detect(hm, 3.5)) == 1


def test_otsu_two_blobs_centroids():
    hm = np.zeros((30, 30))
    hm[3:8, 4:9] = 0.8
    hm[18:23, 20:25] = 0.8
    got = sorted((d.x, d.y) for d in pp.otsu_detect(hm, 3.5))
    assert len(got) == 2
    np.testing.assert_allclose(got, [(6, 5), (22, 20)], atol=0.5)


def test_otsu_value_weighted_centroid():
    hm = np.zeros((9, 9))
    hm[4, 3:6] = [0.6, 0.6, 1.0]
    hm[3, 4] = hm[5, 4] = 0.6
    (d,) = pp.otsu_detect(hm, 3.5)
    assert d.x == pytest.approx((0.6 * 3 + 0.6 * 3 * 4 + 1.0 * 5) / (0.6 * 4 + 1.0))
    assert d.y == pytest.approx(4.0)
    assert d.score == 1.0


def test_config_validation_and_dispatch():
    with pytest.raises(ValueError):
        pp.PostprocessConfig(method="soft")
    with pytest.raises(ValueError):
        pp.PostprocessConfig(alpha_n=1.0)
    with pytest.raises(ValueError):
        pp.PostprocessConfig(alpha_o=0)
    hm = np.zeros((8, 8))
    hm[2:4, 2:4] = 1.0
    assert len(pp.detect(hm, pp.PostprocessConfig("nms"))) == 1
    assert len(pp.detect(hm, pp.PostprocessConfig("otsu", alpha_o=3))) == 1


def test_frame_coordinate_rescaling():
    d = [pp.Detection(3.0, 1.0, 0.5)]
    assert pp.to_frame_coords(d, 0) == d
    assert pp.to_frame_coords(d, 1) == [pp.Detection(6.5, 2.5, 0.5)]
    np.testing.assert_array_equal(pp.as_array([]), np.zeros((0, 2)))


def test_nms_beats_otsu_on_dense_traffic_targets():
    video = synth.generate(synth.dense_traffic(seed=3, n_frames=1, height=128, width=128))
    spec = targets.TargetSpec()
    tp_nms = tp_otsu = 0
    for f in video.annotations.frames():
        gt = video.annotations.for_frame(f)
        hm = targets.render(gt, spec, (128, 128))
        tp_nms += evaluation.match(pp.as_array(pp.nms_detect(hm, 0.35)), gt, 4).tp
        tp_otsu += evaluation.match(pp.as_array(pp.otsu_detect(hm, 3.5)), gt, 4).tp
    assert tp_nms > tp_otsu
