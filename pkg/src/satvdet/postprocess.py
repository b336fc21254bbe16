"""Point extraction from predicted heatmaps: 3x3 NMS or Otsu segmentation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class Detection:
    x: float
    y: float
    score: float


@dataclass(frozen=True)
class PostprocessConfig:
    method: str = "nms"
    alpha_n: float = 0.35
    alpha_o: float = 3.5

    def __post_init__(self):
        if self.method not in ("nms", "otsu"):
            raise ValueError(f"method must be 'nms' or 'otsu', got {self.method!r}")
        if not 0 < self.alpha_n < 1:
            raise ValueError("alpha_n must lie in (0, 1)")
        if self.alpha_o <= 0:
            raise ValueError("alpha_o must be positive")


def local_maxima(heatmap: np.ndarray) -> np.ndarray:
    """Boolean mask of pixels equal to the max of their (border-clipped) 3x3 neighbourhood."""
    hm = np.asarray(heatmap, dtype=np.float64)
    pooled = ndimage.maximum_filter(hm, size=3, mode="constant", cval=-np.inf)
    return hm == pooled


def nms_detect(heatmap: np.ndarray, alpha_n: float) -> list[Detection]:
    """Keep 3x3 local maxima scoring at least ``alpha_n``.

    Adjacent maxima can only occur on plateaus of equal value; each
    8-connected plateau yields the single pixel first in row-major order.
    """
    hm = np.asarray(heatmap, dtype=np.float64)
    peaks = local_maxima(hm) & (hm >= alpha_n)
    if not peaks.any():
        return []
    labels, n = ndimage.label(peaks, structure=EIGHT_CONNECTED)
    flat = labels.ravel()
    order = np.flatnonzero(flat)
    _, first = np.unique(flat[order], return_index=True)
    keep = order[first]
    ys, xs = np.unravel_index(keep, hm.shape)
    return [Detection(float(x), float(y), float(hm[y, x])) for y, x in zip(ys, xs)]


def _bin_indices(values: np.ndarray, bins: int) -> tuple[np.ndarray, float, float]:
    lo, hi = float(values.min()), float(values.max())
    idx = np.floor((values - lo) / (hi - lo) * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1), lo, hi


def otsu_threshold(heatmap: np.ndarray, bins: int = 256) -> tuple[float, int] | None:
    """Otsu threshold over ``bins`` uniform bins spanning [min, max].

    Returns ``(threshold_value, last_background_bin)``: pixels in bins above
    ``last_background_bin`` (equivalently values >= threshold_value) are
    foreground.  ``None`` for a constant heatmap.
    """
    hm = np.asarray(heatmap, dtype=np.float64)
    if hm.max() == hm.min():
        return None
    idx, lo, hi = _bin_indices(hm, bins)
    hist = np.bincount(idx.ravel(), minlength=bins).astype(np.float64)
    levels = np.arange(bins, dtype=np.float64)
    n = hist.sum()
    w0 = np.cumsum(hist)[:-1]
    s0 = np.cumsum(hist * levels)[:-1]
    w1 = n - w0
    total = float(hist @ levels)
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (total * w0 - n * s0) ** 2 / (w0 * w1)
    between[(w0 == 0) | (w1 == 0)] = -1.0
    t = int(np.argmax(between))
    return lo + (t + 1) * (hi - lo) / bins, t


def otsu_detect(heatmap: np.ndarray, alpha_o: float, bins: int = 256) -> list[Detection]:
    """Otsu-binarise, label 8-connected segments, keep those with area > ``alpha_o``.

    Each surviving segment yields its value-weighted centroid, scored by the
    segment's maximum value.
    """
    hm = np.asarray(heatmap, dtype=np.float64)
    res = otsu_threshold(hm, bins)
    if res is None:
        return []
    _, t = res
    idx, _, _ = _bin_indices(hm, bins)
    fg = idx > t
    labels, n = ndimage.label(fg, structure=EIGHT_CONNECTED)
    if n == 0:
        return []
    ids = np.arange(1, n + 1)
    areas = ndimage.sum_labels(np.ones_like(hm), labels, ids)
    # shift only when predictions go negative so every foreground weight is > 0
    weights = hm - min(float(hm.min()), 0.0)
    dets = []
    ys, xs = np.indices(hm.shape)
    mass = ndimage.sum_labels(weights, labels, ids)
    cx = ndimage.sum_labels(weights * xs, labels, ids)
    cy = ndimage.sum_labels(weights * ys, labels, ids)
    peak = ndimage.maximum(hm, labels, ids)
    for i in range(n):
        if areas[i] <= alpha_o:
            continue
        dets.append(Detection(float(cx[i] / mass[i]), float(cy[i] / mass[i]), float(peak[i])))
    return dets


def detect(heatmap: np.ndarray, config: PostprocessConfig) -> list[Detection]:
    if config.method == "nms":
        return nms_detect(heatmap, config.alpha_n)
    return otsu_detect(heatmap, config.alpha_o)


def to_frame_coords(detections: list[Detection], downsample_exponent: int) -> list[Detection]:
    """Map heatmap coordinates to frame pixels: ``x * 2**d + (2**d - 1) / 2``."""
    if downsample_exponent == 0:
        return list(detections)
    s = 2 ** downsample_exponent
    off = (s - 1) / 2.0
    return [Detection(d.x * s + off, d.y * s + off, d.score) for d in detections]


def as_array(detections: list[Detection]) -> np.ndarray:
    """``(n, 2)`` array of ``(x, y)``."""
    return np.array([(d.x, d.y) for d in detections], dtype=np.float64).reshape(-1, 2)
