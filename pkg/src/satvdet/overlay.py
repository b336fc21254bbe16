"""Result overlays: true positives green, false positives blue, false negatives red."""

from __future__ import annotations

import numpy as np
from PIL import Image, ImageDraw

from .evaluation import MatchReport

TP_COLOR = (0, 255, 0)
FP_COLOR = (0, 0, 255)
FN_COLOR = (255, 0, 0)


def classify(report: MatchReport, detections, ground_truth):
    """Split points into (tp detections, fp detections, fn ground truth) using the report's matching."""
    det = np.asarray(detections, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(ground_truth, dtype=np.float64).reshape(-1, 2)
    det_hit = np.zeros(len(det), dtype=bool)
    gt_hit = np.zeros(len(gt), dtype=bool)
    for j, g in report.matched_indices:
        det_hit[j] = gt_hit[g] = True
    return det[det_hit], det[~det_hit], gt[~gt_hit]


def plot_overlay(frame: np.ndarray, report: MatchReport, detections, ground_truth,
                 heatmap: np.ndarray | None = None) -> np.ndarray:
    """RGB copy of ``frame`` with a circle of radius theta and a centre dot per point.

    With ``heatmap`` given, a grayscale rendering of it is appended on the right.
    """
    gray = np.asarray(frame, dtype=np.uint8)
    img = Image.fromarray(np.repeat(gray[..., None], 3, axis=2))
    draw = ImageDraw.Draw(img)
    r = report.theta
    tp, fp, fn = classify(report, detections, ground_truth)
    for pts, color in ((fn, FN_COLOR), (fp, FP_COLOR), (tp, TP_COLOR)):
        for x, y in pts:
            draw.ellipse([x - r, y - r, x + r, y + r], outline=color)
            cx, cy = int(round(x)), int(round(y))
            draw.rectangle([cx - 1, cy - 1, cx + 1, cy + 1], fill=color)
    out = np.asarray(img).copy()
    if heatmap is not None:
        hm = np.asarray(heatmap, dtype=np.float64)
        scale = max(float(hm.max()), 1e-12)
        panel = Image.fromarray((np.clip(hm / scale, 0, 1) * 255).astype(np.uint8)).resize(
            (gray.shape[1], gray.shape[0]), Image.NEAREST)
        out = np.concatenate([out, np.repeat(np.asarray(panel)[..., None], 3, axis=2)], axis=1)
    return out


def save_overlay(path, image: np.ndarray) -> None:
    Image.fromarray(image).save(path)
