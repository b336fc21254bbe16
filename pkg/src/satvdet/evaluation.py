"""Point-matching evaluation: greedy theta-radius matching, P/R/F1 and PR curves."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .postprocess import as_array, nms_detect


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def f1_score(precision: float, recall: float) -> float:
    s = precision + recall
    return 2 * precision * recall / s if s else 0.0


@dataclass
class MatchReport:
    tp: int
    fp: int
    fn: int
    theta: float
    matched_pairs: list[tuple[tuple[float, float], tuple[float, float], float]] = field(default_factory=list)
    # indices into the inputs, parallel to matched_pairs
    matched_indices: list[tuple[int, int]] = field(default_factory=list)

    @property
    def precision(self) -> float:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> float:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def f1(self) -> float:
        return f1_score(self.precision, self.recall)

    def __add__(self, other: "MatchReport") -> "MatchReport":
        return MatchReport(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.theta,
                           self.matched_pairs + other.matched_pairs)

    def summary(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "precision": self.precision,
                "recall": self.recall, "f1": self.f1, "theta": self.theta}

    def to_text(self) -> str:
        return "".join(f"{k}={v!r}\n" for k, v in self.summary().items())

    def write(self, report_path: str | Path, summary_path: str | Path | None = None) -> None:
        Path(report_path).write_text(self.to_text(), encoding="utf-8")
        if summary_path is not None:
            Path(summary_path).write_text(json.dumps(self.summary(), indent=2) + "\n", encoding="utf-8")


def parse_report(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        key, _, value = line.partition("=")
        if key:
            out[key] = float(value) if key not in ("tp", "fp", "fn") else int(value)
    return out


def match(detections, ground_truth, theta: float) -> MatchReport:
    """Match detections to ground truth within Euclidean radius ``theta``.

    All (detection, ground truth) pairs closer than ``theta`` are accepted
    greedily in order of increasing distance, ties broken by (gt index,
    detection index), skipping pairs whose endpoints are already matched.
    """
    if theta <= 0:
        raise ValueError("theta must be positive")
    det = np.asarray(detections, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(ground_truth, dtype=np.float64).reshape(-1, 2)
    if len(det) == 0 or len(gt) == 0:
        return MatchReport(0, len(det), len(gt), theta)
    dist = np.hypot(gt[:, None, 0] - det[None, :, 0], gt[:, None, 1] - det[None, :, 1])
    gi, di = np.nonzero(dist <= theta)
    d = dist[gi, di]
    order = np.lexsort((di, gi, d))
    gt_used = np.zeros(len(gt), dtype=bool)
    det_used = np.zeros(len(det), dtype=bool)
    pairs, indices = [], []
    for k in order:
        g, j = gi[k], di[k]
        if gt_used[g] or det_used[j]:
            continue
        gt_used[g] = det_used[j] = True
        pairs.append((tuple(det[j]), tuple(gt[g]), float(d[k])))
        indices.append((int(j), int(g)))
    tp = len(pairs)
    return MatchReport(tp, len(det) - tp, len(gt) - tp, theta, pairs, indices)


def match_frames(detections_per_frame, gt_per_frame, theta: float) -> MatchReport:
    """Micro-averaged report: counts pooled over frames."""
    total = MatchReport(0, 0, 0, theta)
    for det, gt in zip(detections_per_frame, gt_per_frame, strict=True):
        total = total + match(det, gt, theta)
    return total


def pr_curve(heatmaps, ground_truth, theta: float, thresholds) -> list[tuple[float, float, float]]:
    """``(threshold, precision, recall)`` for NMS at each threshold, pooled over frames."""
    thresholds = list(thresholds)
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be strictly increasing")
    curve = []
    for t in thresholds:
        dets = [as_array(nms_detect(hm, t)) for hm in heatmaps]
        rep = match_frames(dets, ground_truth, theta)
        curve.append((float(t), rep.precision, rep.recall))
    return curve


def best_f1(curve) -> tuple[float, float]:
    """``(threshold, f1)`` of the best point on a PR curve."""
    scores = [(f1_score(p, r), t) for t, p, r in curve]
    f1, t = max(scores, key=lambda s: (s[0], -s[1]))
    return t, f1


def write_pr_curve(curve, path: str | Path) -> None:
    """Two-column ``recall precision`` text, one line per threshold in sweep order."""
    lines = ["# thresholds: " + " ".join(f"{t:.6g}" for t, _, _ in curve), "# recall precision"]
    lines += [f"{r:.6f} {p:.6f}" for _, p, r in curve]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_pr_curve(path: str | Path) -> np.ndarray:
    """``(n, 2)`` array of ``(recall, precision)``."""
    return np.loadtxt(path, comments="#", ndmin=2)
