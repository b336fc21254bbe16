"""Frames, annotations, ROOBI tiling, frame stacks, motion filtering and augmentation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage


class DataError(ValueError):
    """Malformed or inconsistent input data."""


# ---------------------------------------------------------------- bit depth

def convert_16_to_8(frame: np.ndarray, low_pct: float = 1.0, high_pct: float = 99.0) -> np.ndarray:
    """Percentile stretch of a 16-bit frame to 8 bits (round half up)."""
    f = np.asarray(frame)
    if f.dtype != np.uint16:
        raise DataError(f"expected uint16 samples, got {f.dtype}")
    lo = float(np.percentile(f, low_pct, method="higher"))
    hi = float(np.percentile(f, high_pct, method="lower"))
    if hi <= lo:
        return np.zeros(f.shape, dtype=np.uint8)
    scaled = (np.clip(f.astype(np.float64), lo, hi) - lo) * (255.0 / (hi - lo))
    return np.floor(scaled + 0.5).astype(np.uint8)


def downscale(frame: np.ndarray, factor: float = 0.2) -> np.ndarray:
    """Area-averaging resample; output size is ``round(dim * factor)``."""
    if not 0 < factor <= 1:
        raise DataError(f"factor must lie in (0, 1], got {factor}")
    f = np.asarray(frame, dtype=np.float64)
    if factor == 1:
        return f.copy()
    h, w = f.shape[:2]
    oh, ow = int(round(h * factor)), int(round(w * factor))
    if oh < 1 or ow < 1:
        raise DataError(f"downscaling {h}x{w} by {factor} leaves no pixels")
    ry, rx = _area_weights(h, oh), _area_weights(w, ow)
    return np.einsum("ih,hw...,jw->ij...", ry, f, rx, optimize=True)


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """``(n_out, n_in)`` matrix of fractional pixel overlaps, rows summing to 1."""
    edges = np.linspace(0.0, n_in, n_out + 1)
    lo, hi = edges[:-1, None], edges[1:, None]
    px = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, px + 1) - np.maximum(lo, px), 0.0, None)
    return overlap / overlap.sum(axis=1, keepdims=True)


# ------------------------------------------------------------- annotations

@dataclass
class PointAnnotations:
    frame: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    x: np.ndarray = field(default_factory=lambda: np.zeros(0))
    y: np.ndarray = field(default_factory=lambda: np.zeros(0))
    track_id: np.ndarray | None = None

    def __post_init__(self):
        self.frame = np.asarray(self.frame, dtype=np.int64).reshape(-1)
        self.x = np.asarray(self.x, dtype=np.float64).reshape(-1)
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if self.track_id is not None:
            self.track_id = np.asarray(self.track_id, dtype=np.int64).reshape(-1)
        n = len(self.frame)
        if len(self.x) != n or len(self.y) != n or (self.track_id is not None and len(self.track_id) != n):
            raise DataError("annotation columns have different lengths")
        if n and self.frame.min() < 0:
            raise DataError("frame indices must be >= 0")

    def __len__(self) -> int:
        return len(self.frame)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointAnnotations):
            return NotImplemented
        same_tracks = (self.track_id is None and other.track_id is None) or (
            self.track_id is not None and other.track_id is not None
            and np.array_equal(self.track_id, other.track_id))
        return (same_tracks and np.array_equal(self.frame, other.frame)
                and np.array_equal(self.x, other.x) and np.array_equal(self.y, other.y))

    def subset(self, mask) -> "PointAnnotations":
        tid = None if self.track_id is None else self.track_id[mask]
        return PointAnnotations(self.frame[mask], self.x[mask], self.y[mask], tid)

    def for_frame(self, index: int) -> np.ndarray:
        """``(n, 2)`` array of ``(x, y)`` on frame ``index``."""
        m = self.frame == index
        return np.column_stack([self.x[m], self.y[m]])

    def frames(self) -> np.ndarray:
        return np.unique(self.frame)

    @classmethod
    def concat(cls, parts: list["PointAnnotations"]) -> "PointAnnotations":
        parts = list(parts)
        if not parts:
            return cls()
        tid = None
        if all(p.track_id is not None for p in parts):
            tid = np.concatenate([p.track_id for p in parts])
        return cls(np.concatenate([p.frame for p in parts]), np.concatenate([p.x for p in parts]),
                   np.concatenate([p.y for p in parts]), tid)

    @classmethod
    def from_detections(cls, per_frame: dict[int, np.ndarray]) -> "PointAnnotations":
        frames, xs, ys = [], [], []
        for f in sorted(per_frame):
            pts = np.asarray(per_frame[f], dtype=np.float64).reshape(-1, 2)
            frames.extend([f] * len(pts))
            xs.extend(pts[:, 0])
            ys.extend(pts[:, 1])
        return cls(frames, xs, ys)


def save_annotations(path: str | Path, ann: PointAnnotations) -> None:
    """CSV with header ``frame,x,y[,track_id]``; floats written with ``repr`` for exact round trips."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    has_tid = ann.track_id is not None
    w.writerow(["frame", "x", "y", "track_id"] if has_tid else ["frame", "x", "y"])
    for i in range(len(ann)):
        row = [int(ann.frame[i]), repr(float(ann.x[i])), repr(float(ann.y[i]))]
        if has_tid:
            row.append(int(ann.track_id[i]))
        w.writerow(row)
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="")


def load_annotations(path: str | Path, frame_size: tuple[int, int] | None = None) -> PointAnnotations:
    """Parse an annotation CSV.  ``frame_size = (height, width)`` enables bounds checks."""
    text = Path(path).read_text(encoding="utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or [c.strip() for c in rows[0]] not in (["frame", "x", "y"], ["frame", "x", "y", "track_id"]):
        raise DataError(f"{path}: line 1: expected header 'frame,x,y[,track_id]'")
    has_tid = len(rows[0]) == 4
    frames, xs, ys, tids = [], [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(rows[0]):
            raise DataError(f"{path}: line {lineno}: expected {len(rows[0])} fields, got {len(row)}")
        try:
            f, x, y = int(row[0]), float(row[1]), float(row[2])
            t = int(row[3]) if has_tid else None
        except ValueError as exc:
            raise DataError(f"{path}: line {lineno}: non-numeric field ({exc})") from None
        if not (np.isfinite(x) and np.isfinite(y)):
            raise DataError(f"{path}: line {lineno}: non-finite coordinate")
        if f < 0:
            raise DataError(f"{path}: line {lineno}: negative frame index")
        if frame_size is not None and not (0 <= x <= frame_size[1] - 1 and 0 <= y <= frame_size[0] - 1):
            raise DataError(f"{path}: line {lineno}: point ({x}, {y}) outside frame {frame_size}")
        frames.append(f)
        xs.append(x)
        ys.append(y)
        tids.append(t)
    return PointAnnotations(frames, xs, ys, tids if has_tid else None)


def filter_moving(ann: PointAnnotations, min_disp: float = 3.0, window: int = 5) -> PointAnnotations:
    """Keep records whose track moves at least ``min_disp`` pixels (net) within ``window`` frames."""
    if ann.track_id is None:
        raise DataError("moving-vehicle filter needs track ids; disable the filter for untracked annotations")
    keep = np.zeros(len(ann), dtype=bool)
    for tid in np.unique(ann.track_id):
        idx = np.flatnonzero(ann.track_id == tid)
        f, x, y = ann.frame[idx], ann.x[idx], ann.y[idx]
        near = np.abs(f[:, None] - f[None, :]) <= window
        disp = np.hypot(x[:, None] - x[None, :], y[:, None] - y[None, :])
        keep[idx] = np.any(near & (disp >= min_disp), axis=1)
    return ann.subset(keep)


# ------------------------------------------------------------------ frames

def read_frames(directory: str | Path, pattern: str = "*.png") -> np.ndarray:
    """Load a sorted grayscale frame sequence as ``(T, H, W)`` uint8."""
    paths = sorted(Path(directory).glob(pattern))
    if not paths:
        raise DataError(f"no frames matching {pattern!r} in {directory}")
    frames = []
    for p in paths:
        with Image.open(p) as im:
            frames.append(np.asarray(im.convert("L")))
    if len({f.shape for f in frames}) != 1:
        raise DataError(f"frames in {directory} have differing sizes")
    return np.stack(frames)


def write_frames(directory: str | Path, frames: np.ndarray, prefix: str = "frame_") -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, f in enumerate(frames):
        p = d / f"{prefix}{i:05d}.png"
        Image.fromarray(np.asarray(f, dtype=np.uint8)).save(p)
        paths.append(p)
    return paths


def write_manifest(path: str | Path, values: dict) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in values.items()), encoding="utf-8")


def read_manifest(path: str | Path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DataError(f"{path}: line {lineno}: expected key=value")
        out[key.strip()] = value.strip()
    return out


# ----------------------------------------------------------------- tiling

@dataclass(frozen=True)
class Roobi:
    aoi_id: str
    x0: int
    y0: int
    size: int
    split: str = "train"
    padded: bool = False


def tile_roobis(width: int, height: int, size: int = 128, aoi_id: str = "aoi",
                split: str = "train", x0: int = 0, y0: int = 0) -> list[Roobi]:
    """Non-overlapping ``size`` x ``size`` grid over an AOI; partial edge tiles are flagged as padded."""
    if size < 32:
        raise DataError("ROOBI edge size must be >= 32")
    if split not in ("train", "val", "test"):
        raise DataError(f"unknown split {split!r}")
    out = []
    for ty in range(0, height, size):
        for tx in range(0, width, size):
            padded = tx + size > width or ty + size > height
            out.append(Roobi(aoi_id, x0 + tx, y0 + ty, size, split, padded))
    return out


def extract_tile(image: np.ndarray, roobi: Roobi, bounds: tuple[int, int, int, int] | None = None) -> np.ndarray:
    """Cut a ROOBI out of ``image`` (``(..., H, W)``), zero-padding outside ``bounds``.

    ``bounds = (x0, y0, x1, y1)`` is the exclusive AOI rectangle; defaults to
    the whole image.
    """
    h, w = image.shape[-2:]
    bx0, by0, bx1, by1 = bounds if bounds is not None else (0, 0, w, h)
    out = np.zeros(image.shape[:-2] + (roobi.size, roobi.size), dtype=image.dtype)
    xs, ys = max(roobi.x0, bx0), max(roobi.y0, by0)
    xe, ye = min(roobi.x0 + roobi.size, bx1, w), min(roobi.y0 + roobi.size, by1, h)
    if xe > xs and ye > ys:
        out[..., ys - roobi.y0:ye - roobi.y0, xs - roobi.x0:xe - roobi.x0] = image[..., ys:ye, xs:xe]
    return out


# ------------------------------------------------------------------ stacks

@dataclass
class FrameStack:
    data: np.ndarray  # (c, N, N) float32 in [0, 1]
    mid_frame_index: int
    skip: int
    x0: int = 0
    y0: int = 0
    size: int = 0

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    def frame_indices(self) -> list[int]:
        half = (self.channels - 1) // 2
        return [self.mid_frame_index + j * self.skip for j in range(-half, half + 1)]


@dataclass
class Sample:
    stack: FrameStack
    points: np.ndarray  # (n, 2) mid-frame points in tile coordinates


def stack_indices(mid: int, c: int, k: int) -> list[int]:
    if c % 2 == 0 or c < 1:
        raise DataError(f"stack size must be odd, got {c}")
    half = (c - 1) // 2
    return [mid + j * k for j in range(-half, half + 1)]


def make_stacks(frames: np.ndarray, annotations: PointAnnotations, c: int, skip_k: int,
                roobis: list[Roobi], mids=None) -> tuple[list[Sample], int]:
    """Assemble one sample per (valid mid frame, ROOBI).

    Returns ``(samples, n_skipped)`` where ``n_skipped`` counts requested mid
    frames lacking ``(c - 1) / 2 * skip_k`` frames of margin on either side.
    """
    frames = np.asarray(frames)
    n = len(frames)
    if mids is None:
        mids = range(n)
    samples, skipped = [], 0
    for mid in mids:
        idx = stack_indices(mid, c, skip_k)
        if idx[0] < 0 or idx[-1] >= n:
            skipped += 1
            continue
        block = frames[idx].astype(np.float32) / np.float32(255.0)
        pts = annotations.for_frame(mid)
        for r in roobis:
            tile = extract_tile(block, r)
            inside = ((pts[:, 0] >= r.x0) & (pts[:, 0] < r.x0 + r.size)
                      & (pts[:, 1] >= r.y0) & (pts[:, 1] < r.y0 + r.size))
            local = pts[inside] - np.array([r.x0, r.y0], dtype=np.float64)
            samples.append(Sample(FrameStack(tile, mid, skip_k, r.x0, r.y0, r.size), local))
    return samples, skipped


def split_train_val(samples: list, val_fraction: float = 0.1, seed: int = 0) -> tuple[list, list]:
    """Seeded random split; keeps at least one sample on each side when possible."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(samples))
    n_val = int(round(len(samples) * val_fraction))
    if len(samples) >= 2:
        n_val = min(max(n_val, 1), len(samples) - 1)
    val = [samples[i] for i in order[:n_val]]
    train = [samples[i] for i in order[n_val:]]
    return train, val


# ------------------------------------------------------------ augmentation

AUGMENT_OPS = ("hflip", "vflip", "rotate", "translate")


def _affine(stack: np.ndarray, matrix: np.ndarray, offset: np.ndarray, mode: str) -> np.ndarray:
    return np.stack([ndimage.affine_transform(f, matrix, offset, order=1, mode=mode, cval=0.0)
                     for f in stack]).astype(stack.dtype)


def augment(stack: np.ndarray, points: np.ndarray, op: str, seed: int | None = None,
            angle: float | None = None, shift: tuple[float, float] | None = None,
            max_shift: float = 8.0) -> tuple[np.ndarray, np.ndarray]:
    """Apply one geometric op to every frame of a ``(c, H, W)`` stack and to its ``(n, 2)`` points.

    ``rotate`` draws a uniform angle in [0, 360) degrees unless ``angle`` is
    given; ``translate`` draws ``(dx, dy)`` uniformly in +-``max_shift``
    unless ``shift`` is given.  Points leaving the tile are dropped.
    """
    stack = np.asarray(stack)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    h, w = stack.shape[-2:]
    rng = np.random.default_rng(seed)
    if op == "hflip":
        return stack[..., ::-1].copy(), np.column_stack([w - 1 - pts[:, 0], pts[:, 1]])
    if op == "vflip":
        return stack[..., ::-1, :].copy(), np.column_stack([pts[:, 0], h - 1 - pts[:, 1]])
    if op == "rotate":
        if angle is None:
            angle = rng.uniform(0.0, 360.0)
        a = np.deg2rad(angle)
        ca, sa = np.cos(a), np.sin(a)
        centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
        # forward map on (x, y): p' = R (p - c) + c; affine_transform wants output->input in (row, col)
        fwd = np.array([[ca, -sa], [sa, ca]])  # acts on (x, y)
        inv_rc = np.array([[ca, -sa], [sa, ca]]).T[::-1, ::-1]
        offset = centre - inv_rc @ centre
        out = _affine(stack, inv_rc, offset, "reflect")
        c_xy = centre[::-1]
        new_pts = (pts - c_xy) @ fwd.T + c_xy
    elif op == "translate":
        if shift is None:
            shift = tuple(rng.uniform(-max_shift, max_shift, size=2))
        dx, dy = shift
        out = _affine(stack, np.eye(2), np.array([-dy, -dx]), "constant")
        new_pts = pts + np.array([dx, dy])
    else:
        raise DataError(f"unknown augmentation {op!r}; choose from {AUGMENT_OPS}")
    inside = ((new_pts[:, 0] >= 0) & (new_pts[:, 0] <= w - 1) & (new_pts[:, 1] >= 0) & (new_pts[:, 1] <= h - 1))
    return out, new_pts[inside]
