"""Ground-truth heatmaps from point annotations.

Two accumulation rules are supported: the clipped *sum* of Gaussian
densities (used with the pooled FoveaNet output) and the pixel-wise *max*
of the densities (used with full-resolution FoveaNet4Sat output).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# exp(-8**2 / 2) ~ 1.3e-14, so truncation error stays far below 1e-12
SUPPORT_RADIUS = 8.0


@dataclass(frozen=True)
class TargetSpec:
    sigma: float = 1.0
    downsample_exponent: int = 0
    accumulation: str = "max"
    normalize_peak: bool = True

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.downsample_exponent < 0:
            raise ValueError("downsample exponent must be >= 0")
        if self.accumulation not in ("sum", "max"):
            raise ValueError(f"accumulation must be 'sum' or 'max', got {self.accumulation!r}")


def target_spec_for(model_name: str, sigma: float = 1.0) -> TargetSpec:
    """Default pairing: FoveaNet -> clipped sum at half resolution, FoveaNet4Sat -> normalised max."""
    if model_name == "foveanet":
        return TargetSpec(sigma, 1, "sum", False)
    return TargetSpec(sigma, 0, "max", True)


def _to_heatmap_coords(points, d: int) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if d == 0:
        return pts
    # heatmap pixel i covers frame pixels [s*i, s*i + s - 1]; its centre is s*i + (s-1)/2
    s = 2.0 ** d
    return (pts - (s - 1) / 2.0) / s


def _gaussian_patches(pts: np.ndarray, sigma: float, shape: tuple[int, int]):
    """Yield ``(rows, cols, density)`` windows of each Gaussian inside its support box."""
    h, w = shape
    r = SUPPORT_RADIUS * sigma
    norm = 1.0 / (2.0 * np.pi * sigma ** 2)
    for x, y in pts:
        x0, x1 = max(0, int(np.ceil(x - r))), min(w - 1, int(np.floor(x + r)))
        y0, y1 = max(0, int(np.ceil(y - r))), min(h - 1, int(np.floor(y + r)))
        if x0 > x1 or y0 > y1:
            continue
        xs = np.arange(x0, x1 + 1, dtype=np.float64)
        ys = np.arange(y0, y1 + 1, dtype=np.float64)
        gx = np.exp(-((xs - x) ** 2) / (2 * sigma ** 2))
        gy = np.exp(-((ys - y) ** 2) / (2 * sigma ** 2))
        yield slice(y0, y1 + 1), slice(x0, x1 + 1), norm * np.outer(gy, gx)


def heatmap_sum(points, spec: TargetSpec, out_size: tuple[int, int], clip: bool = True) -> np.ndarray:
    """Sum of Gaussian densities at the (downsampled) point positions, clipped to 1.

    ``out_size`` is ``(height, width)`` of the heatmap raster.
    """
    pts = _to_heatmap_coords(points, spec.downsample_exponent)
    out = np.zeros(out_size, dtype=np.float64)
    for rs, cs, g in _gaussian_patches(pts, spec.sigma, out_size):
        out[rs, cs] += g
    if clip:
        np.minimum(out, 1.0, out=out)
    return out


def heatmap_max(points, spec: TargetSpec, out_size: tuple[int, int]) -> np.ndarray:
    """Pixel-wise maximum of the Gaussian densities at full resolution.

    With ``spec.normalize_peak`` the densities are rescaled by 2*pi*sigma^2 so
    an isolated point peaks at exactly 1.
    """
    pts = _to_heatmap_coords(points, 0)
    out = np.zeros(out_size, dtype=np.float64)
    for rs, cs, g in _gaussian_patches(pts, spec.sigma, out_size):
        np.maximum(out[rs, cs], g, out=out[rs, cs])
    if spec.normalize_peak:
        out *= 2.0 * np.pi * spec.sigma ** 2
    return out


def render(points, spec: TargetSpec, frame_size: tuple[int, int]) -> np.ndarray:
    """Target heatmap for a frame of ``frame_size = (height, width)`` under ``spec``."""
    if spec.accumulation == "sum":
        s = 2 ** spec.downsample_exponent
        size = (-(-frame_size[0] // s), -(-frame_size[1] // s))
        out = heatmap_sum(points, spec, size)
        if spec.normalize_peak:
            out = np.minimum(out * 2.0 * np.pi * spec.sigma ** 2, 1.0)
        return out
    return heatmap_max(points, spec, frame_size)
