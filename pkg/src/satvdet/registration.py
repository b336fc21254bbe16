"""Frame-to-reference registration: Harris corners, gradient-histogram
descriptors, ratio-test matching and robust homography estimation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage


class RegistrationError(RuntimeError):
    """Registration could not produce a homography."""

    def __init__(self, message: str, frame_index: int | None = None):
        super().__init__(message if frame_index is None else f"frame {frame_index}: {message}")
        self.frame_index = frame_index


@dataclass
class InterestPoint:
    x: float
    y: float
    response: float
    descriptor: np.ndarray | None = None


# ------------------------------------------------------------------ corners

def harris_response(frame: np.ndarray, k: float = 0.04, sigma: float = 1.0) -> np.ndarray:
    img = np.asarray(frame, dtype=np.float64)
    ix = ndimage.sobel(img, axis=1, mode="reflect")
    iy = ndimage.sobel(img, axis=0, mode="reflect")
    # 3x3 Gaussian window
    sxx = ndimage.gaussian_filter(ix * ix, sigma, truncate=1.0 / sigma)
    syy = ndimage.gaussian_filter(iy * iy, sigma, truncate=1.0 / sigma)
    sxy = ndimage.gaussian_filter(ix * iy, sigma, truncate=1.0 / sigma)
    return sxx * syy - sxy * sxy - k * (sxx + syy) ** 2


def detect_corners(frame: np.ndarray, response_threshold: float = 0.001, max_points: int = 500,
                   k: float = 0.04, border: int = 2, subpixel: bool = True) -> list[InterestPoint]:
    """Harris corners, 3x3 non-max suppressed, strongest ``max_points`` first.

    ``response_threshold`` is relative to the frame's maximum response.
    """
    r = harris_response(frame, k)
    rmax = r.max()
    if rmax <= 0:
        return []
    peaks = (r == ndimage.maximum_filter(r, size=3, mode="constant", cval=-np.inf)) & (r > response_threshold * rmax)
    if border:
        peaks[:border], peaks[-border:], peaks[:, :border], peaks[:, -border:] = False, False, False, False
    ys, xs = np.nonzero(peaks)
    vals = r[ys, xs]
    order = np.lexsort((xs, ys, -vals))[:max_points]
    out = []
    for i in order:
        x, y = float(xs[i]), float(ys[i])
        if subpixel and 0 < xs[i] < r.shape[1] - 1 and 0 < ys[i] < r.shape[0] - 1:
            x += _parabolic(r[ys[i], xs[i] - 1], r[ys[i], xs[i]], r[ys[i], xs[i] + 1])
            y += _parabolic(r[ys[i] - 1, xs[i]], r[ys[i], xs[i]], r[ys[i] + 1, xs[i]])
        out.append(InterestPoint(x, y, float(vals[i])))
    return out


def _parabolic(a: float, b: float, c: float) -> float:
    den = a - 2 * b + c
    if den >= 0:
        return 0.0
    return float(np.clip(0.5 * (a - c) / den, -0.5, 0.5))


# -------------------------------------------------------------- descriptors

PATCH = 16
GRID = 4
ORIENTATIONS = 8


def describe(frame: np.ndarray, points: list[InterestPoint]) -> list[InterestPoint]:
    """Attach 128-D (4x4 cells x 8 orientations) gradient histograms.

    Fixed scale and orientation; Gaussian-weighted, L2-normalised, clipped
    at 0.2 and renormalised.  Points whose 16x16 window leaves the frame
    are dropped.
    """
    img = np.asarray(frame, dtype=np.float64)
    h, w = img.shape
    half = PATCH / 2.0
    keep = [p for p in points if half + 1 <= p.x <= w - half - 2 and half + 1 <= p.y <= h - half - 2]
    if not keep:
        return []
    gy, gx = np.gradient(img)
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx)
    cos, sin = np.cos(ang), np.sin(ang)
    offs = np.arange(PATCH) - half + 0.5
    weight = np.exp(-(offs[:, None] ** 2 + offs[None, :] ** 2) / (2 * half ** 2))
    xs = np.array([p.x for p in keep])[:, None, None] + offs[None, None, :]
    ys = np.array([p.y for p in keep])[:, None, None] + offs[None, :, None]
    coords = [np.broadcast_to(ys, (len(keep), PATCH, PATCH)), np.broadcast_to(xs, (len(keep), PATCH, PATCH))]
    m = ndimage.map_coordinates(mag, coords, order=1) * weight
    # interpolate the unit orientation vector, not the wrapped angle
    theta = np.mod(np.arctan2(ndimage.map_coordinates(sin, coords, order=1),
                              ndimage.map_coordinates(cos, coords, order=1)), 2 * np.pi)
    fbin = theta / (2 * np.pi) * ORIENTATIONS
    b0 = np.floor(fbin).astype(int) % ORIENTATIONS
    frac = fbin - np.floor(fbin)
    cell = np.repeat(np.arange(GRID), PATCH // GRID)
    cell_id = (cell[:, None] * GRID + cell[None, :])[None] * ORIENTATIONS
    base = np.arange(len(keep))[:, None, None] * (GRID * GRID * ORIENTATIONS)
    size = len(keep) * GRID * GRID * ORIENTATIONS
    hist = np.bincount((base + cell_id + b0).ravel(), (m * (1 - frac)).ravel(), size)
    hist += np.bincount((base + cell_id + (b0 + 1) % ORIENTATIONS).ravel(), (m * frac).ravel(), size)
    hist = hist.reshape(len(keep), -1)
    out = []
    for p, d in zip(keep, hist):
        n = np.linalg.norm(d)
        if n > 0:
            d = np.minimum(d / n, 0.2)
            d /= np.linalg.norm(d)
        out.append(InterestPoint(p.x, p.y, p.response, d))
    return out


def match_features(desc_a: np.ndarray, desc_b: np.ndarray, ratio: float = 0.75) -> list[tuple[int, int]]:
    """Exact nearest-neighbour matching with Lowe's ratio test."""
    a = np.asarray(desc_a, dtype=np.float64)
    b = np.asarray(desc_b, dtype=np.float64)
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie in (0, 1)")
    if len(a) == 0 or len(b) < 2:
        return []
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2 * a @ b.T
    dist = np.sqrt(np.maximum(d2, 0.0))
    nn = np.argsort(dist, axis=1, kind="stable")[:, :2]
    rows = np.arange(len(a))
    d1, dsecond = dist[rows, nn[:, 0]], dist[rows, nn[:, 1]]
    keep = d1 < ratio * dsecond
    return [(int(i), int(nn[i, 0])) for i in np.flatnonzero(keep)]


# -------------------------------------------------------------- homography

def _normalise(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2) / d if d > 0 else 1.0
    T = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1]])
    return (pts - c) * s, T


def dlt_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Normalised DLT mapping ``src`` -> ``dst`` (least squares for > 4 points)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    ns, ts = _normalise(src)
    nd, td = _normalise(dst)
    n = len(src)
    A = np.zeros((2 * n, 9))
    x, y = ns[:, 0], ns[:, 1]
    u, v = nd[:, 0], nd[:, 1]
    A[0::2, 0:3] = np.column_stack([-x, -y, -np.ones(n)])
    A[0::2, 6:9] = np.column_stack([u * x, u * y, u])
    A[1::2, 3:6] = np.column_stack([-x, -y, -np.ones(n)])
    A[1::2, 6:9] = np.column_stack([v * x, v * y, v])
    _, _, vt = np.linalg.svd(A)
    Hn = vt[-1].reshape(3, 3)
    H = np.linalg.inv(td) @ Hn @ ts
    return normalise_homography(H)


def normalise_homography(H: np.ndarray) -> np.ndarray:
    if abs(H[2, 2]) < 1e-12:
        raise RegistrationError("degenerate homography (h33 = 0)")
    return H / H[2, 2]


def apply_homography(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    ph = np.column_stack([pts, np.ones(len(pts))]) @ H.T
    return ph[:, :2] / ph[:, 2:3]


def _collinear(p: np.ndarray, tol: float = 1e-6) -> bool:
    for i in range(4):
        q = np.delete(p, i, axis=0)
        area = abs((q[1, 0] - q[0, 0]) * (q[2, 1] - q[0, 1]) - (q[2, 0] - q[0, 0]) * (q[1, 1] - q[0, 1]))
        scale = max(np.ptp(q[:, 0]), np.ptp(q[:, 1]), 1e-12) ** 2
        if area / scale < tol:
            return True
    return False


SIGMA_SWEEP = (0.5, 1.0, 2.0)


def _msac_cost(residual_sq: np.ndarray) -> float:
    """Truncated-quadratic cost averaged over a small sweep of noise scales."""
    cost = 0.0
    for s in SIGMA_SWEEP:
        cap = (3.0 * s) ** 2
        cost += np.minimum(residual_sq, cap).sum() / cap
    return cost / len(SIGMA_SWEEP)


def robust_homography(src: np.ndarray, dst: np.ndarray, inlier_threshold: float = 2.0,
                      max_iterations: int = 2000, seed: int = 0, confidence: float = 0.999
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Hypothesise-and-verify homography ``src`` -> ``dst`` with a final inlier refit.

    Returns ``(H, inlier_mask)``.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    n = len(src)
    if n < 4 or len(dst) != n:
        raise RegistrationError(f"need at least 4 matches, got {n}")
    rng = np.random.default_rng(seed)
    best_cost, best_H = np.inf, None
    needed = max_iterations
    it = 0
    degenerate = 0
    while it < min(needed, max_iterations):
        it += 1
        idx = rng.choice(n, 4, replace=False)
        if _collinear(src[idx]) or _collinear(dst[idx]):
            degenerate += 1
            continue
        try:
            H = dlt_homography(src[idx], dst[idx])
        except (np.linalg.LinAlgError, RegistrationError):
            continue
        r2 = ((apply_homography(H, src) - dst) ** 2).sum(axis=1)
        if not np.all(np.isfinite(r2)):
            continue
        cost = _msac_cost(r2)
        if cost < best_cost:
            best_cost, best_H = cost, H
            w = np.mean(r2 < inlier_threshold ** 2)
            if 0 < w < 1:
                needed = int(np.ceil(np.log(1 - confidence) / np.log(1 - w ** 4)))
            elif w == 1:
                needed = 0
    if best_H is None:
        raise RegistrationError(f"no non-degenerate minimal sample found in {it} iterations "
                                f"({degenerate} degenerate)")
    H = best_H
    mask = ((apply_homography(H, src) - dst) ** 2).sum(axis=1) < inlier_threshold ** 2
    for _ in range(3):
        if mask.sum() < 4:
            break
        H = dlt_homography(src[mask], dst[mask])
        new = ((apply_homography(H, src) - dst) ** 2).sum(axis=1) < inlier_threshold ** 2
        if np.array_equal(new, mask):
            break
        mask = new
    return H, mask


# --------------------------------------------------------------------- warp

def warp(frame: np.ndarray, homography: np.ndarray, out_size: tuple[int, int] | None = None
         ) -> tuple[np.ndarray, np.ndarray]:
    """Resample ``frame`` onto the reference grid.

    ``homography`` maps frame pixels to reference pixels; each output pixel
    ``q`` samples the frame bilinearly at ``H^-1 q``.  Returns the warped
    image (same dtype, 0 outside the source) and a boolean validity mask.
    """
    img = np.asarray(frame)
    h, w = img.shape
    oh, ow = out_size if out_size is not None else (h, w)
    Hinv = np.linalg.inv(homography)
    qy, qx = np.mgrid[0:oh, 0:ow].astype(np.float64)
    den = Hinv[2, 0] * qx + Hinv[2, 1] * qy + Hinv[2, 2]
    px = (Hinv[0, 0] * qx + Hinv[0, 1] * qy + Hinv[0, 2]) / den
    py = (Hinv[1, 0] * qx + Hinv[1, 1] * qy + Hinv[1, 2]) / den
    eps = 1e-9
    valid = (px >= -eps) & (px <= w - 1 + eps) & (py >= -eps) & (py <= h - 1 + eps)
    px = np.clip(px, 0, w - 1)
    py = np.clip(py, 0, h - 1)
    x0 = np.minimum(np.floor(px).astype(int), w - 1)
    y0 = np.minimum(np.floor(py).astype(int), h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx, fy = px - x0, py - y0
    src = img.astype(np.float64)
    # lerp form keeps constant regions exact
    top = src[y0, x0] + fx * (src[y0, x1] - src[y0, x0])
    bot = src[y1, x0] + fx * (src[y1, x1] - src[y1, x0])
    out = top + fy * (bot - top)
    out[~valid] = 0
    if np.issubdtype(img.dtype, np.integer):
        info = np.iinfo(img.dtype)
        out = np.clip(np.floor(out + 0.5), info.min, info.max)
    return out.astype(img.dtype), valid


def corner_error(H_est: np.ndarray, H_true: np.ndarray, size: tuple[int, int]) -> float:
    """Mean distance between the four frame corners mapped by both homographies."""
    h, w = size
    corners = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
    return float(np.linalg.norm(apply_homography(H_est, corners) - apply_homography(H_true, corners), axis=1).mean())


def refine_homography(reference: np.ndarray, frame: np.ndarray, H: np.ndarray, iterations: int = 15,
                      smooth: float = 1.0, border: int = 8, stride: int = 1) -> np.ndarray:
    """Polish a frame->reference homography by robust Gauss-Newton intensity alignment.

    Minimises the Huber-weighted difference between ``reference(q)`` and
    ``frame(H^-1 q)`` over the 8 free entries of ``H^-1``; small moving
    objects are downweighted as outliers.  ``stride`` subsamples the
    reference grid.
    """
    ref = ndimage.gaussian_filter(np.asarray(reference, dtype=np.float64), smooth)
    cur = ndimage.gaussian_filter(np.asarray(frame, dtype=np.float64), smooth)
    h, w = ref.shape
    gy, gx = np.gradient(cur)
    qy, qx = np.mgrid[border:h - border:stride, border:w - border:stride].astype(np.float64)
    qx, qy = qx.ravel(), qy.ravel()
    target = ref[border:h - border:stride, border:w - border:stride].ravel()
    G = np.linalg.inv(H)
    G = G / G[2, 2]
    for _ in range(iterations):
        den = G[2, 0] * qx + G[2, 1] * qy + 1.0
        px = (G[0, 0] * qx + G[0, 1] * qy + G[0, 2]) / den
        py = (G[1, 0] * qx + G[1, 1] * qy + G[1, 2]) / den
        ok = (px >= 0) & (px <= w - 1) & (py >= 0) & (py <= h - 1)
        if ok.sum() < 100:
            break
        coords = [py[ok], px[ok]]
        val = ndimage.map_coordinates(cur, coords, order=1)
        ix = ndimage.map_coordinates(gx, coords, order=1)
        iy = ndimage.map_coordinates(gy, coords, order=1)
        x, y, d = qx[ok], qy[ok], den[ok]
        pxo, pyo = px[ok], py[ok]
        # d(px)/d(g) and d(py)/d(g) for g = (g11, g12, g13, g21, g22, g23, g31, g32)
        J = np.column_stack([ix * x, ix * y, ix, iy * x, iy * y, iy,
                             -(ix * pxo + iy * pyo) * x, -(ix * pxo + iy * pyo) * y]) / d[:, None]
        r = val - target[ok]
        scale = 1.4826 * np.median(np.abs(r)) + 1e-9
        k = 1.345 * scale
        wts = np.where(np.abs(r) <= k, 1.0, k / np.abs(r))
        A = J.T @ (J * wts[:, None])
        b = J.T @ (wts * r)
        try:
            delta = np.linalg.solve(A + 1e-9 * np.trace(A) * np.eye(8), -b)
        except np.linalg.LinAlgError:
            break
        G = G + np.append(delta, 0.0).reshape(3, 3)
        if np.max(np.abs(delta[[2, 5]])) < 1e-3 and np.max(np.abs(delta[[0, 1, 3, 4]])) < 1e-5:
            break
    return normalise_homography(np.linalg.inv(G))


# ----------------------------------------------------------------- sequence

@dataclass
class RegistrationParams:
    response_threshold: float = 0.001
    max_points: int = 800
    ratio: float = 0.75
    inlier_threshold: float = 2.0
    max_iterations: int = 2000
    seed: int = 0
    refine: bool = True


def register_pair(reference: np.ndarray, frame: np.ndarray, params: RegistrationParams | None = None,
                  reference_features: list[InterestPoint] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Homography mapping ``frame`` pixels to ``reference`` pixels, and the inlier mask."""
    p = params or RegistrationParams()
    ref = reference_features
    if ref is None:
        ref = describe(reference, detect_corners(reference, p.response_threshold, p.max_points))
    cur = describe(frame, detect_corners(frame, p.response_threshold, p.max_points))
    if len(cur) < 4 or len(ref) < 4:
        raise RegistrationError(f"too few interest points ({len(cur)} in frame, {len(ref)} in reference)")
    pairs = match_features(np.array([q.descriptor for q in cur]), np.array([q.descriptor for q in ref]), p.ratio)
    if len(pairs) < 4:
        raise RegistrationError(f"only {len(pairs)} descriptor matches")
    src = np.array([(cur[i].x, cur[i].y) for i, _ in pairs])
    dst = np.array([(ref[j].x, ref[j].y) for _, j in pairs])
    H, mask = robust_homography(src, dst, p.inlier_threshold, p.max_iterations, p.seed)
    if p.refine:
        # With few inliers the projective terms of H are poorly constrained, so
        # an affine fit of the same inliers is refined too and the better
        # photometric alignment wins.
        candidates = [H]
        if mask.sum() >= 3:
            candidates.append(fit_affine(src[mask], dst[mask]))
        refined = [_refine_coarse_to_fine(reference, frame, c) for c in candidates]
        H = min(refined, key=lambda c: alignment_residual(reference, frame, c))
    return H, mask


def fit_affine(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Least-squares affine map ``src`` -> ``dst`` as a 3x3 homography."""
    A = np.column_stack([src, np.ones(len(src))])
    X, *_ = np.linalg.lstsq(A, dst, rcond=None)
    return np.vstack([X.T, [0.0, 0.0, 1.0]])


def alignment_residual(reference: np.ndarray, frame: np.ndarray, H: np.ndarray) -> float:
    """Median absolute gray-level difference over the valid warped region."""
    warped, valid = warp(np.asarray(frame, dtype=np.float64), H, np.shape(reference))
    if not valid.any():
        return np.inf
    return float(np.median(np.abs(warped - np.asarray(reference, dtype=np.float64))[valid]))


def _refine_coarse_to_fine(reference: np.ndarray, frame: np.ndarray, H: np.ndarray) -> np.ndarray:
    try:
        H = refine_homography(reference, frame, H, iterations=10, smooth=2.0, stride=2)
        return refine_homography(reference, frame, H, iterations=30, smooth=1.0)
    except (np.linalg.LinAlgError, RegistrationError):
        return H


def register_sequence(frames, reference_index: int = 0, params: RegistrationParams | None = None):
    """Register every frame independently to ``frames[reference_index]``.

    Returns a list of ``(warped_frame, homography, validity_mask)``.
    """
    frames = list(frames)
    if not frames:
        raise RegistrationError("empty frame sequence")
    p = params or RegistrationParams()
    reference = frames[reference_index]
    ref_feats = describe(reference, detect_corners(reference, p.response_threshold, p.max_points))
    out = []
    for i, f in enumerate(frames):
        if i == reference_index:
            H = np.eye(3)
        else:
            try:
                H, _ = register_pair(reference, f, p, ref_feats)
            except RegistrationError as exc:
                raise RegistrationError(str(exc), frame_index=i) from exc
        warped, valid = warp(f, H, reference.shape)
        out.append((warped, H, valid))
    return out


def save_homographies(path: str | Path, homographies) -> None:
    """One homography per line: nine row-major decimal numbers."""
    lines = [" ".join(repr(float(v)) for v in np.asarray(H).ravel()) for H in homographies]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_homographies(path: str | Path) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        vals = line.split()
        if len(vals) != 9:
            raise ValueError(f"{path}: line {lineno}: expected 9 numbers, got {len(vals)}")
        rows.append(np.array([float(v) for v in vals]).reshape(3, 3))
    return np.stack(rows) if rows else np.zeros((0, 3, 3))
