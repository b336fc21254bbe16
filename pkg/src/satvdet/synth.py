"""Synthetic panchromatic satellite video with known vehicles and ego-motion.

Scenes are described in the coordinates of the reference (first) frame.
Frame ``t`` is rendered by sampling the scene at ``H_t @ p`` for every
frame pixel ``p``, where ``H_t`` is the frame-to-reference homography that
the generator returns alongside the frames.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import dataio
from .dataio import PointAnnotations


@dataclass(frozen=True)
class ScenarioSpec:
    height: int = 256
    width: int = 256
    n_frames: int = 40
    seed: int = 0
    n_vehicles: int = 30
    vehicle_size: tuple[float, float] = (2.0, 6.0)
    speed: tuple[float, float] = (0.3, 2.0)
    brightness: tuple[float, float] = (40.0, 90.0)
    dark_fraction: float = 0.1
    n_roads: int = 4
    road_width: tuple[float, float] = (6.0, 12.0)
    road_albedo: tuple[float, float] = (-25.0, 25.0)
    # static clutter per 10,000 px: vehicle-like blobs and rectangular structures
    clutter_density: float = 4.0
    background_level: float = 90.0
    background_contrast: float = 18.0
    # fine-scale ground texture (buildings, vegetation) in gray levels
    texture_contrast: float = 10.0
    jitter_translation: float = 3.0
    jitter_rotation_deg: float = 0.5
    noise_sigma: float = 2.0
    gsd_scale: float = 1.0
    platoon_size: tuple[int, int] = (1, 1)
    platoon_spacing: tuple[float, float] = (3.0, 5.0)

    def __post_init__(self):
        if self.height < 8 or self.width < 8 or self.n_frames < 1:
            raise ValueError("scene must be at least 8x8 pixels and one frame")
        if not 0 <= self.dark_fraction <= 1:
            raise ValueError("dark_fraction must lie in [0, 1]")
        if self.gsd_scale <= 0:
            raise ValueError("gsd_scale must be positive")


def dense_traffic(**overrides) -> ScenarioSpec:
    """Queues of 2-4 vehicles spaced 3-5 px apart."""
    base = dict(n_vehicles=60, platoon_size=(2, 4), platoon_spacing=(3.0, 5.0), vehicle_size=(2.0, 3.0),
                speed=(1.0, 2.0), dark_fraction=0.0)
    base.update(overrides)
    return ScenarioSpec(**base)


@dataclass
class SynthVideo:
    frames: np.ndarray  # (T, H, W) uint8
    homographies: np.ndarray  # (T, 3, 3) frame -> reference
    annotations: PointAnnotations  # reference coordinates, with track ids
    spec: ScenarioSpec


@dataclass
class _Vehicle:
    origin: np.ndarray
    direction: np.ndarray
    s0: float
    speed: float
    extent: tuple[float, float]
    sigma: float
    amplitude: float
    track_base: int


def _jitter(rng: np.random.Generator, spec: ScenarioSpec, n: int) -> np.ndarray:
    hs = np.repeat(np.eye(3)[None], n, axis=0)
    cx, cy = (spec.width - 1) / 2.0, (spec.height - 1) / 2.0
    for t in range(1, n):
        a = np.deg2rad(rng.uniform(-spec.jitter_rotation_deg, spec.jitter_rotation_deg))
        tx, ty = rng.uniform(-spec.jitter_translation, spec.jitter_translation, size=2)
        ca, sa = np.cos(a), np.sin(a)
        rot = np.array([[ca, -sa, cx - ca * cx + sa * cy], [sa, ca, cy - sa * cx - ca * cy], [0, 0, 1]])
        hs[t] = np.array([[1, 0, tx], [0, 1, ty], [0, 0, 1]]) @ rot
    return hs


def _background(rng: np.random.Generator, spec: ScenarioSpec, margin: int):
    g = spec.gsd_scale
    h, w = spec.height + 2 * margin, spec.width + 2 * margin
    noise = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=6.0 * g, mode="wrap")
    noise /= noise.std() + 1e-12
    fine = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=1.5 * g, mode="wrap")
    fine /= fine.std() + 1e-12
    field = spec.background_level + spec.background_contrast * noise + spec.texture_contrast * fine
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    xx -= margin
    yy -= margin
    roads = []
    for _ in range(spec.n_roads):
        p = np.array([rng.uniform(0, spec.width - 1), rng.uniform(0, spec.height - 1)])
        ang = rng.uniform(0, np.pi)
        d = np.array([np.cos(ang), np.sin(ang)])
        half = rng.uniform(*spec.road_width) * g / 2.0
        dist = np.abs((xx - p[0]) * -d[1] + (yy - p[1]) * d[0])
        # soft road edge about one pixel wide
        mask = np.clip(half + 0.5 - dist, 0.0, 1.0)
        field += mask * rng.uniform(*spec.road_albedo)
        roads.append((p, d, half))
    area = spec.width * spec.height / (g * g)
    n_clutter = int(round(spec.clutter_density * area / 1e4))
    n_rect = n_clutter // 2
    for _ in range(n_rect):
        cx, cy = rng.uniform(0, spec.width), rng.uniform(0, spec.height)
        rw, rh = rng.uniform(3, 10, size=2) * g
        x0, x1 = int(cx - rw / 2) + margin, int(cx + rw / 2) + margin
        y0, y1 = int(cy - rh / 2) + margin, int(cy + rh / 2) + margin
        field[max(y0, 0):max(y1, 0), max(x0, 0):max(x1, 0)] += rng.choice([-1, 1]) * rng.uniform(30, 70)
    for _ in range(n_clutter - n_rect):
        cx, cy = rng.uniform(0, spec.width - 1), rng.uniform(0, spec.height - 1)
        s = rng.uniform(*spec.vehicle_size) * g / 3.0
        amp = rng.uniform(*spec.brightness) * (-1 if rng.random() < spec.dark_fraction else 1)
        field += amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
    return field, roads


def _vehicles(rng: np.random.Generator, spec: ScenarioSpec, roads) -> list[_Vehicle]:
    g = spec.gsd_scale
    diag = float(np.hypot(spec.width, spec.height))
    out: list[_Vehicle] = []
    track = 0
    while len(out) < spec.n_vehicles and roads:
        p, d, half = roads[rng.integers(len(roads))]
        lo, hi = spec.platoon_size
        size = int(rng.integers(lo, hi + 1))
        speed = rng.uniform(*spec.speed) * g * rng.choice([-1.0, 1.0])
        lateral = rng.uniform(-0.5, 0.5) * half
        s_head = rng.uniform(-diag / 2, diag / 2)
        nrm = np.array([-d[1], d[0]])
        s = s_head
        for _ in range(min(size, spec.n_vehicles - len(out))):
            sigma = rng.uniform(*spec.vehicle_size) * g / 3.0
            amp = rng.uniform(*spec.brightness) * (-1 if rng.random() < spec.dark_fraction else 1)
            out.append(_Vehicle(p + lateral * nrm, d, s, speed, (-diag / 2 - 10 * g, diag / 2 + 10 * g),
                                sigma, amp, track))
            track += 1
            s -= np.sign(speed) * rng.uniform(*spec.platoon_spacing) * g
    return out


def _vehicle_state(v: _Vehicle, t: int) -> tuple[np.ndarray, int]:
    lo, hi = v.extent
    length = hi - lo
    raw = v.s0 + v.speed * t - lo
    cycle = int(np.floor(raw / length))
    s = lo + raw - cycle * length
    return v.origin + s * v.direction, cycle


def generate(spec: ScenarioSpec) -> SynthVideo:
    """Render a video; returns frames, exact frame->reference homographies and reference-frame annotations."""
    rng = np.random.default_rng(spec.seed)
    g = spec.gsd_scale
    margin = int(np.ceil(spec.jitter_translation + spec.width * np.deg2rad(spec.jitter_rotation_deg))) + 4
    field, roads = _background(rng, spec, margin)
    vehicles = _vehicles(rng, spec, roads)
    jitter_spec = replace(spec, jitter_translation=spec.jitter_translation * g)
    hs = _jitter(rng, jitter_spec, spec.n_frames)

    h, w = spec.height, spec.width
    py, px = np.mgrid[0:h, 0:w].astype(np.float64)
    frames = np.empty((spec.n_frames, h, w), dtype=np.uint8)
    rec_f, rec_x, rec_y, rec_t = [], [], [], []
    tracks_per_vehicle = 100000
    for t in range(spec.n_frames):
        H = hs[t]
        den = H[2, 0] * px + H[2, 1] * py + H[2, 2]
        qx = (H[0, 0] * px + H[0, 1] * py + H[0, 2]) / den
        qy = (H[1, 0] * px + H[1, 1] * py + H[1, 2]) / den
        img = ndimage.map_coordinates(field, [qy + margin, qx + margin], order=1, mode="nearest")
        Hinv = np.linalg.inv(H)
        for v in vehicles:
            q, cycle = _vehicle_state(v, t)
            if 0 <= q[0] <= w - 1 and 0 <= q[1] <= h - 1:
                rec_f.append(t)
                rec_x.append(q[0])
                rec_y.append(q[1])
                rec_t.append(v.track_base * tracks_per_vehicle + cycle)
            pf = Hinv @ np.array([q[0], q[1], 1.0])
            cxf, cyf = pf[0] / pf[2], pf[1] / pf[2]
            r = 4.0 * v.sigma + 1
            x0, x1 = max(0, int(cxf - r)), min(w, int(cxf + r) + 2)
            y0, y1 = max(0, int(cyf - r)), min(h, int(cyf + r) + 2)
            if x0 >= x1 or y0 >= y1:
                continue
            dx = qx[y0:y1, x0:x1] - q[0]
            dy = qy[y0:y1, x0:x1] - q[1]
            img[y0:y1, x0:x1] += v.amplitude * np.exp(-(dx * dx + dy * dy) / (2 * v.sigma ** 2))
        if spec.noise_sigma > 0:
            img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
        frames[t] = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)
    ann = PointAnnotations(rec_f, rec_x, rec_y, rec_t)
    return SynthVideo(frames, hs, ann, spec)


def _rescale_video(video: SynthVideo, factor: float) -> SynthVideo:
    frames = np.stack([np.clip(np.floor(dataio.downscale(f, factor) + 0.5), 0, 255).astype(np.uint8)
                       for f in video.frames])
    off = 0.5 * factor - 0.5
    S = np.array([[factor, 0, off], [0, factor, off], [0, 0, 1.0]])
    Sinv = np.linalg.inv(S)
    hs = np.stack([S @ H @ Sinv for H in video.homographies])
    a = video.annotations
    x, y = a.x * factor + off, a.y * factor + off
    h, w = frames.shape[1:]
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    ann = PointAnnotations(a.frame[inside], x[inside], y[inside], a.track_id[inside])
    return SynthVideo(frames, hs, ann, video.spec)


def domain_pair(spec: ScenarioSpec, downscale_factor: float = 0.2) -> tuple[SynthVideo, SynthVideo]:
    """Source/target domain pair for transfer experiments.

    Domain A mimics high-resolution aerial imagery: rendered at
    ``1 / downscale_factor`` times the target resolution (vehicles, speeds
    and ego-motion scaled alike) with its own background statistics, then
    area-downscaled.  Domain B is rendered directly from ``spec`` with a
    disjoint seed.
    """
    g = 1.0 / downscale_factor
    spec_a = replace(spec, height=int(round(spec.height * g)), width=int(round(spec.width * g)),
                     gsd_scale=g, seed=spec.seed * 2 + 1, background_level=spec.background_level + 25,
                     background_contrast=spec.background_contrast * 0.6, road_albedo=(-15.0, 35.0),
                     clutter_density=spec.clutter_density * 0.7)
    spec_b = replace(spec, seed=spec.seed * 2 + 2)
    a = _rescale_video(generate(spec_a), downscale_factor)
    a.spec = spec_a
    return a, generate(spec_b)


def write_dataset(directory: str | Path, video: SynthVideo, c: int = 3, k: int = 1, n: int = 128,
                  theta: float = 4.0, split_seed: int = 0) -> Path:
    """Write frames/, annotations.csv, homographies.txt and manifest.txt."""
    from .registration import save_homographies

    d = Path(directory)
    dataio.write_frames(d / "frames", video.frames)
    dataio.save_annotations(d / "annotations.csv", video.annotations)
    save_homographies(d / "homographies.txt", video.homographies)
    manifest = {"frame_glob": "frames/*.png", "annotations": "annotations.csv", "c": c, "k": k, "N": n,
                "theta": theta, "split_seed": split_seed, "homographies": "homographies.txt"}
    dataio.write_manifest(d / "manifest.txt", manifest)
    return d
