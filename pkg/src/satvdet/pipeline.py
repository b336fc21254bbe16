"""Glue from raw video to training samples and from weights to per-frame detections."""

from __future__ import annotations

import numpy as np

from . import dataio, models, postprocess, registration
from .dataio import PointAnnotations, Sample
from .synth import SynthVideo


def stabilise(video: SynthVideo, register: bool = True,
              params: registration.RegistrationParams | None = None) -> np.ndarray:
    """Warp every frame onto the reference frame, estimating homographies unless ``register`` is false."""
    if register:
        return np.stack([w for w, _, _ in registration.register_sequence(video.frames, 0, params)])
    return np.stack([registration.warp(f, H)[0] for f, H in zip(video.frames, video.homographies)])


def video_samples(video: SynthVideo, c: int, k: int, tile: int = 64, register: bool = True,
                  moving_only: bool = True, mids=None, frames: np.ndarray | None = None,
                  margin: int = 0) -> list[Sample]:
    """Cut a (registered) video into ``tile`` x ``tile`` stacks with mid-frame point labels.

    ``margin`` trims a border from the AOI before tiling so that tiles avoid
    the invalid strips left by registration.
    """
    if frames is None:
        frames = stabilise(video, register)
    return frame_samples(frames, video.annotations, c, k, tile, moving_only, mids, margin)


def frame_samples(frames: np.ndarray, annotations: PointAnnotations, c: int, k: int, tile: int = 64,
                  moving_only: bool = True, mids=None, margin: int = 0) -> list[Sample]:
    """Tile already-registered frames; annotations are in the same (reference) coordinates."""
    ann = annotations
    if moving_only:
        ann = dataio.filter_moving(ann)
    h, w = frames.shape[1:]
    usable_w, usable_h = (w - 2 * margin) // tile * tile, (h - 2 * margin) // tile * tile
    roobis = dataio.tile_roobis(usable_w, usable_h, tile, x0=margin, y0=margin) if tile >= 32 else []
    samples, _ = dataio.make_stacks(frames, ann, c, k, roobis, mids)
    return samples


def detect_frames(weights: models.ModelWeights, frames: np.ndarray, c: int, k: int,
                  config: postprocess.PostprocessConfig) -> dict[int, np.ndarray]:
    """Run the detector on every mid frame with enough temporal margin.

    Returns ``{frame_index: (n, 2) detections in frame coordinates}``.
    """
    out = {}
    n = len(frames)
    d = weights.descriptor.downsample_exponent
    for mid in range(n):
        idx = dataio.stack_indices(mid, c, k)
        if idx[0] < 0 or idx[-1] >= n:
            continue
        stack = frames[idx].astype(np.float32) / np.float32(255.0)
        hm = models.forward(weights, stack)
        dets = postprocess.to_frame_coords(postprocess.detect(hm, config), d)
        out[mid] = postprocess.as_array(dets)
    return out


def annotations_from_detections(per_frame: dict[int, np.ndarray]) -> PointAnnotations:
    return PointAnnotations.from_detections(per_frame)
