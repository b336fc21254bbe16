"""Desk-scale synthetic experiments: datasets and training recipes.

Analogues of the full-scale experiments (from-scratch training, NMS
versus Otsu, channel ablation, few-shot transfer) on synthetic video,
sized for a single CPU.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import dataio, pipeline, synth, trainer
from .dataio import Sample

# traffic dense enough that most 64x64 tiles contain several moving vehicles
DETECTION_SCENE = synth.ScenarioSpec(height=256, width=256, n_frames=40, n_vehicles=120, speed=(1.0, 2.0),
                                     clutter_density=6.0, dark_fraction=0.0)
TRAIN_SEEDS = (100, 101, 102, 103)
TEST_SEED = 999
DENSE_TEST_SEED = 998


@dataclass
class Recipe:
    """Sample layout and optimiser settings shared by all desk-scale runs."""
    c: int = 3
    k: int = 2
    tile: int = 64
    width: float = 0.125
    lr: float = 1e-3
    batch_size: int = 8
    epochs: int = 8
    pretrain_epochs: int = 8
    patience: int = 100
    seed: int = 0
    register: bool = True
    test_stride: int = 4

    def train_config(self, **overrides) -> trainer.TrainConfig:
        cfg = trainer.TrainConfig(model="foveanet4sat", channels=self.c, lr=self.lr, batch_size=self.batch_size,
                                  patience=self.patience, max_epochs=self.epochs, seed=self.seed, width=self.width)
        return replace(cfg, **overrides)


@dataclass
class Split:
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]
    seconds: dict = field(default_factory=dict)


_frame_cache: dict = {}


def stabilised_frames(spec: synth.ScenarioSpec, register: bool = True):
    """Generate and stabilise one video; cached per process because registration dominates data cost."""
    key = (spec, register)
    if key not in _frame_cache:
        video = synth.generate(spec)
        _frame_cache[key] = (video, pipeline.stabilise(video, register))
    return _frame_cache[key]


def video_stacks(spec: synth.ScenarioSpec, recipe: Recipe, mids=None) -> list[Sample]:
    video, frames = stabilised_frames(spec, recipe.register)
    return pipeline.frame_samples(frames, video.annotations, recipe.c, recipe.k, recipe.tile, mids=mids)


def detection_split(recipe: Recipe, scene: synth.ScenarioSpec = DETECTION_SCENE, train_seeds=TRAIN_SEEDS,
                    test_seed: int = TEST_SEED, val_fraction: float = 0.1, mid_margin: int | None = None) -> Split:
    """Training/validation stacks from ``train_seeds`` videos, test stacks from a separate video.

    ``mid_margin`` (default: the recipe's own temporal margin) fixes which mid
    frames are used, so recipes with different ``c`` can share sample sets.
    """
    t0 = time.perf_counter()
    own = (recipe.c - 1) // 2 * recipe.k
    margin = own if mid_margin is None else max(mid_margin, own)
    pool = []
    for s in train_seeds:
        pool += video_stacks(replace(scene, seed=s), recipe, range(margin, scene.n_frames - margin))
    train, val = dataio.split_train_val(pool, val_fraction, recipe.seed)
    mids = range(margin, scene.n_frames - margin, recipe.test_stride)
    test = video_stacks(replace(scene, seed=test_seed), recipe, mids)
    return Split(train, val, test, {"data": time.perf_counter() - t0})


def dense_test_stacks(recipe: Recipe, seed: int = DENSE_TEST_SEED, n_frames: int = 40) -> list[Sample]:
    """Held-out stacks from the dense-traffic preset (queues 3-5 px apart)."""
    spec = synth.dense_traffic(height=256, width=256, n_frames=n_frames, seed=seed, n_vehicles=150,
                               clutter_density=DETECTION_SCENE.clutter_density)
    margin = (recipe.c - 1) // 2 * recipe.k
    return video_stacks(spec, recipe, range(margin, n_frames - margin, recipe.test_stride))


def train_and_score(recipe: Recipe, split: Split, theta: float = 4.0):
    """Train from scratch; returns (weights, log, nms EvalResult on the test stacks)."""
    weights, log = trainer.train(recipe.train_config(), split.train, split.val)
    return weights, log, trainer.evaluate(weights, split.test, theta)


# ----------------------------------------------------------------- transfer

@dataclass
class TransferData:
    source_train: list[Sample]
    source_val: list[Sample]
    target_pool: list[Sample]
    target_val: list[Sample]
    target_test: list[Sample]


def transfer_data(recipe: Recipe, scene: synth.ScenarioSpec | None = None, seeds=(200, 201),
                  target_seed: int = 300) -> TransferData:
    """Domain A (downscaled high-resolution rendering) for pre-training, domain B for few-shot tuning.

    Domain B frames are split by time: the first half supplies the few-shot
    pool and validation stacks, the second half the test stacks.
    """
    scene = scene or replace(DETECTION_SCENE, height=128, width=128, n_vehicles=30)
    a_samples = []
    for s in seeds:
        a, _ = synth.domain_pair(replace(scene, seed=s))
        frames = pipeline.stabilise(a, recipe.register)
        a_samples += pipeline.frame_samples(frames, a.annotations, recipe.c, recipe.k, recipe.tile)
    source_train, source_val = dataio.split_train_val(a_samples, 0.1, recipe.seed)
    _, b = synth.domain_pair(replace(scene, seed=target_seed))
    frames = pipeline.stabilise(b, recipe.register)
    margin = (recipe.c - 1) // 2 * recipe.k
    half = scene.n_frames // 2
    early = pipeline.frame_samples(frames, b.annotations, recipe.c, recipe.k, recipe.tile,
                                   mids=range(margin, half - margin))
    late = pipeline.frame_samples(frames, b.annotations, recipe.c, recipe.k, recipe.tile,
                                  mids=range(half + margin, scene.n_frames - margin, 2))
    pool, val = dataio.split_train_val(early, 0.2, recipe.seed)
    return TransferData(source_train, source_val, pool, val, late)


def few_shot_scores(recipe: Recipe, data: TransferData, pretrained, n_samples: int = 5, repeats: int = 3,
                    base_seed: int = 0, epochs: int = 60, theta: float = 4.0):
    """F1 of fine-tuned and scratch models trained on the same ``n_samples`` target stacks per repeat."""
    fine, scratch = [], []
    for r in range(repeats):
        seed = trainer.cell_seed(base_seed, 0, n_samples, r)
        rng = np.random.default_rng(seed)
        chosen = [data.target_pool[i] for i in rng.choice(len(data.target_pool), n_samples, replace=False)]
        cfg = recipe.train_config(seed=seed, max_epochs=epochs, batch_size=n_samples)
        w_ft, _ = trainer.fine_tune(pretrained, chosen, cfg, data.target_val)
        w_sc, _ = trainer.train(cfg, chosen, data.target_val)
        fine.append(trainer.evaluate(w_ft, data.target_test, theta).f1)
        scratch.append(trainer.evaluate(w_sc, data.target_test, theta).f1)
    return fine, scratch
