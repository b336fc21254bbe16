"""Training loops (scratch and fine-tuning), evaluation and the configuration grid."""

from __future__ import annotations

import csv
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import evaluation, models, postprocess, targets
from . import tensorkit as tk
from .dataio import AUGMENT_OPS, Sample, augment

log = logging.getLogger(__name__)

# full-scale training protocol
DEFAULT_LR = 1e-5
DEFAULT_BATCH = 32
DEFAULT_PATIENCE = 100

MIN_IMPROVEMENT = 1e-7


class TrainingError(RuntimeError):
    """Training cannot start or has diverged."""


@dataclass
class TrainConfig:
    model: str = "foveanet4sat"
    channels: int = 3
    mode: str = "scratch"
    pretrained: str | None = None
    lr: float = DEFAULT_LR
    batch_size: int = DEFAULT_BATCH
    patience: int = DEFAULT_PATIENCE
    max_epochs: int = 1000
    augmentation: bool = False
    seed: int = 0
    sigma: float = 1.0
    loss: str = "mse"
    width: float = 1.0

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.mode not in ("scratch", "fine_tune"):
            raise ValueError(f"mode must be 'scratch' or 'fine_tune', got {self.mode!r}")
        if self.mode == "fine_tune" and not self.pretrained:
            raise ValueError("fine_tune mode needs a pretrained weights path")
        if self.loss not in tk.LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")

    def descriptor(self) -> models.ArchDescriptor:
        return models.descriptor_for(self.model, self.channels, self.width)

    def target_spec(self) -> targets.TargetSpec:
        return targets.target_spec_for(self.model, self.sigma)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    wall_time: float


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopping_reason: str = ""
    weights_path: str | None = None
    initial_train_loss: float = float("nan")

    @property
    def best_val_loss(self) -> float:
        return min(e.val_loss for e in self.epochs) if self.epochs else float("nan")

    def train_losses(self) -> list[float]:
        return [e.train_loss for e in self.epochs]

    def val_losses(self) -> list[float]:
        return [e.val_loss for e in self.epochs]

    def to_text(self) -> str:
        lines = [f"initial_train_loss={self.initial_train_loss!r}"]
        lines += [f"epoch={e.epoch} train_loss={e.train_loss!r} val_loss={e.val_loss!r} wall_time={e.wall_time:.3f}"
                  for e in self.epochs]
        lines += [f"best_epoch={self.best_epoch}", f"stopping_reason={self.stopping_reason}",
                  f"weights_path={self.weights_path}"]
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def sample_arrays(samples: list[Sample], spec: targets.TargetSpec) -> tuple[np.ndarray, np.ndarray]:
    """Stack inputs ``(B, c, N, N)`` and heatmap targets ``(B, 1, N', N')``."""
    x = np.stack([s.stack.data for s in samples]).astype(np.float32)
    size = x.shape[-2:]
    y = np.stack([targets.render(s.points, spec, size) for s in samples]).astype(np.float32)[:, None]
    return x, y


def _augment_batch(x: np.ndarray, pts: list[np.ndarray], spec: targets.TargetSpec,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    size = x.shape[-2:]
    for stack, p in zip(x, pts):
        if rng.random() < 0.5:
            op = AUGMENT_OPS[rng.integers(len(AUGMENT_OPS))]
            stack, p = augment(stack, p, op, seed=int(rng.integers(2 ** 31)))
            stack = np.clip(stack, 0.0, 1.0)
        xs.append(stack)
        ys.append(targets.render(p, spec, size))
    return np.stack(xs).astype(np.float32), np.stack(ys).astype(np.float32)[:, None]


def dataset_loss(weights: models.ModelWeights, x: np.ndarray, y: np.ndarray, loss: str = "mse",
                 batch_size: int = 32) -> float:
    loss_fn, _ = tk.LOSSES[loss]
    total = 0.0
    for i in range(0, len(x), batch_size):
        pred = models.forward_batch(weights, x[i:i + batch_size])
        total += loss_fn(pred, y[i:i + batch_size]) * len(pred)
    return total / len(x)


def train(config: TrainConfig, train_samples: list[Sample], val_samples: list[Sample],
          init_weights: models.ModelWeights | None = None) -> tuple[models.ModelWeights, TrainLog]:
    """Minimise the heatmap loss with Adam and early stopping on validation loss.

    Returns the weights of the best validation epoch.
    """
    if not train_samples:
        raise TrainingError("need at least one training sample")
    if not val_samples:
        raise TrainingError("validation set is empty")
    descriptor = config.descriptor()
    if init_weights is not None:
        if init_weights.descriptor != descriptor:
            raise TrainingError(f"pretrained weights are {models._describe(init_weights.descriptor)}, "
                                f"config needs {models._describe(descriptor)}")
        weights = init_weights.copy()
    else:
        weights = models.build(descriptor, init_seed=config.seed)
    spec = config.target_spec()
    loss_fn, loss_grad = tk.LOSSES[config.loss]
    x_train, y_train = sample_arrays(train_samples, spec)
    pts_train = [s.points for s in train_samples]
    x_val, y_val = sample_arrays(val_samples, spec)

    params = weights.params()
    state = tk.AdamState.for_params(params, lr=config.lr)
    log_ = TrainLog()
    log_.initial_train_loss = dataset_loss(weights, x_train, y_train, config.loss)
    best = weights.copy()
    best_val = np.inf
    since_best = 0
    n = len(x_train)
    start = time.perf_counter()
    for epoch in range(1, config.max_epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(n)
        batch_losses = []
        for b in range(0, n, config.batch_size):
            idx = order[b:b + config.batch_size]
            if config.augmentation:
                xb, yb = _augment_batch(x_train[idx], [pts_train[i] for i in idx], spec, rng)
            else:
                xb, yb = x_train[idx], y_train[idx]
            cache = models.ForwardCache()
            pred = models.forward_batch(weights, xb, training=True, rng=rng, cache=cache)
            loss = loss_fn(pred, yb)
            if not np.isfinite(loss):
                raise TrainingError(f"loss diverged (non-finite) at epoch {epoch}, batch {b // config.batch_size}")
            grads = models.backward(weights, cache, loss_grad(pred, yb))
            tk.adam_step(params, grads, state)
            batch_losses.append(loss * len(idx))
        train_loss = float(np.sum(batch_losses) / n)
        val_loss = dataset_loss(weights, x_val, y_val, config.loss)
        if not np.isfinite(val_loss):
            raise TrainingError(f"validation loss diverged at epoch {epoch}")
        log_.epochs.append(EpochRecord(epoch, train_loss, val_loss, time.perf_counter() - start))
        log.debug("epoch %d train %.6g val %.6g", epoch, train_loss, val_loss)
        if val_loss < best_val - MIN_IMPROVEMENT:
            best_val, best, since_best = val_loss, weights.copy(), 0
            log_.best_epoch = epoch
        else:
            since_best += 1
            if since_best >= config.patience:
                log_.stopping_reason = f"no validation improvement for {config.patience} epochs"
                break
    else:
        log_.stopping_reason = f"reached max_epochs={config.max_epochs}"
    return best, log_


def fine_tune(pretrained: models.ModelWeights | str | Path, samples: list[Sample], config: TrainConfig,
              val_samples: list[Sample] | None = None) -> tuple[models.ModelWeights, TrainLog]:
    """Continue training all layers of ``pretrained`` on a (small) target-domain set.

    Without an explicit validation set the training samples double as
    validation samples.
    """
    if len(samples) < 1:
        raise TrainingError("fine-tuning needs at least one sample")
    if isinstance(pretrained, (str, Path)):
        try:
            pretrained = models.load(pretrained, expected=config.descriptor())
        except models.WeightsFileError as exc:
            raise TrainingError(str(exc)) from exc
        except OSError as exc:
            raise TrainingError(f"cannot read pretrained weights: {exc}") from exc
    return train(config, samples, val_samples if val_samples else samples, init_weights=pretrained)


# ---------------------------------------------------------------- evaluation

def predict_samples(weights: models.ModelWeights, samples: list[Sample], batch_size: int = 16) -> np.ndarray:
    x = np.stack([s.stack.data for s in samples]).astype(np.float32)
    return models.predict(weights, x, batch_size)


def sample_detections(heatmaps: np.ndarray, cfg: postprocess.PostprocessConfig, downsample_exponent: int = 0):
    return [postprocess.as_array(postprocess.to_frame_coords(postprocess.detect(h, cfg), downsample_exponent))
            for h in heatmaps]


DEFAULT_SWEEP = tuple(np.round(np.arange(0.05, 1.0, 0.05), 2))


@dataclass
class EvalResult:
    report: evaluation.MatchReport
    alpha_n: float | None
    method: str

    @property
    def f1(self) -> float:
        return self.report.f1


def evaluate(weights: models.ModelWeights, samples: list[Sample], theta: float = 4.0, method: str = "nms",
             alpha_n: float | None = None, alpha_o: float = 3.5, sweep=DEFAULT_SWEEP,
             heatmaps: np.ndarray | None = None) -> EvalResult:
    """Pooled P/R/F1 on ``samples``.

    For NMS without a fixed ``alpha_n`` the best-F1 threshold of ``sweep``
    is reported.
    """
    if heatmaps is None:
        heatmaps = predict_samples(weights, samples)
    d = weights.descriptor.downsample_exponent
    gts = [s.points for s in samples]
    if method == "otsu":
        cfg = postprocess.PostprocessConfig("otsu", alpha_o=alpha_o)
        return EvalResult(evaluation.match_frames(sample_detections(heatmaps, cfg, d), gts, theta), None, "otsu")
    candidates = [alpha_n] if alpha_n is not None else list(sweep)
    best = None
    for a in candidates:
        cfg = postprocess.PostprocessConfig("nms", alpha_n=float(a))
        rep = evaluation.match_frames(sample_detections(heatmaps, cfg, d), gts, theta)
        if best is None or rep.f1 > best.report.f1:
            best = EvalResult(rep, float(a), "nms")
    return best


# --------------------------------------------------------------------- grid

@dataclass
class GridData:
    """Sample pools for a configuration grid."""
    train_pool: list[Sample]
    val: list[Sample]
    test: list[Sample]
    theta: float = 4.0
    alpha_n: float | None = 0.40


@dataclass
class GridRow:
    config: str
    n_samples: int
    repeat: int
    f1: float
    precision: float
    recall: float
    seed: int
    error: str = ""


def cell_seed(base_seed: int, config_index: int, n_samples: int, repeat: int) -> int:
    return int(np.random.SeedSequence([base_seed, config_index, n_samples, repeat]).generate_state(1)[0])


def run_cell(config: TrainConfig, data: GridData, n_samples: int, seed: int) -> GridRow:
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(data.train_pool), size=min(n_samples, len(data.train_pool)), replace=False)
    chosen = [data.train_pool[i] for i in pick]
    cfg = replace(config, seed=seed)
    if cfg.mode == "fine_tune":
        weights, _ = fine_tune(cfg.pretrained, chosen, cfg, data.val)
    else:
        weights, _ = train(cfg, chosen, data.val)
    res = evaluate(weights, data.test, data.theta, alpha_n=data.alpha_n)
    return GridRow("", n_samples, 0, res.f1, res.report.precision, res.report.recall, seed)


def run_config_grid(configs: dict[str, TrainConfig], data: GridData, sample_counts, repeats: int = 3,
                    base_seed: int = 0) -> list[GridRow]:
    """Train/evaluate every (config, sample count, repeat) cell with derived seeds.

    A failing cell is recorded with its error message and NaN scores.
    """
    rows = []
    for ci, (name, cfg) in enumerate(configs.items()):
        for n in sample_counts:
            for r in range(repeats):
                seed = cell_seed(base_seed, ci, n, r)
                try:
                    row = run_cell(cfg, data, n, seed)
                except (TrainingError, models.ModelError, ValueError) as exc:
                    log.warning("grid cell %s/%d/%d failed: %s", name, n, r, exc)
                    row = GridRow("", n, r, float("nan"), float("nan"), float("nan"), seed, str(exc))
                row.config, row.repeat = name, r
                rows.append(row)
    return rows


def summarize_grid(rows: list[GridRow]) -> dict[tuple[str, int], tuple[float, float]]:
    """Mean and (population) standard deviation of F1 per (config, n_samples)."""
    groups: dict[tuple[str, int], list[float]] = {}
    for r in rows:
        groups.setdefault((r.config, r.n_samples), []).append(r.f1)
    # statistics works in exact rational arithmetic, so identical scores give a std of exactly 0
    return {k: (statistics.fmean(v), statistics.pstdev(v)) for k, v in groups.items()}


GRID_COLUMNS = ["config", "n_samples", "repeat", "f1", "precision", "recall", "seed"]


def write_grid_csv(path: str | Path, rows: list[GridRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GRID_COLUMNS)
        for r in rows:
            d = asdict(r)
            w.writerow([d[c] for c in GRID_COLUMNS])


def write_grid_summary(path: str | Path, rows: list[GridRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["config", "n_samples", "f1_mean", "f1_std"])
        for (cfg, n), (m, s) in sorted(summarize_grid(rows).items()):
            w.writerow([cfg, n, f"{m:.4f}", f"{s:.4f}"])
