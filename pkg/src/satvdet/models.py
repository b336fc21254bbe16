"""FoveaNet and FoveaNet4Sat: construction, inference, gradients and weight files."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensorkit as tk

FILTERS = (32, 32, 32, 256, 512, 256, 256, 1)
FOVEANET_KERNELS = (15, 13, 11, 9, 7, 5, 3, 1)
FOVEANET4SAT_KERNELS = (3, 3, 3, 3, 3, 3, 3, 1)
SUPPORTED_CHANNELS = (1, 3, 5, 7)

MAGIC = b"FVNWGT01"


class ModelError(ValueError):
    """Unsupported architecture, bad input, or inconsistent weights."""


class WeightsFileError(ModelError):
    """A weights file is corrupt, truncated or does not match the expected model."""


@dataclass(frozen=True)
class ArchDescriptor:
    """Architecture of an eight-layer heatmap regression network.

    ``width`` scales the hidden filter counts (the final layer always has a
    single filter); ``width=1`` is the full-size network.
    """

    name: str
    channels_in: int
    filters_per_layer: tuple[int, ...] = FILTERS
    kernel_sizes: tuple[int, ...] = FOVEANET4SAT_KERNELS
    pool_after_layer1: bool = False
    activation: str = "leaky_relu"
    leaky_slope: float = 0.01
    dropout_layers: tuple[int, ...] = (6, 7)
    dropout_rate: float = 0.5
    width: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.name not in ("foveanet", "foveanet4sat"):
            raise ModelError(f"unknown architecture {self.name!r}")
        if self.channels_in not in SUPPORTED_CHANNELS:
            raise ModelError(f"channels_in must be one of {SUPPORTED_CHANNELS}, got {self.channels_in}")
        if len(self.filters_per_layer) != 8 or len(self.kernel_sizes) != 8:
            raise ModelError("descriptor must define exactly 8 layers")
        if self.kernel_sizes[-1] != 1 or self.filters_per_layer[-1] != 1:
            raise ModelError("last layer must be a 1x1 convolution with one filter")
        if any(k % 2 == 0 for k in self.kernel_sizes):
            raise ModelError("kernel sizes must be odd for same padding")
        if self.activation not in ("relu", "leaky_relu"):
            raise ModelError(f"unknown activation {self.activation!r}")
        if self.name == "foveanet" and not (self.pool_after_layer1 and self.activation == "relu"):
            raise ModelError("foveanet requires pooling after layer 1 and ReLU activations")
        if self.name == "foveanet4sat" and (self.pool_after_layer1 or self.activation != "leaky_relu"):
            raise ModelError("foveanet4sat requires no pooling and leaky ReLU activations")
        if not 0 < self.width <= 1:
            raise ModelError(f"width must lie in (0, 1], got {self.width}")
        if not all(1 <= i <= 8 for i in self.dropout_layers):
            raise ModelError("dropout layers are 1-based layer indices")

    @property
    def slope(self) -> float:
        return 0.0 if self.activation == "relu" else self.leaky_slope

    @property
    def downsample_exponent(self) -> int:
        return 1 if self.pool_after_layer1 else 0

    def layer_shapes(self) -> list[tuple[int, int, int, int]]:
        shapes = []
        in_ch = self.channels_in
        for i, (f, k) in enumerate(zip(self.filters_per_layer, self.kernel_sizes)):
            out = f if i == 7 else max(1, int(round(f * self.width)))
            shapes.append((out, in_ch, k, k))
            in_ch = out
        return shapes

    def to_manifest(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_manifest(cls, text: str) -> "ArchDescriptor":
        raw = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise WeightsFileError(f"malformed manifest line {line!r}")
            raw[key.strip()] = value.strip()
        converters = {
            "name": str, "channels_in": int, "pool_after_layer1": lambda v: v == "True",
            "activation": str, "leaky_slope": float, "dropout_rate": float, "width": float,
            "filters_per_layer": lambda v: tuple(int(x) for x in v.split(",") if x),
            "kernel_sizes": lambda v: tuple(int(x) for x in v.split(",") if x),
            "dropout_layers": lambda v: tuple(int(x) for x in v.split(",") if x),
        }
        try:
            kwargs = {k: converters[k](v) for k, v in raw.items()}
            return cls(**kwargs)
        except (KeyError, TypeError, ValueError) as exc:
            raise WeightsFileError(f"invalid descriptor manifest: {exc}") from exc


def foveanet(channels_in: int = 3, width: float = 1.0, **overrides) -> ArchDescriptor:
    return ArchDescriptor("foveanet", channels_in, kernel_sizes=FOVEANET_KERNELS, pool_after_layer1=True,
                          activation="relu", width=width, **overrides)


def foveanet4sat(channels_in: int = 3, width: float = 1.0, **overrides) -> ArchDescriptor:
    return ArchDescriptor("foveanet4sat", channels_in, kernel_sizes=FOVEANET4SAT_KERNELS,
                          pool_after_layer1=False, activation="leaky_relu", width=width, **overrides)


def descriptor_for(name: str, channels_in: int, width: float = 1.0, **overrides) -> ArchDescriptor:
    if name == "foveanet":
        return foveanet(channels_in, width, **overrides)
    if name == "foveanet4sat":
        return foveanet4sat(channels_in, width, **overrides)
    raise ModelError(f"unknown architecture {name!r}")


@dataclass
class ModelWeights:
    descriptor: ArchDescriptor
    kernels: list[np.ndarray] = field(default_factory=list)
    biases: list[np.ndarray] = field(default_factory=list)

    def params(self) -> list[np.ndarray]:
        """Parameters in layer order, kernel before bias."""
        out = []
        for k, b in zip(self.kernels, self.biases):
            out.extend((k, b))
        return out

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params()))

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.descriptor, [k.copy() for k in self.kernels], [b.copy() for b in self.biases])

    def validate(self) -> None:
        shapes = self.descriptor.layer_shapes()
        if len(self.kernels) != len(shapes) or len(self.biases) != len(shapes):
            raise ModelError(f"expected {len(shapes)} layers, got {len(self.kernels)} kernels")
        for i, (k, b, s) in enumerate(zip(self.kernels, self.biases, shapes), start=1):
            if k.shape != s or b.shape != (s[0],):
                raise ModelError(f"layer {i}: kernel {k.shape} / bias {b.shape} do not match {s}")


def parameter_count(descriptor: ArchDescriptor) -> int:
    """Closed-form count: sum over layers of kH*kW*in*out + out."""
    return sum(o * i * kh * kw + o for o, i, kh, kw in descriptor.layer_shapes())


def build(descriptor: ArchDescriptor, init_seed: int = 0, dtype=tk.DEFAULT_DTYPE) -> ModelWeights:
    """Initialise weights with fan-in scaled normals (std = sqrt(2 / fan_in)) and zero biases."""
    descriptor.validate()
    rng = np.random.default_rng(init_seed)
    kernels, biases = [], []
    for out_ch, in_ch, kh, kw in descriptor.layer_shapes():
        std = np.sqrt(2.0 / (in_ch * kh * kw))
        kernels.append((rng.standard_normal((out_ch, in_ch, kh, kw)) * std).astype(dtype))
        biases.append(np.zeros(out_ch, dtype=dtype))
    return ModelWeights(descriptor, kernels, biases)


def _as_batch(stack: np.ndarray, descriptor: ArchDescriptor) -> tuple[np.ndarray, bool]:
    stack = np.asarray(stack)
    single = stack.ndim == 3
    x = stack[None] if single else stack
    if x.ndim != 4:
        raise ModelError(f"stack must be (c, H, W) or (B, c, H, W), got shape {stack.shape}")
    if x.shape[1] != descriptor.channels_in:
        raise ModelError(f"model expects {descriptor.channels_in} frames per stack, got {x.shape[1]}")
    if not np.all(np.isfinite(x)) or x.min() < 0.0 or x.max() > 1.0:
        raise ModelError("stack values must be normalised to [0, 1]")
    return x, single


@dataclass
class ForwardCache:
    inputs: list = field(default_factory=list)
    pre_act: list = field(default_factory=list)
    pool_argmax: np.ndarray | None = None
    pool_shape: tuple | None = None
    dropout_masks: dict = field(default_factory=dict)


def forward_batch(weights: ModelWeights, x: np.ndarray, training: bool = False,
                  rng: np.random.Generator | int | None = None,
                  cache: ForwardCache | None = None) -> np.ndarray:
    """Run a ``(B, c, H, W)`` batch; returns ``(B, 1, H', W')`` heatmaps.

    When ``cache`` is given, intermediate values needed by :func:`backward`
    are stored in it.
    """
    d = weights.descriptor
    x = x.astype(weights.kernels[0].dtype, copy=False)
    rng = np.random.default_rng(rng) if training else None
    n_layers = len(weights.kernels)
    for i, (k, b) in enumerate(zip(weights.kernels, weights.biases)):
        if cache is not None:
            cache.inputs.append(x)
        z = tk.conv2d_forward(x, k, b)
        if i == n_layers - 1:
            x = z
            break
        if cache is not None:
            cache.pre_act.append(z)
        x = tk.leaky_relu(z, d.slope)
        if i == 0 and d.pool_after_layer1:
            if cache is not None:
                cache.pool_shape = x.shape
            x, argmax = tk.maxpool2x2(x)
            if cache is not None:
                cache.pool_argmax = argmax
        if training and (i + 1) in d.dropout_layers and d.dropout_rate > 0:
            x, mask = tk.dropout(x, d.dropout_rate, rng, training=True)
            if cache is not None:
                cache.dropout_masks[i] = mask
    return x


def backward(weights: ModelWeights, cache: ForwardCache, upstream: np.ndarray) -> list[np.ndarray]:
    """Gradients w.r.t. ``weights.params()`` (same order) given d(loss)/d(output)."""
    d = weights.descriptor
    n_layers = len(weights.kernels)
    grads: list[np.ndarray] = [None] * (2 * n_layers)
    g = upstream
    for i in range(n_layers - 1, -1, -1):
        if i < n_layers - 1:
            if i in cache.dropout_masks:
                g = tk.dropout_backward(g, cache.dropout_masks[i])
            if i == 0 and d.pool_after_layer1:
                g = tk.maxpool2x2_backward(g, cache.pool_argmax, cache.pool_shape)
            g = tk.leaky_relu_backward(g, cache.pre_act[i], d.slope)
        gx, gk, gb = tk.conv2d_backward(g, cache.inputs[i], weights.kernels[i])
        grads[2 * i], grads[2 * i + 1] = gk, gb
        g = gx
    return grads


def forward(weights: ModelWeights, stack: np.ndarray, training: bool = False,
            rng_seed: int | None = None) -> np.ndarray:
    """Predict a heatmap for one ``(c, H, W)`` stack (or a batch of them).

    A single stack returns an ``(H', W')`` heatmap; a batch returns
    ``(B, H', W')``.  ``H' = H`` for FoveaNet4Sat and ``ceil(H / 2)`` for
    FoveaNet.
    """
    x, single = _as_batch(stack, weights.descriptor)
    out = forward_batch(weights, x, training=training, rng=rng_seed)[:, 0]
    return out[0] if single else out


def predict(weights: ModelWeights, stacks: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Inference over many stacks in batches; returns ``(B, H', W')``."""
    x, _ = _as_batch(stacks, weights.descriptor)
    outs = [forward_batch(weights, x[i:i + batch_size])[:, 0] for i in range(0, len(x), batch_size)]
    return np.concatenate(outs, axis=0)


def save(weights: ModelWeights, path: str | Path) -> None:
    """Write ``weights`` as magic, length-prefixed UTF-8 manifest, then float32 LE arrays."""
    weights.validate()
    manifest = weights.descriptor.to_manifest().encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(manifest)))
    buf.write(manifest)
    for p in weights.params():
        buf.write(np.ascontiguousarray(p, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load(path: str | Path, expected: ArchDescriptor | None = None) -> ModelWeights:
    """Read a weights file; optionally require it to match ``expected``."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 4 or data[:len(MAGIC)] != MAGIC:
        raise WeightsFileError(f"{path}: wrong magic, not a weights file")
    (n,) = struct.unpack_from("<I", data, len(MAGIC))
    start = len(MAGIC) + 4
    if start + n > len(data):
        raise WeightsFileError(f"{path}: truncated header")
    try:
        text = data[start:start + n].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise WeightsFileError(f"{path}: corrupt header") from exc
    descriptor = ArchDescriptor.from_manifest(text)
    if expected is not None and descriptor != expected:
        raise WeightsFileError(f"{path}: descriptor mismatch, file holds {_describe(descriptor)} "
                               f"but {_describe(expected)} was expected")
    offset = start + n
    kernels, biases = [], []
    for layer, shape in enumerate(descriptor.layer_shapes(), start=1):
        for part, shp in (("kernel", shape), ("bias", (shape[0],))):
            nbytes = 4 * int(np.prod(shp))
            if offset + nbytes > len(data):
                raise WeightsFileError(f"{path}: truncated at layer {layer} {part} (expected shape {shp})")
            arr = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shp)
            (kernels if part == "kernel" else biases).append(arr.astype(np.float32))
            offset += nbytes
    if offset != len(data):
        raise WeightsFileError(f"{path}: {len(data) - offset} trailing bytes after layer 8")
    return ModelWeights(descriptor, kernels, biases)


def _describe(d: ArchDescriptor) -> str:
    return f"{d.name}(c={d.channels_in}, width={d.width})"
