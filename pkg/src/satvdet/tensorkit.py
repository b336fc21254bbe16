"""Dense 4-D tensor kernels with hand-written gradients.

Tensors are plain ``numpy`` arrays laid out as ``(batch, channels, height,
width)``.  Every operation preserves the dtype of its inputs, so training
runs in float32 while gradient checks can feed float64 arrays through the
exact same code path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_DTYPE = np.float32


class TensorShapeError(ValueError):
    """Raised when tensor shapes are inconsistent for an operation."""


def check_tensor4(x: np.ndarray, name: str = "input") -> None:
    if x.ndim != 4:
        raise TensorShapeError(f"{name} must be 4-D (batch, channels, height, width), got shape {x.shape}")
    if min(x.shape) < 1:
        raise TensorShapeError(f"{name} has an empty dimension: {x.shape}")


# Patch matrices are built per batch chunk so they stay cache-sized.
_CHUNK_ELEMENTS = 1 << 21


def _im2col(x: np.ndarray, kh: int, kw: int, padding: int) -> np.ndarray:
    """Unfold ``x`` (B, C, H, W) into a ``(B*Ho*Wo, kh*kw*C)`` patch matrix."""
    b, c, h, w = x.shape
    xl = x.transpose(0, 2, 3, 1)
    if padding:
        xl = np.pad(xl, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    ho, wo = xl.shape[1] - kh + 1, xl.shape[2] - kw + 1
    cols = np.empty((b, ho, wo, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xl[:, i:i + ho, j:j + wo, :]
    return cols.reshape(b * ho * wo, kh * kw * c)


def _chunks(b: int, per_sample: int):
    step = max(1, _CHUNK_ELEMENTS // max(per_sample, 1))
    for start in range(0, b, step):
        yield slice(start, min(b, start + step))


def conv2d_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None = None,
                   padding: int | None = None) -> np.ndarray:
    """Stride-1 cross-correlation with symmetric zero padding.

    ``padding`` defaults to ``kH // 2`` ("same" output size for odd kernels).
    """
    check_tensor4(x)
    if kernel.ndim != 4:
        raise TensorShapeError(f"kernel must be (out_ch, in_ch, kH, kW), got {kernel.shape}")
    out_ch, in_ch, kh, kw = kernel.shape
    if x.shape[1] != in_ch:
        raise TensorShapeError(f"input has {x.shape[1]} channels but kernel expects {in_ch}")
    if bias is not None and bias.shape != (out_ch,):
        raise TensorShapeError(f"bias must have shape ({out_ch},), got {bias.shape}")
    if padding is None:
        padding = kh // 2
    b, _, h, w = x.shape
    ho, wo = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    if ho < 1 or wo < 1:
        raise TensorShapeError(f"kernel {kh}x{kw} too large for input {h}x{w} with padding {padding}")
    wmat = kernel.transpose(0, 2, 3, 1).reshape(out_ch, -1).T
    out = np.empty((b, out_ch, ho, wo), dtype=np.result_type(x, kernel))
    for sl in _chunks(b, ho * wo * kh * kw * in_ch):
        res = _im2col(x[sl], kh, kw, padding) @ wmat
        out[sl] = res.reshape(-1, ho, wo, out_ch).transpose(0, 3, 1, 2)
    if bias is not None:
        out += bias.reshape(1, -1, 1, 1)
    return out


def conv2d_backward(upstream: np.ndarray, saved_input: np.ndarray, kernel: np.ndarray,
                    padding: int | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of :func:`conv2d_forward` w.r.t. input, kernel and bias."""
    check_tensor4(upstream, "upstream")
    check_tensor4(saved_input, "saved_input")
    out_ch, in_ch, kh, kw = kernel.shape
    if padding is None:
        padding = kh // 2
    b, c, h, w = saved_input.shape
    ho, wo = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    if c != in_ch or upstream.shape != (b, out_ch, ho, wo):
        raise TensorShapeError(
            f"upstream {upstream.shape} inconsistent with input {saved_input.shape} and kernel {kernel.shape}")
    if padding > kh - 1 or padding > kw - 1:
        raise TensorShapeError("padding larger than kernel extent is not supported")

    gk = np.zeros((kh * kw * in_ch, out_ch), dtype=np.result_type(upstream, saved_input))
    for sl in _chunks(b, ho * wo * kh * kw * in_ch):
        g2 = upstream[sl].transpose(0, 2, 3, 1).reshape(-1, out_ch)
        gk += _im2col(saved_input[sl], kh, kw, padding).T @ g2
    grad_kernel = gk.T.reshape(out_ch, kh, kw, in_ch).transpose(0, 3, 1, 2)
    grad_bias = upstream.sum(axis=(0, 2, 3))
    # correlating with the flipped, channel-transposed kernel is the adjoint map
    flipped = np.ascontiguousarray(kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    grad_input = conv2d_forward(upstream, flipped, None, padding=kh - 1 - padding)
    return grad_input, np.ascontiguousarray(grad_kernel), grad_bias


def leaky_relu(x: np.ndarray, slope: float = 0.01) -> np.ndarray:
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"slope must lie in [0, 1), got {slope}")
    return np.where(x >= 0, x, x * x.dtype.type(slope))


def leaky_relu_backward(upstream: np.ndarray, saved_input: np.ndarray, slope: float = 0.01) -> np.ndarray:
    return np.where(saved_input >= 0, upstream, upstream * upstream.dtype.type(slope))


def maxpool2x2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 / stride-2 max pooling.

    Odd spatial sizes are padded right/bottom with ``-inf``.  Returns the
    pooled tensor and the flat (0..3, row-major within the window) argmax of
    each window; ties go to the first index.
    """
    check_tensor4(x)
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        x = np.pad(x, ((0, 0), (0, 0), (0, h % 2), (0, w % 2)), constant_values=-np.inf)
    hp, wp = x.shape[2] // 2, x.shape[3] // 2
    windows = x.reshape(b, c, hp, 2, wp, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, hp, wp, 4)
    argmax = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]
    return out, argmax


def maxpool2x2_backward(upstream: np.ndarray, argmax: np.ndarray, input_shape: tuple[int, ...]) -> np.ndarray:
    b, c, h, w = input_shape
    hp, wp = argmax.shape[2], argmax.shape[3]
    if upstream.shape != argmax.shape:
        raise TensorShapeError(f"upstream {upstream.shape} does not match pooled shape {argmax.shape}")
    windows = np.zeros((b, c, hp, wp, 4), dtype=upstream.dtype)
    np.put_along_axis(windows, argmax[..., None], upstream[..., None], axis=-1)
    grad = windows.reshape(b, c, hp, wp, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * hp, 2 * wp)
    return np.ascontiguousarray(grad[:, :, :h, :w])


def dropout(x: np.ndarray, rate: float, rng: np.random.Generator | int | None = None,
            training: bool = True) -> tuple[np.ndarray, np.ndarray | None]:
    """Inverted dropout.  Returns ``(output, scale_mask)``; mask is ``None`` at inference."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    rng = np.random.default_rng(rng)
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return x * mask, mask


def dropout_backward(upstream: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    return upstream if mask is None else upstream * mask


def mse_loss(pred: np.ndarray, target: np.ndarray) -> float:
    if pred.shape != target.shape:
        raise TensorShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    diff = pred - target
    return float(np.mean(diff * diff, dtype=np.float64))


def mse_loss_backward(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    if pred.shape != target.shape:
        raise TensorShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    return (pred - target) * pred.dtype.type(2.0 / pred.size)


LOSSES = {"mse": (mse_loss, mse_loss_backward)}


@dataclass
class AdamState:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")

    @classmethod
    def for_params(cls, params: list[np.ndarray], **kwargs) -> "AdamState":
        state = cls(**kwargs)
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
        return state


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise TensorShapeError("params, grads and Adam moments must have equal length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** state.step
    corr2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape or p.shape != m.shape:
            raise TensorShapeError(f"parameter {p.shape} and gradient {g.shape} differ")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / corr1
        v_hat = v / corr2
        p -= (state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(p.dtype)
