"""Network-level differentiable operations composed from autodiff primitives."""

from __future__ import annotations

import numpy as np

from .autodiff import (
    Tensor,
    concat,
    crop,
    einsum,
    exp,
    fold,
    log,
    matmul,
    mul,
    pad,
    power,
    reshape,
    sigmoid,
    take,
    transpose,
    tsum,
    unfold,
    _wrap,
)

__all__ = [
    "add_bias",
    "affine",
    "batchnorm1d",
    "concat",
    "context_splice",
    "conv1d",
    "conv1d_transposed",
    "dropout",
    "leaky_relu",
    "log_softmax",
    "maxpool1d",
    "nll_loss",
    "relu",
    "sigmoid",
]


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise ValueError(f"expected (C, T) or (B, C, T) input, got shape {x.shape}")
    return x, False


def _unbatch(y: Tensor, squeeze: bool) -> Tensor:
    return reshape(y, y.shape[1:]) if squeeze else y


def add_bias(y: Tensor, bias: Tensor | None) -> Tensor:
    if bias is None:
        return y
    return y + reshape(bias, (bias.shape[0], 1))


def conv1d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation along time; ``x`` is (C_in, T) or (B, C_in, T)."""
    x, squeeze = _batched(_wrap(x))
    weight = _wrap(weight)
    c_out, c_in, k = weight.shape
    if x.shape[1] != c_in:
        raise ValueError(f"conv1d: input has {x.shape[1]} channels, weight expects {c_in}")
    if stride < 1 or padding < 0:
        raise ValueError("conv1d: stride must be positive and padding non-negative")
    t_out = (x.shape[2] + 2 * padding - k) // stride + 1
    if t_out < 1:
        raise ValueError(
            f"conv1d: output length {t_out} < 1 for T={x.shape[2]}, K={k}, padding={padding}")
    cols = unfold(pad(x, 2, padding, padding), k, stride)
    y = einsum("bctk,ock->bot", cols, weight)
    return _unbatch(add_bias(y, bias), squeeze)


def conv1d_transposed(x, weight, bias=None, stride: int = 1) -> Tensor:
    """Transposed convolution; ``weight`` is (C_in, C_out, K), output length (T-1)*stride+K."""
    x, squeeze = _batched(_wrap(x))
    weight = _wrap(weight)
    c_in, _, k = weight.shape
    if x.shape[1] != c_in:
        raise ValueError(f"conv1d_transposed: input has {x.shape[1]} channels, weight expects {c_in}")
    if x.shape[2] < 1 or stride < 1:
        raise ValueError("conv1d_transposed: need T >= 1 and positive stride")
    cols = einsum("bct,cok->botk", x, weight)
    y = fold(cols, (x.shape[2] - 1) * stride + k, stride)
    return _unbatch(add_bias(y, bias), squeeze)


def maxpool1d(x, window: int) -> Tensor:
    """Non-overlapping max over the last axis; ties go to the lowest index.

    The argmax is frozen as a constant mask, so the gradient (and the gradient
    of the gradient) is routed to the selected positions only.
    """
    x = _wrap(x)
    t = x.shape[-1]
    if t < window:
        raise ValueError(f"maxpool1d: length {t} shorter than window {window}")
    n = t // window
    xr = reshape(crop(x, -1, 0, n * window), x.shape[:-1] + (n, window))
    mask = np.zeros(xr.shape, dtype=xr.data.dtype)
    np.put_along_axis(mask, np.argmax(xr.data, axis=-1)[..., None], 1.0, axis=-1)
    return tsum(mul(xr, mask), axis=-1)


def relu(x) -> Tensor:
    x = _wrap(x)
    return mul(x, (x.data > 0).astype(x.data.dtype))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = _wrap(x)
    return mul(x, np.where(x.data > 0, 1.0, slope).astype(x.data.dtype))


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _wrap(x)
    shifted = x - x.data.max(axis=axis, keepdims=True)
    return shifted - log(tsum(exp(shifted), axis=axis, keepdims=True))


def dropout(x, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: identity in eval mode."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    x = _wrap(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return mul(x, keep)


def affine(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as (out, in)."""
    y = matmul(_wrap(x), transpose(_wrap(weight)))
    return y if bias is None else y + bias


def batchnorm1d(x, gain, shift, running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Batch normalisation over axis 0 of a (B, F) input.

    Running statistics are updated in place during training.  The biased batch
    variance is used for both normalisation and the running estimate.
    """
    x = _wrap(x)
    if training:
        if x.shape[0] < 2:
            raise ValueError("batchnorm1d needs at least 2 rows in training mode")
        mu = x.mean(axis=0, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=0, keepdims=True)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.data.reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * var.data.reshape(-1)
        xhat = centered * power(var + eps, -0.5)
    else:
        dt = x.data.dtype
        inv = (1.0 / np.sqrt(running_var.astype(dt) + eps)).astype(dt)
        xhat = (x - running_mean.astype(dt)) * inv
    return xhat * gain + shift


def nll_loss(log_probs, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under (N, C) log-probs."""
    log_probs = _wrap(log_probs)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = log_probs.shape
    if labels.shape[0] != n:
        raise ValueError(f"nll_loss: {labels.shape[0]} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"nll_loss: label out of range [0, {c})")
    onehot = np.zeros((n, c), dtype=log_probs.data.dtype)
    onehot[np.arange(n), labels] = 1.0
    return mul(tsum(mul(log_probs, onehot)), -1.0 / n)


def context_index(t: int, radius: int) -> np.ndarray:
    """(T, 2r+1) frame indices t-r..t+r clamped to the utterance."""
    offsets = np.arange(-radius, radius + 1)
    return np.clip(np.arange(t)[:, None] + offsets[None, :], 0, t - 1)


def context_splice(x, radius: int = 5) -> Tensor:
    """(F, T) or (B, F, T) frames -> (B*T, (2r+1)*F) spliced rows, edges replicated."""
    x, _ = _batched(_wrap(x))
    b, f, t = x.shape
    win = 2 * radius + 1
    g = take(x, context_index(t, radius))            # (B, F, T, win)
    g = transpose(g, (0, 2, 3, 1))                   # (B, T, win, F)
    return reshape(g, (b * t, win * f))
