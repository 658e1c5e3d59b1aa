"""1D neural-network kernels with explicit forward and backward passes.

Feature maps are float64 arrays shaped (length, channels) or, batched,
(batch, length, channels); dense activations are (n,) or (batch, n).
Convolutions use `same` zero padding anchored at the kernel centre: output
position t reads input positions stride*t + j - k//2 for j in [0, k), with
out-of-range positions treated as zero, so the output length is
ceil(length / stride) for every input length.

All kernels are pure: no global state, and dropout takes its randomness
from a caller-owned Rng.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rng import Rng


class ShapeError(ValueError):
    """Operand shapes are inconsistent."""


class NonFiniteError(FloatingPointError):
    """A kernel produced NaN or Inf."""


def ensure_finite(arr: np.ndarray, what: str) -> None:
    # sum() is a cheap full reduction; it is non-finite iff any element is
    # (true here because magnitudes stay far below float64 overflow).
    if not np.isfinite(np.sum(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


def _batched(x: np.ndarray, feature_map: bool) -> tuple[np.ndarray, bool]:
    want = 3 if feature_map else 2
    if x.ndim == want - 1:
        return x[None], True
    if x.ndim != want:
        kind = "feature map" if feature_map else "dense input"
        raise ShapeError(f"{kind} must have {want - 1} or {want} dims, got shape {x.shape}")
    return x, False


# ---------------------------------------------------------------------------
# conv1d

def conv_output_len(length: int, stride: int) -> int:
    return -(-length // stride)  # ceil(length / stride)


def conv1d_forward(x, weights, bias, stride: int = 1):
    """`same` 1D convolution.

    x: (L, Cin) or (B, L, Cin); weights: (k, Cin, Cout), k odd; bias: (Cout,).
    Returns (y, cache) with y of length ceil(L / stride).
    """
    x, squeeze = _batched(np.asarray(x, dtype=np.float64), feature_map=True)
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if weights.ndim != 3:
        raise ShapeError(f"conv weights must be (k, Cin, Cout), got shape {weights.shape}")
    k, cin, cout = weights.shape
    if k % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {k}")
    if x.shape[-1] != cin:
        raise ShapeError(f"input has {x.shape[-1]} channels, weights expect {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} does not match {cout} filters")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")

    batch, length, _ = x.shape
    out_len = conv_output_len(length, stride)
    pad_left = k // 2
    # rightmost read is stride*(out_len-1) + (k-1) - pad_left
    pad_right = max(0, stride * (out_len - 1) + k - 1 - pad_left - (length - 1))
    xp = np.pad(x, ((0, 0), (pad_left, pad_right), (0, 0)))
    windows = sliding_window_view(xp, k, axis=1)[:, : stride * out_len : stride]
    y = np.einsum("blck,kco->blo", windows, weights, optimize=True) + bias
    ensure_finite(y, "conv1d output")
    cache = (xp, (batch, length, cin), stride, pad_left, out_len)
    return (y[0] if squeeze else y), cache


def conv1d_backward(grad_out, cache, weights):
    """Gradients of conv1d_forward. Returns (grad_input, grad_weights, grad_bias)."""
    xp, (batch, length, cin), stride, pad_left, out_len = cache
    weights = np.asarray(weights, dtype=np.float64)
    k = weights.shape[0]
    grad_out, squeeze = _batched(np.asarray(grad_out, dtype=np.float64), feature_map=True)
    if grad_out.shape[1] != out_len or grad_out.shape[2] != weights.shape[2]:
        raise ShapeError(
            f"grad_out shape {grad_out.shape[1:]} does not match forward output "
            f"({out_len}, {weights.shape[2]})"
        )

    windows = sliding_window_view(xp, k, axis=1)[:, : stride * out_len : stride]
    grad_b = grad_out.sum(axis=(0, 1))
    grad_w = np.einsum("blck,blo->kco", windows, grad_out, optimize=True)
    grad_xp = np.zeros_like(xp)
    for j in range(k):
        grad_xp[:, j : j + stride * out_len : stride] += grad_out @ weights[j].T
    grad_x = grad_xp[:, pad_left : pad_left + length]
    ensure_finite(grad_x, "conv1d grad_input")
    return (grad_x[0] if squeeze else grad_x), grad_w, grad_b


# ---------------------------------------------------------------------------
# dense

def dense_forward(x, weights, bias, activation: str = "linear"):
    """Affine map plus activation ('linear', 'relu' or 'sigmoid')."""
    x, squeeze = _batched(np.asarray(x, dtype=np.float64), feature_map=False)
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if weights.ndim != 2 or x.shape[-1] != weights.shape[0]:
        raise ShapeError(
            f"dense input width {x.shape[-1]} does not match weights {weights.shape}"
        )
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"bias shape {bias.shape} does not match {weights.shape[1]} outputs")
    z = x @ weights + bias
    if activation == "linear":
        y = z
    elif activation == "relu":
        y = np.maximum(z, 0.0)
    elif activation == "sigmoid":
        y = sigmoid(z)
    else:
        raise ValueError(f"unknown activation {activation!r}")
    ensure_finite(y, "dense output")
    cache = (x, y, activation)
    return (y[0] if squeeze else y), cache


def dense_backward(grad_out, cache, weights):
    """Gradients of dense_forward. Returns (grad_input, grad_weights, grad_bias)."""
    x, y, activation = cache
    weights = np.asarray(weights, dtype=np.float64)
    grad_out, squeeze = _batched(np.asarray(grad_out, dtype=np.float64), feature_map=False)
    if activation == "linear":
        grad_z = grad_out
    elif activation == "relu":
        grad_z = grad_out * (y > 0.0)
    elif activation == "sigmoid":
        grad_z = grad_out * y * (1.0 - y)
    else:
        raise ValueError(f"unknown activation {activation!r}")
    grad_w = x.T @ grad_z
    grad_b = grad_z.sum(axis=0)
    grad_x = grad_z @ weights.T
    ensure_finite(grad_x, "dense grad_input")
    return (grad_x[0] if squeeze else grad_x), grad_w, grad_b


# ---------------------------------------------------------------------------
# elementwise / pooling

def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(grad_out, y):
    """Subgradient at zero is zero (mask on the forward output)."""
    return np.asarray(grad_out) * (y > 0.0)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(grad_out, y):
    return np.asarray(grad_out) * y * (1.0 - y)


def global_avg_pool(x):
    """Mean over the temporal axis: (..., L, C) -> (..., C)."""
    x, squeeze = _batched(np.asarray(x, dtype=np.float64), feature_map=True)
    y = x.mean(axis=1)
    return (y[0] if squeeze else y), x.shape[1]


def global_avg_pool_backward(grad_out, length: int):
    grad_out, squeeze = _batched(np.asarray(grad_out, dtype=np.float64), feature_map=False)
    g = np.repeat(grad_out[:, None, :] / length, length, axis=1)
    return g[0] if squeeze else g


def dropout_forward(x, rate: float, rng: Rng | None, training: bool):
    """Inverted dropout; identity when not training or rate == 0.

    The mask consumes one uniform per element in C order; an element is
    dropped when its uniform is < rate, survivors are scaled by 1/(1-rate).
    """
    x = np.asarray(x, dtype=np.float64)
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("training-mode dropout needs an Rng")
    keep = rng.uniforms(x.size).reshape(x.shape) >= rate
    mask = keep / (1.0 - rate)
    return x * mask, mask


def dropout_backward(grad_out, mask):
    if mask is None:
        return np.asarray(grad_out)
    return np.asarray(grad_out) * mask


# ---------------------------------------------------------------------------
# gradient checking

@dataclass(frozen=True)
class LayerSpec:
    """Description of a single layer for construction and gradient checking."""

    kind: str  # conv1d | dense | gap | relu | sigmoid | dropout | add | flatten
    kernel: int = 1
    stride: int = 1
    in_channels: int = 1
    out_channels: int = 1
    dropout_rate: float = 0.0


def _init_uniform(rng: Rng, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform_array(shape, -limit, limit)


def gradient_check(layer: LayerSpec, x: np.ndarray, epsilon: float = 1e-6,
                   seed: int = 0) -> float:
    """Compare analytic gradients with central finite differences.

    Runs the layer on `x` with seeded parameters, projects the output onto a
    fixed random direction to get a scalar loss, and differences every
    parameter and input element. Returns the max relative error, where the
    denominator is floored at 1e-3 so that near-zero gradient pairs compare
    on the finite-difference noise floor.
    """
    x = np.asarray(x, dtype=np.float64)
    ensure_finite(x, "gradient_check input")
    rng = Rng(seed)

    if layer.kind == "conv1d":
        w = _init_uniform(rng, (layer.kernel, layer.in_channels, layer.out_channels),
                          layer.kernel * layer.in_channels, layer.kernel * layer.out_channels)
        b = rng.uniforms(layer.out_channels, -0.1, 0.1)
        y, cache = conv1d_forward(x, w, b, layer.stride)
        proj = rng.uniform_array(y.shape, -1.0, 1.0)
        gx, gw, gb = conv1d_backward(proj, cache, w)
        analytic = [gw, gb, gx]
        numeric = [_fd(lambda v: (conv1d_forward(x, v, b, layer.stride)[0] * proj).sum(), w, epsilon),
                   _fd(lambda v: (conv1d_forward(x, w, v, layer.stride)[0] * proj).sum(), b, epsilon),
                   _fd(lambda v: (conv1d_forward(v, w, b, layer.stride)[0] * proj).sum(), x, epsilon)]
    elif layer.kind == "dense":
        w = _init_uniform(rng, (layer.in_channels, layer.out_channels),
                          layer.in_channels, layer.out_channels)
        b = rng.uniforms(layer.out_channels, -0.1, 0.1)
        y, cache = dense_forward(x, w, b, "linear")
        proj = rng.uniform_array(y.shape, -1.0, 1.0)
        gx, gw, gb = dense_backward(proj, cache, w)
        analytic = [gw, gb, gx]
        numeric = [_fd(lambda v: (dense_forward(x, v, b)[0] * proj).sum(), w, epsilon),
                   _fd(lambda v: (dense_forward(x, w, v)[0] * proj).sum(), b, epsilon),
                   _fd(lambda v: (dense_forward(v, w, b)[0] * proj).sum(), x, epsilon)]
    elif layer.kind == "gap":
        y, length = global_avg_pool(x)
        proj = rng.uniform_array(y.shape, -1.0, 1.0)
        analytic = [global_avg_pool_backward(proj, length)]
        numeric = [_fd(lambda v: (global_avg_pool(v)[0] * proj).sum(), x, epsilon)]
    elif layer.kind == "relu":
        y = relu(x)
        proj = rng.uniform_array(y.shape, -1.0, 1.0)
        analytic = [relu_backward(proj, y)]
        numeric = [_fd(lambda v: (relu(v) * proj).sum(), x, epsilon)]
    elif layer.kind == "sigmoid":
        y = sigmoid(x)
        proj = rng.uniform_array(y.shape, -1.0, 1.0)
        analytic = [sigmoid_backward(proj, y)]
        numeric = [_fd(lambda v: (sigmoid(v) * proj).sum(), x, epsilon)]
    else:
        raise ValueError(f"gradient_check does not support layer kind {layer.kind!r}")

    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-3)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def _fd(f, x: np.ndarray, epsilon: float) -> np.ndarray:
    """Central finite differences of scalar f over every element of x."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + epsilon
        hi = f(x)
        flat[i] = old - epsilon
        lo = f(x)
        flat[i] = old
        gf[i] = (hi - lo) / (2.0 * epsilon)
    return g
