"""Deterministic numpy kernels with explicit backward companions.

Every kernel here is a pure function of its inputs with a fixed reduction
order, so repeated evaluation is bit-identical — a property the reversible
engine leans on (inversion tests, byte-identical CSV runs).  Convolution is
the direct algorithm: an explicit loop over kernel offsets with strided
slices of the padded input and an einsum over channels.  No FFT, no im2col
heuristics, no threading.

Backward companions return gradients with respect to every input that can
carry one.  They are hand-derived vector-Jacobian products; the test suite
checks each against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .tensor import Tensor, assert_finite, wrap


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

@dataclass
class ConvParams:
    """Weights and geometry for a 2-D convolution.

    ``weights`` has shape (out_c, in_c // groups, kh, kw).  ``groups`` splits
    both channel axes: group g consumes input channels [g*icg, (g+1)*icg) and
    produces output channels [g*ocg, (g+1)*ocg).  Depthwise convolution is
    the special case groups == in_c with one input channel per group.
    """

    weights: np.ndarray
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        w = self.weights
        if not isinstance(w, np.ndarray) or w.ndim != 4:
            raise ConfigurationError("conv weights must be a rank-4 ndarray")
        if self.stride < 1 or self.padding < 0 or self.groups < 1:
            raise ConfigurationError(
                f"invalid conv geometry: stride={self.stride} "
                f"padding={self.padding} groups={self.groups}"
            )
        if w.shape[0] % self.groups != 0:
            raise ConfigurationError(
                f"out_channels {w.shape[0]} not divisible by groups {self.groups}"
            )
        if self.bias is not None and self.bias.shape != (w.shape[0],):
            raise ConfigurationError("conv bias shape must be (out_channels,)")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1] * self.groups

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]


def conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ConfigurationError(
            f"convolution output collapsed: size={size} kernel={kernel} "
            f"stride={stride} padding={padding}"
        )
    return out


def _patch(xp: np.ndarray, ky: int, kx: int, oh: int, ow: int, s: int) -> np.ndarray:
    # strided view of the padded input aligned with kernel offset (ky, kx)
    return xp[:, :, ky : ky + (oh - 1) * s + 1 : s, kx : kx + (ow - 1) * s + 1 : s]


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    n, c, h, w = x.shape
    if c != p.in_channels:
        raise ConfigurationError(
            f"conv expects {p.in_channels} input channels, got {c}"
        )
    kh, kw = p.kernel
    s, pad, g = p.stride, p.padding, p.groups
    oh = conv_out_size(h, kh, s, pad)
    ow = conv_out_size(w, kw, s, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    wt = p.weights
    out = np.zeros((n, p.out_channels, oh, ow), dtype=x.dtype)

    depthwise = g == c == p.out_channels and wt.shape[1] == 1
    if g == 1:
        for ky in range(kh):
            for kx in range(kw):
                out += np.einsum(
                    "nihw,oi->nohw", _patch(xp, ky, kx, oh, ow, s), wt[:, :, ky, kx]
                )
    elif depthwise:
        for ky in range(kh):
            for kx in range(kw):
                out += _patch(xp, ky, kx, oh, ow, s) * wt[:, 0, ky, kx][None, :, None, None]
    else:
        icg = c // g
        ocg = p.out_channels // g
        for gi in range(g):
            xs = slice(gi * icg, (gi + 1) * icg)
            os_ = slice(gi * ocg, (gi + 1) * ocg)
            for ky in range(kh):
                for kx in range(kw):
                    out[:, os_] += np.einsum(
                        "nihw,oi->nohw",
                        _patch(xp, ky, kx, oh, ow, s)[:, xs],
                        wt[os_, :, ky, kx],
                    )
    if p.bias is not None:
        out += p.bias[None, :, None, None]
    return wrap(out, "conv2d")


def conv2d_backward(
    x: Tensor, p: ConvParams, gy: Tensor
) -> tuple[Tensor, np.ndarray, np.ndarray | None]:
    """VJP of conv2d: returns (grad_x, grad_weights, grad_bias)."""
    n, c, h, w = x.shape
    kh, kw = p.kernel
    s, pad, g = p.stride, p.padding, p.groups
    oh, ow = gy.h, gy.w
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(p.weights)
    gyd = gy.data

    depthwise = g == c == p.out_channels and p.weights.shape[1] == 1
    if g == 1:
        for ky in range(kh):
            for kx in range(kw):
                patch = _patch(xp, ky, kx, oh, ow, s)
                gw[:, :, ky, kx] = np.einsum("nohw,nihw->oi", gyd, patch)
                _patch(gxp, ky, kx, oh, ow, s)[...] += np.einsum(
                    "nohw,oi->nihw", gyd, p.weights[:, :, ky, kx]
                )
    elif depthwise:
        for ky in range(kh):
            for kx in range(kw):
                patch = _patch(xp, ky, kx, oh, ow, s)
                gw[:, 0, ky, kx] = (gyd * patch).sum(axis=(0, 2, 3))
                _patch(gxp, ky, kx, oh, ow, s)[...] += (
                    gyd * p.weights[:, 0, ky, kx][None, :, None, None]
                )
    else:
        icg = c // g
        ocg = p.out_channels // g
        for gi in range(g):
            xs = slice(gi * icg, (gi + 1) * icg)
            os_ = slice(gi * ocg, (gi + 1) * ocg)
            for ky in range(kh):
                for kx in range(kw):
                    patch = _patch(xp, ky, kx, oh, ow, s)[:, xs]
                    gw[os_, :, ky, kx] = np.einsum("nohw,nihw->oi", gyd[:, os_], patch)
                    _patch(gxp, ky, kx, oh, ow, s)[:, xs] += np.einsum(
                        "nohw,oi->nihw", gyd[:, os_], p.weights[os_, :, ky, kx]
                    )
    gb = gyd.sum(axis=(0, 2, 3)) if p.bias is not None else None
    gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
    return wrap(np.ascontiguousarray(gx), "conv2d_backward"), gw, gb


def conv2d_macs(in_shape: tuple[int, int, int, int], p: ConvParams) -> int:
    """Analytic multiply-accumulate count: out_elems * in_c_per_group * kh * kw."""
    n, c, h, w = in_shape
    kh, kw = p.kernel
    oh = conv_out_size(h, kh, p.stride, p.padding)
    ow = conv_out_size(w, kw, p.stride, p.padding)
    return n * p.out_channels * oh * ow * (c // p.groups) * kh * kw


# ---------------------------------------------------------------------------
# bilinear upsampling
# ---------------------------------------------------------------------------

def _bilinear_axis(in_size: int, factor: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Half-pixel-center source indices and blend weights for one axis.

    Output position i samples source coordinate (i + 0.5)/factor - 0.5,
    clamped to the image border.
    """
    out = in_size * factor
    src = (np.arange(out, dtype=np.float64) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, float(in_size - 1))
    i0 = np.minimum(np.floor(src).astype(np.int64), in_size - 1)
    i1 = np.minimum(i0 + 1, in_size - 1)
    frac = src - i0
    return i0, i1, frac


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ConfigurationError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return Tensor(x.data.copy())
    iy0, iy1, fy = _bilinear_axis(x.h, factor)
    ix0, ix1, fx = _bilinear_axis(x.w, factor)
    fy = fy.astype(x.dtype)[:, None]
    fx = fx.astype(x.dtype)[None, :]
    d = x.data
    top = (1 - fx) * d[:, :, iy0[:, None], ix0[None, :]] + fx * d[:, :, iy0[:, None], ix1[None, :]]
    bot = (1 - fx) * d[:, :, iy1[:, None], ix0[None, :]] + fx * d[:, :, iy1[:, None], ix1[None, :]]
    out = (1 - fy) * top + fy * bot
    return wrap(out, "bilinear_upsample")


def bilinear_upsample_backward(in_shape, factor: int, gy: Tensor) -> Tensor:
    """Scatter-add transpose of bilinear_upsample (deterministic np.add.at)."""
    if factor == 1:
        return Tensor(gy.data.copy())
    n, c, h, w = in_shape
    iy0, iy1, fy = _bilinear_axis(h, factor)
    ix0, ix1, fx = _bilinear_axis(w, factor)
    fy = fy.astype(gy.dtype)[:, None]
    fx = fx.astype(gy.dtype)[None, :]
    gx = np.zeros((n, c, h, w), dtype=gy.dtype)
    g = gy.data
    np.add.at(gx, (slice(None), slice(None), iy0[:, None], ix0[None, :]), g * (1 - fy) * (1 - fx))
    np.add.at(gx, (slice(None), slice(None), iy0[:, None], ix1[None, :]), g * (1 - fy) * fx)
    np.add.at(gx, (slice(None), slice(None), iy1[:, None], ix0[None, :]), g * fy * (1 - fx))
    np.add.at(gx, (slice(None), slice(None), iy1[:, None], ix1[None, :]), g * fy * fx)
    return wrap(gx, "bilinear_upsample_backward")


# ---------------------------------------------------------------------------
# space-to-depth / depth-to-space (exactly invertible pixel shuffle)
# ---------------------------------------------------------------------------

def space_to_depth(x: Tensor, block: int) -> Tensor:
    n, c, h, w = x.shape
    if block < 1 or h % block or w % block:
        raise ConfigurationError(
            f"space_to_depth block {block} does not divide spatial dims {(h, w)}"
        )
    v = x.data.reshape(n, c, h // block, block, w // block, block)
    v = v.transpose(0, 1, 3, 5, 2, 4)  # (n, c, by, bx, h/b, w/b)
    return Tensor(np.ascontiguousarray(v).reshape(n, c * block * block, h // block, w // block))


def depth_to_space(x: Tensor, block: int) -> Tensor:
    n, c, h, w = x.shape
    if block < 1 or c % (block * block):
        raise ConfigurationError(
            f"depth_to_space block {block} does not divide channel count {c}"
        )
    co = c // (block * block)
    v = x.data.reshape(n, co, block, block, h, w)
    v = v.transpose(0, 1, 4, 2, 5, 3)  # (n, co, h, by, w, bx)
    return Tensor(np.ascontiguousarray(v).reshape(n, co, h * block, w * block))


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ConfigurationError(f"elementwise add shape mismatch {a.shape} vs {b.shape}")
    return wrap(a.data + b.data, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ConfigurationError(f"elementwise sub shape mismatch {a.shape} vs {b.shape}")
    return wrap(a.data - b.data, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ConfigurationError(f"elementwise mul shape mismatch {a.shape} vs {b.shape}")
    return wrap(a.data * b.data, "mul")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def hard_swish(x: Tensor) -> Tensor:
    """x * clamp(x + 3, 0, 6) / 6 — piecewise-polynomial swish."""
    d = x.data
    return wrap(d * np.clip(d + 3.0, 0.0, 6.0) / 6.0, "hard_swish")


def hard_swish_backward(x: Tensor, gy: Tensor) -> Tensor:
    d = x.data
    slope = np.where(d <= -3.0, 0.0, np.where(d >= 3.0, 1.0, (2.0 * d + 3.0) / 6.0))
    return wrap(gy.data * slope.astype(gy.dtype), "hard_swish_backward")


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, gy: np.ndarray) -> np.ndarray:
    return gy * (x > 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free at both tails
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def sigmoid_backward(y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    return gy * y * (1.0 - y)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

@dataclass
class NormState:
    """Per-channel affine batch-norm state.

    ``momentum`` is the decay of the running averages:
    running <- momentum * running + (1 - momentum) * batch_stat.
    Biased (1/m) batch variance is used both for normalization and for the
    running average.  ``last_step_key`` makes running-stat updates idempotent
    per forward invocation: a recomputed forward carrying the same step key
    normalizes identically but leaves the running averages untouched.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    epsilon: float = 1e-3
    last_step_key: object | None = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise ConfigurationError(f"batch-norm momentum must be in (0, 1), got {self.momentum}")
        if self.epsilon <= 0.0:
            raise ConfigurationError(f"batch-norm epsilon must be > 0, got {self.epsilon}")

    @staticmethod
    def create(channels: int, dtype, momentum: float = 0.9, epsilon: float = 1e-3,
               zero_gamma: bool = False) -> "NormState":
        init = np.zeros if zero_gamma else np.ones
        return NormState(
            gamma=init(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            epsilon=epsilon,
        )


def batch_norm(x: Tensor, s: NormState, train: bool = True,
               step_key: object | None = None) -> tuple[Tensor, tuple]:
    """Normalize per channel; returns (y, cache) for the backward pass.

    Train mode normalizes by the current batch statistics and folds them
    into the running averages (at most once per ``step_key``).  Eval mode
    normalizes by the running averages and never mutates state.
    """
    d = x.data
    if train:
        mean = d.mean(axis=(0, 2, 3))
        var = d.var(axis=(0, 2, 3))  # biased
        if step_key is None or step_key != s.last_step_key:
            m = s.momentum
            s.running_mean[...] = m * s.running_mean + (1.0 - m) * mean
            s.running_var[...] = m * s.running_var + (1.0 - m) * var
            s.last_step_key = step_key
    else:
        mean = s.running_mean
        var = s.running_var
    inv_std = 1.0 / np.sqrt(var + np.asarray(s.epsilon, dtype=d.dtype))
    xhat = (d - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = s.gamma[None, :, None, None] * xhat + s.beta[None, :, None, None]
    cache = (xhat, inv_std, train)
    return wrap(y, "batch_norm"), cache


def batch_norm_backward(
    cache: tuple, s: NormState, gy: Tensor
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """VJP of batch_norm: returns (grad_x, grad_gamma, grad_beta).

    Train mode differentiates through the batch statistics themselves.
    """
    xhat, inv_std, train = cache
    g = gy.data
    dgamma = (g * xhat).sum(axis=(0, 2, 3))
    dbeta = g.sum(axis=(0, 2, 3))
    dxhat = g * s.gamma[None, :, None, None]
    if train:
        mu1 = dxhat.mean(axis=(0, 2, 3), keepdims=True)
        mu2 = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        gx = inv_std[None, :, None, None] * (dxhat - mu1 - xhat * mu2)
    else:
        gx = inv_std[None, :, None, None] * dxhat
    return wrap(gx, "batch_norm_backward"), dgamma, dbeta


# ---------------------------------------------------------------------------
# pooling / dense
# ---------------------------------------------------------------------------

def global_avg_pool(x: Tensor) -> Tensor:
    return wrap(x.data.mean(axis=(2, 3), keepdims=True), "global_avg_pool")


def global_avg_pool_backward(in_shape, gy: Tensor) -> Tensor:
    n, c, h, w = in_shape
    gx = np.broadcast_to(gy.data / (h * w), (n, c, h, w))
    return wrap(np.ascontiguousarray(gx), "global_avg_pool_backward")


def dense(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Affine map on flat features; ``weights`` is (out_features, in_features)."""
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[1]:
        raise ConfigurationError(
            f"dense shape mismatch: x {x.shape} vs weights {weights.shape}"
        )
    y = x @ weights.T
    if bias is not None:
        y = y + bias[None, :]
    assert_finite(y, "dense")
    return y


def dense_backward(
    x: np.ndarray, weights: np.ndarray, gy: np.ndarray, has_bias: bool = True
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    gx = gy @ weights
    gw = gy.T @ x
    gb = gy.sum(axis=0) if has_bias else None
    return gx, gw, gb


def dense_macs(in_features: int, out_features: int, batch: int = 1) -> int:
    return batch * in_features * out_features
