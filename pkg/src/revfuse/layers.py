"""Parameterized layers built on the raw kernels.

Each layer owns its numpy parameter arrays (updated in place by the
optimizer), exposes them as ordered ``(name, array)`` pairs, and implements
an explicit forward-with-cache / backward-from-cache pair.  Caches hold
exactly the tensors the hand-derived VJPs need, which is what lets a
stored-mode backward run with zero forward re-evaluation.
"""

from __future__ import annotations

import math

import numpy as np

from . import kernels as K
from .context import ExecContext
from .errors import ConfigurationError
from .tensor import Tensor


def _kaiming(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d:
    """Convolution layer; weights use Kaiming-normal init, bias optional."""

    def __init__(self, name: str, in_c: int, out_c: int, kernel: int, *,
                 stride: int = 1, padding: int = 0, groups: int = 1,
                 bias: bool = False, rng: np.random.Generator, dtype):
        fan_in = (in_c // groups) * kernel * kernel
        weights = _kaiming(rng, (out_c, in_c // groups, kernel, kernel), fan_in, dtype)
        b = np.zeros(out_c, dtype=dtype) if bias else None
        self.name = name
        self.params = K.ConvParams(weights, b, stride, padding, groups)
        if in_c != self.params.in_channels:
            raise ConfigurationError(
                f"{name}: groups {groups} do not divide in_channels {in_c}"
            )

    def forward(self, x: Tensor, ctx: ExecContext | None = None):
        if ctx:
            ctx.count("conv2d")
        y = K.conv2d(x, self.params)
        return y, (x,)

    def backward(self, cache, gy: Tensor):
        (x,) = cache
        gx, gw, gb = K.conv2d_backward(x, self.params, gy)
        grads = {f"{self.name}.weight": gw}
        if gb is not None:
            grads[f"{self.name}.bias"] = gb
        return gx, grads

    def parameters(self):
        out = [(f"{self.name}.weight", self.params.weights)]
        if self.params.bias is not None:
            out.append((f"{self.name}.bias", self.params.bias))
        return out

    def out_shape(self, in_shape):
        n, c, h, w = in_shape
        kh, kw = self.params.kernel
        oh = K.conv_out_size(h, kh, self.params.stride, self.params.padding)
        ow = K.conv_out_size(w, kw, self.params.stride, self.params.padding)
        return (n, self.params.out_channels, oh, ow)

    def macs(self, in_shape) -> int:
        return K.conv2d_macs(in_shape, self.params)


class BatchNorm:
    """Batch normalization over (n, h, w) per channel.

    ``zero_gamma`` zero-initializes the scale so the layer (and anything it
    terminates) starts as the zero map — the identity-at-init trick for
    residual fusion transforms.
    """

    def __init__(self, name: str, channels: int, *, dtype, momentum: float = 0.9,
                 epsilon: float = 1e-3, zero_gamma: bool = False):
        self.name = name
        self.state = K.NormState.create(channels, dtype, momentum, epsilon, zero_gamma)

    def forward(self, x: Tensor, ctx: ExecContext | None = None):
        if ctx:
            ctx.count("batch_norm")
        train = ctx.train if ctx else True
        step_key = ctx.step_key if ctx else None
        y, cache = K.batch_norm(x, self.state, train=train, step_key=step_key)
        return y, cache

    def backward(self, cache, gy: Tensor):
        gx, dgamma, dbeta = K.batch_norm_backward(cache, self.state, gy)
        return gx, {f"{self.name}.gamma": dgamma, f"{self.name}.beta": dbeta}

    def parameters(self):
        return [(f"{self.name}.gamma", self.state.gamma),
                (f"{self.name}.beta", self.state.beta)]


class SqueezeExcite:
    """Channel gating: pool -> bottleneck dense -> relu -> dense -> sigmoid."""

    def __init__(self, name: str, channels: int, ratio: float, *,
                 rng: np.random.Generator, dtype):
        if not 0.0 < ratio <= 1.0:
            raise ConfigurationError(f"{name}: squeeze ratio must be in (0, 1], got {ratio}")
        hidden = max(1, round(channels * ratio))
        self.name = name
        self.w1 = _kaiming(rng, (hidden, channels), channels, dtype)
        self.b1 = np.zeros(hidden, dtype=dtype)
        self.w2 = _kaiming(rng, (channels, hidden), hidden, dtype)
        self.b2 = np.zeros(channels, dtype=dtype)

    def forward(self, x: Tensor, ctx: ExecContext | None = None):
        if ctx:
            ctx.count("squeeze_excite")
        n, c, h, w = x.shape
        pooled = K.global_avg_pool(x)              # (n, c, 1, 1)
        s = pooled.data.reshape(n, c)
        z1 = K.dense(s, self.w1, self.b1)
        a1 = K.relu(z1)
        z2 = K.dense(a1, self.w2, self.b2)
        gate = K.sigmoid(z2)                       # (n, c)
        y = Tensor(x.data * gate[:, :, None, None])
        cache = (x, s, z1, a1, gate)
        return y, cache

    def backward(self, cache, gy: Tensor):
        x, s, z1, a1, gate = cache
        n, c, h, w = x.shape
        g = gy.data
        gx_direct = g * gate[:, :, None, None]
        ggate = (g * x.data).sum(axis=(2, 3))      # (n, c)
        gz2 = K.sigmoid_backward(gate, ggate)
        ga1, gw2, gb2 = K.dense_backward(a1, self.w2, gz2)
        gz1 = K.relu_backward(z1, ga1)
        gs, gw1, gb1 = K.dense_backward(s, self.w1, gz1)
        gx = gx_direct + (gs / (h * w))[:, :, None, None]
        grads = {
            f"{self.name}.w1": gw1, f"{self.name}.b1": gb1,
            f"{self.name}.w2": gw2, f"{self.name}.b2": gb2,
        }
        return Tensor(gx), grads

    def parameters(self):
        return [(f"{self.name}.w1", self.w1), (f"{self.name}.b1", self.b1),
                (f"{self.name}.w2", self.w2), (f"{self.name}.b2", self.b2)]

    def macs(self, in_shape) -> int:
        n, c = in_shape[0], in_shape[1]
        hidden = self.w1.shape[0]
        return K.dense_macs(c, hidden, n) + K.dense_macs(hidden, c, n)


class MBConv:
    """Inverted-bottleneck block: 1x1 expand, depthwise conv, optional
    squeeze-excite, 1x1 project; batch norm + hard-swish between stages.

    With ``zero_final_gamma`` the projection norm starts at zero, so a fresh
    block computes the zero map — used for residual branches that must leave
    the network an identity at initialization.  The expansion stage is
    omitted when the expansion ratio is 1.
    """

    def __init__(self, name: str, in_c: int, out_c: int, *, kernel: int, stride: int,
                 padding: int, expansion: int = 1, se_ratio: float | None = None,
                 zero_final_gamma: bool = False, rng: np.random.Generator, dtype,
                 bn_momentum: float = 0.9, bn_epsilon: float = 1e-3):
        if expansion < 1:
            raise ConfigurationError(f"{name}: expansion ratio must be >= 1, got {expansion}")
        mid = in_c * expansion
        bn = lambda tag, ch, zero=False: BatchNorm(
            f"{name}.{tag}", ch, dtype=dtype, momentum=bn_momentum,
            epsilon=bn_epsilon, zero_gamma=zero)
        self.name = name
        self.in_c, self.out_c = in_c, out_c
        self.expand = (Conv2d(f"{name}.expand", in_c, mid, 1, rng=rng, dtype=dtype)
                       if expansion > 1 else None)
        self.bn_expand = bn("expand_norm", mid) if expansion > 1 else None
        self.dw = Conv2d(f"{name}.dw", mid, mid, kernel, stride=stride,
                         padding=padding, groups=mid, rng=rng, dtype=dtype)
        self.bn_dw = bn("dw_norm", mid)
        self.se = (SqueezeExcite(f"{name}.se", mid, se_ratio, rng=rng, dtype=dtype)
                   if se_ratio else None)
        self.project = Conv2d(f"{name}.project", mid, out_c, 1, rng=rng, dtype=dtype)
        self.bn_project = bn("project_norm", out_c, zero=zero_final_gamma)
        self._stages = [s for s in (self.expand, self.bn_expand) if s] + [
            self.dw, self.bn_dw] + ([self.se] if self.se else []) + [
            self.project, self.bn_project]

    def forward(self, x: Tensor, ctx: ExecContext | None = None):
        caches = []
        t = x
        if self.expand is not None:
            t, c = self.expand.forward(t, ctx); caches.append(c)
            t, c = self.bn_expand.forward(t, ctx); caches.append(c)
            pre = t
            t = K.hard_swish(t); caches.append((pre,))
        t, c = self.dw.forward(t, ctx); caches.append(c)
        t, c = self.bn_dw.forward(t, ctx); caches.append(c)
        pre = t
        t = K.hard_swish(t); caches.append((pre,))
        if self.se is not None:
            t, c = self.se.forward(t, ctx); caches.append(c)
        t, c = self.project.forward(t, ctx); caches.append(c)
        t, c = self.bn_project.forward(t, ctx); caches.append(c)
        if ctx:
            ctx.count("hard_swish", 2 if self.expand is not None else 1)
        return t, caches

    def backward(self, cache, gy: Tensor):
        caches = list(cache)
        grads: dict[str, np.ndarray] = {}
        g = gy
        g, gr = self.bn_project.backward(caches.pop(), g); grads.update(gr)
        g, gr = self.project.backward(caches.pop(), g); grads.update(gr)
        if self.se is not None:
            g, gr = self.se.backward(caches.pop(), g); grads.update(gr)
        (pre,) = caches.pop()
        g = K.hard_swish_backward(pre, g)
        g, gr = self.bn_dw.backward(caches.pop(), g); grads.update(gr)
        g, gr = self.dw.backward(caches.pop(), g); grads.update(gr)
        if self.expand is not None:
            (pre,) = caches.pop()
            g = K.hard_swish_backward(pre, g)
            g, gr = self.bn_expand.backward(caches.pop(), g); grads.update(gr)
            g, gr = self.expand.backward(caches.pop(), g); grads.update(gr)
        return g, grads

    def parameters(self):
        out = []
        for stage in self._stages:
            out.extend(stage.parameters())
        return out

    def out_shape(self, in_shape):
        shape = in_shape
        if self.expand is not None:
            shape = self.expand.out_shape(shape)
        shape = self.dw.out_shape(shape)
        return self.project.out_shape(shape)

    def macs(self, in_shape) -> int:
        total = 0
        shape = in_shape
        if self.expand is not None:
            total += self.expand.macs(shape)
            shape = self.expand.out_shape(shape)
        total += self.dw.macs(shape)
        shape = self.dw.out_shape(shape)
        if self.se is not None:
            total += self.se.macs(shape)
        total += self.project.macs(shape)
        return total


class Dense:
    """Affine layer on flat features (the classifier)."""

    def __init__(self, name: str, in_features: int, out_features: int, *,
                 rng: np.random.Generator, dtype):
        self.name = name
        self.weights = _kaiming(rng, (out_features, in_features), in_features, dtype)
        self.bias = np.zeros(out_features, dtype=dtype)

    def forward(self, x: np.ndarray, ctx: ExecContext | None = None):
        if ctx:
            ctx.count("dense")
        return K.dense(x, self.weights, self.bias), (x,)

    def backward(self, cache, gy: np.ndarray):
        (x,) = cache
        gx, gw, gb = K.dense_backward(x, self.weights, gy)
        return gx, {f"{self.name}.weight": gw, f"{self.name}.bias": gb}

    def parameters(self):
        return [(f"{self.name}.weight", self.weights), (f"{self.name}.bias", self.bias)]

    def macs(self, batch: int = 1) -> int:
        return K.dense_macs(self.weights.shape[1], self.weights.shape[0], batch)
