"""Backbone assembly and toy training.

A backbone is a reversible chain — space-to-depth stem, three pyramid
expansion silos, then ``extra_depth`` full fusion silos — followed by a
conventional (non-reversible) neck + classification head.  The reversible
chain runs on a ``Tape`` in either backward mode; the head always stores its
activations, and its bytes are registered in the same live-bytes registry so
measured peaks reflect the whole step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels as K
from .context import BACKWARD, FORWARD, ExecContext, OpCounters
from .coupling import FeaturePyramid, Silo, SiloSpec
from .engine import (BackwardMode, ExpandStage, LiveBytesRegistry, ReversibleBlock,
                     SiloStage, Tape, count_forward_evals)
from .errors import ConfigurationError, DivergenceError
from .layers import MBConv, Conv2d, BatchNorm, Dense
from .tensor import Tensor, precision_dtype

STEM_BLOCK = 4                      # stem reduces spatial by 4 => 16x channels
TOTAL_STRIDE = 32                   # stem /4 then three further halvings
CHANNEL_QUANTUM = 16                # all pyramid widths are multiples of 16

# Neck output channels relative to the pyramid widths; at full scale
# (48, 64, 80, 160) this lands exactly on the 48/64/128/320 targets.
NECK_RATIOS = (1.0, 1.0, 1.6, 2.0)
NECK_QUANTUM = 8
HEAD_WIDTH_FACTOR = 4               # final 1x1 conv widens the last neck level


def scale_channels(base: int, multiplier: float) -> int:
    """Scale a channel count, staying on the CHANNEL_QUANTUM grid."""
    return max(CHANNEL_QUANTUM,
               CHANNEL_QUANTUM * round(base * multiplier / CHANNEL_QUANTUM))


def neck_channels(pyramid_channels) -> tuple[int, ...]:
    return tuple(
        max(NECK_QUANTUM, NECK_QUANTUM * round(c * r / NECK_QUANTUM))
        for c, r in zip(pyramid_channels, NECK_RATIOS)
    )


@dataclass(frozen=True)
class BackboneConfig:
    channels: tuple[int, int, int, int] = (48, 64, 80, 160)
    width_multiplier: float = 1.0
    extra_depth: int = 2
    resolution: tuple[int, int] | int = 224
    num_classes: int = 1000
    in_channels: int = 3
    precision: str = "single"
    seed: int = 0

    def __post_init__(self):
        if len(self.channels) != 4 or any(c < 1 for c in self.channels):
            raise ConfigurationError(f"need 4 positive channel counts, got {self.channels}")
        h, w = self.resolution_hw
        if h % TOTAL_STRIDE or w % TOTAL_STRIDE:
            raise ConfigurationError(
                f"resolution {(h, w)} must be divisible by {TOTAL_STRIDE}"
            )
        eff = self.effective_channels
        for c in eff:
            if c % CHANNEL_QUANTUM:
                raise ConfigurationError(
                    f"scaled channels {eff} must be multiples of {CHANNEL_QUANTUM}"
                )
        if self.in_channels < 1:
            raise ConfigurationError("in_channels must be >= 1")
        stem_out = CHANNEL_QUANTUM * self.in_channels  # one copy of the input
        if eff[0] % stem_out:
            raise ConfigurationError(
                f"level-0 channels {eff[0]} must be a multiple of "
                f"{stem_out} (= {STEM_BLOCK}^2 x in_channels) so the stem "
                "can reach them by duplicating input channels"
            )
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if self.extra_depth < 0:
            raise ConfigurationError("extra_depth must be >= 0")
        precision_dtype(self.precision)  # validates

    @property
    def resolution_hw(self) -> tuple[int, int]:
        r = self.resolution
        return (r, r) if isinstance(r, int) else (int(r[0]), int(r[1]))

    @property
    def effective_channels(self) -> tuple[int, ...]:
        if self.width_multiplier == 1.0:
            return tuple(self.channels)
        return tuple(scale_channels(c, self.width_multiplier) for c in self.channels)

    @property
    def stem_duplication(self) -> int:
        return self.effective_channels[0] // (CHANNEL_QUANTUM * self.in_channels)

    @property
    def dtype(self):
        return precision_dtype(self.precision)

    def pyramid_shapes(self, batch: int = 1) -> list[tuple[int, int, int, int]]:
        h, w = self.resolution_hw
        return [
            (batch, c, h // (STEM_BLOCK * 2 ** k), w // (STEM_BLOCK * 2 ** k))
            for k, c in enumerate(self.effective_channels)
        ]


# ---------------------------------------------------------------------------
# stem
# ---------------------------------------------------------------------------

class StemStage(ReversibleBlock):
    """Channel duplication followed by space-to-depth — exactly invertible.

    Duplication widens narrow inputs so downstream widths stay reachable
    without losing reversibility; inversion drops the extra copies, and the
    backward pass sums their gradients.
    """

    def __init__(self, in_channels: int, duplication: int):
        if duplication < 1:
            raise ConfigurationError("stem duplication must be >= 1")
        self.in_channels = in_channels
        self.duplication = duplication
        self.name = "stem"

    def _check(self, p: FeaturePyramid, channels: int) -> Tensor:
        if p.num_levels != 1:
            raise ConfigurationError("stem operates on a single-level pyramid")
        x = p.levels[0]
        if x.c != channels:
            raise ConfigurationError(f"stem expected {channels} channels, got {x.c}")
        return x

    def forward(self, p, ctx=None, want_cache=False):
        x = self._check(p, self.in_channels)
        if ctx:
            ctx.count("space_to_depth")
        d = x.data
        if self.duplication > 1:
            d = np.concatenate([d] * self.duplication, axis=1)
        y = K.space_to_depth(Tensor(d), STEM_BLOCK)
        return p.with_levels([y]), (() if want_cache else None)

    def inverse(self, p_out, ctx=None, capture=False):
        y = self._check(p_out, self.out_channels)
        if ctx:
            ctx.count("depth_to_space")
        wide = K.depth_to_space(y, STEM_BLOCK)
        x = Tensor(np.ascontiguousarray(wide.data[:, : self.in_channels]))
        return p_out.with_levels([x]), (() if capture else None)

    def backward(self, cache, grad_out):
        g = K.depth_to_space(grad_out[0], STEM_BLOCK)
        if self.duplication > 1:
            parts = [
                g.data[:, k * self.in_channels : (k + 1) * self.in_channels]
                for k in range(self.duplication)
            ]
            g = Tensor(sum(parts[1:], parts[0]).copy())
        return [g], {}

    @property
    def out_channels(self) -> int:
        return self.in_channels * self.duplication * STEM_BLOCK * STEM_BLOCK


# ---------------------------------------------------------------------------
# neck + classification head (conventional, stored activations)
# ---------------------------------------------------------------------------

class ClassifierHead:
    """Neck MBConv per level, strided-MBConv aggregation cascade, classifier.

    The finest map is transformed, downsampled by 2 with a strided MBConv and
    added to the next neck output; repeated until everything lands on the
    coarsest grid, then 1x1 conv -> global average pool -> dense.
    """

    def __init__(self, pyramid_channels, num_classes: int, *,
                 rng: np.random.Generator, dtype, name: str = "head"):
        if len(pyramid_channels) != len(NECK_RATIOS):
            raise ConfigurationError(
                f"head expects {len(NECK_RATIOS)} pyramid levels, "
                f"got {len(pyramid_channels)}"
            )
        neck = neck_channels(pyramid_channels)
        self.neck_widths = neck
        self.name = name
        self.necks = [
            MBConv(f"{name}.neck{i}", c_in, c_out, kernel=3, stride=1, padding=1,
                   expansion=1, rng=rng, dtype=dtype)
            for i, (c_in, c_out) in enumerate(zip(pyramid_channels, neck))
        ]
        self.downs = [
            MBConv(f"{name}.down{i}", neck[i], neck[i + 1], kernel=5, stride=2,
                   padding=2, expansion=1, rng=rng, dtype=dtype)
            for i in range(len(neck) - 1)
        ]
        self.final_width = HEAD_WIDTH_FACTOR * neck[-1]
        self.final_conv = Conv2d(f"{name}.final", neck[-1], self.final_width, 1,
                                 rng=rng, dtype=dtype)
        self.final_norm = BatchNorm(f"{name}.final_norm", self.final_width, dtype=dtype)
        self.classifier = Dense(f"{name}.classifier", self.final_width, num_classes,
                                rng=rng, dtype=dtype)
        self._stages = self.necks + self.downs + [self.final_conv, self.final_norm,
                                                  self.classifier]

    def forward(self, p: FeaturePyramid, ctx: ExecContext | None = None):
        neck_caches, neck_outs = [], []
        for level, block in zip(p.levels, self.necks):
            y, c = block.forward(level, ctx)
            neck_outs.append(y)
            neck_caches.append(c)
        agg = neck_outs[0]
        down_caches = []
        for i, block in enumerate(self.downs):
            y, c = block.forward(agg, ctx)
            down_caches.append(c)
            agg = K.add(y, neck_outs[i + 1])
        z, conv_cache = self.final_conv.forward(agg, ctx)
        z, norm_cache = self.final_norm.forward(z, ctx)
        pre_act = z
        z = K.hard_swish(z)
        pooled = K.global_avg_pool(z)
        flat = pooled.data.reshape(pooled.n, pooled.c)
        logits, dense_cache = self.classifier.forward(flat, ctx)
        cache = {
            "necks": neck_caches, "downs": down_caches, "conv": conv_cache,
            "norm": norm_cache, "pre_act": pre_act, "z_shape": z.shape,
            "dense": dense_cache,
        }
        return logits, cache

    def backward(self, cache, grad_logits: np.ndarray):
        grads: dict[str, np.ndarray] = {}
        gflat, gr = self.classifier.backward(cache["dense"], grad_logits)
        grads.update(gr)
        n, c = gflat.shape
        gz = K.global_avg_pool_backward(cache["z_shape"], Tensor(gflat.reshape(n, c, 1, 1)))
        gz = K.hard_swish_backward(cache["pre_act"], gz)
        gz, gr = self.final_norm.backward(cache["norm"], gz)
        grads.update(gr)
        gagg, gr = self.final_conv.backward(cache["conv"], gz)
        grads.update(gr)
        gneck = [None] * len(self.necks)
        for i in range(len(self.downs) - 1, -1, -1):
            gneck[i + 1] = gagg
            gagg, gr = self.downs[i].backward(cache["downs"][i], gagg)
            grads.update(gr)
        gneck[0] = gagg
        glevels = []
        for i, block in enumerate(self.necks):
            g, gr = block.backward(cache["necks"][i], gneck[i])
            grads.update(gr)
            glevels.append(g)
        return glevels, grads

    def parameters(self):
        out = []
        for stage in self._stages:
            out.extend(stage.parameters())
        return out


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

@dataclass
class Model:
    config: BackboneConfig
    blocks: list[ReversibleBlock]       # the reversible portion, in order
    head: ClassifierHead

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for b in self.blocks:
            out.extend(b.parameters())
        out.extend(self.head.parameters())
        return out

    @property
    def silos(self) -> list[Silo]:
        return [b.silo for b in self.blocks if hasattr(b, "silo")]


def build(config: BackboneConfig) -> Model:
    """Assemble stem + 3 expansion silos + extra_depth fusion silos + head."""
    rng = np.random.default_rng(config.seed)
    dtype = config.dtype
    eff = config.effective_channels
    blocks: list[ReversibleBlock] = [
        StemStage(config.in_channels, config.stem_duplication)
    ]
    for k in range(1, 4):  # grow the pyramid one level at a time
        spec = SiloSpec(levels=k + 1, channels=eff[: k + 1])
        blocks.append(ExpandStage(Silo.build(spec, name=f"expand{k}", rng=rng, dtype=dtype)))
    full = SiloSpec(levels=4, channels=eff)
    for i in range(config.extra_depth):
        blocks.append(SiloStage(Silo.build(full, name=f"fuse{i}", rng=rng, dtype=dtype)))
    head = ClassifierHead(eff, config.num_classes, rng=rng, dtype=dtype)
    return Model(config, blocks, head)


def head_forward(model: Model, p: FeaturePyramid,
                 ctx: ExecContext | None = None) -> np.ndarray:
    logits, _ = model.head.forward(p, ctx)
    return logits


def image_pyramid(images: np.ndarray, dtype) -> FeaturePyramid:
    return FeaturePyramid([Tensor(np.ascontiguousarray(images, dtype=dtype))])


# ---------------------------------------------------------------------------
# loss / optimizer / training
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - lse
    n = logits.shape[0]
    loss = float(-log_p[np.arange(n), labels].mean())
    grad = np.exp(log_p)
    grad[np.arange(n), labels] -= 1.0
    return loss, (grad / n).astype(logits.dtype)


class SGDMomentum:
    """Classic momentum SGD: v <- mu v + g; p <- p - lr v (in place)."""

    def __init__(self, params: list[tuple[str, np.ndarray]], lr: float,
                 momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(arr) for name, arr in params}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for name, arr in self.params:
            g = grads.get(name)
            if g is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += g
            arr -= (self.lr * v).astype(arr.dtype, copy=False)


@dataclass
class StepRecord:
    step: int
    loss: float
    grad_norm: float
    mode: str
    forward_evals: int
    backward_evals: int
    peak_bytes: int


@dataclass
class TrainRecord:
    mode: str
    steps: list[StepRecord] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [s.loss for s in self.steps]


def step_gradients(model: Model, mode, images: np.ndarray, labels: np.ndarray,
                   step_key: object = 0):
    """One full forward+backward (no update): loss, gradients, measurements.

    Returns (loss, grads, registry, counters) — the pieces gradient-parity
    checks and memory sweeps need, using exactly the train_toy step path.
    """
    counters = OpCounters()
    registry = LiveBytesRegistry()
    tape = Tape(model.blocks, mode=BackwardMode.parse(mode),
                counters=counters, registry=registry)
    batch = image_pyramid(images, model.config.dtype)
    out = tape.forward(batch, step_key=step_key)
    head_ctx = ExecContext(counters, FORWARD, step_key=step_key, train=True)
    logits, head_cache = model.head.forward(out, head_ctx)
    head_token = registry.add(head_cache, "head.cache")
    loss, glogits = softmax_cross_entropy(logits, labels)
    glevels, head_grads = model.head.backward(head_cache, glogits)
    registry.remove(head_token)
    result = tape.backward(glevels)
    grads = dict(result.param_grads)
    grads.update(head_grads)
    return loss, grads, registry, counters


def train_toy(config: BackboneConfig, dataset, mode, steps: int, seed: int,
              lr: float = 0.05, batch_size: int = 8,
              momentum: float = 0.9) -> TrainRecord:
    """Deterministic toy training run; same seed + same mode => same record.

    ``dataset`` provides ``images`` (m, c, h, w) and integer ``labels`` (m,).
    Batches cycle through the dataset in a fixed order so the stored and
    recompute runs see identical data.
    """
    mode = BackwardMode.parse(mode)
    model = build(replace(config, seed=seed))
    counters = OpCounters()
    registry = LiveBytesRegistry()
    tape = Tape(model.blocks, mode=mode, counters=counters, registry=registry)
    opt = SGDMomentum(model.parameters(), lr=lr, momentum=momentum)
    dtype = config.dtype
    m = dataset.images.shape[0]
    record = TrainRecord(mode=mode.value)

    for t in range(steps):
        idx = [(t * batch_size + i) % m for i in range(batch_size)]
        batch = image_pyramid(dataset.images[idx], dtype)
        labels = dataset.labels[idx]

        out = tape.forward(batch, step_key=t)
        head_ctx = ExecContext(counters, FORWARD, step_key=t, train=True)
        logits, head_cache = model.head.forward(out, head_ctx)
        head_token = registry.add(head_cache, "head.cache")

        loss, glogits = softmax_cross_entropy(logits, labels)
        if not math.isfinite(loss):
            raise DivergenceError(t)

        glevels, head_grads = model.head.backward(head_cache, glogits)
        registry.remove(head_token)
        result = tape.backward(glevels)

        grads = dict(result.param_grads)
        grads.update(head_grads)
        gnorm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
        opt.step(grads)

        evals = count_forward_evals(counters)
        record.steps.append(StepRecord(
            step=t, loss=loss, grad_norm=gnorm, mode=mode.value,
            forward_evals=evals[FORWARD], backward_evals=evals[BACKWARD],
            peak_bytes=registry.peak,
        ))
    return record
