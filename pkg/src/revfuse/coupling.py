"""Reversible bidirectional multi-scale fusion.

The fusion silo couples an N-level feature pyramid in two additive halves:

* down half — intermediate ``m[k] = x[k] + sum_{i<k} Down[i->k](x[i])``,
  every summand a function of *original* inputs only, so the whole half can
  be evaluated in any order;
* up half — output ``o[k] = m[k] + sum_{i>k} Up[i->k](m[i])``, every summand
  a function of intermediates only, again order-free.

Because each half only ever adds transforms of *other* levels, inversion
needs no inverse transforms: subtract the same evaluations back out, in
strictly ordered sequence (coarsest-first for the up half, finest-first for
the down half).  In the all-scalar case each half is a unit-triangular
matrix, hence determinant one.

``RevBlock`` is the classic two-stream residual coupling on a single tensor,
included as the single-scale counterpart.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels as K
from .context import F_EVAL, ExecContext
from .errors import ConfigurationError
from .layers import MBConv
from .tensor import Tensor

MAX_LEVELS = 4

# Default per-destination-level MBConv expansion ratios and the levels whose
# incoming transforms carry a squeeze-excite stage.  Declared choices: the
# silo contract (coupling math, resampling geometry) does not depend on them.
DEFAULT_EXPANSION = (1, 2, 3, 4)
DEFAULT_SE_LEVELS = (0, 1)
DEFAULT_SE_RATIO = 0.25


# ---------------------------------------------------------------------------
# feature pyramid
# ---------------------------------------------------------------------------

class FeaturePyramid:
    """An ordered tuple of NCHW tensors, finest resolution first.

    Levels must agree in batch size and dtype.  By default each level's
    spatial dims must be exactly half the previous level's; tests that build
    degenerate all-scalar pyramids relax that with ``require_halving=False``.
    """

    __slots__ = ("levels", "require_halving")

    def __init__(self, levels, *, require_halving: bool = True):
        levels = tuple(levels)
        if not 1 <= len(levels) <= MAX_LEVELS:
            raise ConfigurationError(
                f"pyramid must have 1..{MAX_LEVELS} levels, got {len(levels)}"
            )
        n0, dt0 = levels[0].n, levels[0].dtype
        for k, lv in enumerate(levels):
            if lv.n != n0 or lv.dtype != dt0:
                raise ConfigurationError(
                    f"pyramid level {k} batch/dtype mismatch: "
                    f"{(lv.n, lv.dtype)} vs {(n0, dt0)}"
                )
            if require_halving and k > 0:
                ph, pw = levels[k - 1].h, levels[k - 1].w
                if (lv.h, lv.w) != (ph // 2, pw // 2) or ph % 2 or pw % 2:
                    raise ConfigurationError(
                        f"pyramid level {k} spatial {(lv.h, lv.w)} is not half "
                        f"of level {k - 1} spatial {(ph, pw)}"
                    )
        self.levels = levels
        self.require_halving = require_halving

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def batch(self) -> int:
        return self.levels[0].n

    @property
    def dtype(self):
        return self.levels[0].dtype

    @property
    def shapes(self) -> tuple:
        return tuple(lv.shape for lv in self.levels)

    @property
    def channels(self) -> tuple:
        return tuple(lv.c for lv in self.levels)

    @property
    def nbytes(self) -> int:
        return sum(lv.nbytes for lv in self.levels)

    def arrays(self):
        return [lv.data for lv in self.levels]

    def with_levels(self, levels) -> "FeaturePyramid":
        return FeaturePyramid(levels, require_halving=self.require_halving)

    def __iter__(self):
        return iter(self.levels)

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, k: int) -> Tensor:
        return self.levels[k]


def pyramid_max_abs_diff(a: FeaturePyramid, b: FeaturePyramid) -> float:
    return max(float(np.max(np.abs(x.data - y.data))) for x, y in zip(a, b))


def pyramid_max_rel_diff(a: FeaturePyramid, b: FeaturePyramid) -> float:
    """Per-level infinity-norm error, relative to the reference pyramid b."""
    worst = 0.0
    for x, y in zip(a, b):
        scale = max(float(np.max(np.abs(y.data))), 1e-30)
        worst = max(worst, float(np.max(np.abs(x.data - y.data))) / scale)
    return worst


def randomize_parameters(named_params, rng: np.random.Generator,
                         weight_gain: float = 1.0, gamma_jitter: float = 0.3,
                         beta_scale: float = 0.1) -> None:
    """Overwrite parameters in place with a random (non-identity) setting.

    The draw mimics a standard fresh initialization rather than arbitrary
    noise: weights are fan-in-scaled normals, norm scales are jittered around
    1 within a bounded window (including the zero-initialized final norms, so
    every residual branch becomes active), and norm shifts and biases stay
    small.  Bounded jitter matters for reconstruction accuracy: an inverse
    pass replays transforms on reconstructed values, so per-transform
    Jacobian gain compounds across levels and blocks, and unbounded scale
    draws would make deep single-precision round-trips arbitrarily badly
    conditioned regardless of implementation.  Deterministic given the
    generator.
    """
    uniform = lambda shape: rng.uniform(-1.0, 1.0, shape)
    for name, arr in named_params:
        if name.endswith(".project_norm.gamma"):
            # the output scale of a residual branch: fractional relative to
            # the carrier it is added onto, as in trained residual networks —
            # full-scale branches compound the activation magnitude
            # multiplicatively over a deep chain and with it the
            # reconstruction error floor
            new = 0.5 + gamma_jitter * uniform(arr.shape)
        elif name.endswith(".gamma"):
            new = 1.0 + gamma_jitter * uniform(arr.shape)
        elif name.endswith((".beta", ".bias", ".b1", ".b2")):
            new = beta_scale * uniform(arr.shape)
        else:
            fan_in = int(np.prod(arr.shape[1:])) or 1
            new = rng.standard_normal(arr.shape) * (weight_gain / np.sqrt(fan_in))
        arr[...] = new.astype(arr.dtype)


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ResampleSpec:
    """Geometry of one inter-level transform inside a silo.

    Downsampling (src finer than dst) uses a strided depthwise stage:
    stride 2**gap, kernel 2**(gap+1) + 1, centered padding.  Upsampling
    (src coarser) keeps a 3x3 unit-stride depthwise stage and appends
    bilinear interpolation by 2**gap.
    """

    src_level: int
    dst_level: int
    src_channels: int
    dst_channels: int
    expansion: int
    se_ratio: float | None

    def __post_init__(self):
        if self.src_level == self.dst_level:
            raise ConfigurationError("resample transform needs distinct levels")

    @property
    def gap(self) -> int:
        return abs(self.dst_level - self.src_level)

    @property
    def is_down(self) -> bool:
        return self.dst_level > self.src_level

    @property
    def stride(self) -> int:
        return 2 ** self.gap if self.is_down else 1

    @property
    def kernel(self) -> int:
        return 2 ** (self.gap + 1) + 1 if self.is_down else 3

    @property
    def padding(self) -> int:
        return self.kernel // 2

    @property
    def upsample_factor(self) -> int:
        return 1 if self.is_down else 2 ** self.gap


def make_resample_transform(spec: ResampleSpec, *, name: str,
                            rng: np.random.Generator, dtype) -> "MBConvTransform":
    block = MBConv(
        name, spec.src_channels, spec.dst_channels,
        kernel=spec.kernel, stride=spec.stride, padding=spec.padding,
        expansion=spec.expansion, se_ratio=spec.se_ratio,
        zero_final_gamma=True, rng=rng, dtype=dtype,
    )
    return MBConvTransform(name, block, spec.upsample_factor)


class MBConvTransform:
    """One fusion arrow: an MBConv, optionally followed by bilinear upsampling.

    Zero-initialized final norm makes a fresh transform the zero map, so a
    fresh silo is the identity.
    """

    def __init__(self, name: str, block: MBConv, upsample_factor: int = 1):
        self.name = name
        self.block = block
        self.upsample_factor = upsample_factor

    def forward(self, x: Tensor, ctx: ExecContext | None = None, want_cache: bool = True):
        if ctx:
            ctx.count(F_EVAL)
        y, cache = self.block.forward(x, ctx)
        pre_shape = y.shape
        if self.upsample_factor > 1:
            if ctx:
                ctx.count("bilinear_upsample")
            y = K.bilinear_upsample(y, self.upsample_factor)
        return y, ((cache, pre_shape) if want_cache else None)

    def backward(self, cache, gy: Tensor):
        block_cache, pre_shape = cache
        g = gy
        if self.upsample_factor > 1:
            g = K.bilinear_upsample_backward(pre_shape, self.upsample_factor, g)
        return self.block.backward(block_cache, g)

    def parameters(self):
        return self.block.parameters()

    def out_shape(self, in_shape):
        n, c, h, w = self.block.out_shape(in_shape)
        f = self.upsample_factor
        return (n, c, h * f, w * f)

    def macs(self, in_shape) -> int:
        return self.block.macs(in_shape)


class ScalarGain:
    """y = gain * x — the degenerate transform for exact-arithmetic oracles."""

    def __init__(self, name: str, gain: float, dtype=np.float64):
        self.name = name
        self.gain = np.array([gain], dtype=dtype)

    def forward(self, x: Tensor, ctx: ExecContext | None = None, want_cache: bool = True):
        if ctx:
            ctx.count(F_EVAL)
        y = Tensor(x.data * self.gain[0])
        return y, ((x,) if want_cache else None)

    def backward(self, cache, gy: Tensor):
        (x,) = cache
        gx = Tensor(gy.data * self.gain[0])
        ggain = np.array([float(np.sum(x.data * gy.data))], dtype=self.gain.dtype)
        return gx, {f"{self.name}.gain": ggain}

    def parameters(self):
        return [(f"{self.name}.gain", self.gain)]

    def out_shape(self, in_shape):
        return in_shape

    def macs(self, in_shape) -> int:
        return 0


# ---------------------------------------------------------------------------
# fusion silo
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SiloSpec:
    """Declarative description of one fusion silo.

    ``expansion[k]`` and squeeze-excite placement apply to transforms whose
    *destination* is level k.
    """

    levels: int
    channels: tuple[int, ...]
    expansion: tuple[int, ...] = DEFAULT_EXPANSION
    se_ratio: float = DEFAULT_SE_RATIO
    se_levels: tuple[int, ...] = DEFAULT_SE_LEVELS

    def __post_init__(self):
        if not 2 <= self.levels <= MAX_LEVELS:
            raise ConfigurationError(
                f"silo needs 2..{MAX_LEVELS} levels, got {self.levels}"
            )
        if len(self.channels) != self.levels:
            raise ConfigurationError(
                f"silo channels {self.channels} do not match {self.levels} levels"
            )
        if len(self.expansion) < self.levels:
            raise ConfigurationError("expansion ratios must cover every level")

    def down_pairs(self):
        """(src, dst) with src finer than dst, canonical order."""
        return [(i, j) for j in range(1, self.levels) for i in range(j)]

    def up_pairs(self):
        """(src, dst) with src coarser than dst, canonical order."""
        return [(i, j) for j in range(self.levels - 1) for i in range(j + 1, self.levels)]

    def resample_spec(self, src: int, dst: int) -> ResampleSpec:
        return ResampleSpec(
            src_level=src, dst_level=dst,
            src_channels=self.channels[src], dst_channels=self.channels[dst],
            expansion=self.expansion[dst],
            se_ratio=self.se_ratio if dst in self.se_levels else None,
        )

    def to_config(self) -> dict[str, str]:
        """Flat string mapping, round-trippable through an INI section."""
        return {
            "levels": str(self.levels),
            "channels": ", ".join(str(c) for c in self.channels),
            "expansion": ", ".join(str(e) for e in self.expansion),
            "se_ratio": repr(self.se_ratio),
            "se_levels": ", ".join(str(v) for v in self.se_levels),
        }

    @staticmethod
    def from_config(section) -> "SiloSpec":
        ints = lambda key: tuple(int(v) for v in section[key].replace(",", " ").split())
        return SiloSpec(
            levels=int(section["levels"]),
            channels=ints("channels"),
            expansion=ints("expansion") if "expansion" in section else DEFAULT_EXPANSION,
            se_ratio=float(section.get("se_ratio", DEFAULT_SE_RATIO)),
            se_levels=ints("se_levels") if "se_levels" in section else DEFAULT_SE_LEVELS,
        )


class Silo:
    """A built silo: one transform object per (src, dst) level pair."""

    def __init__(self, spec: SiloSpec, down: dict, up: dict, name: str = "silo"):
        self.spec = spec
        self.down = down      # (src, dst) -> transform, src < dst
        self.up = up          # (src, dst) -> transform, src > dst
        self.name = name

    # -- construction ------------------------------------------------------
    @staticmethod
    def build(spec: SiloSpec, *, name: str = "silo",
              rng: np.random.Generator, dtype) -> "Silo":
        down = {}
        for i, j in spec.down_pairs():
            down[(i, j)] = make_resample_transform(
                spec.resample_spec(i, j), name=f"{name}.down{i}{j}", rng=rng, dtype=dtype)
        up = {}
        for i, j in spec.up_pairs():
            up[(i, j)] = make_resample_transform(
                spec.resample_spec(i, j), name=f"{name}.up{i}{j}", rng=rng, dtype=dtype)
        return Silo(spec, down, up, name)

    @staticmethod
    def build_scalar(levels: int, *, name: str = "scalar_silo",
                     rng: np.random.Generator, dtype=np.float64) -> "Silo":
        """All-transform-scalar silo on (1,1,1,1) levels, for exact oracles."""
        spec = SiloSpec(levels=levels, channels=(1,) * levels)
        down = {(i, j): ScalarGain(f"{name}.down{i}{j}", float(rng.standard_normal()), dtype)
                for i, j in spec.down_pairs()}
        up = {(i, j): ScalarGain(f"{name}.up{i}{j}", float(rng.standard_normal()), dtype)
              for i, j in spec.up_pairs()}
        return Silo(spec, down, up, name)

    # -- validation ----------------------------------------------------------
    def _check_pyramid(self, p: FeaturePyramid) -> None:
        if p.num_levels != self.spec.levels:
            raise ConfigurationError(
                f"{self.name}: expected {self.spec.levels} levels, got {p.num_levels}"
            )
        if p.channels != tuple(self.spec.channels):
            raise ConfigurationError(
                f"{self.name}: expected channels {self.spec.channels}, got {p.channels}"
            )

    # -- the two halves ------------------------------------------------------
    def down_phase(self, x_levels, ctx=None, want_cache=False, order=None):
        """Intermediates from original inputs; contributions order-free."""
        pairs = list(order) if order is not None else self.spec.down_pairs()
        if sorted(pairs) != sorted(self.spec.down_pairs()):
            raise ConfigurationError(f"{self.name}: bad down-half evaluation order")
        contrib, caches = {}, {}
        for i, j in pairs:  # every argument is an original input
            y, c = self.down[(i, j)].forward(x_levels[i], ctx, want_cache)
            contrib[(i, j)] = y
            if want_cache:
                caches[(i, j)] = c
        m = [x_levels[0]]
        for j in range(1, self.spec.levels):
            acc = x_levels[j]
            for i in range(j):  # fixed reduction order regardless of eval order
                acc = K.add(acc, contrib[(i, j)])
            m.append(acc)
        return m, caches

    def up_phase(self, m_levels, ctx=None, want_cache=False, order=None):
        """Outputs from intermediates; contributions order-free."""
        n = self.spec.levels
        pairs = list(order) if order is not None else self.spec.up_pairs()
        if sorted(pairs) != sorted(self.spec.up_pairs()):
            raise ConfigurationError(f"{self.name}: bad up-half evaluation order")
        contrib, caches = {}, {}
        for i, j in pairs:  # every argument is an intermediate
            y, c = self.up[(i, j)].forward(m_levels[i], ctx, want_cache)
            contrib[(i, j)] = y
            if want_cache:
                caches[(i, j)] = c
        out = []
        for j in range(n):
            acc = m_levels[j]
            for i in range(j + 1, n):
                acc = K.add(acc, contrib[(i, j)])
            out.append(acc)
        return out, caches

    # -- public API ------------------------------------------------------------
    def forward(self, p: FeaturePyramid, ctx: ExecContext | None = None,
                want_cache: bool = False, down_order=None, up_order=None):
        self._check_pyramid(p)
        x = list(p.levels)
        m, down_caches = self.down_phase(x, ctx, want_cache, down_order)
        out, up_caches = self.up_phase(m, ctx, want_cache, up_order)
        p_out = p.with_levels(out)
        cache = ({"x": x, "m": m, "down": down_caches, "up": up_caches}
                 if want_cache else None)
        return p_out, cache

    def inverse(self, p_out: FeaturePyramid, ctx: ExecContext | None = None,
                capture: bool = False):
        """Reconstruct the input pyramid from the output pyramid.

        Unlike the forward halves, reconstruction is strictly ordered:
        intermediates are recovered coarsest-first (each subtraction needs
        the coarser intermediates already recovered), then inputs
        finest-first.  Transforms are only ever evaluated forward.

        Returns (p_in, cache, intermediates); with ``capture`` the cache has
        the same layout as a forward cache, each transform evaluated exactly
        once, so a backward pass can run from it directly.
        """
        self._check_pyramid(p_out)
        n = self.spec.levels
        o = list(p_out.levels)
        m: list = [None] * n
        up_caches = {}
        m[n - 1] = o[n - 1]
        for j in range(n - 2, -1, -1):
            acc = o[j]
            for i in range(j + 1, n):
                y, c = self.up[(i, j)].forward(m[i], ctx, capture)
                if capture:
                    up_caches[(i, j)] = c
                acc = K.sub(acc, y)
            m[j] = acc
        x: list = [None] * n
        down_caches = {}
        x[0] = m[0]
        for j in range(1, n):
            acc = m[j]
            for i in range(j):
                y, c = self.down[(i, j)].forward(x[i], ctx, capture)
                if capture:
                    down_caches[(i, j)] = c
                acc = K.sub(acc, y)
            x[j] = acc
        p_in = p_out.with_levels(x)
        cache = ({"x": x, "m": m, "down": down_caches, "up": up_caches}
                 if capture else None)
        return p_in, cache, m

    def backward(self, cache, grad_out, ctx: ExecContext | None = None):
        """VJP through the silo from a forward (or captured-inverse) cache.

        ``grad_out`` and the result are lists of per-level gradient tensors.
        No transform is re-evaluated: up-half VJPs fan gradient from outputs
        into intermediates, down-half VJPs fan it from intermediates into
        inputs.
        """
        n = self.spec.levels
        grads: dict[str, np.ndarray] = {}
        gm = list(grad_out)
        for i, j in self.spec.up_pairs():      # up[i->j] consumed m[i]
            gin, gr = self.up[(i, j)].backward(cache["up"][(i, j)], grad_out[j])
            gm[i] = K.add(gm[i], gin)
            grads.update(gr)
        gx = list(gm)
        for i, j in self.spec.down_pairs():    # down[i->j] consumed x[i]
            gin, gr = self.down[(i, j)].backward(cache["down"][(i, j)], gm[j])
            gx[i] = K.add(gx[i], gin)
            grads.update(gr)
        return gx, grads

    def parameters(self):
        out = []
        for pair in self.spec.down_pairs():
            out.extend(self.down[pair].parameters())
        for pair in self.spec.up_pairs():
            out.extend(self.up[pair].parameters())
        return out

    def macs(self, level_shapes) -> int:
        total = 0
        for i, j in self.spec.down_pairs():
            total += self.down[(i, j)].macs(level_shapes[i])
        for i, j in self.spec.up_pairs():
            total += self.up[(i, j)].macs(level_shapes[i])
        return total

    def out_shapes(self, level_shapes):
        return list(level_shapes)


# ---------------------------------------------------------------------------
# pyramid expansion (silo that appends one coarser level)
# ---------------------------------------------------------------------------

def expanded_input(silo: Silo, p: FeaturePyramid) -> FeaturePyramid:
    """Append an all-zero coarsest level sized for ``silo``'s full pyramid."""
    n = silo.spec.levels
    if p.num_levels != n - 1:
        raise ConfigurationError(
            f"{silo.name}: expansion expects {n - 1} input levels, got {p.num_levels}"
        )
    last = p.levels[-1]
    if p.require_halving and (last.h % 2 or last.w % 2):
        raise ConfigurationError(
            f"{silo.name}: cannot halve spatial {(last.h, last.w)} for the new level"
        )
    zshape = (last.n, silo.spec.channels[n - 1], last.h // 2, last.w // 2)
    zero = Tensor.zeros(zshape, dtype=p.dtype)
    return p.with_levels(list(p.levels) + [zero])


def expand_pyramid(silo: Silo, p: FeaturePyramid,
                   ctx: ExecContext | None = None, want_cache: bool = False):
    """Run a silo as a pyramid expander: inject a zero coarsest level, fuse.

    The zero level is reconstructed (as numerical zeros) by the ordinary
    silo inverse, which is what keeps expansion inside the reversible chain.
    """
    return silo.forward(expanded_input(silo, p), ctx, want_cache)


# ---------------------------------------------------------------------------
# two-stream reversible residual block
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RevBlockSpec:
    """Channel split and residual-branch geometry for a RevBlock."""

    channels_a: int
    channels_b: int
    kernel: int = 3
    expansion: int = 1
    se_ratio: float | None = None

    def __post_init__(self):
        if self.channels_a < 1 or self.channels_b < 1:
            raise ConfigurationError("RevBlock needs two non-empty channel groups")

    def to_config(self) -> dict[str, str]:
        return {
            "channels_a": str(self.channels_a),
            "channels_b": str(self.channels_b),
            "kernel": str(self.kernel),
            "expansion": str(self.expansion),
            "se_ratio": repr(self.se_ratio) if self.se_ratio else "",
        }

    @staticmethod
    def from_config(section) -> "RevBlockSpec":
        se = section.get("se_ratio", "")
        return RevBlockSpec(
            channels_a=int(section["channels_a"]),
            channels_b=int(section["channels_b"]),
            kernel=int(section.get("kernel", 3)),
            expansion=int(section.get("expansion", 1)),
            se_ratio=float(se) if se else None,
        )


class RevBlock:
    """Additive two-stream coupling on one tensor.

    Forward: y_a = x_a + F(x_b); y_b = x_b + G(y_a).
    Inverse subtracts the same (forward-only) evaluations in reverse order.
    """

    def __init__(self, spec: RevBlockSpec, f_transform, g_transform, name: str = "revblock"):
        self.spec = spec
        self.f = f_transform   # maps channels_b -> channels_a
        self.g = g_transform   # maps channels_a -> channels_b
        self.name = name

    @staticmethod
    def build(spec: RevBlockSpec, *, name: str = "revblock",
              rng: np.random.Generator, dtype) -> "RevBlock":
        make = lambda tag, cin, cout: MBConvTransform(
            f"{name}.{tag}",
            MBConv(f"{name}.{tag}", cin, cout, kernel=spec.kernel, stride=1,
                   padding=spec.kernel // 2, expansion=spec.expansion,
                   se_ratio=spec.se_ratio, zero_final_gamma=True,
                   rng=rng, dtype=dtype),
        )
        return RevBlock(spec,
                        make("f", spec.channels_b, spec.channels_a),
                        make("g", spec.channels_a, spec.channels_b), name)

    def _split(self, x: Tensor):
        ca = self.spec.channels_a
        if x.c != ca + self.spec.channels_b:
            raise ConfigurationError(
                f"{self.name}: expected {ca + self.spec.channels_b} channels, got {x.c}"
            )
        return Tensor(np.ascontiguousarray(x.data[:, :ca])), \
               Tensor(np.ascontiguousarray(x.data[:, ca:]))

    @staticmethod
    def _join(a: Tensor, b: Tensor) -> Tensor:
        return Tensor(np.concatenate([a.data, b.data], axis=1))

    def forward(self, x: Tensor, ctx: ExecContext | None = None, want_cache: bool = False):
        xa, xb = self._split(x)
        f_out, f_cache = self.f.forward(xb, ctx, want_cache)
        ya = K.add(xa, f_out)
        g_out, g_cache = self.g.forward(ya, ctx, want_cache)
        yb = K.add(xb, g_out)
        cache = {"f": f_cache, "g": g_cache} if want_cache else None
        return self._join(ya, yb), cache

    def inverse(self, y: Tensor, ctx: ExecContext | None = None, capture: bool = False):
        ya, yb = self._split(y)
        g_out, g_cache = self.g.forward(ya, ctx, capture)
        xb = K.sub(yb, g_out)
        f_out, f_cache = self.f.forward(xb, ctx, capture)
        xa = K.sub(ya, f_out)
        cache = {"f": f_cache, "g": g_cache} if capture else None
        return self._join(xa, xb), cache

    def backward(self, cache, gy: Tensor, ctx: ExecContext | None = None):
        gya, gyb = self._split(gy)
        g_in, g_grads = self.g.backward(cache["g"], gyb)
        gxa = K.add(gya, g_in)          # total gradient reaching y_a (== x_a's)
        f_in, f_grads = self.f.backward(cache["f"], gxa)
        gxb = K.add(gyb, f_in)
        grads = dict(f_grads)
        grads.update(g_grads)
        return self._join(gxa, gxb), grads

    def parameters(self):
        return list(self.f.parameters()) + list(self.g.parameters())

    def macs(self, in_shape) -> int:
        n, c, h, w = in_shape
        return (self.f.macs((n, self.spec.channels_b, h, w))
                + self.g.macs((n, self.spec.channels_a, h, w)))
