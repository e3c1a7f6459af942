"""Two-mode training engine over chains of reversible blocks.

A ``Tape`` executes a fixed sequence of reversible blocks and supports two
backward strategies that must produce the same gradients:

* ``stored`` — conventional backprop: every block's input pyramid and VJP
  cache stay registered as live activations from forward until that block's
  backward has consumed them.  Peak activation memory grows affinely with
  depth; the backward phase re-evaluates nothing.
* ``recompute`` — reversible backprop: forward keeps only the final output
  (and the original input).  Backward reconstructs each block's input by
  running the block's inverse, capturing en route exactly the caches the
  VJPs need — each transform re-evaluated exactly once.  Peak activation
  memory is flat in depth: roughly two adjacent pyramids plus one block
  cache, whatever the chain length.

Live activation bytes are tracked by an explicit registry rather than by
heap inspection.  The registry refcounts unique arrays, so aliased cache
entries are never double-counted, and an unbalanced register/release is a
loud ``AccountingError``.  Only engine-managed activations are counted:
parameters, gradient buffers, and kernel-internal scratch are out of scope
by design.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .context import BACKWARD, F_EVAL, FORWARD, ExecContext, OpCounters
from .coupling import FeaturePyramid, RevBlock, Silo, expand_pyramid, expanded_input
from .errors import AccountingError, ConfigurationError, StateError
from .tensor import Tensor


class BackwardMode(str, Enum):
    STORED = "stored"
    RECOMPUTE = "recompute"

    @staticmethod
    def parse(value) -> "BackwardMode":
        if isinstance(value, BackwardMode):
            return value
        try:
            return BackwardMode(str(value).lower())
        except ValueError:
            raise ConfigurationError(
                f"backward mode must be 'stored' or 'recompute', got {value!r}"
            ) from None


# ---------------------------------------------------------------------------
# live-activation accounting
# ---------------------------------------------------------------------------

def _iter_arrays(obj):
    """Yield every ndarray reachable inside a cache/pyramid structure."""
    if obj is None or isinstance(obj, (bool, int, float, str)):
        return
    if isinstance(obj, np.ndarray):
        yield obj
    elif isinstance(obj, Tensor):
        yield obj.data
    elif isinstance(obj, FeaturePyramid):
        for lv in obj.levels:
            yield lv.data
    elif isinstance(obj, dict):
        for v in obj.values():
            yield from _iter_arrays(v)
    elif isinstance(obj, (list, tuple)):
        for v in obj:
            yield from _iter_arrays(v)


@dataclass
class MemoryEvent:
    op: str          # "+" or "-"
    label: str
    delta: int
    current: int


@dataclass
class MemoryTrace:
    events: list[MemoryEvent]
    peak_bytes: int


class LiveBytesRegistry:
    """Refcounting byte registry for engine-managed activations.

    ``add`` walks a structure, registers every distinct ndarray it reaches
    (arrays already live are refcounted, not recounted), and returns a token;
    ``remove`` releases exactly what that token registered.  Unbalanced usage
    fails loudly.
    """

    def __init__(self) -> None:
        self._live: dict[int, list] = {}   # id -> [array, refcount]
        self._tokens: dict[int, tuple[str, list[np.ndarray]]] = {}
        self._next_token = 0
        self.current = 0
        self.peak = 0
        self.events: list[MemoryEvent] = []

    def add(self, obj, label: str) -> int:
        arrays = list(_iter_arrays(obj))
        delta = 0
        for arr in arrays:
            entry = self._live.get(id(arr))
            if entry is None:
                self._live[id(arr)] = [arr, 1]
                delta += arr.nbytes
            else:
                entry[1] += 1
        self.current += delta
        self.peak = max(self.peak, self.current)
        token = self._next_token
        self._next_token += 1
        self._tokens[token] = (label, arrays)
        self.events.append(MemoryEvent("+", label, delta, self.current))
        return token

    def remove(self, token: int) -> None:
        if token not in self._tokens:
            raise AccountingError(f"unknown or already-released memory token {token}")
        label, arrays = self._tokens.pop(token)
        delta = 0
        for arr in arrays:
            entry = self._live.get(id(arr))
            if entry is None:
                raise AccountingError(f"release of untracked array under token '{label}'")
            entry[1] -= 1
            if entry[1] == 0:
                del self._live[id(arr)]
                delta += arr.nbytes
        self.current -= delta
        self.events.append(MemoryEvent("-", label, -delta, self.current))

    def assert_empty(self) -> None:
        if self._tokens or self._live or self.current != 0:
            open_labels = sorted(label for label, _ in self._tokens.values())
            raise AccountingError(
                f"activation registry unbalanced at step end: "
                f"{self.current} bytes live, open tokens {open_labels}"
            )

    def reset_trace(self) -> None:
        """Start a fresh per-step trace; live entries must already be zero."""
        self.assert_empty()
        self.peak = 0
        self.events = []

    def trace(self) -> MemoryTrace:
        return MemoryTrace(list(self.events), self.peak)


# ---------------------------------------------------------------------------
# reversible block protocol and adapters
# ---------------------------------------------------------------------------

class ReversibleBlock:
    """One reversible stage of a tape.

    ``forward``/``inverse`` map whole pyramids; ``backward`` maps per-level
    gradient lists from output side to input side using only cached values.
    A cache produced by ``inverse(..., capture=True)`` must be accepted by
    ``backward`` exactly like a forward cache.
    """

    name = "block"

    def forward(self, p: FeaturePyramid, ctx: ExecContext | None = None,
                want_cache: bool = False):
        raise NotImplementedError

    def inverse(self, p_out: FeaturePyramid, ctx: ExecContext | None = None,
                capture: bool = False):
        raise NotImplementedError

    def backward(self, cache, grad_out: list[Tensor]):
        raise NotImplementedError

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        return []


class SiloStage(ReversibleBlock):
    """A fusion silo as a tape stage (level count preserved)."""

    def __init__(self, silo: Silo):
        self.silo = silo
        self.name = silo.name

    def forward(self, p, ctx=None, want_cache=False):
        return self.silo.forward(p, ctx, want_cache)

    def inverse(self, p_out, ctx=None, capture=False):
        p_in, cache, _ = self.silo.inverse(p_out, ctx, capture)
        return p_in, cache

    def backward(self, cache, grad_out):
        return self.silo.backward(cache, grad_out)

    def parameters(self):
        return self.silo.parameters()


class ExpandStage(ReversibleBlock):
    """A silo run as a pyramid expander: N-1 levels in, N levels out."""

    def __init__(self, silo: Silo):
        self.silo = silo
        self.name = silo.name

    def forward(self, p, ctx=None, want_cache=False):
        return expand_pyramid(self.silo, p, ctx, want_cache)

    def inverse(self, p_out, ctx=None, capture=False):
        p_in, cache, _ = self.silo.inverse(p_out, ctx, capture)
        # the recovered coarsest level is the injected zero (numerically);
        # it is not part of the stage input
        return p_out.with_levels(p_in.levels[:-1]), cache

    def backward(self, cache, grad_out):
        gx, grads = self.silo.backward(cache, grad_out)
        return gx[:-1], grads

    def parameters(self):
        return self.silo.parameters()


class RevStage(ReversibleBlock):
    """A two-stream reversible block as a single-level tape stage."""

    def __init__(self, block: RevBlock):
        self.block = block
        self.name = block.name

    @staticmethod
    def _single(p: FeaturePyramid) -> Tensor:
        if p.num_levels != 1:
            raise ConfigurationError("RevStage operates on single-level pyramids")
        return p.levels[0]

    def forward(self, p, ctx=None, want_cache=False):
        y, cache = self.block.forward(self._single(p), ctx, want_cache)
        return p.with_levels([y]), cache

    def inverse(self, p_out, ctx=None, capture=False):
        x, cache = self.block.inverse(self._single(p_out), ctx, capture)
        return p_out.with_levels([x]), cache

    def backward(self, cache, grad_out):
        gx, grads = self.block.backward(cache, grad_out[0])
        return [gx], grads

    def parameters(self):
        return self.block.parameters()


# ---------------------------------------------------------------------------
# the tape
# ---------------------------------------------------------------------------

@dataclass
class BackwardResult:
    input_grads: list[Tensor]
    param_grads: dict[str, np.ndarray]


class Tape:
    """Executes a block chain forward and backward under one of two modes."""

    def __init__(self, blocks: list[ReversibleBlock], mode=BackwardMode.STORED,
                 counters: OpCounters | None = None,
                 registry: LiveBytesRegistry | None = None):
        if not blocks:
            raise ConfigurationError("tape needs at least one block")
        self.blocks = list(blocks)
        self.mode = BackwardMode.parse(mode)
        self.counters = counters if counters is not None else OpCounters()
        self.registry = registry if registry is not None else LiveBytesRegistry()
        self.saved_activations: list = []
        self.input_pyramid: FeaturePyramid | None = None
        self.output_pyramid: FeaturePyramid | None = None
        self._phase = "idle"        # idle -> forwarded -> idle
        self._step_key: object | None = None
        self._input_token: int | None = None
        self._pyramid_tokens: list[int] = []
        self._cache_tokens: list[int] = []

    # -- helpers -----------------------------------------------------------
    def parameters(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for b in self.blocks:
            out.extend(b.parameters())
        return out

    def _run_block(self, fn, index: int, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigurationError as e:
            raise ConfigurationError(
                f"block {index} ({self.blocks[index].name}): {e}"
            ) from e

    # -- forward -------------------------------------------------------------
    def forward(self, p: FeaturePyramid, step_key: object | None = None,
                train: bool = True) -> FeaturePyramid:
        if self._phase != "idle":
            raise StateError("forward called while a step is already in flight")
        self.counters.reset()
        self.registry.reset_trace()
        self.saved_activations = []
        self._pyramid_tokens = []
        self._cache_tokens = []
        self._step_key = step_key
        ctx = ExecContext(self.counters, FORWARD, step_key, train)
        stored = self.mode is BackwardMode.STORED

        self.input_pyramid = p
        self._input_token = self.registry.add(p, "input")
        cur = p
        cur_token = self._input_token
        for i, block in enumerate(self.blocks):
            out, cache = self._run_block(block.forward, i, cur, ctx, stored)
            out_token = self.registry.add(out, f"block{i}.out")
            if stored:
                self._cache_tokens.append(self.registry.add(cache, f"block{i}.cache"))
                self._pyramid_tokens.append(out_token)
                self.saved_activations.append((cur, cache))
            else:
                if cur_token != self._input_token:
                    self.registry.remove(cur_token)
            cur, cur_token = out, out_token
        if not stored:
            self.saved_activations = [cur]
            self._pyramid_tokens = [cur_token]
        self.output_pyramid = cur
        self._phase = "forwarded"
        return cur

    # -- backward --------------------------------------------------------------
    def backward(self, grad_out: list[Tensor]) -> BackwardResult:
        if self._phase != "forwarded":
            raise StateError("backward requires a completed forward pass")
        if len(grad_out) != self.output_pyramid.num_levels:
            raise ConfigurationError(
                f"gradient has {len(grad_out)} levels, output has "
                f"{self.output_pyramid.num_levels}"
            )
        ctx = ExecContext(self.counters, BACKWARD, self._step_key, True)
        param_grads: dict[str, np.ndarray] = {}
        g = list(grad_out)

        if self.mode is BackwardMode.STORED:
            for i in range(len(self.blocks) - 1, -1, -1):
                _, cache = self.saved_activations[i]
                g, grads = self._run_block(self.blocks[i].backward, i, cache, g)
                param_grads.update(grads)
                self.registry.remove(self._pyramid_tokens[i])
                self.registry.remove(self._cache_tokens[i])
        else:
            cur = self.output_pyramid
            cur_token = self._pyramid_tokens[0]
            for i in range(len(self.blocks) - 1, -1, -1):
                block = self.blocks[i]
                p_in, cache = self._run_block(block.inverse, i, cur, ctx, True)
                in_token = self.registry.add(p_in, f"block{i}.reconstructed")
                cache_token = self.registry.add(cache, f"block{i}.inverse_cache")
                g, grads = self._run_block(block.backward, i, cache, g)
                param_grads.update(grads)
                self.registry.remove(cur_token)
                self.registry.remove(cache_token)
                cur, cur_token = p_in, in_token
            self.registry.remove(cur_token)

        self.registry.remove(self._input_token)
        self.registry.assert_empty()
        self.saved_activations = []
        self._phase = "idle"
        return BackwardResult(input_grads=g, param_grads=param_grads)

    def discard(self) -> None:
        """Release a forward-only step without running backward."""
        if self._phase == "idle":
            return
        for t in self._pyramid_tokens + self._cache_tokens + [self._input_token]:
            self.registry.remove(t)
        self.registry.assert_empty()
        self.saved_activations = []
        self._phase = "idle"

    # -- measurements --------------------------------------------------------
    def memory_trace(self) -> MemoryTrace:
        return self.registry.trace()

    @property
    def peak_live_bytes(self) -> int:
        return self.registry.peak


def invert_chain(blocks: list[ReversibleBlock], p_out: FeaturePyramid,
                 ctx: ExecContext | None = None) -> FeaturePyramid:
    """Reconstruct a chain's input from its output (no caches, no grads)."""
    cur = p_out
    for block in reversed(blocks):
        cur, _ = block.inverse(cur, ctx, False)
    return cur


def count_forward_evals(counters: OpCounters) -> dict[str, int]:
    """Forward-evaluation totals per phase for the last executed step."""
    return {
        FORWARD: counters.phase_total(FORWARD, F_EVAL),
        BACKWARD: counters.phase_total(BACKWARD, F_EVAL),
    }
