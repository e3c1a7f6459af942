"""Execution context threaded through forward/backward code paths.

``OpCounters`` tallies forward kernel evaluations, bucketed by the phase of
the training step in which they ran.  The counters are the measurement side
of the compute cost model: a recompute-mode backward pass re-executes every
fusion transform exactly once, and that surcharge has to show up here, in the
``backward`` phase bucket, while a stored-mode backward must show zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

FORWARD = "forward"
BACKWARD = "backward"

# Counter key for one evaluation of a coupling transform (the unit the
# analytic compute model predicts).  Kernel-level keys ("conv2d", ...) are
# tallied too, but f_eval is the contract-bearing one.
F_EVAL = "f_eval"


class OpCounters:
    """Per-step tally of forward evaluations, keyed by (phase, kind)."""

    def __init__(self) -> None:
        self._counts: dict[tuple[str, str], int] = {}

    def add(self, phase: str, kind: str, n: int = 1) -> None:
        key = (phase, kind)
        self._counts[key] = self._counts.get(key, 0) + n

    def get(self, phase: str, kind: str) -> int:
        return self._counts.get((phase, kind), 0)

    def phase_total(self, phase: str, kind: str = F_EVAL) -> int:
        return self.get(phase, kind)

    def reset(self) -> None:
        self._counts.clear()

    def snapshot(self) -> dict[tuple[str, str], int]:
        return dict(self._counts)


@dataclass
class ExecContext:
    """Carries the current phase, counters, and batch-norm step identity.

    ``step_key`` identifies the forward invocation a batch-norm layer is
    serving: a recomputed forward with the same key normalizes identically
    but must not update running statistics a second time.
    """

    counters: OpCounters | None = None
    phase: str = FORWARD
    step_key: object | None = None
    train: bool = True

    def count(self, kind: str, n: int = 1) -> None:
        if self.counters is not None:
            self.counters.add(self.phase, kind, n)

    def backward_view(self) -> "ExecContext":
        """Same step, same counters, but tallied into the backward phase."""
        return ExecContext(
            counters=self.counters,
            phase=BACKWARD,
            step_key=self.step_key,
            train=self.train,
        )
