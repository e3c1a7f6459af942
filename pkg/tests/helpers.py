"""Shared numeric utilities for the test suite.

Kept independent of the package's own helpers so the oracles the tests use
are not the code under test.
"""

from __future__ import annotations

import numpy as np


def rel_diff(a: np.ndarray, b: np.ndarray, floor: float = 1e-30) -> float:
    """Max elementwise difference over the larger of the two magnitudes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), floor)
    return float(np.max(np.abs(a - b))) / scale


def central_fd(loss_fn, flat: np.ndarray, idx: int, step: float) -> float:
    """Plain central difference of ``loss_fn`` wrt one element of ``flat``."""
    orig = flat[idx]
    flat[idx] = orig + step
    lp = loss_fn()
    flat[idx] = orig - step
    lm = loss_fn()
    flat[idx] = orig
    return (lp - lm) / (2.0 * step)


def richardson_fd(loss_fn, flat: np.ndarray, idx: int, step: float) -> float:
    """Central difference extrapolated over steps ``step`` and ``step/2``,
    cancelling the O(step^2) truncation term (needed through deep stacks of
    batch-normalized blocks, whose third derivatives are large)."""
    coarse = central_fd(loss_fn, flat, idx, step)
    fine = central_fd(loss_fn, flat, idx, step / 2.0)
    return (4.0 * fine - coarse) / 3.0


def affine_fit(xs, ys) -> tuple[float, float, float]:
    """Least-squares line fit: returns (slope, intercept, r_squared)."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return float(slope), float(intercept), r2
