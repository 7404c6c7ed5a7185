"""Small deterministic minimizers: limited-memory BFGS and golden-section search."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Callable

import numpy as np

_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0
_ARMIJO = 1e-4
_MAX_HALVINGS = 60


@dataclass
class MinimizeResult:
    x: np.ndarray
    fun: float
    iterations: int
    converged: bool


def lbfgs(
    fun_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0,
    *,
    history: int = 10,
    initial_step: float = 1e-4,
    max_iterations: int = 2000,
    rtol: float = 1e-10,
    free: np.ndarray | None = None,
) -> MinimizeResult:
    """Minimize a smooth function given its value and gradient.

    The first move is a steepest-descent step of length ``initial_step``
    (scaled down for large gradients); after that the two-loop recursion
    supplies a curvature-scaled direction tried at unit step and halved
    until the Armijo condition holds. Stops once an accepted step improves
    the objective by less than ``rtol`` relative, or after
    ``max_iterations`` steps. Coordinates with ``free == False`` stay at
    their starting values.
    """
    x = np.array(x0, dtype=float)
    mask = np.ones_like(x) if free is None else np.asarray(free, dtype=float)
    f, g = fun_grad(x)
    g = g * mask
    if not math.isfinite(f) or not np.all(np.isfinite(g)):
        return MinimizeResult(x, math.inf, 0, False)

    pairs: deque[tuple[np.ndarray, np.ndarray, float]] = deque(maxlen=history)
    for it in range(1, max_iterations + 1):
        if not np.any(g):
            return MinimizeResult(x, f, it - 1, True)
        if pairs:
            d = _two_loop(g, pairs)
            step = 1.0
            if g @ d >= 0:
                pairs.clear()
        if not pairs:
            d = -g
            step = initial_step * min(1.0, 1.0 / np.abs(g).sum())
        slope = g @ d

        for _ in range(_MAX_HALVINGS):
            x_new = x + step * d
            f_new, g_new = fun_grad(x_new)
            if math.isfinite(f_new) and f_new <= f + _ARMIJO * step * slope:
                break
            step *= 0.5
        else:
            if pairs:
                pairs.clear()
                continue
            return MinimizeResult(x, f, it, True)

        g_new = g_new * mask
        if not np.all(np.isfinite(g_new)):
            return MinimizeResult(x, f, it, False)
        s, y = x_new - x, g_new - g
        sy = s @ y
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            pairs.append((s, y, 1.0 / sy))
        improvement = f - f_new
        x, f, g = x_new, f_new, g_new
        if improvement <= rtol * max(abs(f), 1e-300):
            return MinimizeResult(x, f, it, True)
    return MinimizeResult(x, f, max_iterations, False)


def _two_loop(g, pairs):
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    s, y, _ = pairs[-1]
    q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def golden_section(f: Callable[[float], float], lo: float, hi: float, rtol: float = 1e-9):
    """Minimize a unimodal ``f`` on ``[lo, hi]``; returns ``(x, f(x))``.

    ``rtol`` is relative to ``max(|lo|, |hi|, 1)``.
    """
    tol = rtol * max(abs(lo), abs(hi), 1.0)
    x1 = hi - _INV_PHI * (hi - lo)
    x2 = lo + _INV_PHI * (hi - lo)
    f1, f2 = f(x1), f(x2)
    while hi - lo > tol:
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - _INV_PHI * (hi - lo)
            f1 = f(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + _INV_PHI * (hi - lo)
            f2 = f(x2)
    x = 0.5 * (lo + hi)
    return x, f(x)
