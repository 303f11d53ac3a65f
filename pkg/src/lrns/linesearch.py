"""Strong-Wolfe line search (bracketing and zoom with cubic interpolation)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class LineSearchError(RuntimeError):
    pass


@dataclass
class LineSearchResult:
    alpha: float
    phi: float
    dphi: float
    evaluations: int


def _cubic_min(a, fa, ga, b, fb, gb):
    """Minimizer of the cubic through (a, fa, ga), (b, fb, gb); None if not usable."""
    d1 = ga + gb - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - ga * gb
    if disc < 0:
        return None
    d2 = np.sign(b - a) * np.sqrt(disc)
    x = b - (b - a) * (gb + d2 - d1) / (gb - ga + 2.0 * d2)
    return x if np.isfinite(x) else None


def wolfe_search(phi: Callable[[float], float], dphi: Callable[[float], float],
                 alpha0: float = 1.0, c1: float = 1e-4, c2: float = 0.9,
                 max_evals: int = 50, alpha_max: float = 1e20) -> LineSearchResult:
    """Step ``alpha > 0`` satisfying the strong Wolfe conditions for ``phi``.

    ``phi(alpha)`` is the objective along the ray and ``dphi`` its derivative;
    ``dphi(0)`` must be negative. Raises :class:`LineSearchError` after
    ``max_evals`` trial steps.
    """
    if not 0.0 < c1 < c2 < 1.0:
        raise ValueError("need 0 < c1 < c2 < 1")
    f0, g0 = phi(0.0), dphi(0.0)
    if not g0 < 0.0:
        raise LineSearchError(f"not a descent direction (phi'(0) = {g0:.3e})")
    evals = 0

    def zoom(lo, flo, glo, hi, fhi, ghi):
        nonlocal evals
        while evals < max_evals:
            a = _cubic_min(lo, flo, glo, hi, fhi, ghi)
            left, right = min(lo, hi), max(lo, hi)
            width = right - left
            if a is None or not (left + 0.1 * width <= a <= right - 0.1 * width):
                a = 0.5 * (lo + hi)
            fa, ga = phi(a), dphi(a)
            evals += 1
            if fa > f0 + c1 * a * g0 or fa >= flo:
                hi, fhi, ghi = a, fa, ga
            else:
                if abs(ga) <= -c2 * g0:
                    return LineSearchResult(a, fa, ga, evals)
                if ga * (hi - lo) >= 0:
                    hi, fhi, ghi = lo, flo, glo
                lo, flo, glo = a, fa, ga
        raise LineSearchError(f"zoom phase did not satisfy the Wolfe conditions in {max_evals} trials")

    prev, fprev, gprev = 0.0, f0, g0
    a = alpha0
    while evals < max_evals:
        fa, ga = phi(a), dphi(a)
        evals += 1
        if fa > f0 + c1 * a * g0 or (evals > 1 and fa >= fprev):
            return zoom(prev, fprev, gprev, a, fa, ga)
        if abs(ga) <= -c2 * g0:
            return LineSearchResult(a, fa, ga, evals)
        if ga >= 0:
            return zoom(a, fa, ga, prev, fprev, gprev)
        prev, fprev, gprev = a, fa, ga
        a = min(2.0 * a, alpha_max)
    raise LineSearchError(f"no step satisfying the Wolfe conditions in {max_evals} trials")


def armijo_backtrack(phi: Callable[[float], float], slope: float, alpha0: float = 1.0,
                     c1: float = 1e-4, shrink: float = 0.5, max_evals: int = 50) -> LineSearchResult:
    """Largest ``alpha0 * shrink^j`` with sufficient decrease; ``slope = phi'(0) < 0``."""
    f0 = phi(0.0)
    a = alpha0
    for j in range(1, max_evals + 1):
        fa = phi(a)
        if fa <= f0 + c1 * a * slope:
            return LineSearchResult(a, fa, np.nan, j)
        a *= shrink
    raise LineSearchError(f"Armijo backtracking failed after {max_evals} trials")
