"""Truncated Neumann-series inverse of a mean matrix plus a low-rank update.

For ``A_m = A_bar + U V_m^T`` the solution of ``A_m x = b`` is approximated
by

    x = sum_{r=0}^{R} (-A_bar^{-1} U V_m^T)^r A_bar^{-1} b,

evaluated by the recursion ``t_0 = A_bar^{-1} b``, ``t_{r+1} = -W (V_m^T t_r)``
with ``W = A_bar^{-1} U`` precomputed once. After setup every term costs two
``N x k`` products; no per-sample factorization is ever formed.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .linalg import SymmetricFactorization, factorize_spd, make_rng, spectral_norm_estimate
from .lowrank import LowRankFactors
from .parallel import map_chunks, ordered_sum


class NeumannDivergenceWarning(RuntimeWarning):
    pass


@dataclass
class SolveReport:
    """Per-sample spectral-radius estimates and guard outcome."""

    rho: np.ndarray
    threshold: float
    terms: int
    flagged: list[int] = field(default_factory=list)

    @property
    def diverging(self) -> list[int]:
        return [int(m) for m in np.flatnonzero(self.rho >= 1.0)]

    def as_dict(self) -> dict:
        return {
            "terms": self.terms,
            "guard_threshold": self.threshold,
            "rho": [float(r) for r in self.rho],
            "rho_max": float(self.rho.max()) if len(self.rho) else 0.0,
            "flagged": list(self.flagged),
            "diverging": self.diverging,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2)


@dataclass
class NeumannOperator:
    mean: SymmetricFactorization
    correction: np.ndarray  # W = A_bar^{-1} U, (N, k)
    factors: LowRankFactors
    terms: int
    guard: float = 0.95
    guard_iters: int = 30

    @property
    def dimension(self) -> int:
        return self.correction.shape[0]

    @property
    def count(self) -> int:
        return self.factors.count

    # -- forward action ------------------------------------------------------

    def series(self, t0: np.ndarray, samples: Sequence[int]) -> np.ndarray:
        """Sum of the series given ``t0 = A_bar^{-1} rhs`` (columns per sample)."""
        t = t0
        acc = t0.copy()
        for _ in range(self.terms):
            t = -(self.correction @ self.factors.project(t, samples))
            acc += t
        return acc

    def apply_block(self, rhs: np.ndarray, samples: Sequence[int]) -> np.ndarray:
        """Approximate ``A_m^{-1} rhs[:, j]`` for ``m = samples[j]``."""
        return self.series(self.mean.solve(rhs), samples)

    # -- transpose action ----------------------------------------------------

    def apply_block_t(self, y: np.ndarray, samples: Sequence[int]) -> np.ndarray:
        """Transpose of :meth:`apply_block`.

        The transpose of ``sum_r (-A^{-1} U V^T)^r A^{-1}`` is
        ``A^{-1} sum_r (-V W^T)^r``; ``A_bar`` is symmetric.
        """
        s = y
        acc = y.copy()
        for _ in range(self.terms):
            s = -self.factors.lift(self.correction.T @ s, samples)
            acc += s
        return self.mean.solve(acc)


def _dense(a) -> np.ndarray:
    return a.toarray() if sp.issparse(a) else np.asarray(a, dtype=float)


def build_operator(mean_matrix, factors: LowRankFactors, terms: int, guard: float = 0.95,
                   guard_iters: int = 30, factorization: SymmetricFactorization | None = None
                   ) -> NeumannOperator:
    """Factorize the mean matrix once and precompute ``W = A_bar^{-1} U``."""
    if terms < 0:
        raise ValueError("truncation index must be >= 0")
    if not 0.0 < guard <= 1.0:
        raise ValueError("guard threshold must lie in (0, 1]")
    if mean_matrix.shape != (factors.dimension, factors.dimension):
        raise ValueError(
            f"mean matrix {mean_matrix.shape} does not match factor dimension {factors.dimension}"
        )
    fact = factorization if factorization is not None else factorize_spd(_dense(mean_matrix))
    w = fact.solve(factors.basis)
    return NeumannOperator(fact, np.ascontiguousarray(w), factors, terms, guard, guard_iters)


def guard_sample(op: NeumannOperator, m: int, seed: int = 0) -> float:
    """Power-iteration estimate of the spectral radius of ``A_bar^{-1} U V_m^T``."""
    if not 0 <= m < op.count:
        raise IndexError(f"sample index {m} out of range")
    w = op.correction
    v = op.factors.factor(m)
    return spectral_norm_estimate(lambda x: w @ (v.T @ x), op.dimension,
                                  iters=op.guard_iters, seed=seed + m)


def guard_all(op: NeumannOperator, seed: int = 0, threads: int | None = None) -> SolveReport:
    """Run :func:`guard_sample`'s iteration for every sample, batched per chunk."""

    def run(chunk: range) -> np.ndarray:
        idx = list(chunk)
        x = np.stack([make_rng(seed + m).standard_normal(op.dimension) for m in idx], axis=1)
        x /= np.linalg.norm(x, axis=0)
        logs = np.zeros((op.guard_iters, len(idx)))
        total = np.zeros(len(idx))
        dead = np.zeros(len(idx), dtype=bool)
        for i in range(op.guard_iters):
            y = op.correction @ op.factors.project(x, idx)
            nrm = np.linalg.norm(y, axis=0)
            dead |= nrm == 0.0
            nrm[dead] = 1.0
            total += np.log(nrm)
            logs[i] = total
            x = y / nrm
        half = op.guard_iters // 2
        if half == 0:
            rho = np.exp(logs[-1])
        else:
            rho = np.exp((logs[-1] - logs[half - 1]) / (op.guard_iters - half))
        rho[dead] = 0.0
        return rho

    rho = np.concatenate(map_chunks(run, op.count, threads))
    flagged = [int(m) for m in np.flatnonzero(rho >= op.guard)]
    return SolveReport(rho=rho, threshold=op.guard, terms=op.terms, flagged=flagged)


def warn_on_guard(report: SolveReport) -> None:
    if report.flagged:
        worst = float(report.rho.max())
        msg = (f"{len(report.flagged)} sample(s) exceed the Neumann guard "
               f"{report.threshold} (max rho = {worst:.3f})")
        if report.diverging:
            msg += f"; {len(report.diverging)} with rho >= 1, the series diverges"
        warnings.warn(msg, NeumannDivergenceWarning, stacklevel=3)


def apply_inverse(op: NeumannOperator, m: int, rhs: np.ndarray) -> np.ndarray:
    """Truncated-series approximation of ``(A_bar + U V_m^T)^{-1} rhs``."""
    rhs = np.asarray(rhs, dtype=float)
    return op.apply_block(rhs[:, None], [m])[:, 0]


def apply_inverse_t(op: NeumannOperator, m: int, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    return op.apply_block_t(y[:, None], [m])[:, 0]


@dataclass
class CollectionSolution:
    mean: np.ndarray  # (L + 1, N) when an initial state is given, else (L, N)
    samples: np.ndarray | None  # (M, L, N)
    report: SolveReport


def solve_collection(op: NeumannOperator, loads: Sequence[np.ndarray], initial: np.ndarray | None = None,
                     keep_samples: bool = False, threads: int | None = None) -> CollectionSolution:
    """Solve ``A_m u_{m,l} = b_l`` for all samples and loads; return the sample mean.

    The unperturbed solves ``A_bar^{-1} b_l`` are shared by all samples, the
    per-sample work is the series correction only.
    """
    loads = np.asarray(loads, dtype=float)
    if loads.ndim != 2 or len(loads) == 0:
        raise ValueError("need a nonempty sequence of load vectors")
    report = guard_all(op, threads=threads)
    warn_on_guard(report)
    base = op.mean.solve(loads.T)  # (N, L)
    n_loads = loads.shape[0]

    def run(chunk: range):
        idx = list(chunk)
        sols = np.empty((len(idx), n_loads, op.dimension))
        for l in range(n_loads):
            t0 = np.repeat(base[:, l:l + 1], len(idx), axis=1)
            sols[:, l, :] = op.series(t0, idx).T
        return sols

    parts = map_chunks(run, op.count, threads)
    mean = ordered_sum([p.sum(axis=0) for p in parts]) / op.count
    if initial is not None:
        mean = np.vstack([np.asarray(initial, dtype=float)[None, :], mean])
    samples = np.concatenate(parts) if keep_samples else None
    return CollectionSolution(mean, samples, report)
