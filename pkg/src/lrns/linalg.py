"""Dense linear-algebra kernels shared by the rest of the package.

Everything here works on 64-bit numpy arrays. The randomized eigensolver
follows the usual sketch / orthonormalize / project recipe; the Cholesky
wrapper exists so that one factorization of a mean operator can be reused
for thousands of right-hand sides.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import lapack, solve_triangular


class RankDeficiencyError(np.linalg.LinAlgError):
    """Raised when a column is (numerically) in the span of its predecessors."""

    def __init__(self, column: int, ratio: float):
        self.column = column
        self.ratio = ratio
        super().__init__(
            f"column {column} is numerically dependent on the previous columns "
            f"(pivot/column-norm = {ratio:.3e})"
        )


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised by :func:`factorize_spd` with the index of the failing pivot."""

    def __init__(self, index: int):
        self.index = index
        super().__init__(f"matrix is not positive definite: pivot {index} is not positive")


def make_rng(seed) -> np.random.Generator:
    """Counter-based (Philox) generator; ``seed`` may be an int or a SeedSequence."""
    return np.random.Generator(np.random.Philox(seed))


def spawn_seeds(seed: int, count: int) -> list[np.random.SeedSequence]:
    """Independent child seeds, one per item, stable under reordering."""
    return np.random.SeedSequence(seed).spawn(count)


# ----------------------------------------------------------------------------
# orthonormalization


def orthonormalize(a: np.ndarray, rtol: float = 1e-14) -> np.ndarray:
    """Orthonormal basis for the column space of a full-column-rank matrix.

    Householder QR with a deficiency guard: if the diagonal of R drops
    below ``rtol`` times the norm of the original column, the column is
    reported as dependent.

    Parameters
    ----------
    a : (n, k) array with n >= k >= 1
    rtol : float
        relative pivot threshold

    Returns
    -------
    q : (n, k) array with orthonormal columns spanning range(a)
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise ValueError("expected a 2-D array")
    n, k = a.shape
    if not n >= k >= 1:
        raise ValueError(f"need n >= k >= 1, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    q, r = np.linalg.qr(a)
    col_norms = np.linalg.norm(a, axis=0)
    pivots = np.abs(np.diag(r))
    for j in range(k):
        if col_norms[j] == 0.0 or pivots[j] < rtol * col_norms[j]:
            ratio = 0.0 if col_norms[j] == 0.0 else pivots[j] / col_norms[j]
            raise RankDeficiencyError(j, ratio)
    return q


def _basis(z: np.ndarray) -> np.ndarray:
    # Householder Q is orthonormal even when z is rank deficient; the extra
    # columns then span arbitrary directions, which is harmless for sketching.
    q, _ = np.linalg.qr(z)
    return q


# ----------------------------------------------------------------------------
# randomized eigenvectors


@dataclass(frozen=True)
class RsvdConfig:
    """Sketch parameters: target rank, oversampling, power iterations, seed.

    ``oversampling=None`` means ``min(10, n - rank)`` once the matrix size is
    known. ``oversampling=0, power_iters=0`` is the plain k-column sketch.
    """

    rank: int
    oversampling: int | None = None
    power_iters: int = 1
    seed: int = 0

    def resolve(self, n: int) -> tuple[int, int]:
        """Return ``(k, p)`` for an ``n x n`` matrix, validating the bounds."""
        k = self.rank
        if k < 1:
            raise ValueError(f"target rank must be >= 1, got {k}")
        if self.power_iters < 0:
            raise ValueError("power_iters must be >= 0")
        p = min(10, n - k) if self.oversampling is None else self.oversampling
        if p < 0:
            raise ValueError(f"oversampling must be >= 0 (rank {k} > dimension {n}?)")
        if k + p > n:
            raise ValueError(f"rank + oversampling = {k + p} exceeds dimension {n}")
        return k, p


def is_symmetric(s: np.ndarray, rtol: float = 1e-10) -> bool:
    scale = np.linalg.norm(s)
    return bool(np.linalg.norm(s - s.T) <= rtol * max(scale, np.finfo(float).tiny))


def rsvd_top_eigvecs(s: np.ndarray, cfg: RsvdConfig) -> np.ndarray:
    """Approximate top-k eigenvectors of a symmetric PSD matrix.

    Stage one sketches ``Z = S P`` with a Gaussian ``P`` of width ``k + p``,
    refines it with ``q`` power iterations and orthonormalizes it to ``Q``.
    Stage two takes the SVD of the projection ``Y = Q^T S`` and returns the
    leading ``k`` columns of ``Q U_Y``.
    """
    s = np.asarray(s, dtype=float)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {s.shape}")
    if not is_symmetric(s):
        raise ValueError("rsvd_top_eigvecs needs a symmetric matrix")
    n = s.shape[0]
    k, p = cfg.resolve(n)

    rng = make_rng(cfg.seed)
    sketch = rng.standard_normal((n, k + p))
    q = _basis(s @ sketch)
    for _ in range(cfg.power_iters):
        # S is symmetric, so S^T S = S S and one QR per half-step suffices
        q = _basis(s @ q)
        q = _basis(s @ q)
    y = q.T @ s
    u_y, _, _ = np.linalg.svd(y, full_matrices=False)
    return q @ u_y[:, :k]


# ----------------------------------------------------------------------------
# Cholesky


@dataclass(frozen=True)
class SymmetricFactorization:
    """Lower Cholesky factor ``L`` with ``A = L L^T``."""

    lower: np.ndarray

    @property
    def dimension(self) -> int:
        return self.lower.shape[0]

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve ``A x = b``; ``b`` may be a vector or an ``(n, r)`` block."""
        y = solve_triangular(self.lower, b, lower=True, check_finite=False)
        return solve_triangular(self.lower, y, lower=True, trans="T", check_finite=False)

    def reconstruct(self) -> np.ndarray:
        return self.lower @ self.lower.T


def factorize_spd(a: np.ndarray) -> SymmetricFactorization:
    """Cholesky factorization of a symmetric positive definite matrix.

    Raises :class:`NotPositiveDefiniteError` carrying the (0-based) index of
    the first non-positive pivot.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if not is_symmetric(a):
        raise ValueError("factorize_spd needs a symmetric matrix")
    c, info = lapack.dpotrf(a, lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefiniteError(info - 1)
    if info < 0:
        raise ValueError(f"dpotrf: illegal argument {-info}")
    return SymmetricFactorization(np.ascontiguousarray(c))


# ----------------------------------------------------------------------------
# power iteration


def spectral_norm_estimate(
    apply: Callable[[np.ndarray], np.ndarray],
    n: int,
    iters: int = 50,
    seed: int = 0,
    apply_t: Callable[[np.ndarray], np.ndarray] | None = None,
) -> float:
    """Power-iteration estimate of the dominant magnitude of a linear operator.

    With ``apply_t`` (the transpose action) the iteration runs on ``A^T A``
    and returns the largest singular value. Without it, the estimate is the
    geometric growth rate of ``||A^j x||`` over the second half of the
    iterations, i.e. the spectral radius; for symmetric operators the two
    coincide. The growth-rate form also copes with a ``+rho / -rho`` pair,
    where the one-step ratio would oscillate.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    x = make_rng(seed).standard_normal(n)
    x /= np.linalg.norm(x)

    if apply_t is not None:
        sigma2 = 0.0
        for _ in range(iters):
            y = apply_t(apply(x))
            nrm = np.linalg.norm(y)
            if nrm == 0.0:
                return 0.0
            sigma2 = float(x @ y)
            x = y / nrm
        return float(np.sqrt(max(sigma2, 0.0)))

    logs = []
    log_total = 0.0
    for _ in range(iters):
        y = apply(x)
        nrm = np.linalg.norm(y)
        if nrm == 0.0:
            return 0.0
        log_total += np.log(nrm)
        logs.append(log_total)
        x = y / nrm
    half = len(logs) // 2
    if half == 0:
        return float(np.exp(logs[-1]))
    return float(np.exp((logs[-1] - logs[half - 1]) / (len(logs) - half)))


# ----------------------------------------------------------------------------
# reference eigensolver


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Tournament pairing of 0..n-1 into n-1 rounds of disjoint pairs."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a >= 0 and b >= 0]
        if pairs:
            p, q = np.array(pairs).T
            rounds.append((p, q))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def jacobi_eigh(a: np.ndarray, tol: float = 1e-15, max_sweeps: int = 60):
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Slow but simple and independent of LAPACK's eigensolvers; used as the
    reference when checking the randomized and Nystrom paths. Disjoint
    rotations of each round are applied together.

    Returns eigenvalues in descending order and matching eigenvector columns.
    """
    a = np.array(a, dtype=float)
    n = a.shape[0]
    v = np.eye(n)
    if n == 1:
        return a.diagonal().copy(), v
    scale = np.linalg.norm(a)
    rounds = _round_robin(n)
    for _ in range(max_sweeps):
        off = np.linalg.norm(a - np.diag(np.diag(a)))
        if off <= tol * scale:
            break
        for p, q in rounds:
            apq = a[p, q]
            app = a[p, p]
            aqq = a[q, q]
            nz = np.abs(apq) > 1e-300
            c = np.ones_like(apq)
            s = np.zeros_like(apq)
            if not np.any(nz):
                continue
            with np.errstate(over="ignore"):
                theta = (aqq[nz] - app[nz]) / (2.0 * apq[nz])
            big = ~np.isfinite(theta) | (np.abs(theta) > 1e150)
            t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.hypot(1.0, theta))
            t[big] = 0.0
            c[nz] = 1.0 / np.sqrt(1.0 + t * t)
            s[nz] = t * c[nz]
            # A <- J^T A J with J[p,p]=c, J[p,q]=s, J[q,p]=-s, J[q,q]=c
            rp, rq = a[p, :].copy(), a[q, :].copy()
            a[p, :] = c[:, None] * rp - s[:, None] * rq
            a[q, :] = s[:, None] * rp + c[:, None] * rq
            cp, cq = a[:, p].copy(), a[:, q].copy()
            a[:, p] = cp * c - cq * s
            a[:, q] = cp * s + cq * c
            a[p, q] = 0.0
            a[q, p] = 0.0
            vp, vq = v[:, p].copy(), v[:, q].copy()
            v[:, p] = vp * c - vq * s
            v[:, q] = vp * s + vq * c
    w = np.diag(a).copy()
    order = np.argsort(w)[::-1]
    return w[order], v[:, order]


def subspace_angle(a: np.ndarray, b: np.ndarray) -> float:
    """Largest principal angle (radians) between the column spaces of a and b."""
    qa = _basis(a)
    qb = _basis(b)
    sv = np.linalg.svd(qa.T @ qb, compute_uv=False)
    # sin of the largest angle from the residual is more accurate near zero
    resid = qb - qa @ (qa.T @ qb)
    sin_max = np.linalg.norm(resid, 2)
    cos_min = float(np.clip(sv.min(), -1.0, 1.0))
    return float(np.arctan2(min(sin_max, 1.0), cos_min))
