"""Shared-basis low-rank approximation of a collection of square matrices.

Each member ``B_m`` is approximated as ``U V_m^T`` with one orthonormal
``U`` (N x k) for the whole collection. The optimal ``U`` spans the top-k
eigenvectors of the Gram accumulation ``sum_m B_m B_m^T`` and then
``V_m = B_m^T U``, so no alternating iteration is needed. The eigenvectors
come from a randomized sketch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .linalg import RsvdConfig, rsvd_top_eigvecs

# dense V storage above this many bytes switches to on-the-fly V_m = B_m^T U
DENSE_FACTOR_BUDGET = 1_500_000_000


def reduced_rank(tau: float, n: int) -> int:
    """``ceil(tau * n)``, robust to ``tau * n`` landing a hair above an integer."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"compression ratio must lie in (0, 1], got {tau}")
    return max(1, min(n, math.ceil(tau * n - 1e-9)))


class MatrixCollection:
    """Ordered collection of ``M`` square ``N x N`` matrices (dense or sparse)."""

    def __init__(self, members: Sequence):
        members = list(members)
        if not members:
            raise ValueError("matrix collection is empty")
        n = members[0].shape[0]
        for i, b in enumerate(members):
            if b.ndim != 2 or b.shape != (n, n):
                raise ValueError(
                    f"member {i} has shape {b.shape}, expected ({n}, {n})"
                )
        self.members = [b if sp.issparse(b) else np.asarray(b, dtype=float) for b in members]
        self.dimension = n

    def __len__(self) -> int:
        return len(self.members)

    def __getitem__(self, m: int):
        return self.members[m]

    def dense(self, m: int) -> np.ndarray:
        b = self.members[m]
        return b.toarray() if sp.issparse(b) else b

    def frobenius_sq(self) -> np.ndarray:
        out = np.empty(len(self))
        for m, b in enumerate(self.members):
            out[m] = b.multiply(b).sum() if sp.issparse(b) else np.sum(b * b)
        return out

    def scale(self) -> float:
        """Root mean square Frobenius norm of the members."""
        return float(np.sqrt(np.mean(self.frobenius_sq())))


@dataclass
class LowRankFactors:
    """``U`` plus per-sample factors ``V_m`` (dense stack or computed on demand).

    ``factors`` is either an ``(M, N, k)`` array or ``None``, in which case
    ``V_m = B_m^T U`` is recomputed from ``source`` whenever it is needed.
    """

    basis: np.ndarray
    factors: np.ndarray | None
    tau: float
    source: MatrixCollection | None = None

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    @property
    def dimension(self) -> int:
        return self.basis.shape[0]

    @property
    def count(self) -> int:
        return len(self.factors) if self.factors is not None else len(self.source)

    def factor(self, m: int) -> np.ndarray:
        if self.factors is not None:
            return self.factors[m]
        return np.asarray(self.source[m].T @ self.basis)

    def reconstruct(self, m: int) -> np.ndarray:
        return self.basis @ self.factor(m).T

    def project(self, t: np.ndarray, samples: Sequence[int]) -> np.ndarray:
        """``c[:, j] = V_{samples[j]}^T t[:, j]``; ``t`` is ``(N, len(samples))``."""
        samples = np.asarray(samples)
        if self.factors is not None:
            v = self.factors[samples]  # (s, N, k)
            return np.matmul(t.T[:, None, :], v)[:, 0, :].T
        # V_m^T t = U^T (B_m t): sparse products per sample, one dense product
        bt = np.empty((self.dimension, len(samples)))
        for j, m in enumerate(samples):
            bt[:, j] = self.source[m] @ t[:, j]
        return self.basis.T @ bt

    def lift(self, c: np.ndarray, samples: Sequence[int]) -> np.ndarray:
        """``t[:, j] = V_{samples[j]} c[:, j]`` (the transpose of :meth:`project`)."""
        samples = np.asarray(samples)
        if self.factors is not None:
            v = self.factors[samples]
            return np.matmul(v, c.T[:, :, None])[:, :, 0].T
        uc = self.basis @ c
        out = np.empty((self.dimension, len(samples)))
        for j, m in enumerate(samples):
            out[:, j] = self.source[m].T @ uc[:, j]
        return out

    def storage_floats(self) -> int:
        """Floats held by the representation: ``N k`` for U plus ``M N k`` for the V_m."""
        return (self.count + 1) * self.dimension * self.rank


@dataclass(frozen=True)
class CompressionReport:
    rmsre: float
    energy: float
    eigenvalues: np.ndarray
    rank: int
    tau: float
    storage_floats: int

    def as_dict(self) -> dict:
        return {
            "rmsre": self.rmsre,
            "energy": self.energy,
            "rank": self.rank,
            "tau": self.tau,
            "storage_floats": self.storage_floats,
        }


def gram_accumulate(coll: MatrixCollection) -> np.ndarray:
    """``sum_m B_m B_m^T`` accumulated one member at a time, in collection order."""
    n = coll.dimension
    if all(sp.issparse(b) for b in coll.members):
        acc = sp.csr_matrix((n, n))
        for b in coll.members:
            b = sp.csr_matrix(b)
            acc = acc + b @ b.T
        return acc.toarray()
    gram = np.zeros((n, n))
    for m in range(len(coll)):
        b = coll.dense(m)
        gram += b @ b.T
    return gram


def _factors_from_basis(coll: MatrixCollection, u: np.ndarray, tau: float, store: str) -> LowRankFactors:
    n, k = u.shape
    if store == "auto":
        # sparse members: U^T (B_m t) is cheaper than streaming a dense V_m
        sparse = all(sp.issparse(b) for b in coll.members)
        fits = len(coll) * n * k * 8 <= DENSE_FACTOR_BUDGET
        store = "dense" if fits and not sparse else "implicit"
    if store == "implicit":
        return LowRankFactors(u, None, tau, coll)
    if store != "dense":
        raise ValueError(f"unknown factor storage {store!r}")
    v = np.empty((len(coll), n, k))
    for m, b in enumerate(coll.members):
        v[m] = b.T @ u
    return LowRankFactors(u, v, tau, coll)


def factors_from_basis(coll: MatrixCollection, u: np.ndarray, tau: float | None = None,
                       store: str = "dense") -> LowRankFactors:
    """Optimal factors ``V_m = B_m^T U`` for a given orthonormal basis ``U``."""
    if u.shape[0] != coll.dimension:
        raise ValueError("basis dimension does not match the collection")
    if tau is None:
        tau = u.shape[1] / coll.dimension
    return _factors_from_basis(coll, u, tau, store)


def compress(
    coll: MatrixCollection,
    tau: float,
    rsvd: RsvdConfig | None = None,
    gram: np.ndarray | None = None,
    store: str = "auto",
    nominal_dimension: int | None = None,
) -> LowRankFactors:
    """Shared-basis rank-``ceil(tau N)`` approximation of every member.

    Parameters
    ----------
    coll : MatrixCollection
    tau : float
        compression ratio in (0, 1]
    rsvd : RsvdConfig, optional
        oversampling / power iterations / seed; its ``rank`` is replaced by k
    gram : array, optional
        precomputed :func:`gram_accumulate` result (reused by tau scans)
    store : {"auto", "dense", "implicit"}
    nominal_dimension : int, optional
        dimension ``N`` used in ``k = ceil(tau N)`` when the members are
        restrictions of larger matrices; ``k`` is then capped at the member
        dimension (directions beyond it carry no energy)
    """
    n = coll.dimension
    k = min(reduced_rank(tau, nominal_dimension or n), n)
    if gram is None:
        gram = gram_accumulate(coll)
    cfg = replace(rsvd, rank=k) if rsvd is not None else RsvdConfig(rank=k)
    u = rsvd_top_eigvecs(gram, cfg)
    return _factors_from_basis(coll, u, tau, store)


def rmsre(factors: LowRankFactors, coll: MatrixCollection) -> float:
    """Root mean square Frobenius reconstruction error over the collection."""
    if factors.dimension != coll.dimension or factors.count != len(coll):
        raise ValueError("factors and collection do not match")
    total = 0.0
    for m in range(len(coll)):
        r = coll.dense(m) - factors.reconstruct(m)
        total += float(np.sum(r * r))
    return math.sqrt(total / len(coll))


def energy_profile(eigs: Sequence[float]) -> Callable[[float], float]:
    """Cumulative energy ratio ``e(tau)`` of a descending nonnegative spectrum."""
    lam = np.asarray(eigs, dtype=float)
    if np.any(lam < 0):
        raise ValueError("spectrum must be nonnegative")
    csum = np.cumsum(lam)
    if csum[-1] <= 0.0:
        raise ValueError("energy ratio undefined for an all-zero spectrum")
    n = len(lam)

    def e(tau: float) -> float:
        return float(csum[reduced_rank(tau, n) - 1] / csum[-1])

    return e


def choose_tau(eigs: Sequence[float], target_energy: float) -> float:
    """Smallest ``tau`` on the grid ``{1/N, ..., 1}`` with ``e(tau) >= target``."""
    if not 0.0 < target_energy <= 1.0:
        raise ValueError("target energy must lie in (0, 1]")
    lam = np.asarray(eigs, dtype=float)
    n = len(lam)
    if target_energy >= 1.0:
        return 1.0
    csum = np.cumsum(lam)
    if csum[-1] <= 0.0:
        raise ValueError("energy ratio undefined for an all-zero spectrum")
    k = int(np.searchsorted(csum / csum[-1], target_energy, side="left")) + 1
    return min(k, n) / n


def gram_spectrum(gram: np.ndarray) -> np.ndarray:
    """Eigenvalues of a Gram accumulation, descending, clipped at zero."""
    w = np.linalg.eigvalsh(gram)[::-1]
    return np.clip(w, 0.0, None)


def compression_report(factors: LowRankFactors, coll: MatrixCollection,
                       gram: np.ndarray | None = None) -> CompressionReport:
    if gram is None:
        gram = gram_accumulate(coll)
    eigs = gram_spectrum(gram)
    total = eigs.sum()
    energy = float(eigs[:factors.rank].sum() / total) if total > 0 else 1.0
    return CompressionReport(
        rmsre=rmsre(factors, coll),
        energy=energy,
        eigenvalues=eigs,
        rank=factors.rank,
        tau=factors.tau,
        storage_floats=factors.storage_floats(),
    )
