"""Truncated Karhunen-Loeve random permeability fields.

The covariance operator is discretized by the Nystrom method on the mesh
nodes with uniform weights ``w = 1 / n_nodes``. Eigenfunctions are stored
as nodal vectors normalized so that ``sum_i w r_t(x_i)^2 = 1``. The KL
coefficients are standard normals truncated to ``[-b, b]`` by rejection;
their variance is left below one on purpose (no rescaling).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import erf

from .linalg import make_rng


@dataclass(frozen=True)
class CovarianceSpec:
    length: float = 0.2
    kernel: str = "exponential"

    def __post_init__(self):
        if not self.length > 0.0:
            raise ValueError(f"correlation length must be positive, got {self.length}")
        if self.kernel not in _KERNELS:
            raise ValueError(f"unknown covariance kernel {self.kernel!r}; known: {sorted(_KERNELS)}")

    def __call__(self, dist: np.ndarray) -> np.ndarray:
        return _KERNELS[self.kernel](dist / self.length)


_KERNELS = {
    "exponential": lambda r: np.exp(-r),
    "gaussian": lambda r: np.exp(-0.5 * r * r),
}


@dataclass(frozen=True)
class KLBasis:
    eigenvalues: np.ndarray  # (T,), descending
    functions: np.ndarray  # (T, n_nodes)
    weight: float

    @property
    def terms(self) -> int:
        return len(self.eigenvalues)

    def gram(self) -> np.ndarray:
        return self.weight * self.functions @ self.functions.T

    def modes(self) -> np.ndarray:
        """``sqrt(lambda_t) r_t`` stacked as rows."""
        return np.sqrt(self.eigenvalues)[:, None] * self.functions


@dataclass(frozen=True)
class FieldSample:
    draws: np.ndarray  # (T,)
    values: np.ndarray  # nodal perturbation
    sigma: float
    seed: tuple = field(default=())


def covariance_matrix(points: np.ndarray, cov: CovarianceSpec) -> np.ndarray:
    return cov(cdist(points, points))


def kl_decompose(points: np.ndarray, cov: CovarianceSpec, terms: int) -> KLBasis:
    """Leading ``terms`` KL eigenpairs of ``cov`` sampled at ``points``.

    Parameters
    ----------
    points : (n, 2) array
        node coordinates (``mesh.nodes``)
    cov : CovarianceSpec
    terms : int
        truncation count T
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = len(points)
    if terms < 1:
        raise ValueError("KL truncation must keep at least one term")
    w = 1.0 / n
    # w^{1/2} C w^{1/2} with uniform weights
    lam, vec = np.linalg.eigh(w * covariance_matrix(points, cov))
    lam, vec = lam[::-1], vec[:, ::-1]
    available = int(np.sum(lam > 1e-14 * max(lam[0], 0.0))) if lam[0] > 0 else 0
    if terms > available:
        raise ValueError(
            f"requested {terms} KL terms but only {available} positive eigenvalues are available"
        )
    funcs = vec[:, :terms].T / np.sqrt(w)
    # fix the sign so the largest-magnitude entry of every mode is positive
    pivot = np.argmax(np.abs(funcs), axis=1)
    funcs *= np.sign(funcs[np.arange(terms), pivot])[:, None]
    return KLBasis(lam[:terms].copy(), np.ascontiguousarray(funcs), w)


def truncated_normal_variance(bound: float = 3.0) -> float:
    """Closed-form variance of N(0, 1) truncated to ``[-b, b]``."""
    z = erf(bound / np.sqrt(2.0))
    pdf = np.exp(-0.5 * bound * bound) / np.sqrt(2.0 * np.pi)
    return float(1.0 - 2.0 * bound * pdf / z)


def sample_truncated_normal(seed, count: int, bound: float = 3.0) -> np.ndarray:
    """``count`` i.i.d. standard normals conditioned on ``|Y| <= bound``.

    Rejection in vectorized rounds; the stream depends only on ``seed``.
    """
    if not bound > 0.0:
        raise ValueError("truncation bound must be positive")
    rng = make_rng(seed)
    out = np.empty(count)
    filled = 0
    while filled < count:
        need = count - filled
        z = rng.standard_normal(need + need // 64 + 8)
        z = z[np.abs(z) <= bound][:need]
        out[filled:filled + len(z)] = z
        filled += len(z)
    return out


def draw_seed(seed: int, m: int, attempt: int = 0) -> np.random.SeedSequence:
    """Seed of sample ``m``; ``attempt > 0`` gives the deterministic redraws."""
    key = (m,) if attempt == 0 else (m, attempt)
    return np.random.SeedSequence(seed, spawn_key=key)


def sample_draws(seed: int, count: int, terms: int, bound: float = 3.0,
                 accept=None, max_attempts: int = 1000) -> np.ndarray:
    """``(count, terms)`` KL coefficients; row ``m`` comes from its own child seed.

    ``accept(row) -> bool`` optionally conditions each row: rejected rows are
    redrawn from ``draw_seed(seed, m, 1), draw_seed(seed, m, 2), ...``.
    """
    out = np.empty((count, terms))
    for m in range(count):
        for attempt in range(max_attempts):
            row = sample_truncated_normal(draw_seed(seed, m, attempt), terms, bound)
            if accept is None or accept(row):
                break
        else:
            raise RuntimeError(f"sample {m}: no acceptable draw in {max_attempts} attempts")
        out[m] = row
    return out


def sample_field(basis: KLBasis, sigma: float, draws: np.ndarray, seed: tuple = ()) -> FieldSample:
    """``a~ = sigma * sum_t sqrt(lambda_t) r_t Y_t`` at the nodes."""
    draws = np.asarray(draws, dtype=float)
    if draws.shape != (basis.terms,):
        raise ValueError(f"need {basis.terms} draws, got shape {draws.shape}")
    if not 0.0 <= sigma <= 1.0:
        raise ValueError(f"scaling index must lie in [0, 1], got {sigma}")
    values = sigma * (draws @ basis.modes())
    return FieldSample(draws, values, float(sigma), seed)


@dataclass(frozen=True)
class EllipticityReport:
    minimum: float
    maximum: float
    flagged: list

    @property
    def ok(self) -> bool:
        return not self.flagged


def check_ellipticity(mean_field, samples) -> EllipticityReport:
    """Extremes of ``a_bar + a~`` over all nodes and samples; nonpositive samples are flagged."""
    samples = list(samples)
    mean_field = np.asarray(mean_field, dtype=float)
    lo, hi = np.inf, -np.inf
    flagged = []
    if not samples:
        lo, hi = float(np.min(mean_field)), float(np.max(mean_field))
        return EllipticityReport(lo, hi, [-1] if lo <= 0 else [])
    for m, s in enumerate(samples):
        vals = mean_field + (s.values if isinstance(s, FieldSample) else np.asarray(s))
        vmin, vmax = float(np.min(vals)), float(np.max(vals))
        lo, hi = min(lo, vmin), max(hi, vmax)
        if vmin <= 0.0:
            flagged.append(m)
    return EllipticityReport(lo, hi, flagged)


def write_spectrum_csv(path, basis: KLBasis) -> None:
    share = np.cumsum(basis.eigenvalues) / np.sum(basis.eigenvalues)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "eigenvalue", "cumulative_share"])
        for i, (lam, c) in enumerate(zip(basis.eigenvalues, share), start=1):
            w.writerow([i, f"{lam:.17g}", f"{c:.17g}"])
