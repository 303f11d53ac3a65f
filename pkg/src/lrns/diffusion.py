"""Unsteady stochastic diffusion: Crank-Nicolson MC-FEM reference and LRNS fast path.

Every sample ``m`` has permeability ``a_bar + a~_m`` with a truncated KL
perturbation. Since assembly is linear in the coefficient, the interior
perturbation matrix is ``A~_m = sum_t c_{m,t} A(r_t)`` with
``c_{m,t} = sigma sqrt(lambda_t) Y_{m,t}``; the T modal stiffness matrices
are assembled once and every sample is a linear combination of their data.

One Crank-Nicolson step solves

    (K_bar + A~_m) w = (b_{l+1} + b_l) / 2 + (2/dt) G u_l,    K_bar = (2/dt) G + A_bar,

and sets ``u_{l+1} = 2 w - u_l``. Both solvers share :func:`_march` and
consume the same KL draws, so their difference is the LRNS error alone.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import fem
from .functions import lookup
from .linalg import RsvdConfig, SymmetricFactorization, factorize_spd
from .lowrank import LowRankFactors, MatrixCollection, compress, gram_accumulate, reduced_rank
from .neumann import NeumannOperator, SolveReport, build_operator, guard_all, warn_on_guard
from .parallel import map_chunks, ordered_sum
from .randfield import CovarianceSpec, EllipticityReport, KLBasis, check_ellipticity, kl_decompose, sample_draws


@dataclass(frozen=True)
class DiffusionConfig:
    n: int = 16
    t_end: float = 1.0
    steps: int = 100
    samples: int = 200
    sigma: float = 0.2
    kl_terms: int = 19
    corr_length: float = 0.2
    kernel: str = "exponential"
    mean_permeability: float = 1.0
    truncation: float = 3.0
    terms: int = 5
    tau: float = 0.88
    seed: int = 0
    source: str = "one"
    boundary: str = "zero"
    initial: str = "sin2pi_sin2pi"
    oversampling: int | None = None
    power_iters: int = 1
    guard: float = 0.95
    store: str = "auto"
    rank_count: str = "nodes"
    ellipticity: str = "error"

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.steps < 1 or not self.t_end > 0:
            raise ValueError("need steps >= 1 and t_end > 0")
        if self.samples < 1:
            raise ValueError("sample count M must be >= 1")
        if self.terms < 0:
            raise ValueError("truncation index R must be >= 0")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("compression ratio tau must lie in (0, 1]")
        if not 0.0 <= self.sigma <= 1.0:
            raise ValueError("scaling index sigma must lie in [0, 1]")
        for name in (self.source, self.boundary, self.initial):
            lookup(name)
        if self.rank_count not in ("nodes", "interior"):
            raise ValueError("rank_count must be 'nodes' or 'interior'")
        if self.ellipticity not in ("error", "warn", "resample"):
            raise ValueError("ellipticity must be 'error', 'warn' or 'resample'")

    @property
    def dt(self) -> float:
        return self.t_end / self.steps

    def rsvd(self) -> RsvdConfig:
        return RsvdConfig(rank=1, oversampling=self.oversampling,
                          power_iters=self.power_iters, seed=self.seed)


@dataclass
class DiffusionProblem:
    config: DiffusionConfig
    mesh: fem.StructuredMesh
    dofs: fem.DofMap
    mass: sp.csr_matrix
    mean: sp.csr_matrix
    kl: KLBasis
    draws: np.ndarray  # (M, T)
    modal_pattern: sp.csr_matrix
    modal_data: np.ndarray  # (T, nnz) stiffness of each KL eigenfunction
    ii_block: sp.csr_matrix
    ii_slots: np.ndarray
    ib_block: sp.csr_matrix
    ib_slots: np.ndarray
    initial: np.ndarray
    times: np.ndarray
    ellipticity: EllipticityReport | None = None
    _loads: dict = field(default_factory=dict, repr=False)

    @property
    def coefficients(self) -> np.ndarray:
        """``c_{m,t} = sigma sqrt(lambda_t) Y_{m,t}``."""
        return self.config.sigma * self.draws * np.sqrt(self.kl.eigenvalues)[None, :]

    @property
    def count(self) -> int:
        return len(self.draws)

    def field(self, m: int) -> np.ndarray:
        return self.coefficients[m] @ self.kl.functions

    def perturbation(self, m: int, block: str = "ii") -> sp.csr_matrix:
        """Restricted perturbation ``A~_m`` (interior block or interior-boundary coupling)."""
        pattern, slots = (self.ii_block, self.ii_slots) if block == "ii" else (self.ib_block, self.ib_slots)
        return fem.with_data(pattern, self.coefficients[m] @ self.modal_data[:, slots])

    @property
    def nominal_dimension(self) -> int:
        """``N`` in ``k = ceil(tau N)``: all mesh nodes, or interior nodes only."""
        return self.dofs.total if self.config.rank_count == "nodes" else self.dofs.num_interior

    def rank(self, tau: float) -> int:
        return min(reduced_rank(tau, self.nominal_dimension), self.dofs.num_interior)

    def collection(self) -> MatrixCollection:
        return MatrixCollection([self.perturbation(m) for m in range(self.count)])

    def load(self, l: int) -> np.ndarray:
        src = lookup(self.config.source)
        key = 0 if not src.time_dependent else l
        if key not in self._loads:
            self._loads[key] = fem.assemble_load(self.mesh, src, self.times[l])
        return self._loads[key]

    def boundary_values(self, l: int) -> np.ndarray:
        g = lookup(self.config.boundary)
        xy = self.mesh.nodes[self.dofs.boundary]
        return np.broadcast_to(np.asarray(g(xy[:, 0], xy[:, 1], self.times[l]), dtype=float),
                               (len(self.dofs.boundary),)).copy()


def setup(config: DiffusionConfig) -> DiffusionProblem:
    """Mesh, operators, KL basis and per-sample draws for one configuration."""
    mesh = fem.build_mesh(config.n)
    dofs = fem.dof_map(mesh)
    kl = kl_decompose(mesh.nodes, CovarianceSpec(config.corr_length, config.kernel), config.kl_terms)
    accept = None
    if config.ellipticity == "resample":
        # condition every sample on a positive nodal permeability
        modes = config.sigma * kl.modes()
        accept = lambda y: config.mean_permeability + float(np.min(y @ modes)) > 0.0
    draws = sample_draws(config.seed, config.samples, config.kl_terms, config.truncation, accept)
    pattern, data = fem.assemble_stiffness_family(mesh, kl.functions)
    ii_block, ii_slots = fem.block_slots(pattern, dofs.interior, dofs.interior)
    ib_block, ib_slots = fem.block_slots(pattern, dofs.interior, dofs.boundary)
    u0 = fem.interpolate(mesh, lookup(config.initial), 0.0)
    times = np.arange(config.steps + 1) * config.dt
    problem = DiffusionProblem(
        config, mesh, dofs, fem.assemble_mass(mesh),
        fem.assemble_stiffness(mesh, config.mean_permeability), kl, draws,
        pattern, data, ii_block, ii_slots, ib_block, ib_slots, u0, times,
    )
    report = check_ellipticity(np.full(mesh.num_nodes, config.mean_permeability),
                               (problem.field(m) for m in range(problem.count)))
    problem.ellipticity = report
    if not report.ok:
        msg = (f"permeability not uniformly positive: min {report.minimum:.4g}, "
               f"{len(report.flagged)} of {problem.count} samples flagged (first: {report.flagged[:10]})")
        if config.ellipticity == "error":
            raise ValueError(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return problem


@dataclass
class CrankNicolsonSystem:
    dt: float
    kbar: sp.csr_matrix  # interior block of (2/dt) G + A_bar
    kbar_ib: sp.csr_matrix
    mass: sp.csr_matrix  # full-node mass, used to form (2/dt) G u_l
    factorization: SymmetricFactorization


def cn_matrix(mass, stiffness, dt: float):
    return (2.0 / dt) * mass + stiffness


def assemble_cn(problem: DiffusionProblem) -> CrankNicolsonSystem:
    """Mean Crank-Nicolson matrix on the interior and its Cholesky factor.

    Raises ``NotPositiveDefiniteError`` when ``K_bar`` is not SPD.
    """
    dt = problem.config.dt
    full = sp.csr_matrix(cn_matrix(problem.mass, problem.mean, dt))
    kbar = fem.interior_block(full, problem.dofs)
    return CrankNicolsonSystem(dt, kbar, fem.coupling_block(full, problem.dofs), problem.mass,
                               factorize_spd(kbar.toarray()))


@dataclass
class QoITrajectory:
    times: np.ndarray
    mean: np.ndarray  # (L + 1, n_nodes)
    solver: str
    samples: np.ndarray | None = None  # (M, L + 1, n_nodes)
    report: SolveReport | None = None
    timings: dict = field(default_factory=dict)


def _march(problem: DiffusionProblem, system: CrankNicolsonSystem, solve: Callable,
           idx: Sequence[int], keep: bool, perturbed: bool = True):
    """Crank-Nicolson trajectories for the samples ``idx``; returns (sum over idx, states)."""
    cfg = problem.config
    dofs = problem.dofs
    s = len(idx)
    steps = cfg.steps
    u = np.repeat(problem.initial[:, None], s, axis=1)
    acc = np.empty((steps + 1, dofs.total))
    acc[0] = u.sum(axis=1)
    states = np.empty((s, steps + 1, dofs.total)) if keep else None
    if keep:
        states[:, 0] = u.T
    g_prev = problem.boundary_values(0)
    coeff = problem.coefficients[list(idx)] if perturbed else None
    for l in range(steps):
        g_next = problem.boundary_values(l + 1)
        rhs = 0.5 * (problem.load(l + 1) + problem.load(l))[:, None] + (2.0 / system.dt) * (system.mass @ u)
        rhs_i = rhs[dofs.interior]
        w_b = 0.5 * (g_next + g_prev)
        if np.any(w_b):
            rhs_i = rhs_i - (system.kbar_ib @ w_b)[:, None]
            if perturbed:
                # A~_m,IB w_B = sum_t c_{m,t} A_IB(r_t) w_B
                modal = np.stack([fem.with_data(problem.ib_block, d[problem.ib_slots]) @ w_b
                                  for d in problem.modal_data])
                rhs_i = rhs_i - (coeff @ modal).T
        w = solve(rhs_i, idx, l)
        u_new = np.empty_like(u)
        u_new[dofs.interior] = 2.0 * w - u[dofs.interior]
        u_new[dofs.boundary] = g_next[:, None]
        u = u_new
        g_prev = g_next
        acc[l + 1] = u.sum(axis=1)
        if keep:
            states[:, l + 1] = u.T
    return acc, states


def _collect(problem, parts, solver, keep, report=None, timings=None) -> QoITrajectory:
    mean = ordered_sum([p[0] for p in parts]) / problem.count
    samples = np.concatenate([p[1] for p in parts]) if keep else None
    return QoITrajectory(problem.times.copy(), mean, solver, samples, report, timings or {})


def reference_solve(problem: DiffusionProblem, system: CrankNicolsonSystem | None = None,
                    threads: int | None = None, keep_samples: bool = False) -> QoITrajectory:
    """Direct MC-FEM: one sparse LU of ``K_bar + A~_m`` per sample, reused for all steps."""
    t0 = time.perf_counter()
    system = system or assemble_cn(problem)

    def run(chunk: range):
        lus = {}
        for m in chunk:
            try:
                lus[m] = splu((system.kbar + problem.perturbation(m)).tocsc())
            except RuntimeError as exc:
                raise RuntimeError(f"direct factorization failed for sample {m}: {exc}") from exc

        def solve(rhs, idx, l):
            out = np.column_stack([lus[m].solve(rhs[:, j]) for j, m in enumerate(idx)])
            if not np.all(np.isfinite(out)):
                bad = [m for j, m in enumerate(idx) if not np.all(np.isfinite(out[:, j]))]
                raise FloatingPointError(f"direct solve produced non-finite values: sample {bad[0]}, step {l + 1}")
            return out

        return _march(problem, system, solve, list(chunk), keep_samples)

    parts = map_chunks(run, problem.count, threads)
    return _collect(problem, parts, "reference", keep_samples,
                    timings={"reference_solve": time.perf_counter() - t0})


def deterministic_solve(problem: DiffusionProblem, system: CrankNicolsonSystem | None = None) -> np.ndarray:
    """The unperturbed trajectory ``(L + 1, n_nodes)`` through the ``K_bar`` Cholesky factor."""
    system = system or assemble_cn(problem)
    acc, _ = _march(problem, system, lambda rhs, idx, l: system.factorization.solve(rhs), [0], False,
                    perturbed=False)
    return acc


@dataclass
class LrnsSetup:
    factors: LowRankFactors
    operator: NeumannOperator
    report: SolveReport
    timings: dict


def build_lrns(problem: DiffusionProblem, system: CrankNicolsonSystem | None = None,
               tau: float | None = None, terms: int | None = None, gram: np.ndarray | None = None,
               collection: MatrixCollection | None = None, threads: int | None = None) -> LrnsSetup:
    """Compress ``{A~_m}`` once and wrap the mean factorization into a Neumann operator."""
    cfg = problem.config
    tau = cfg.tau if tau is None else tau
    terms = cfg.terms if terms is None else terms
    system = system or assemble_cn(problem)
    t0 = time.perf_counter()
    coll = collection or problem.collection()
    if gram is None:
        gram = gram_accumulate(coll)
    factors = compress(coll, tau, cfg.rsvd(), gram=gram, store=cfg.store,
                       nominal_dimension=problem.nominal_dimension)
    t1 = time.perf_counter()
    op = build_operator(system.kbar, factors, terms, guard=cfg.guard, factorization=system.factorization)
    report = guard_all(op, threads=threads)
    t2 = time.perf_counter()
    return LrnsSetup(factors, op, report, {"compress": t1 - t0, "operator": t2 - t1})


def lrns_solve(problem: DiffusionProblem, system: CrankNicolsonSystem | None = None,
               lrns: LrnsSetup | None = None, threads: int | None = None,
               keep_samples: bool = False, terms: int | None = None) -> QoITrajectory:
    """Same time stepping as :func:`reference_solve` with the Neumann series in place of solves."""
    system = system or assemble_cn(problem)
    lrns = lrns or build_lrns(problem, system, threads=threads)
    op = lrns.operator if terms is None else replace(lrns.operator, terms=terms)
    report = lrns.report if terms is None else replace(lrns.report, terms=terms)
    warn_on_guard(report)
    t0 = time.perf_counter()
    parts = map_chunks(
        lambda chunk: _march(problem, system, lambda rhs, idx, l: op.apply_block(rhs, idx),
                             list(chunk), keep_samples),
        problem.count, threads)
    timings = dict(lrns.timings, lrns_solve=time.perf_counter() - t0)
    return _collect(problem, parts, "lrns", keep_samples, report, timings)


def _as_array(a) -> np.ndarray:
    return a.mean if isinstance(a, QoITrajectory) else np.asarray(a, dtype=float)


def qoi_error(a, b, mass, dt: float = 1.0) -> float:
    """Relative discrete space-time L2 error of ``a`` against the reference ``b``.

    ``sqrt(sum_l dt e_l^T G e_l) / sqrt(sum_l dt b_l^T G b_l)`` over l = 0..L.
    """
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"trajectory shapes differ: {a.shape} vs {b.shape}")
    e = a - b
    num = dt * np.sum(e * (mass @ e.T).T)
    den = dt * np.sum(b * (mass @ b.T).T)
    if den <= 0.0:
        raise ValueError("reference trajectory has zero norm")
    return float(np.sqrt(max(num, 0.0) / den))


def qoi_mse(a, b) -> float:
    """Mean squared nodal difference over all nodes and time levels."""
    e = _as_array(a) - _as_array(b)
    return float(np.mean(e * e))


@dataclass
class ScanResult:
    rows: list[dict]
    timings: dict


def scan_tau(problem: DiffusionProblem, taus: Sequence[float], threads: int | None = None,
             reference: QoITrajectory | None = None) -> ScanResult:
    """One LRNS run per compression ratio against a single shared reference."""
    system = assemble_cn(problem)
    t0 = time.perf_counter()
    reference = reference or reference_solve(problem, system, threads)
    timings = {"reference_solve": time.perf_counter() - t0}
    coll = problem.collection()
    gram = gram_accumulate(coll)
    rows = []
    for tau in taus:
        t1 = time.perf_counter()
        setup_ = build_lrns(problem, system, tau=tau, gram=gram, collection=coll, threads=threads)
        traj = lrns_solve(problem, system, setup_, threads)
        timings[f"lrns_tau_{tau:g}"] = time.perf_counter() - t1
        rows.append({
            "tau": float(tau),
            "k": reduced_rank(tau, problem.nominal_dimension),
            "k_effective": problem.rank(tau),
            "error": qoi_error(traj, reference, problem.mass, problem.config.dt),
            "mse": qoi_mse(traj, reference),
            "rho_max": float(setup_.report.rho.max()),
        })
    return ScanResult(rows, timings)


def scan_sigma(config: DiffusionConfig, sigmas: Sequence[float], terms_list: Sequence[int],
               threads: int | None = None) -> ScanResult:
    """Error grid over scaling indices and truncation indices.

    The KL draws depend on the seed only, so every sigma reuses the same
    ``Y_{m,t}``; only their scaling changes.
    """
    rows = []
    timings = {}
    for sigma in sigmas:
        t0 = time.perf_counter()
        problem = setup(replace(config, sigma=float(sigma)))
        system = assemble_cn(problem)
        reference = reference_solve(problem, system, threads)
        setup_ = build_lrns(problem, system, threads=threads)
        for r in terms_list:
            traj = lrns_solve(problem, system, setup_, threads, terms=int(r))
            rows.append({
                "sigma": float(sigma),
                "R": int(r),
                "error": qoi_error(traj, reference, problem.mass, config.dt),
                "mse": qoi_mse(traj, reference),
                "rho_max": float(setup_.report.rho.max()),
            })
        timings[f"sigma_{sigma:g}"] = time.perf_counter() - t0
    return ScanResult(rows, timings)
