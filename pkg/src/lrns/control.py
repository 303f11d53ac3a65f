"""Distributed optimal control of the stochastic diffusion equation (reduced approach).

Backward Euler with a deterministic control ``f_l`` (nodal, interior):

    (G/dt + A_bar + A~_m) u_{m,l+1} = G f_{l+1} + G u_{m,l} / dt,

so ``u_{m,l+1} = Z_m (f_{l+1} + u_{m,l} / dt)`` with
``Z_m = (K_bar + A~_m)^{-1} G`` approximated by the Neumann series around
``K_bar = G/dt + A_bar``. The objective is

    J = (1/M) sum_m sum_{l=1}^{L} (dt/2) |u_{m,l} - U_l|_G^2 + sum_{l=1}^{L} (beta dt/2) |f_l|_G^2.

The per-step gradient ``g_l = (dt/M) sum_m Z_m^T G (u_{m,l} - U_l) + beta dt G f_l``
uses the one-step sensitivity ``du_{m,l}/df_l = Z_m`` only: it is the exact
gradient of the *frozen-previous-state surrogate*, in which ``u_{m,l-1}`` is
held at its current value. That surrogate is quadratic in ``f`` with the
block-diagonal Hessian ``H = (dt/M) sum_m Z_m^T G Z_m + beta dt G`` (the same
block for every step and every iteration). Optimizers step on the surrogate
and then recompute the true states.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, cg

from . import fem
from .diffusion import DiffusionConfig, DiffusionProblem, LrnsSetup, setup
from .functions import lookup
from .linalg import RsvdConfig, SymmetricFactorization, factorize_spd, make_rng
from .lowrank import compress, gram_accumulate
from .neumann import build_operator, guard_all, warn_on_guard
from .linesearch import LineSearchError, armijo_backtrack, wolfe_search
from .parallel import map_chunks, ordered_sum

# materialize dense Z_m when M * N^2 doubles stay below this many bytes
DENSE_Z_BUDGET = 2_000_000_000


@dataclass(frozen=True)
class ControlConfig:
    n: int = 16
    t_end: float = 1.0
    steps: int = 100
    samples: int = 100
    sigma: float = 0.2
    kl_terms: int = 19
    corr_length: float = 0.2
    kernel: str = "exponential"
    mean_permeability: float = 1.0
    truncation: float = 3.0
    terms: int = 5
    tau: float = 0.88
    seed: int = 0
    initial: str = "sin2pi_sinpi"
    desired: str = "exp_decay_sin2pi_sinpi"
    oversampling: int | None = None
    power_iters: int = 1
    guard: float = 0.95
    store: str = "auto"
    rank_count: str = "nodes"
    ellipticity: str = "error"
    beta: float = 1e-3
    eps: float = 1e-3
    it_max: int = 50
    c1: float = 1e-4
    c2: float = 0.9
    optimizer: str = "newton"
    batch: int = 32
    max_iter: int = 200
    sgd_max_iter: int = 1000
    sgd_check_every: int = 10
    gradient_mode: str = "chain"
    grad_norm: str = "dual"
    materialize: str = "auto"

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("regularization beta must be positive")
        if not self.eps > 0:
            raise ValueError("tolerance eps must be positive")
        if self.optimizer not in ("newton", "steepest", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.gradient_mode not in ("chain", "literal"):
            raise ValueError("gradient_mode must be 'chain' or 'literal'")
        if self.grad_norm not in ("dual", "euclidean"):
            raise ValueError("grad_norm must be 'dual' or 'euclidean'")
        if self.materialize not in ("auto", "dense", "free"):
            raise ValueError("materialize must be 'auto', 'dense' or 'free'")
        if self.batch < 1 or self.it_max < 1:
            raise ValueError("batch and it_max must be >= 1")
        lookup(self.desired)
        self.diffusion()

    @property
    def dt(self) -> float:
        return self.t_end / self.steps

    def diffusion(self) -> DiffusionConfig:
        shared = {f.name for f in fields(DiffusionConfig)} & {f.name for f in fields(ControlConfig)}
        kw = {name: getattr(self, name) for name in shared}
        return DiffusionConfig(**kw, source="zero", boundary="zero")


@dataclass
class ReducedOperators:
    """Backward-Euler mean factorization, Z_m maps and the constant Hessian block."""

    config: ControlConfig
    problem: DiffusionProblem
    mass: sp.csr_matrix  # interior G
    mass_factor: SymmetricFactorization
    kbar: sp.csr_matrix
    lrns: LrnsSetup
    zmats: np.ndarray | None  # (M, N, N) when materialized
    hessian: np.ndarray
    hessian_factor: SymmetricFactorization
    asymmetry: float
    initial: np.ndarray  # interior u_0
    desired: np.ndarray  # (L + 1, N) interior U_l
    timings: dict = field(default_factory=dict)

    @property
    def dt(self) -> float:
        return self.config.dt

    @property
    def count(self) -> int:
        return self.problem.count

    @property
    def dimension(self) -> int:
        return self.mass.shape[0]

    # -- Z maps -------------------------------------------------------------

    def z_apply(self, x: np.ndarray, samples: Sequence[int]) -> np.ndarray:
        """``Z_m x_j`` for ``x`` of shape ``(s, ..., N)`` paired with ``samples``."""
        samples = np.asarray(samples)
        shape = x.shape
        x3 = x.reshape(len(samples), -1, shape[-1])
        if self.zmats is not None:
            out = np.matmul(self.zmats[samples], x3.transpose(0, 2, 1)).transpose(0, 2, 1)
        else:
            out = np.empty_like(x3)
            op = self.lrns.operator
            for j in range(x3.shape[1]):
                out[:, j, :] = op.apply_block(self.mass @ x3[:, j, :].T, samples).T
        return out.reshape(shape)

    def z_apply_t(self, y: np.ndarray, samples: Sequence[int]) -> np.ndarray:
        samples = np.asarray(samples)
        shape = y.shape
        y3 = y.reshape(len(samples), -1, shape[-1])
        if self.zmats is not None:
            out = np.matmul(self.zmats[samples].transpose(0, 2, 1), y3.transpose(0, 2, 1)).transpose(0, 2, 1)
        else:
            out = np.empty_like(y3)
            op = self.lrns.operator
            for j in range(y3.shape[1]):
                out[:, j, :] = (self.mass @ op.apply_block_t(y3[:, j, :].T, samples)).T
        return out.reshape(shape)

    def gmul(self, x: np.ndarray) -> np.ndarray:
        """``G x_i`` for every trailing vector of ``x`` (G is symmetric)."""
        x2 = x.reshape(-1, x.shape[-1])
        return np.asarray(self.mass @ x2.T).T.reshape(x.shape)

    def g_inner(self, a: np.ndarray, b: np.ndarray) -> float:
        """``sum a_i^T G b_i`` over all leading indices."""
        return float(np.sum(a * self.gmul(b)))


def _z_matrix(op, m: int, t0: np.ndarray) -> np.ndarray:
    """Dense ``Z_m``: the Neumann series applied to all columns of ``t0 = K_bar^{-1} G``."""
    v = op.factors.factor(m)
    t = t0
    acc = t0.copy()
    for _ in range(op.terms):
        t = -(op.correction @ (v.T @ t))
        acc += t
    return acc


def build_reduced(config: ControlConfig, threads: int | None = None,
                  problem: DiffusionProblem | None = None) -> ReducedOperators:
    """Compression, backward-Euler operator, Z maps and the Hessian block."""
    t_start = time.perf_counter()
    problem = problem or setup(config.diffusion())
    dofs = problem.dofs
    dt = config.dt
    mass = fem.interior_block(problem.mass, dofs)
    kbar = fem.interior_block(problem.mass / dt + problem.mean, dofs)
    kfact = factorize_spd(kbar.toarray())
    coll = problem.collection()
    factors = compress(coll, config.tau, RsvdConfig(1, config.oversampling, config.power_iters, config.seed),
                       gram=gram_accumulate(coll), store=config.store,
                       nominal_dimension=problem.nominal_dimension)
    op = build_operator(kbar, factors, config.terms, guard=config.guard, factorization=kfact)
    report = guard_all(op, threads=threads)
    warn_on_guard(report)
    t_lrns = time.perf_counter()

    n = mass.shape[0]
    m_count = problem.count
    dense = config.materialize == "dense" or (
        config.materialize == "auto" and m_count * n * n * 8 <= DENSE_Z_BUDGET)
    gdense = mass.toarray()
    t0 = kfact.solve(gdense)
    zmats = None
    if dense:
        zmats = np.empty((m_count, n, n))
        for m in range(m_count):
            zmats[m] = _z_matrix(op, m, t0)

    def hess_chunk(chunk: range) -> np.ndarray:
        acc = np.zeros((n, n))
        for m in chunk:
            z = zmats[m] if zmats is not None else _z_matrix(op, m, t0)
            acc += z.T @ (gdense @ z)
        return acc

    hsum = ordered_sum(map_chunks(hess_chunk, m_count, threads))
    h = (dt / m_count) * hsum + config.beta * dt * gdense
    asym = float(np.linalg.norm(h - h.T) / np.linalg.norm(h))
    h = 0.5 * (h + h.T)
    hfact = factorize_spd(h)

    u0 = fem.interpolate(problem.mesh, lookup(config.initial), 0.0)[dofs.interior]
    want = lookup(config.desired)
    desired = np.stack([fem.interpolate(problem.mesh, want, t)[dofs.interior] for t in problem.times])
    lrns = LrnsSetup(factors, op, report, {})
    timings = {"lrns_setup": t_lrns - t_start, "hessian": time.perf_counter() - t_lrns}
    return ReducedOperators(config, problem, mass, factorize_spd(gdense), kbar, lrns, zmats, h, hfact,
                            asym, u0, desired, timings)


def hessian_apply(ops: ReducedOperators, d: np.ndarray, samples: Sequence[int] | None = None) -> np.ndarray:
    """``H d_l`` for every row of ``d`` (shape ``(L, N)`` or ``(N,)``), matrix-free.

    Over a subset of samples the average is taken over that subset.
    """
    d = np.asarray(d, dtype=float)
    one = d.ndim == 1
    d2 = np.atleast_2d(d)
    samples = np.arange(ops.count) if samples is None else np.asarray(samples)
    zd = ops.z_apply(np.broadcast_to(d2, (len(samples),) + d2.shape).copy(), samples)
    back = ops.z_apply_t(ops.gmul(zd), samples).sum(axis=0)
    out = (ops.dt / len(samples)) * back + ops.config.beta * ops.dt * ops.gmul(d2)
    return out[0] if one else out


def forward_map(ops: ReducedOperators, controls: np.ndarray, samples: Sequence[int] | None = None,
                threads: int | None = None) -> np.ndarray:
    """States ``(s, L + 1, N)``: ``u_{m,l+1} = Z_m (f_{l+1} + u_{m,l} / dt)``, ``u_{m,0} = u_0``."""
    samples = np.arange(ops.count) if samples is None else np.asarray(samples)
    controls = np.asarray(controls, dtype=float)
    steps = ops.config.steps
    if controls.shape != (steps, ops.dimension):
        raise ValueError(f"controls must have shape ({steps}, {ops.dimension})")

    def run(chunk: range) -> np.ndarray:
        idx = samples[list(chunk)]
        u = np.empty((len(idx), steps + 1, ops.dimension))
        u[:, 0] = ops.initial
        for l in range(steps):
            u[:, l + 1] = ops.z_apply(controls[l][None, :] + u[:, l] / ops.dt, idx)
        return u

    return np.concatenate(map_chunks(run, len(samples), threads))


def objective(ops: ReducedOperators, controls: np.ndarray, states: np.ndarray) -> float:
    """Sample-average tracking misfit plus control cost, over ``l = 1..L``."""
    e = states[:, 1:] - ops.desired[None, 1:]
    misfit = 0.5 * ops.dt * ops.g_inner(e, e) / len(states)
    return misfit + 0.5 * ops.config.beta * ops.dt * ops.g_inner(controls, controls)


def _residual(ops, controls, states, samples, mode):
    if mode == "literal":
        # the displayed per-step residual Z_m f_l - U_l, ignoring u_{m,l-1}
        zf = ops.z_apply(np.broadcast_to(controls, (len(samples),) + controls.shape).copy(), samples)
        return zf - ops.desired[None, 1:]
    return states[:, 1:] - ops.desired[None, 1:]


def gradient(ops: ReducedOperators, controls: np.ndarray, states: np.ndarray,
             samples: Sequence[int] | None = None, mode: str | None = None,
             threads: int | None = None) -> np.ndarray:
    """Per-step gradients ``(L, N)``; ``states`` are those of ``samples`` (default all)."""
    samples = np.arange(ops.count) if samples is None else np.asarray(samples)
    mode = mode or ops.config.gradient_mode
    if len(states) != len(samples):
        raise ValueError("states do not match the sample selection")
    res = _residual(ops, controls, states, samples, mode)

    def run(chunk: range) -> np.ndarray:
        j = list(chunk)
        return ops.z_apply_t(ops.gmul(res[j]), samples[j]).sum(axis=0)

    back = ordered_sum(map_chunks(run, len(samples), threads))
    return (ops.dt / len(samples)) * back + ops.config.beta * ops.dt * ops.gmul(controls)


def surrogate_objective(ops: ReducedOperators, controls: np.ndarray, frozen: np.ndarray,
                        samples: Sequence[int] | None = None) -> float:
    """Objective with previous states frozen: ``u_{m,l} = Z_m (f_l + frozen_{m,l-1} / dt)``.

    ``frozen`` holds the states ``(s, L + 1, N)`` of the expansion point.
    """
    samples = np.arange(ops.count) if samples is None else np.asarray(samples)
    prev = frozen[:, :-1]
    u = ops.z_apply(controls[None] + prev / ops.dt, samples)
    e = u - ops.desired[None, 1:]
    return 0.5 * ops.dt * ops.g_inner(e, e) / len(samples) \
        + 0.5 * ops.config.beta * ops.dt * ops.g_inner(controls, controls)


def gradient_norm(ops: ReducedOperators, g: np.ndarray, kind: str | None = None) -> float:
    """Dual norm ``sqrt(sum_l g_l^T G^{-1} g_l / dt)`` (default) or Euclidean."""
    kind = kind or ops.config.grad_norm
    if kind == "euclidean":
        return float(np.linalg.norm(g))
    return float(np.sqrt(np.sum(g.T * ops.mass_factor.solve(g.T)) / ops.dt))


@dataclass
class OptimizationTrace:
    optimizer: str
    objective: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    alpha: list = field(default_factory=list)
    iteration: list = field(default_factory=list)
    controls: np.ndarray | None = None
    state_mean: np.ndarray | None = None
    converged: bool = False
    message: str = ""
    line_search_evals: int = 0

    def record(self, k, j, gn, alpha):
        self.iteration.append(int(k))
        self.objective.append(float(j))
        self.grad_norm.append(float(gn))
        self.alpha.append(float(alpha))

    def summary(self) -> dict:
        j0, js = self.objective[0], self.objective[-1]
        return {
            "optimizer": self.optimizer,
            "objective_initial": j0,
            "objective_final": js,
            "ratio": js / j0 if j0 else float("nan"),
            "grad_norm_final": self.grad_norm[-1],
            "iterations": self.iteration[-1],
            "converged": self.converged,
            "message": self.message,
        }


def _ray(ops, controls, states, d, samples):
    """Exact surrogate along ``f - alpha d``: value and derivative closures."""
    e0 = states[:, 1:] - ops.desired[None, 1:]
    zd = ops.z_apply(np.broadcast_to(d, (len(samples),) + d.shape).copy(), samples)
    s = len(samples)
    beta_dt = ops.config.beta * ops.dt
    a0 = 0.5 * ops.dt * ops.g_inner(e0, e0) / s + 0.5 * beta_dt * ops.g_inner(controls, controls)
    a1 = ops.dt * ops.g_inner(zd, e0) / s + beta_dt * ops.g_inner(d, controls)
    a2 = ops.dt * ops.g_inner(zd, zd) / s + beta_dt * ops.g_inner(d, d)
    phi = lambda a: a0 - a * a1 + 0.5 * a * a * a2
    dphi = lambda a: -a1 + a * a2
    return phi, dphi, a1, a2


def optimize(ops: ReducedOperators, optimizer: str | None = None, threads: int | None = None,
             controls: np.ndarray | None = None) -> OptimizationTrace:
    """Gradient-based minimization of the reduced objective from ``f = 0``.

    newton / steepest take strong-Wolfe steps on the frozen-state surrogate,
    sgd takes Armijo steps on a minibatch surrogate; after every accepted step
    the true states are recomputed and the true objective is recorded.
    """
    cfg = ops.config
    optimizer = optimizer or cfg.optimizer
    f = np.zeros((cfg.steps, ops.dimension)) if controls is None else np.array(controls, dtype=float)
    trace = OptimizationTrace(optimizer)
    states = forward_map(ops, f, threads=threads)
    g = gradient(ops, f, states, threads=threads)
    gn = gradient_norm(ops, g)
    trace.record(0, objective(ops, f, states), gn, np.nan)
    everyone = np.arange(ops.count)

    if optimizer in ("newton", "steepest"):
        for k in range(1, cfg.max_iter + 1):
            if gn <= cfg.eps:
                trace.converged = True
                break
            d = ops.hessian_factor.solve(g.T).T if optimizer == "newton" else g
            phi, dphi, a1, a2 = _ray(ops, f, states, d, everyone)
            alpha0 = a1 / a2 if a2 > 0 else 1.0  # minimizer of the quadratic model
            try:
                ls = wolfe_search(phi, dphi, alpha0=alpha0, c1=cfg.c1, c2=cfg.c2, max_evals=cfg.it_max)
            except LineSearchError as exc:
                trace.message = f"iteration {k}: {exc}"
                break
            trace.line_search_evals += ls.evaluations
            f_new = f - ls.alpha * d
            s_new = forward_map(ops, f_new, threads=threads)
            j_new = objective(ops, f_new, s_new)
            if j_new > trace.objective[-1] * (1.0 + 1e-12):
                # the surrogate ignores cross-time coupling; its fixed point can drift away
                trace.message = (f"iteration {k}: surrogate step raised the true objective "
                                 f"({trace.objective[-1]:.6e} -> {j_new:.6e}); kept previous iterate")
                break
            f, states = f_new, s_new
            g = gradient(ops, f, states, threads=threads)
            gn = gradient_norm(ops, g)
            trace.record(k, j_new, gn, ls.alpha)
        else:
            trace.converged = gn <= cfg.eps
        if not trace.converged and not trace.message:
            trace.message = f"stopped after {cfg.max_iter} iterations"
    else:
        # batch stream keyed apart from the per-sample KL seeds (spawn keys (m,) and (m, j))
        rng = make_rng(np.random.SeedSequence(cfg.seed, spawn_key=(2 ** 32,)))
        batch = min(cfg.batch, ops.count)
        alpha_prev = None
        for k in range(1, cfg.sgd_max_iter + 1):
            idx = np.sort(rng.choice(ops.count, size=batch, replace=False))
            sb = forward_map(ops, f, idx, threads=threads)
            gb = gradient(ops, f, sb, idx, threads=threads)
            phi, _, a1, _ = _ray(ops, f, sb, gb, idx)
            alpha0 = 1.0 if alpha_prev is None else 2.0 * alpha_prev
            try:
                ls = armijo_backtrack(phi, -a1, alpha0=alpha0, c1=cfg.c1, max_evals=cfg.it_max)
            except LineSearchError as exc:
                trace.message = f"iteration {k}: {exc}"
                break
            trace.line_search_evals += ls.evaluations
            alpha_prev = ls.alpha
            f = f - ls.alpha * gb
            if k % cfg.sgd_check_every == 0 or k == cfg.sgd_max_iter:
                states = forward_map(ops, f, threads=threads)
                g = gradient(ops, f, states, threads=threads)
                gn = gradient_norm(ops, g)
                trace.record(k, objective(ops, f, states), gn, ls.alpha)
                if gn <= cfg.eps:
                    trace.converged = True
                    break
        if not trace.converged and not trace.message:
            trace.message = f"stopped after {cfg.sgd_max_iter} iterations"
        states = forward_map(ops, f, threads=threads)

    trace.controls = f
    trace.state_mean = states.mean(axis=0)
    return trace


def solve_newton_cg(ops: ReducedOperators, g: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Matrix-free ``H^{-1} g`` by conjugate gradients, one solve per time step."""
    n = ops.dimension
    hop = LinearOperator((n, n), matvec=lambda x: hessian_apply(ops, x), dtype=float)
    out = np.empty_like(g)
    for l, gl in enumerate(g):
        out[l], info = cg(hop, gl, rtol=tol, maxiter=10 * n)
        if info != 0:
            raise RuntimeError(f"CG did not converge for step {l + 1}")
    return out
