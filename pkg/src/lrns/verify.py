"""Self-contained oracle suite: every check compares against an independent computation.

Each check returns a measured value and passes when it is at most its
tolerance. Tolerances can be overridden by name (the CLI exposes this through
the ``verify.tolerances`` config section), which is how a deliberately
impossible tolerance is injected to exercise the failure path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate, stats

from . import fem
from .control import ControlConfig, build_reduced, forward_map, gradient, hessian_apply, surrogate_objective
from .diffusion import DiffusionConfig, assemble_cn, lrns_solve, qoi_error, reference_solve, setup
from .linalg import RsvdConfig, factorize_spd, jacobi_eigh, make_rng, rsvd_top_eigvecs, subspace_angle
from .linesearch import wolfe_search
from .lowrank import MatrixCollection, compress, factors_from_basis, gram_accumulate, rmsre
from .neumann import apply_inverse, apply_inverse_t, build_operator
from .randfield import (CovarianceSpec, kl_decompose, sample_truncated_normal,
                        truncated_normal_variance)


@dataclass(frozen=True)
class CheckResult:
    name: str
    measured: float
    tolerance: float
    description: str

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.measured) and self.measured <= self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.measured:.3e} (tol {self.tolerance:.1e}) {self.description}"

    def as_dict(self) -> dict:
        return {"name": self.name, "measured": self.measured, "tolerance": self.tolerance,
                "passed": self.passed, "description": self.description}


def _rel(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(np.linalg.norm(b), 1e-300))


def _spd(n, seed, cond=10.0):
    rng = make_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return (q * np.geomspace(1.0, cond, n)) @ q.T


def check_jacobi() -> float:
    a = _spd(24, 1, 1e3) - 5.0 * np.eye(24)
    w, v = jacobi_eigh(a)
    ref = np.linalg.eigvalsh(a)[::-1]
    return max(_rel(w, ref), _rel(a @ v, v * w))


def check_rsvd_angle() -> float:
    n, k = 200, 10
    rng = make_rng(2)
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    # exponential decay with a 10x drop after the k-th eigenvalue
    lam = np.concatenate([0.8 ** np.arange(k), 0.1 * 0.8 ** np.arange(k - 1, n - 1)])
    s = (q * lam) @ q.T
    u = rsvd_top_eigvecs(s, RsvdConfig(k, 10, 2, seed=3))
    return subspace_angle(u, q[:, :k])


def _small_collection():
    problem = setup(DiffusionConfig(n=8, samples=20, steps=4, sigma=0.2))
    return problem, problem.collection()


def check_full_rank() -> float:
    _, coll = _small_collection()
    f = compress(coll, 1.0)
    return rmsre(f, coll) / coll.scale()


def check_tail_sum() -> float:
    _, coll = _small_collection()
    gram = gram_accumulate(coll)
    w, v = np.linalg.eigh(gram)
    w, v = w[::-1], v[:, ::-1]
    worst = 0.0
    for k in (5, 15, 30):
        f = factors_from_basis(coll, v[:, :k])
        lhs = len(coll) * rmsre(f, coll) ** 2
        worst = max(worst, abs(lhs - w[k:].sum()) / w[k:].sum())
    return worst


def _neumann_system(n=30, rho=0.5, seed=4):
    kbar = _spd(n, seed)
    rng = make_rng(seed + 1)
    b = 0.1 * rng.standard_normal((n, n))
    b = b @ b.T
    # scale so that the spectral radius of K_bar^{-1} B is rho
    r = np.max(np.abs(np.linalg.eigvals(np.linalg.solve(kbar, b))))
    return kbar, b * (rho / r)


def check_neumann_direct() -> float:
    kbar, b = _neumann_system()
    coll = MatrixCollection([b, -b])
    op = build_operator(kbar, compress(coll, 1.0), terms=60)
    rhs = np.arange(30.0)
    return max(_rel(apply_inverse(op, 0, rhs), np.linalg.solve(kbar + b, rhs)),
               _rel(apply_inverse(op, 1, rhs), np.linalg.solve(kbar - b, rhs)))


def check_neumann_adjoint() -> float:
    kbar, b = _neumann_system()
    b = b + 0.01 * np.triu(b)  # nonsymmetric
    op = build_operator(kbar, compress(MatrixCollection([b]), 1.0), terms=7)
    rng = make_rng(5)
    x, y = rng.standard_normal(30), rng.standard_normal(30)
    lhs = y @ apply_inverse(op, 0, x)
    rhs = apply_inverse_t(op, 0, y) @ x
    return abs(lhs - rhs) / abs(lhs)


def check_fem_patch() -> float:
    mesh = fem.build_mesh(6)
    dofs = fem.dof_map(mesh)
    # u = x solves -div(a grad u) = 0 whenever a depends on y only
    a = fem.assemble_stiffness(mesh, lambda x, y: 1.0 + 2.0 * y)
    exact = mesh.nodes[:, 0].copy()
    mat, load = fem.restrict_dirichlet(a, np.zeros(mesh.num_nodes), dofs, exact[dofs.boundary])
    u = np.linalg.solve(mat.toarray(), load)
    return float(np.max(np.abs(u - exact[dofs.interior])))


def check_mass_quadrature() -> float:
    mesh = fem.build_mesh(5)
    g = fem.assemble_mass(mesh)
    # x and y lie in the Q1 space, so 1^T G 1 = |domain| and x^T G y = int xy exactly
    x, y = mesh.nodes.T
    return max(abs(g.sum() - 1.0), abs(x @ (g @ y) - 0.25))


def check_kl_orthonormal() -> float:
    mesh = fem.build_mesh(8)
    kl = kl_decompose(mesh.nodes, CovarianceSpec(), 19)
    return float(np.max(np.abs(kl.gram() - np.eye(19))))


def check_truncnorm_variance() -> float:
    numeric = integrate.quad(lambda z: z * z * stats.norm.pdf(z), -3, 3)[0] / (
        stats.norm.cdf(3) - stats.norm.cdf(-3))
    closed = truncated_normal_variance(3.0)
    draws = sample_truncated_normal(7, 200_000)
    return max(abs(numeric - closed), abs(draws.var() - numeric) / 5.0, float(np.abs(draws).max() > 3))


def check_cn_exact_limit() -> float:
    cfg = DiffusionConfig(n=4, samples=12, steps=5, t_end=0.05, sigma=0.1, tau=1.0, terms=40)
    problem = setup(cfg)
    system = assemble_cn(problem)
    ref = reference_solve(problem, system, threads=1)
    return qoi_error(lrns_solve(problem, system, threads=1), ref, problem.mass, cfg.dt)


def _control_ops():
    return build_reduced(ControlConfig(n=4, samples=6, steps=3, t_end=0.3, tau=1.0, terms=8))


def check_control_gradient() -> float:
    ops = _control_ops()
    rng = make_rng(8)
    f = rng.standard_normal((ops.config.steps, ops.dimension))
    states = forward_map(ops, f, threads=1)
    g = gradient(ops, f, states, threads=1)
    h = 1e-6
    fd = np.empty_like(f)
    for idx in np.ndindex(*f.shape):
        fp, fm = f.copy(), f.copy()
        fp[idx] += h
        fm[idx] -= h
        fd[idx] = (surrogate_objective(ops, fp, states) - surrogate_objective(ops, fm, states)) / (2 * h)
    return float(np.max(np.abs(fd - g)) / np.max(np.abs(g)))


def check_hessian() -> float:
    ops = _control_ops()
    rng = make_rng(9)
    d = rng.standard_normal((2, ops.dimension))
    factorize_spd(ops.hessian)
    return max(ops.asymmetry, _rel(hessian_apply(ops, d), d @ ops.hessian))


def check_wolfe() -> float:
    def rosen(x):
        return 100.0 * (x[1] - x[0] ** 2) ** 2 + (1 - x[0]) ** 2

    def grad(x):
        return np.array([-400.0 * x[0] * (x[1] - x[0] ** 2) - 2 * (1 - x[0]), 200.0 * (x[1] - x[0] ** 2)])

    x = np.array([-1.2, 1.0])
    d = -grad(x)
    res = wolfe_search(lambda a: rosen(x + a * d), lambda a: grad(x + a * d) @ d, alpha0=1.0)
    g0 = grad(x) @ d
    armijo = rosen(x + res.alpha * d) - (rosen(x) + 1e-4 * res.alpha * g0)
    curvature = abs(res.dphi) - 0.9 * abs(g0)
    return max(armijo, curvature, 0.0)


CHECKS: dict[str, tuple[Callable[[], float], float, str]] = {
    "jacobi_eigh": (check_jacobi, 1e-10, "Jacobi eigensolver vs LAPACK eigvalsh"),
    "rsvd_subspace": (check_rsvd_angle, 1e-6, "RSVD top-10 subspace angle, gap 10"),
    "full_rank_rmsre": (check_full_rank, 1e-9, "tau = 1 RMSRE relative to member scale"),
    "rmsre_tail_sum": (check_tail_sum, 1e-8, "M RMSRE^2 vs Gram tail sum, k = 5/15/30"),
    "neumann_direct": (check_neumann_direct, 1e-12, "Neumann series (rho 0.5, R 60) vs dense solve"),
    "neumann_adjoint": (check_neumann_adjoint, 1e-12, "transpose action adjoint identity"),
    "fem_patch": (check_fem_patch, 1e-12, "u = x reproduced with coefficient 1 + 2y"),
    "mass_quadrature": (check_mass_quadrature, 1e-14, "mass matrix integrates 1 and xy exactly"),
    "kl_orthonormal": (check_kl_orthonormal, 1e-12, "KL eigenfunctions orthonormal in the Nystrom weight"),
    "truncnorm_variance": (check_truncnorm_variance, 2e-3, "closed form vs quadrature vs sampler"),
    "cn_exact_limit": (check_cn_exact_limit, 1e-8, "LRNS (tau 1, R 40) vs direct MC-FEM"),
    "control_gradient": (check_control_gradient, 1e-6, "gradient vs central FD of the surrogate"),
    "hessian": (check_hessian, 1e-10, "Hessian symmetry and matvec vs dense"),
    "wolfe": (check_wolfe, 0.0, "strong Wolfe conditions on Rosenbrock"),
}


def run_checks(tolerances: dict | None = None, only=None) -> list[CheckResult]:
    """Run the suite; ``tolerances`` overrides per-check tolerances by name."""
    tolerances = dict(tolerances or {})
    unknown = set(tolerances) - set(CHECKS)
    if unknown:
        raise KeyError(f"unknown verify checks: {sorted(unknown)}; known: {sorted(CHECKS)}")
    names = list(CHECKS) if only is None else list(only)
    out = []
    for name in names:
        fn, tol, desc = CHECKS[name]
        try:
            value = float(fn())
        except Exception as exc:  # a crashing oracle is a failed check, reported by name
            value, desc = float("inf"), f"{desc} [raised {type(exc).__name__}: {exc}]"
        out.append(CheckResult(name, value, float(tolerances.get(name, tol)), desc))
    return out
