import json
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lrns.linalg import make_rng
from lrns.lowrank import LowRankFactors, MatrixCollection, compress
from lrns.neumann import (NeumannDivergenceWarning, apply_inverse, apply_inverse_t, build_operator,
                          guard_all, guard_sample, solve_collection)

from conftest import random_spd


def _factors(members, tau=1.0):
    return compress(MatrixCollection(members), tau, store="dense")


def _scaled_perturbation(kbar, rank, rho, seed):
    rng = make_rng(seed)
    n = kbar.shape[0]
    b = rng.standard_normal((n, rank)) @ rng.standard_normal((rank, n))
    r = np.max(np.abs(np.linalg.eigvals(np.linalg.solve(kbar, b))))
    return b * (rho / r)


def test_identity_mean_gives_w_equal_u():
    f = _factors([make_rng(0).standard_normal((5, 5))])
    op = build_operator(np.eye(5), f, 3)
    assert np.allclose(op.correction, f.basis, atol=1e-15)


def test_scaled_identity_mean():
    u = np.eye(2)
    f = LowRankFactors(u, np.zeros((1, 2, 2)), 1.0)
    op = build_operator(2 * np.eye(2), f, 1)
    assert np.allclose(op.correction, u / 2)


def test_w_residual_random_spd():
    kbar = random_spd(50, 1, 100.0)
    f = _factors([make_rng(2).standard_normal((50, 50))], 0.2)
    op = build_operator(kbar, f, 2)
    assert np.linalg.norm(kbar @ op.correction - f.basis) <= 1e-10 * np.linalg.norm(f.basis)


def test_build_validation():
    f = _factors([np.eye(3)])
    with pytest.raises(ValueError):
        build_operator(np.eye(3), f, -1)
    with pytest.raises(ValueError):
        build_operator(np.eye(3), f, 1, guard=1.5)
    with pytest.raises(ValueError):
        build_operator(np.eye(4), f, 1)


def test_zero_perturbation():
    kbar = random_spd(8, 3)
    f = LowRankFactors(np.eye(8)[:, :2], np.zeros((1, 8, 2)), 0.25)
    op = build_operator(kbar, f, 5)
    assert guard_sample(op, 0) == 0.0
    rhs = np.arange(8.0)
    assert np.allclose(apply_inverse(op, 0, rhs), np.linalg.solve(kbar, rhs), rtol=1e-12)


def test_scalar_series():
    f = LowRankFactors(np.ones((1, 1)), np.ones((1, 1, 1)), 1.0)
    op = build_operator(np.array([[2.0]]), f, 2)
    assert abs(guard_sample(op, 0) - 0.5) <= 1e-12
    assert abs(apply_inverse(op, 0, np.array([1.0]))[0] - 0.375) <= 1e-15


def test_matches_direct_solve_rank5():
    kbar = random_spd(30, 4)
    b = _scaled_perturbation(kbar, 5, 0.3, 5)
    op = build_operator(kbar, _factors([b]), 20)
    rhs = make_rng(6).standard_normal(30)
    exact = np.linalg.solve(kbar + b, rhs)
    assert np.linalg.norm(apply_inverse(op, 0, rhs) - exact) <= 1e-9 * np.linalg.norm(exact)


def test_r0_is_unperturbed_solve():
    kbar = random_spd(12, 7)
    op = build_operator(kbar, _factors([_scaled_perturbation(kbar, 3, 0.4, 8)]), 0)
    rhs = np.ones(12)
    assert np.array_equal(apply_inverse(op, 0, rhs), op.mean.solve(rhs[:, None])[:, 0])


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 10 ** 6))
def test_linearity(alpha, beta, seed):
    kbar = random_spd(10, 9)
    op = build_operator(kbar, _factors([_scaled_perturbation(kbar, 2, 0.5, 10)]), 6)
    rng = make_rng(seed)
    a, b = rng.standard_normal(10), rng.standard_normal(10)
    lhs = apply_inverse(op, 0, alpha * a + beta * b)
    rhs = alpha * apply_inverse(op, 0, a) + beta * apply_inverse(op, 0, b)
    scale = max(np.linalg.norm(rhs), np.linalg.norm(a) + np.linalg.norm(b))
    assert np.linalg.norm(lhs - rhs) <= 1e-12 * scale


@given(st.integers(0, 8), st.integers(0, 10 ** 6))
def test_transpose_identity(terms, seed):
    kbar = random_spd(9, 11)
    op = build_operator(kbar, _factors([_scaled_perturbation(kbar, 3, 0.6, 12)]), terms)
    rng = make_rng(seed)
    x, y = rng.standard_normal(9), rng.standard_normal(9)
    assert np.isclose(y @ apply_inverse(op, 0, x), apply_inverse_t(op, 0, y) @ x, rtol=1e-11, atol=1e-13)


def test_geometric_decay_slope():
    kbar = random_spd(30, 13)
    b = _scaled_perturbation(kbar, 4, 0.5, 14)
    f = _factors([b])
    rhs = make_rng(15).standard_normal(30)
    exact = np.linalg.solve(kbar + b, rhs)
    errs = [np.linalg.norm(apply_inverse(build_operator(kbar, f, r), 0, rhs) - exact) for r in range(13)]
    assert all(a > b_ for a, b_ in zip(errs, errs[1:]))
    slope = np.polyfit(np.arange(13), np.log(errs), 1)[0]
    assert slope <= np.log(0.5) + 0.1


def test_guard_flags_and_warns():
    kbar = random_spd(10, 16)
    good = _scaled_perturbation(kbar, 2, 0.2, 17)
    bad = _scaled_perturbation(kbar, 2, 1.3, 18)
    op = build_operator(kbar, _factors([good, bad]), 3, guard_iters=60)
    report = guard_all(op)
    assert report.flagged == [1] and report.diverging == [1]
    assert abs(report.rho[0] - 0.2) < 1e-3 and abs(report.rho[1] - 1.3) < 1e-2
    assert abs(guard_sample(op, 1) - 1.3) < 1e-2
    doc = json.loads(report.to_json())
    assert doc["diverging"] == [1] and doc["terms"] == 3
    with pytest.warns(NeumannDivergenceWarning, match="diverges"):
        solve_collection(op, [np.ones(10)])


def test_solve_collection_single_zero_sample():
    kbar = random_spd(6, 19)
    f = LowRankFactors(np.eye(6)[:, :1], np.zeros((1, 6, 1)), 1 / 6)
    op = build_operator(kbar, f, 4)
    loads = make_rng(20).standard_normal((3, 6))
    sol = solve_collection(op, loads, initial=np.zeros(6))
    assert np.allclose(sol.mean[1:], np.linalg.solve(kbar, loads.T).T, rtol=1e-12)
    assert np.array_equal(sol.mean[0], np.zeros(6))


def test_solve_collection_pair_mean():
    kbar = random_spd(12, 21)
    b = _scaled_perturbation(kbar, 3, 0.05, 22)
    op = build_operator(kbar, _factors([b, -b]), 30)
    loads = make_rng(23).standard_normal((2, 12))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        sol = solve_collection(op, loads, keep_samples=True, threads=2)
    direct = 0.5 * (np.linalg.solve(kbar + b, loads.T) + np.linalg.solve(kbar - b, loads.T)).T
    assert np.allclose(sol.mean, direct, rtol=0, atol=1e-8 * np.abs(direct).max())
    assert sol.samples.shape == (2, 2, 12)


def test_solve_collection_thread_invariance():
    kbar = random_spd(10, 24)
    members = [_scaled_perturbation(kbar, 2, 0.3, 30 + m) for m in range(40)]
    op = build_operator(kbar, _factors(members, 0.5), 5)
    loads = make_rng(25).standard_normal((3, 10))
    a = solve_collection(op, loads, threads=1).mean
    b = solve_collection(op, loads, threads=4).mean
    assert np.array_equal(a, b)
