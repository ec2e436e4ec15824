from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ddmpc.qp import (NonConvexError, QpProblem, QpStatus, TOL_KKT, assemble_reduced, dump_qp,
                      kkt_residuals, load_qp, solve_qp)
from oracles import dual_projected_gradient, random_qp_data

DATA = Path(__file__).parent / "data"


def qp_from(rng, n):
    H, f, Ae, be, Ai, bi = random_qp_data(rng, n)
    return QpProblem(H, f, 0.0, Ae, be, Ai, bi)


def test_sum_to_one_symmetry():
    for k in (1, 3, 7):
        sol = solve_qp(QpProblem(2 * np.eye(k), np.zeros(k), 0.0, np.ones((1, k)), [1.0]))
        np.testing.assert_allclose(sol.z_star, np.full(k, 1 / k), atol=1e-14)
        assert sol.cost == pytest.approx(1 / k)


def test_scalar_bound_by_hand():
    # min (z-1)^2 = z^2 - 2z + 1 subject to z <= 0
    sol = solve_qp(QpProblem([[2.0]], [-2.0], 1.0, A_in=[[1.0]], b_in=[0.0]))
    assert sol.status is QpStatus.OPTIMAL
    assert sol.z_star[0] == pytest.approx(0.0, abs=1e-14)
    assert sol.in_multipliers[0] == pytest.approx(2.0)
    assert sol.cost == pytest.approx(1.0)
    assert sol.active_set == (0,)


def test_unconstrained_minimizer():
    H = np.array([[4.0, 1.0], [1.0, 3.0]])
    f = np.array([1.0, -2.0])
    sol = solve_qp(QpProblem(H, f))
    np.testing.assert_allclose(sol.z_star, np.linalg.solve(H, -f))


def test_reduced_single_equality():
    red = assemble_reduced(QpProblem(np.eye(2), np.zeros(2), 0.0, [[1.0, 1.0]], [0.0]))
    assert red.H_r.shape == (1, 1)
    # the basis is orthonormal, so H_r = 1; along d = (1, -1) the curvature is d'Hd = 2
    d = red.Z[:, 0] / red.Z[0, 0]
    np.testing.assert_allclose(d, [1.0, -1.0])
    assert red.H_r[0, 0] == pytest.approx(1.0)
    assert red.H_r[0, 0] * (d @ d) / (red.Z[:, 0] @ red.Z[:, 0]) == pytest.approx(2.0)


def test_duplicate_equality_row_removed():
    rng = np.random.default_rng(2)
    p = qp_from(rng, 12)
    while p.A_eq.shape[0] == 0:
        p = qp_from(rng, 12)
    dup = QpProblem(p.H, p.f, 0.0, np.vstack([p.A_eq, p.A_eq[:1]]),
                    np.concatenate([p.b_eq, p.b_eq[:1]]), p.A_in, p.b_in)
    a, b = solve_qp(p), solve_qp(dup)
    assert b.removed_eq_rows == (p.A_eq.shape[0],)
    np.testing.assert_allclose(a.z_star, b.z_star, atol=1e-10)


def test_inconsistent_equalities_infeasible():
    p = QpProblem(np.eye(2), np.zeros(2), 0.0, [[1.0, 1.0], [1.0, 1.0]], [0.0, 1.0])
    assert solve_qp(p).status is QpStatus.INFEASIBLE


def test_empty_polytope_infeasible():
    p = QpProblem(np.eye(2), np.zeros(2), 0.0, A_in=[[1.0, 0.0], [-1.0, 0.0]], b_in=[-1.0, -1.0])
    sol = solve_qp(p)
    assert sol.status is QpStatus.INFEASIBLE
    assert np.all(np.isnan(sol.z_star))


def test_nonconvex_rejected():
    with pytest.raises(NonConvexError):
        solve_qp(QpProblem(np.diag([1.0, -1.0]), np.zeros(2)))
    # indefinite H that is positive definite on the equality null space is fine
    H = np.diag([1.0, -0.5])
    sol = solve_qp(QpProblem(H, np.zeros(2), 0.0, [[0.0, 1.0]], [1.0]))
    assert sol.status is QpStatus.OPTIMAL
    np.testing.assert_allclose(sol.z_star, [0.0, 1.0], atol=1e-14)


def test_asymmetric_hessian_rejected():
    with pytest.raises(ValueError):
        QpProblem([[1.0, 0.5], [0.0, 1.0]], [0.0, 0.0])


def test_iteration_cap_reports_max_iter():
    # from an interior start every one of the 30 bounds has to be added
    n = 30
    p = QpProblem(np.eye(n), -10 * np.ones(n), 0.0, A_in=np.eye(n), b_in=np.zeros(n))
    sol = solve_qp(p, warm_start=-np.ones(n), max_iter=3)
    assert sol.status is QpStatus.MAX_ITER
    assert sol.kkt_residuals is not None


def test_random_40_variables_matches_oracle():
    rng = np.random.default_rng(40)
    n = 40
    M = rng.standard_normal((n, n))
    H = M @ M.T / n + np.eye(n)
    f = rng.standard_normal(n)
    A_eq = rng.standard_normal((10, n))
    z0 = rng.uniform(-0.5, 0.5, n)
    box = np.zeros((20, n))
    box[np.arange(10), np.arange(10)] = 1.0
    box[10 + np.arange(10), np.arange(10)] = -1.0
    b_box = np.ones(20)
    p = QpProblem(H, f, 0.0, A_eq, A_eq @ z0, box, b_box)
    sol = solve_qp(p)
    ref = dual_projected_gradient(H, f, A_eq, A_eq @ z0, box, b_box)
    np.testing.assert_allclose(sol.z_star, ref, atol=1e-6)
    assert sol.cost == pytest.approx(p.objective(ref), abs=1e-6)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(2, 40))
def test_kkt_certificate_holds(seed, n):
    sol = solve_qp(qp_from(np.random.default_rng(seed), n))
    assert sol.status is QpStatus.OPTIMAL
    assert sol.kkt_residuals.max() <= TOL_KKT
    assert sol.in_multipliers.min(initial=0.0) >= -TOL_KKT


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(2, 30))
def test_warm_start_uniqueness(seed, n):
    rng = np.random.default_rng(seed)
    p = qp_from(rng, n)
    cold = solve_qp(p)
    # a perturbed optimum; if it is infeasible the solver falls back to phase 1
    warm = solve_qp(p, warm_start=cold.z_star + 1e-3 * rng.standard_normal(n))
    assert warm.status is QpStatus.OPTIMAL
    np.testing.assert_allclose(warm.z_star, cold.z_star, atol=10 * TOL_KKT)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(2, 30),
       s=st.floats(1e-3, 1e3, allow_nan=False))
def test_scaling_covariance(seed, n, s):
    p = qp_from(np.random.default_rng(seed), n)
    a, b = solve_qp(p), solve_qp(p.scaled(s))
    np.testing.assert_allclose(b.z_star, a.z_star, atol=1e-8 * max(1.0, np.abs(a.z_star).max()))
    assert b.cost == pytest.approx(s * a.cost, rel=1e-9, abs=1e-9)


def test_kkt_residuals_by_hand():
    p = QpProblem([[2.0]], [-2.0], 1.0, A_in=[[1.0]], b_in=[0.0])
    r = kkt_residuals(p, np.array([0.5]), np.zeros(0), np.array([1.0]))
    assert r.stationarity == pytest.approx(0.0)
    assert r.primal_in == pytest.approx(0.5)
    assert r.complementarity == pytest.approx(0.5)


def test_dump_load_round_trip(tmp_path):
    p = qp_from(np.random.default_rng(5), 9)
    p = QpProblem(p.H, p.f, 1.25, p.A_eq, p.b_eq, p.A_in, p.b_in)
    dump_qp(p, tmp_path / "qp.txt")
    first = (tmp_path / "qp.txt").read_text().splitlines()[1]
    assert first == "H 9 9"
    q = load_qp(tmp_path / "qp.txt")
    for name in ("H", "f", "A_eq", "b_eq", "A_in", "b_in"):
        np.testing.assert_array_equal(getattr(q, name), getattr(p, name))
    assert q.c0 == 1.25


def test_ill_conditioned_mpc_instance():
    # a CSTR controller QP whose equality rows are nearly dependent
    # (smallest scaled singular value ~1e-8); it is feasible and must not be
    # misreported as infeasible
    p = load_qp(DATA / "ill_conditioned_qp.txt")
    sol = solve_qp(p)
    assert sol.status is QpStatus.OPTIMAL
    assert sol.removed_eq_rows == ()
    assert sol.kkt_residuals.max() <= TOL_KKT
