import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ddmpc.arx import (ArxModel, ArxMpcConfig, ArxRidgeWarning, arx_mpc_problem,
                       arx_state_space, fit_arx, lifted_state)
from ddmpc.qp import QpStatus, solve_qp
from ddmpc.sets import Polytope
from ddmpc.systems import simulate_affine


def random_arx(rng, n, m, p):
    # companion-form poles inside the unit disc keep long simulations bounded
    A = 0.4 / n * rng.uniform(-1, 1, (n, p, p))
    B = rng.standard_normal((n + 1, p, m))
    c = rng.standard_normal(p)
    return ArxModel(A, B, c, 0.0)


def arx_recursion(model, u, y_init):
    """Run the difference equation directly, seeded with ``n`` initial outputs."""
    n = model.order
    y = [np.asarray(v, float) for v in y_init]
    for k in range(n, len(u)):
        y_past = [y[k - i] for i in range(1, n + 1)]
        u_win = [u[k - i] for i in range(n + 1)]
        y.append(model.predict(y_past, u_win))
    return np.array(y)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 3), m=st.integers(1, 2), p=st.integers(1, 2))
def test_coefficients_recovered(seed, n, m, p):
    rng = np.random.default_rng(seed)
    true = random_arx(rng, n, m, p)
    u = rng.uniform(-1, 1, (80, m))
    y = arx_recursion(true, u, rng.standard_normal((n, p)))
    fit = fit_arx(u, y, n)
    np.testing.assert_allclose(fit.theta(), true.theta(), atol=1e-8)
    assert fit.residual <= 1e-10 and fit.ridge == 0.0


def test_theta_round_trip():
    m0 = random_arx(np.random.default_rng(1), 2, 2, 3)
    back = ArxModel.from_theta(m0.theta(), 2, 2, 3)
    for name in ("A", "B", "c"):
        np.testing.assert_array_equal(getattr(back, name), getattr(m0, name))


def test_state_space_realization_reproduces_recursion():
    rng = np.random.default_rng(2)
    model = random_arx(rng, 2, 1, 2)
    u = rng.uniform(-1, 1, (30, 1))
    y = arx_recursion(model, u, rng.standard_normal((2, 2)))
    sys_ = arx_state_space(model)
    # state at k = 2 collects y_1, y_0 and u_1, u_0 (most recent first)
    x2 = lifted_state(y[1::-1], u[1::-1])
    tr = simulate_affine(sys_, x2, u[2:])
    np.testing.assert_allclose(tr.outputs, y[2:], atol=1e-12)


def test_steady_state_rows_match_realization():
    model = random_arx(np.random.default_rng(3), 2, 1, 1)
    sys_ = arx_state_space(model)
    u = np.array([0.3])
    _, y = sys_.equilibrium(u)
    Gy, Gu = model.steady_state_rows()
    np.testing.assert_allclose(Gy @ y - Gu @ u, model.c, atol=1e-12)


def test_zero_excitation_triggers_ridge():
    u = np.zeros((40, 1))
    y = np.full((40, 1), 0.5)
    with pytest.warns(ArxRidgeWarning):
        fit = fit_arx(u, y, 2)
    assert fit.ridge > 0
    assert np.all(np.isfinite(fit.theta()))


def test_prior_pull():
    rng = np.random.default_rng(4)
    true = random_arx(rng, 2, 1, 1)
    prior = random_arx(rng, 2, 1, 1)
    u = rng.uniform(-1, 1, (60, 1))
    y = arx_recursion(true, u, [[0.0], [0.1]])
    free = fit_arx(u, y, 2)
    pulled = fit_arx(u, y, 2, prior, reg=10.0)
    # the pull trades one-step fit against distance to the prior
    assert np.linalg.norm(pulled.theta() - prior.theta()) < np.linalg.norm(free.theta() - prior.theta())
    assert pulled.residual > free.residual
    # an overwhelming weight returns the prior
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        stiff = fit_arx(u, y, 2, prior, reg=1e12)
    np.testing.assert_allclose(stiff.theta(), prior.theta(), atol=1e-6)
    # with unexcited data the pull alone regularizes the fit, so no ridge is needed
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        flat = fit_arx(np.zeros((40, 1)), np.full((40, 1), 0.5), 2, prior, reg=1.0)
    assert flat.ridge == 0.0


def test_arx_mpc_problem_structure():
    rng = np.random.default_rng(5)
    model = random_arx(rng, 2, 1, 1)
    Gy, Gu = model.steady_state_rows()
    y_ref = float(np.linalg.solve(Gy, Gu @ [0.5] + model.c)[0])
    cfg = ArxMpcConfig(L=12, Q=[[1.0]], R=[[0.1]], S=[[10.0]], R_delta=[[0.01]], y_ref=[y_ref],
                       U=Polytope.box([-5], [5]), U_s=Polytope.box([-4], [4]))
    u = rng.uniform(-1, 1, (2, 1))
    y = arx_recursion(model, np.vstack([u, np.zeros((1, 1))]), rng.standard_normal((2, 1)))[:2]
    y_past, u_past = y[::-1], u[::-1]
    u_now = np.array([0.2])
    qp = arx_mpc_problem(cfg, model, y_past, u_past, u_now)
    sol = solve_qp(qp)
    assert sol.status is QpStatus.OPTIMAL
    z = sol.z_star
    v, u_s, y_s = z[:13], z[13:14], z[14:15]
    assert v[0] == pytest.approx(0.2)
    assert cfg.U_s.contains(u_s)
    np.testing.assert_allclose(Gy @ y_s - Gu @ u_s, model.c, atol=1e-9)
    # the predicted tail sits at the setpoint when simulated with the model
    sys_ = arx_state_space(model)
    tr = simulate_affine(sys_, lifted_state(y_past, u_past), v.reshape(-1, 1))
    np.testing.assert_allclose(tr.outputs[-2:].ravel(), y_s[0], atol=1e-8)
    np.testing.assert_allclose(v[-2:], u_s[0], atol=1e-8)
    # started at the target equilibrium the controller stays there at zero cost
    rest = solve_qp(arx_mpc_problem(cfg, model, np.full((2, 1), y_ref), np.full((2, 1), 0.5),
                                    np.array([0.5])))
    assert rest.cost == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(rest.z_star[13:], [0.5, y_ref], atol=1e-8)


def test_config_rejects_short_horizon():
    with pytest.raises(ValueError):
        ArxMpcConfig(L=3, Q=[[1.0]], R=[[1.0]], S=[[1.0]], R_delta=[[1.0]], y_ref=[0.0],
                     U=Polytope.box([-1], [1]), U_s=Polytope.box([-1], [1]))
