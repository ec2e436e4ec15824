import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from ddmpc.systems import (AffineSystem, CstrParameters, cstr_base_plant, cstr_plant, cstr_rhs,
                           cstr_rhs_jacobian, cstr_step, cstr_step_jacobian, equilibrium_state,
                           linearization_error_data, linearize, random_affine_system,
                           simulate_affine, simulate_nonlinear, unwrap_incremental,
                           wrap_incremental)
from ddmpc.trajdata import DimensionError


def central_diff(fun, x, h=1e-6):
    x = np.asarray(x, float)
    cols = []
    for i in range(x.size):
        d = np.zeros_like(x)
        d[i] = h
        cols.append((fun(x + d) - fun(x - d)) / (2 * h))
    return np.column_stack(cols)


def toy():
    return AffineSystem(np.array([[0.9, 0.3], [-0.2, 0.7]]), np.array([[0.0], [1.0]]),
                        np.array([[1.0, 0.0]]), np.zeros((1, 1)), np.array([0.1, -0.05]),
                        np.array([0.2]))


def test_affine_shapes_and_properties():
    s = toy()
    assert (s.n, s.m, s.p) == (2, 1, 1)
    assert s.is_controllable() and s.is_observable() and s.has_unique_steady_state()
    x, y = s.equilibrium([0.5])
    np.testing.assert_allclose(s.A @ x + s.B @ [0.5] + s.e, x, atol=1e-14)
    assert y[0] == pytest.approx(x[0] + 0.2)
    with pytest.raises(DimensionError):
        AffineSystem(np.ones((2, 3)), np.ones((2, 1)), np.ones((1, 2)), 0, 0, 0)


def test_uncontrollable_detected():
    s = AffineSystem(np.diag([0.5, 0.6]), np.array([[1.0], [0.0]]), np.array([[1.0, 1.0]]),
                     np.zeros((1, 1)), np.zeros(2), np.zeros(1))
    assert not s.is_controllable()
    assert s.is_observable()


def test_simulate_affine_recursion():
    s = toy()
    u = np.array([[1.0], [-1.0], [0.5]])
    tr = simulate_affine(s, [1.0, 2.0], u)
    x = np.array([1.0, 2.0])
    for k in range(3):
        np.testing.assert_allclose(tr.states[k], x)
        np.testing.assert_allclose(tr.outputs[k], s.C @ x + s.r)
        x = s.A @ x + s.B @ u[k] + s.e
    with pytest.raises(DimensionError):
        simulate_affine(s, [0, 0], np.zeros((3, 2)))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 4), m=st.integers(1, 2), p=st.integers(1, 2))
def test_random_system_is_stable_controllable_observable(seed, n, m, p):
    s = random_affine_system(np.random.default_rng(seed), n, m, p)
    assert np.abs(np.linalg.eigvals(s.A)).max() == pytest.approx(0.9)
    assert s.is_controllable() and s.is_observable()


def test_affine_as_plant_matches():
    s = toy()
    pl = s.as_plant()
    u = np.random.default_rng(0).uniform(-1, 1, (15, 1))
    a = simulate_affine(s, [0.3, -0.2], u)
    b = simulate_nonlinear(pl, [0.3, -0.2], u)
    np.testing.assert_allclose(a.outputs, b.outputs, atol=1e-14)


def test_linearization_of_affine_plant_is_exact():
    s = toy()
    lin = linearize(s.as_plant(), [5.0, -3.0])
    np.testing.assert_allclose(lin.A, s.A)
    np.testing.assert_allclose(lin.e, s.e, atol=1e-12)
    np.testing.assert_allclose(lin.r, s.r, atol=1e-12)
    u = np.random.default_rng(1).uniform(-1, 1, (12, 1))
    data = linearization_error_data(s.as_plant(), [5.0, -3.0], [1.0, 1.0], u)
    assert np.max(np.abs(data.delta)) < 1e-12
    assert data.x_prime.shape == (13, 2)


def test_cstr_rhs_jacobian_vs_finite_differences():
    prm = CstrParameters()
    for x in ([0.9831, 0.3918], [0.26, 0.65], [0.5, 0.5]):
        for u in (0.1, 0.76, 1.5):
            J = cstr_rhs_jacobian(np.array(x), u, prm)
            Jfd = central_diff(lambda z: cstr_rhs(z, u, prm), x)
            np.testing.assert_allclose(J, Jfd, rtol=1e-6, atol=1e-8)


def test_cstr_step_jacobian_vs_finite_differences():
    prm = CstrParameters(dt=0.2, substeps=2)
    x = np.array([0.4, 0.6])
    J = cstr_step_jacobian(x, 0.8, prm)
    Jfd = central_diff(lambda z: cstr_step(z, 0.8, prm), x)
    np.testing.assert_allclose(J, Jfd, rtol=1e-6, atol=1e-9)


def test_cstr_rk4_matches_adaptive_integration():
    prm = CstrParameters(dt=0.2)
    x = np.array([0.9831, 0.3918])
    u = 0.76
    xk = x.copy()
    for _ in range(50):
        xk = cstr_step(xk, u, prm)
    ref = solve_ivp(lambda t, z: cstr_rhs(z, u, prm), (0, 10.0), x, rtol=1e-11, atol=1e-13)
    np.testing.assert_allclose(xk, ref.y[:, -1], atol=1e-7)


def test_cstr_reference_equilibrium():
    # the upper steady state at the reference temperature
    base = cstr_base_plant()
    x = equilibrium_state(base, np.array([0.7583272752921766]), np.array([0.26, 0.65]))
    assert x is not None
    assert x[1] == pytest.approx(0.6519, abs=1e-6)
    np.testing.assert_allclose(base.step(x, [0.7583272752921766]), x, atol=1e-12)


def test_cstr_bistable_branches():
    base = cstr_base_plant()
    u = np.array([0.76])
    hi = equilibrium_state(base, u, np.array([0.26, 0.65]))
    lo = equilibrium_state(base, u, np.array([0.98, 0.39]))
    assert hi is not None and lo is not None
    assert hi[1] > 0.6 > 0.45 > lo[1]


def test_equilibrium_state_failure_returns_none():
    from ddmpc.systems import GeneralPlant
    runaway = GeneralPlant(1, 1, 1, f=lambda x, u: x + 1.0 + 0 * u, h=lambda x, u: x)
    assert equilibrium_state(runaway, np.zeros(1), np.zeros(1)) is None


def test_incremental_wrapper_structure():
    plant = cstr_plant()
    assert (plant.n, plant.m, plant.p) == (3, 1, 2)
    z = np.array([0.5, 0.55, 0.7])
    z1 = plant.step(z, np.array([0.05]))
    np.testing.assert_allclose(z1[:2], cstr_step(z[:2], 0.7, CstrParameters()))
    assert z1[2] == pytest.approx(0.75)
    np.testing.assert_allclose(plant.output(z, np.array([0.05])), [0.55, 0.7])
    Jfd = central_diff(plant.f0, z)
    np.testing.assert_allclose(plant.A_at(z), Jfd, rtol=1e-6, atol=1e-8)


def test_generic_incremental_wrapper_uses_fd_input_column():
    wrapped = wrap_incremental(cstr_base_plant())
    z = np.array([0.5, 0.55, 0.7])
    np.testing.assert_allclose(wrapped.A_at(z), central_diff(wrapped.f0, z), rtol=1e-5, atol=1e-8)


def test_unwrap_incremental():
    plant = cstr_plant()
    du = np.full((5, 1), 0.1)
    tr = simulate_nonlinear(plant, [0.9831, 0.3918, 0.2], du)
    orig = unwrap_incremental(tr, 2, 1)
    np.testing.assert_allclose(orig.inputs.ravel(), [0.2, 0.3, 0.4, 0.5, 0.6])
    np.testing.assert_allclose(orig.outputs, tr.states[:, 1:2])
