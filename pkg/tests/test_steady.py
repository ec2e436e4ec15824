import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import null_space

from ddmpc.sets import Polytope
from ddmpc.steady import (EquilibriumInfeasibleError, EquilibriumSpec, PersistenceWarning,
                          min_norm_representer, optimal_equilibrium_data,
                          optimal_equilibrium_model, optimal_equilibrium_robust, steady_lift)
from ddmpc.systems import AffineSystem, cstr_base_plant, random_affine_system, simulate_affine
from ddmpc.trajdata import Trajectory, hankel


def scalar_system():
    # x+ = 0.5 x + u + 1, y = x
    return AffineSystem([[0.5]], [[1.0]], [[1.0]], [[0.0]], [1.0], [0.0])


def pe_data(sys_, N, seed=0):
    rng = np.random.default_rng(seed)
    return simulate_affine(sys_, rng.standard_normal(sys_.n), rng.uniform(-1, 1, (N, sys_.m)))


def test_scalar_capped_equilibrium():
    spec = EquilibriumSpec([[1.0]], [10.0], Polytope.box([-1], [1]), L=3, n=1)
    res = optimal_equilibrium_model(scalar_system(), spec)
    assert res.u_s[0] == pytest.approx(1.0)
    assert res.y_s[0] == pytest.approx(4.0)
    assert res.J_eq == pytest.approx(36.0)
    # grid search over the admissible inputs as an independent check
    grid = np.linspace(-1, 1, 2001)
    assert min((2 * (u + 1) - 10) ** 2 for u in grid) == pytest.approx(res.J_eq)


def test_scalar_cost_scales_with_S():
    a = optimal_equilibrium_model(scalar_system(),
                                  EquilibriumSpec([[1.0]], [10.0], Polytope.box([-1], [1]), 3, 1))
    b = optimal_equilibrium_model(scalar_system(),
                                  EquilibriumSpec([[3.0]], [10.0], Polytope.box([-1], [1]), 3, 1))
    assert b.J_eq == pytest.approx(3 * a.J_eq)


def test_reachable_setpoint_exact():
    spec = EquilibriumSpec([[1.0]], [2.5], Polytope.box([-5], [5]), L=3, n=1)
    res = optimal_equilibrium_model(scalar_system(), spec)
    assert res.y_s[0] == pytest.approx(2.5)
    assert res.J_eq == pytest.approx(0.0, abs=1e-20)


def test_model_respects_output_box():
    spec = EquilibriumSpec([[1.0]], [2.5], Polytope.box([-5], [5]), 3, 1,
                           Y_s=Polytope.box([-10], [1.5]))
    res = optimal_equilibrium_model(scalar_system(), spec)
    assert res.y_s[0] == pytest.approx(1.5)


@pytest.mark.parametrize("seed", range(4))
def test_data_matches_model_on_affine(seed):
    rng = np.random.default_rng(seed)
    sys_ = random_affine_system(rng, 3, 1, 1)
    L, n = 6, 3
    data = pe_data(sys_, 60, seed)
    spec = EquilibriumSpec([[2.0]], [0.7], Polytope.box([-0.4], [0.4]), L, n)
    a = optimal_equilibrium_model(sys_, spec)
    b = optimal_equilibrium_data(data, spec)
    np.testing.assert_allclose(b.u_s, a.u_s, atol=1e-6)
    np.testing.assert_allclose(b.y_s, a.y_s, atol=1e-6)
    assert b.J_eq == pytest.approx(a.J_eq, abs=1e-6)


def test_data_two_by_two_system():
    rng = np.random.default_rng(9)
    sys_ = random_affine_system(rng, 2, 2, 2)
    spec = EquilibriumSpec(np.diag([1.0, 4.0]), [0.3, -0.2], Polytope.box([-2, -2], [2, 2]), 4, 2)
    a = optimal_equilibrium_model(sys_, spec)
    b = optimal_equilibrium_data(pe_data(sys_, 60, 9), spec)
    np.testing.assert_allclose(b.y_s, a.y_s, atol=1e-6)


def test_S_scaling_keeps_minimizer():
    sys_ = random_affine_system(np.random.default_rng(3), 2, 1, 1)
    data = pe_data(sys_, 50, 3)
    box = Polytope.box([-0.2], [0.2])
    a = optimal_equilibrium_data(data, EquilibriumSpec([[1.0]], [3.0], box, 5, 2))
    b = optimal_equilibrium_data(data, EquilibriumSpec([[10.0]], [3.0], box, 5, 2))
    np.testing.assert_allclose(a.u_s, b.u_s, atol=1e-9)
    np.testing.assert_allclose(a.y_s, b.y_s, atol=1e-9)
    assert b.J_eq == pytest.approx(10 * a.J_eq)


def test_unexcited_data_warns():
    sys_ = random_affine_system(np.random.default_rng(4), 2, 1, 1)
    x, _ = sys_.equilibrium([0.3])
    data = simulate_affine(sys_, x, np.full((50, 1), 0.3))
    spec = EquilibriumSpec([[1.0]], [1.0], Polytope.box([-1], [1]), 5, 2)
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        try:
            res = optimal_equilibrium_data(data, spec)
        except EquilibriumInfeasibleError:
            res = None
    assert any(issubclass(w.category, PersistenceWarning) for w in rec)
    if res is not None:
        # the only equilibrium visible in such data is the one it sits at
        np.testing.assert_allclose(res.u_s, [0.3], atol=1e-6)


def test_repeated_window_representable_and_min_norm():
    sys_ = random_affine_system(np.random.default_rng(5), 2, 1, 1)
    L, n = 5, 2
    data = pe_data(sys_, 60, 5)
    spec = EquilibriumSpec([[1.0]], [0.4], Polytope.box([-1], [1]), L, n)
    res = optimal_equilibrium_data(data, spec)
    depth = L + n + 1
    M = np.vstack([hankel(data.inputs, depth), hankel(data.outputs, depth),
                   np.ones((1, data.length - depth + 1))])
    rhs = np.concatenate([steady_lift(1, 1, depth) @ np.concatenate([res.u_s, res.y_s]), [1.0]])
    assert np.linalg.norm(M @ res.alpha_s - rhs) <= 1e-8
    # every other representer differs by a null-space direction and is longer
    Nm = null_space(M)
    rng = np.random.default_rng(0)
    for _ in range(20):
        other = res.alpha_s + Nm @ rng.standard_normal(Nm.shape[1])
        assert np.linalg.norm(res.alpha_s) <= np.linalg.norm(other) + 1e-10
    alt, resid = min_norm_representer(data, res.u_s, res.y_s, L, n)
    assert resid <= 1e-8
    np.testing.assert_allclose(alt, res.alpha_s, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), u=st.floats(-0.5, 0.5))
def test_strong_convexity_inequality(seed, u):
    sys_ = random_affine_system(np.random.default_rng(seed), 2, 1, 1)
    S = np.array([[3.0]])
    spec = EquilibriumSpec(S, [5.0], Polytope.box([-0.5], [0.5]), 4, 2)
    res = optimal_equilibrium_model(sys_, spec)
    _, y = sys_.equilibrium([u])
    d = y - res.y_s
    assert spec.cost(y) - res.J_eq >= float(d @ S @ d) - 1e-9


def test_robust_limit_matches_nominal():
    sys_ = random_affine_system(np.random.default_rng(6), 2, 1, 1)
    data = pe_data(sys_, 60, 6)
    spec = EquilibriumSpec([[1.0]], [0.5], Polytope.box([-1], [1]), 5, 2)
    a = optimal_equilibrium_data(data, spec)
    b = optimal_equilibrium_robust(data, spec, 1e-8, 1e10)
    np.testing.assert_allclose(b.u_s, a.u_s, atol=1e-4)
    np.testing.assert_allclose(b.y_s, a.y_s, atol=1e-4)
    assert np.linalg.norm(b.sigma_s) < 1e-6


def test_robust_on_noisy_data():
    sys_ = random_affine_system(np.random.default_rng(7), 2, 1, 1)
    clean = pe_data(sys_, 60, 7)
    eps = 1e-3
    noise = np.random.default_rng(8).uniform(-eps, eps, clean.outputs.shape)
    noisy = Trajectory(clean.inputs, clean.outputs + noise)
    spec = EquilibriumSpec([[1.0]], [0.5], Polytope.box([-1], [1]), 5, 2)
    ref = optimal_equilibrium_data(clean, spec)
    res = optimal_equilibrium_robust(noisy, spec, 1e-2, 1e3)
    depth = spec.L + spec.n + 1
    assert np.linalg.norm(res.sigma_s) <= 1e-2 * np.sqrt(depth)
    assert np.abs(res.y_s - ref.y_s).max() <= 50 * eps


def test_robust_alpha_shrinks_with_weight():
    sys_ = random_affine_system(np.random.default_rng(10), 2, 1, 1)
    data = pe_data(sys_, 60, 10)
    spec = EquilibriumSpec([[1.0]], [50.0], Polytope.box([-1], [1]), 5, 2)
    res = [optimal_equilibrium_robust(data, spec, la, 1.0) for la in (1e-4, 1e-1, 1e2, 1e6)]
    norms = [np.linalg.norm(r.alpha_s) for r in res]
    assert all(b <= a + 1e-12 for a, b in zip(norms, norms[1:]))
    # sum-to-one keeps alpha away from zero; the limit is a near-uniform
    # combination whose input equilibrium sits at the mean of the data inputs
    assert norms[-1] < 1e-2 * norms[0]
    assert res[-1].u_s[0] == pytest.approx(data.inputs.mean(), abs=1e-2)
    assert abs(res[-1].y_s[0] - 50.0) > abs(res[0].y_s[0] - 50.0)


def test_robust_rejects_nonpositive_weights():
    sys_ = random_affine_system(np.random.default_rng(11), 2, 1, 1)
    spec = EquilibriumSpec([[1.0]], [0.5], Polytope.box([-1], [1]), 5, 2)
    with pytest.raises(ValueError):
        optimal_equilibrium_robust(pe_data(sys_, 60), spec, 0.0, 1.0)


def test_spec_validation():
    with pytest.raises(ValueError):
        EquilibriumSpec([[1.0, 2.0], [0.0, 1.0]], [0, 0], None, 3, 1)
    with pytest.raises(ValueError):
        EquilibriumSpec([[-1.0]], [0], None, 3, 1)


def test_cstr_reference_equilibrium_model():
    base = cstr_base_plant()
    spec = EquilibriumSpec([[10.0]], [0.6519], Polytope.box([0.11], [1.99]), 40, 3)
    guesses = [np.array([0.9831, 0.3918]), np.array([0.26, 0.65])]
    res = optimal_equilibrium_model(base, spec, x_guesses=guesses)
    assert res.y_s[0] == pytest.approx(0.6519, abs=1e-6)
    np.testing.assert_allclose(base.step(res.x_s, res.u_s), res.x_s, atol=1e-10)
    assert 0.11 <= res.u_s[0] <= 1.99


def test_cstr_low_branch_only_guess_misses_target():
    # from the cold state alone Newton lands on the low-temperature branch
    base = cstr_base_plant()
    spec = EquilibriumSpec([[10.0]], [0.6519], Polytope.box([0.11], [1.99]), 40, 3)
    res = optimal_equilibrium_model(base, spec, x_guesses=[np.array([0.9831, 0.3918])])
    assert res.J_eq > 1e-3
