"""Optimal reachable equilibria: model-based, data-based and slack-robust variants."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from .qp import NonConvexError, QpProblem, solve_qp
from .sets import Polytope
from .systems import AffineSystem, equilibrium_state
from .trajdata import Trajectory, hankel, numerical_rank, pe_check_input_richness

RIDGE = 1e-9


class NoEquilibriumError(RuntimeError):
    pass


class EquilibriumInfeasibleError(RuntimeError):
    pass


class PersistenceWarning(UserWarning):
    """Data too poorly excited for the requested parametrization."""


@dataclass(frozen=True)
class EquilibriumSpec:
    """Setpoint problem data.

    ``S`` must be symmetric positive semidefinite; strict convexity of the
    resulting QP is checked by the solver.  ``Y_s`` optionally constrains
    the output equilibrium (needed when inputs are carried as outputs).
    """

    S: np.ndarray
    y_ref: np.ndarray
    U_s: Optional[Polytope]
    L: int
    n: int
    Y_s: Optional[Polytope] = None
    u_s_fixed: Optional[np.ndarray] = None

    def __post_init__(self):
        S = np.atleast_2d(np.asarray(self.S, float))
        if not np.allclose(S, S.T):
            raise ValueError("S must be symmetric")
        if np.linalg.eigvalsh(S).min() < -1e-12:
            raise ValueError("S must be positive semidefinite")
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "y_ref", np.asarray(self.y_ref, float).reshape(S.shape[0]))
        if self.u_s_fixed is not None:
            object.__setattr__(self, "u_s_fixed", np.atleast_1d(np.asarray(self.u_s_fixed, float)))

    @property
    def p(self) -> int:
        return self.S.shape[0]

    def cost(self, y_s) -> float:
        d = np.asarray(y_s, float) - self.y_ref
        return float(d @ self.S @ d)


@dataclass(frozen=True)
class EquilibriumResult:
    u_s: np.ndarray
    y_s: np.ndarray
    J_eq: float
    alpha_s: Optional[np.ndarray] = None
    x_s: Optional[np.ndarray] = None
    sigma_s: Optional[np.ndarray] = None


def _output_cost_terms(spec: EquilibriumSpec):
    H = 2.0 * spec.S
    f = -2.0 * spec.S @ spec.y_ref
    c0 = float(spec.y_ref @ spec.S @ spec.y_ref)
    return H, f, c0


def _solve_with_ridge(build, nz_ridge: slice):
    """Solve ``build(ridge)``; fall back to a tiny ridge if not strictly convex."""
    try:
        return solve_qp(build(0.0))
    except NonConvexError:
        warnings.warn("steady-state QP not strictly convex; adding a ridge of %g" % RIDGE,
                      RuntimeWarning, stacklevel=3)
        return solve_qp(build(RIDGE))


def _affine_equilibrium_qp(sys: AffineSystem, spec: EquilibriumSpec) -> EquilibriumResult:
    # y = G u + g on the equilibrium manifold (I - A nonsingular)
    M = np.linalg.solve(np.eye(sys.n) - sys.A, np.column_stack([sys.B, sys.e]))
    G = sys.C @ M[:, :sys.m] + sys.D
    g = sys.C @ M[:, sys.m] + sys.r
    Hy, fy, c0 = _output_cost_terms(spec)
    H = G.T @ Hy @ G
    f = G.T @ (Hy @ g + fy)
    c = 0.5 * g @ Hy @ g + fy @ g + c0
    A_in = np.zeros((0, sys.m))
    b_in = np.zeros(0)
    if spec.U_s is not None:
        A_in, b_in = spec.U_s.A, spec.U_s.b
    if spec.Y_s is not None:
        A_in = np.vstack([A_in, spec.Y_s.A @ G])
        b_in = np.concatenate([b_in, spec.Y_s.b - spec.Y_s.A @ g])
    A_eq = b_eq = None
    if spec.u_s_fixed is not None:
        A_eq, b_eq = np.eye(sys.m), spec.u_s_fixed

    def build(ridge):
        return QpProblem(H + 2 * ridge * np.eye(sys.m), f, c, A_eq, b_eq, A_in, b_in)

    sol = _solve_with_ridge(build, slice(0, sys.m))
    if not sol.optimal:
        raise EquilibriumInfeasibleError(f"steady-state QP status {sol.status.value}")
    u = sol.z_star
    x = M[:, :sys.m] @ u + M[:, sys.m]
    y = G @ u + g
    return EquilibriumResult(u, y, spec.cost(y), x_s=x)


def _start_grid(U_s: Polytope, m: int, n_starts: int) -> list[np.ndarray]:
    lo, hi = U_s.box_bounds()
    if m == 1:
        return [np.array([v]) for v in np.linspace(lo[0], hi[0], n_starts)]
    rng = np.random.default_rng(0)
    pts = []
    while len(pts) < n_starts:
        v = rng.uniform(lo, hi)
        if U_s.contains(v):
            pts.append(v)
    return pts


def optimal_equilibrium_model(plant, spec: EquilibriumSpec,
                              x_guesses: Optional[Sequence] = None,
                              n_starts: int = 8) -> EquilibriumResult:
    """Best reachable equilibrium from a plant model (oracle use only).

    Affine systems are handled exactly.  For nonlinear plants the
    equilibrium state for a given input is found by damped Newton started
    from each of ``x_guesses`` and the setpoint cost is minimized over
    ``U_s`` from ``n_starts`` grid points.
    """
    if isinstance(plant, AffineSystem):
        return _affine_equilibrium_qp(plant, spec)
    if spec.U_s is None:
        raise ValueError("model-based equilibrium search needs a bounded U_s")
    guesses = [np.asarray(g, float) for g in (x_guesses or [np.zeros(plant.n)])]
    memo: dict = {}

    def state_of(u):
        # several equilibria can share one input; keep the cheapest
        key = tuple(np.round(u, 14))
        if key not in memo:
            best, best_J = None, np.inf
            for g in guesses:
                x = equilibrium_state(plant, u, g)
                if x is not None:
                    J = spec.cost(plant.output(x, u))
                    if J < best_J:
                        best, best_J = x, J
            memo[key] = best
        return memo[key]

    def cost(u):
        x = state_of(u)
        if x is None:
            return 1e12
        return spec.cost(plant.output(x, u))

    cons = [{"type": "ineq", "fun": lambda u, P=spec.U_s: P.b - P.A @ u,
             "jac": lambda u, P=spec.U_s: -P.A}]
    best_u, best_J = None, np.inf
    for u0 in _start_grid(spec.U_s, plant.m, n_starts):
        if state_of(u0) is None:
            continue
        res = minimize(cost, u0, method="SLSQP", constraints=cons,
                       options={"ftol": 1e-16, "maxiter": 200})
        u = np.clip(res.x, *spec.U_s.box_bounds())
        J = cost(u)
        if J < best_J - 1e-15:
            best_u, best_J = u, J
    if best_u is None or best_J >= 1e12:
        raise NoEquilibriumError("Newton failed from every start")
    x = state_of(best_u)
    y = plant.output(x, best_u)
    return EquilibriumResult(best_u, y, spec.cost(y), x_s=x)


def _stack(data: Trajectory, depth: int) -> tuple[np.ndarray, np.ndarray]:
    return hankel(data.inputs, depth), hankel(data.outputs, depth)


def steady_lift(m: int, p: int, depth: int) -> np.ndarray:
    """Matrix mapping ``(u, y)`` to the ``depth``-fold repeated stacked window."""
    T = np.zeros(((m + p) * depth, m + p))
    T[:m * depth, :m] = np.kron(np.ones((depth, 1)), np.eye(m))
    T[m * depth:, m:] = np.kron(np.ones((depth, 1)), np.eye(p))
    return T


def data_equilibrium_set(data: Trajectory, L: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(K, k0)`` with data-consistent equilibria ``{(u, y) : K [u; y] = k0}``.

    Rows of ``K`` are orthonormal-scaled and independent.  An empty ``K``
    means every pair is consistent (data too rich to constrain anything).
    """
    depth = L + n + 1
    Hu, Hy = _stack(data, depth)
    M = np.vstack([Hu, Hy, np.ones((1, Hu.shape[1]))])
    r, _ = numerical_rank(M)
    U, _, _ = np.linalg.svd(M, full_matrices=True)
    Uperp = U[:, r:]
    T = np.vstack([steady_lift(data.m, data.p, depth), np.zeros((1, data.m + data.p))])
    t0 = np.zeros(M.shape[0])
    t0[-1] = 1.0
    K = Uperp.T @ T
    k0 = -Uperp.T @ t0
    if K.size == 0:
        return np.zeros((0, data.m + data.p)), np.zeros(0)
    Uk, s, Vt = np.linalg.svd(K, full_matrices=True)
    rk = int(np.sum(s > max(K.shape) * (s[0] if s.size else 0) * 1e-10)) if s.size else 0
    resid = k0 - Uk[:, :rk] @ (Uk[:, :rk].T @ k0)
    if np.linalg.norm(resid) > 1e-8:
        raise EquilibriumInfeasibleError("data admit no equilibrium window")
    return s[:rk, None] * Vt[:rk], Uk[:, :rk].T @ k0


def min_norm_representer(data: Trajectory, u_s, y_s, L: int, n: int) -> tuple[np.ndarray, float]:
    """Minimum-norm ``alpha`` reproducing the repeated equilibrium window."""
    depth = L + n + 1
    Hu, Hy = _stack(data, depth)
    M = np.vstack([Hu, Hy, np.ones((1, Hu.shape[1]))])
    rhs = np.concatenate([steady_lift(data.m, data.p, depth) @ np.concatenate([u_s, y_s]), [1.0]])
    alpha, *_ = np.linalg.lstsq(M, rhs, rcond=None)
    return alpha, float(np.linalg.norm(M @ alpha - rhs))


def _warn_pe(data: Trajectory, L: int, n: int) -> None:
    depth = L + n + 1
    try:
        rich = pe_check_input_richness(data.inputs, depth, n)
    except ValueError:
        rich = False
    if not rich:
        warnings.warn(f"input data not persistently exciting of order {depth}",
                      PersistenceWarning, stacklevel=3)


def optimal_equilibrium_data(data: Trajectory, spec: EquilibriumSpec) -> EquilibriumResult:
    """Best equilibrium consistent with the data and the minimum-norm representer."""
    _warn_pe(data, spec.L, spec.n)
    m, p = data.m, data.p
    K, k0 = data_equilibrium_set(data, spec.L, spec.n)
    Hy, fy, c0 = _output_cost_terms(spec)
    nz = m + p
    H = np.zeros((nz, nz))
    H[m:, m:] = Hy
    f = np.concatenate([np.zeros(m), fy])
    A_in, b_in = _setpoint_inequalities(spec, nz, 0, m)
    A_eq, b_eq = K, k0
    if spec.u_s_fixed is not None:
        A_eq = np.vstack([K, np.eye(nz)[:m]])
        b_eq = np.concatenate([k0, spec.u_s_fixed])

    def build(ridge):
        return QpProblem(H + 2 * ridge * np.eye(nz), f, c0, A_eq, b_eq, A_in, b_in)

    sol = _solve_with_ridge(build, slice(0, nz))
    if not sol.optimal:
        raise EquilibriumInfeasibleError(f"steady-state QP status {sol.status.value}")
    u_s, y_s = sol.z_star[:m], sol.z_star[m:]
    alpha, _ = min_norm_representer(data, u_s, y_s, spec.L, spec.n)
    return EquilibriumResult(u_s, y_s, spec.cost(y_s), alpha_s=alpha)


def _setpoint_inequalities(spec: EquilibriumSpec, nz: int, u_off: int, y_off: int):
    rows, rhs = [np.zeros((0, nz))], [np.zeros(0)]
    if spec.U_s is not None:
        rows.append(spec.U_s.lifted(nz, u_off).A)
        rhs.append(spec.U_s.b)
    if spec.Y_s is not None:
        rows.append(spec.Y_s.lifted(nz, y_off).A)
        rhs.append(spec.Y_s.b)
    return np.vstack(rows), np.concatenate(rhs)


def optimal_equilibrium_robust(data: Trajectory, spec: EquilibriumSpec,
                               lambda_alpha_s: float, lambda_sigma_s: float) -> EquilibriumResult:
    """Slack-relaxed setpoint problem over ``(alpha, sigma, u_s, y_s)``."""
    if lambda_alpha_s <= 0 or lambda_sigma_s <= 0:
        raise ValueError("regularization weights must be positive")
    depth = spec.L + spec.n + 1
    Hu, Hy = _stack(data, depth)
    m, p = data.m, data.p
    na, ns = Hu.shape[1], p * depth
    ia = slice(0, na)
    isg = slice(na, na + ns)
    iu = slice(na + ns, na + ns + m)
    iy = slice(na + ns + m, na + ns + m + p)
    nz = na + ns + m + p
    H = np.zeros((nz, nz))
    f = np.zeros(nz)
    H[ia, ia] = 2 * lambda_alpha_s * np.eye(na)
    H[isg, isg] = 2 * lambda_sigma_s * np.eye(ns)
    Hys, fys, c0 = _output_cost_terms(spec)
    H[iy, iy] = Hys
    f[iy] = fys
    T = steady_lift(m, p, depth)
    A_eq = np.zeros((m * depth + ns + 1, nz))
    A_eq[:m * depth, ia] = Hu
    A_eq[:m * depth, iu] = -T[:m * depth, :m]
    A_eq[m * depth:m * depth + ns, ia] = Hy
    A_eq[m * depth:m * depth + ns, iy] = -T[m * depth:, m:]
    A_eq[m * depth:m * depth + ns, isg] = -np.eye(ns)
    A_eq[-1, ia] = 1.0
    b_eq = np.zeros(A_eq.shape[0])
    b_eq[-1] = 1.0
    if spec.u_s_fixed is not None:
        A_eq = np.vstack([A_eq, np.eye(nz)[iu]])
        b_eq = np.concatenate([b_eq, spec.u_s_fixed])
    A_in, b_in = _setpoint_inequalities(spec, nz, iu.start, iy.start)
    sol = solve_qp(QpProblem(H, f, c0, A_eq, b_eq, A_in, b_in,
                             {"alpha": ia, "sigma": isg, "u_s": iu, "y_s": iy}))
    if not sol.optimal:
        raise EquilibriumInfeasibleError(f"robust steady-state QP status {sol.status.value}")
    z = sol.z_star
    return EquilibriumResult(z[iu], z[iy], spec.cost(z[iy]), alpha_s=z[ia], sigma_s=z[isg])
