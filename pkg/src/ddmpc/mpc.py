"""Data-driven tracking MPC with artificial setpoints.

All problem variants share one assembler.  The decision vector is
``z = (alpha, sigma?, u_s, y_s)``; predictions are affine images of it,

    u_bar = H_u alpha,    y_bar = H_y alpha - sigma - sigma_dyn,

indexed by ``k = -n..L`` (row block ``j = k + n``).  Window length
``N`` gives ``N - L - n`` columns in the depth-``L+n+1`` Hankel matrices.
"""
from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .qp import QpProblem, QpSolution, QpStatus, solve_qp
from .sets import Polytope
from .steady import EquilibriumSpec, optimal_equilibrium_data, optimal_equilibrium_robust
from .trajdata import DimensionError, Trajectory, hankel, split_extended_state

EPS_FLOOR = 1e-12


class AnchorPolicy(str, enum.Enum):
    EQUILIBRIUM = "equilibrium"
    ROBUST_EQUILIBRIUM = "robust_equilibrium"
    PREVIOUS_ALPHA = "previous_alpha"
    ZERO = "zero"


class ControllerKind(str, enum.Enum):
    ONLINE = "online"
    ROBUST = "robust"
    NOMINAL = "nominal"


class MpcInfeasibleError(RuntimeError):
    """The MPC QP has no feasible point (or the solver gave up)."""

    def __init__(self, message: str, solution: Optional[QpSolution] = None):
        super().__init__(message)
        self.solution = solution


def _psd(M, name: str, strict: bool) -> np.ndarray:
    M = np.atleast_2d(np.asarray(M, float))
    if M.shape[0] != M.shape[1] or not np.allclose(M, M.T):
        raise ValueError(f"{name} must be a symmetric square matrix")
    ev = np.linalg.eigvalsh(M).min()
    if (strict and ev <= 0) or ev < -1e-12:
        kind = "positive definite" if strict else "positive semidefinite"
        raise ValueError(f"{name} must be {kind} (min eigenvalue {ev:.3g})")
    return M


@dataclass(frozen=True)
class MpcConfig:
    """Controller tuning.

    ``S`` only needs to be positive semidefinite: when inputs are carried as
    extra outputs the setpoint weight acts on the physical outputs only.
    ``u_s_fixed`` pins the input setpoint (zero for increments), and
    ``output_constraints``/``Y_s`` constrain predicted outputs for
    ``k = 0..L`` and the output setpoint.
    """

    L: int
    n: int
    Q: np.ndarray
    R: np.ndarray
    S: np.ndarray
    lambda_alpha: float
    lambda_sigma: float
    y_ref: np.ndarray
    U: Optional[Polytope] = None
    U_s: Optional[Polytope] = None
    anchor_policy: AnchorPolicy = AnchorPolicy.PREVIOUS_ALPHA
    beta_alpha: float = 0.0
    beta_sigma: float = 0.0
    eps_bar: float = 0.0
    output_constraints: Optional[Polytope] = None
    Y_s: Optional[Polytope] = None
    u_s_fixed: Optional[np.ndarray] = None
    lambda_alpha_s: Optional[float] = None
    lambda_sigma_s: Optional[float] = None

    def __post_init__(self):
        if self.n < 1 or self.L < 2 * self.n:
            raise ValueError(f"horizon L={self.L} must satisfy L >= 2n (n={self.n})")
        object.__setattr__(self, "Q", _psd(self.Q, "Q", True))
        object.__setattr__(self, "R", _psd(self.R, "R", True))
        object.__setattr__(self, "S", _psd(self.S, "S", False))
        if self.S.shape != self.Q.shape:
            raise DimensionError("S and Q must have the same size")
        if self.lambda_alpha <= 0 or self.lambda_sigma <= 0:
            raise ValueError("lambda_alpha and lambda_sigma must be positive")
        if self.beta_alpha < 0 or self.beta_sigma < 0:
            raise ValueError("noise-scaling exponents must be nonnegative")
        if (self.beta_alpha or self.beta_sigma) and self.beta_alpha + 2 * self.beta_sigma >= 2:
            raise ValueError("noise scaling requires beta_alpha + 2 beta_sigma < 2")
        if self.eps_bar < 0:
            raise ValueError("eps_bar must be nonnegative")
        object.__setattr__(self, "y_ref", np.asarray(self.y_ref, float).reshape(self.p))
        object.__setattr__(self, "anchor_policy", AnchorPolicy(self.anchor_policy))
        if self.u_s_fixed is not None:
            object.__setattr__(self, "u_s_fixed",
                               np.atleast_1d(np.asarray(self.u_s_fixed, float)).reshape(self.m))

    @property
    def m(self) -> int:
        return self.R.shape[0]

    @property
    def p(self) -> int:
        return self.Q.shape[0]

    @property
    def depth(self) -> int:
        return self.L + self.n + 1

    def scaled_lambdas(self, eps_bar: Optional[float] = None) -> tuple[float, float]:
        """``(lambda_alpha eps^beta_alpha, lambda_sigma / eps^beta_sigma)`` with a floor on eps."""
        eps = max(self.eps_bar if eps_bar is None else eps_bar, EPS_FLOOR)
        la = self.lambda_alpha * (eps ** self.beta_alpha if self.beta_alpha else 1.0)
        ls = self.lambda_sigma / (eps ** self.beta_sigma if self.beta_sigma else 1.0)
        return la, ls

    def equilibrium_spec(self) -> EquilibriumSpec:
        return EquilibriumSpec(self.S, self.y_ref, self.U_s, self.L, self.n,
                               Y_s=self.Y_s, u_s_fixed=self.u_s_fixed)

    def with_(self, **kw) -> "MpcConfig":
        return replace(self, **kw)


@dataclass(frozen=True)
class MpcProblem:
    """An assembled MPC QP together with what is needed to decode it."""

    qp: QpProblem
    config: MpcConfig
    Hu: np.ndarray
    Hy: np.ndarray
    sigma_dyn: np.ndarray
    anchor: np.ndarray
    lambda_alpha: float
    lambda_sigma: Optional[float]
    init: np.ndarray

    @property
    def layout(self) -> dict:
        return self.qp.variable_layout


@dataclass(frozen=True)
class MpcSolution:
    u_bar: np.ndarray
    y_bar: np.ndarray
    alpha: np.ndarray
    sigma: np.ndarray
    u_s: np.ndarray
    y_s: np.ndarray
    cost: float
    tracking_cost: float
    setpoint_cost: float
    alpha_cost: float
    sigma_cost: float
    qp: QpSolution
    solve_time: float = 0.0

    @property
    def z(self) -> np.ndarray:
        return self.qp.z_star

    def first_inputs(self, n: int) -> np.ndarray:
        """``u_bar_{[0, n-1]}``; rows ``k = 0..n-1`` follow the ``n`` initial ones."""
        return self.u_bar[n:2 * n].copy()


def _as_xi(xi, n: int, m: int, p: int) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(xi, tuple):
        u, y = (np.asarray(a, float).reshape(n, -1) for a in xi)
        if u.shape[1] != m or y.shape[1] != p:
            raise DimensionError("initial condition has wrong channel dimensions")
        return u, y
    return split_extended_state(xi, n, m, p)


def _assemble(cfg: MpcConfig, Hu: np.ndarray, Hy: np.ndarray, u_init: np.ndarray,
              y_init: np.ndarray, anchor, lam_a: float, lam_s: Optional[float],
              sigma_dyn: Optional[np.ndarray] = None) -> MpcProblem:
    m, p, n, D = cfg.m, cfg.p, cfg.n, cfg.depth
    if Hu.shape[0] != m * D or Hy.shape[0] != p * D:
        raise DimensionError("Hankel blocks do not match the configured horizon")
    na = Hu.shape[1]
    if na < 1:
        raise DimensionError("window too short for the horizon")
    ns = p * D if lam_s is not None else 0
    ia = slice(0, na)
    isg = slice(na, na + ns)
    iu = slice(na + ns, na + ns + m)
    iy = slice(na + ns + m, na + ns + m + p)
    nz = iy.stop
    layout = {"alpha": ia, "sigma": isg, "u_s": iu, "y_s": iy}
    sd = np.zeros(p * D) if sigma_dyn is None else np.asarray(sigma_dyn, float).reshape(p * D)
    anchor = np.zeros(na) if anchor is None else np.asarray(anchor, float).reshape(na)

    Tu = np.kron(np.ones((D, 1)), np.eye(m))
    Ty = np.kron(np.ones((D, 1)), np.eye(p))
    # u_bar = Pu z, y_bar = Py z - sd
    Pu = np.zeros((m * D, nz))
    Pu[:, ia] = Hu
    Py = np.zeros((p * D, nz))
    Py[:, ia] = Hy
    if ns:
        Py[:, isg] = -np.eye(ns)
    Eu = Pu.copy()
    Eu[:, iu] = -Tu
    Ey = Py.copy()
    Ey[:, iy] = -Ty
    Rb = np.kron(np.eye(D), cfg.R)
    Qb = np.kron(np.eye(D), cfg.Q)

    H = 2.0 * (Eu.T @ Rb @ Eu + Ey.T @ Qb @ Ey)
    f = -2.0 * Ey.T @ (Qb @ sd)
    c0 = float(sd @ Qb @ sd)
    H[iy, iy] += 2.0 * cfg.S
    f[iy] += -2.0 * cfg.S @ cfg.y_ref
    c0 += float(cfg.y_ref @ cfg.S @ cfg.y_ref)
    H[ia, ia] += 2.0 * lam_a * np.eye(na)
    f[ia] += -2.0 * lam_a * anchor
    c0 += lam_a * float(anchor @ anchor)
    if ns:
        H[isg, isg] += 2.0 * lam_s * np.eye(ns)

    eq_rows, eq_rhs = [], []
    # initial condition: steps k = -n..-1
    eq_rows.append(Pu[:n * m])
    eq_rhs.append(u_init.ravel())
    eq_rows.append(Py[:n * p])
    eq_rhs.append(y_init.ravel() + sd[:n * p])
    # terminal window: steps k = L-n..L, i.e. rows j = L..L+n
    Au = Eu[L_rows(cfg.L, n, m)]
    Ay = Ey[L_rows(cfg.L, n, p)]
    eq_rows += [Au, Ay]
    eq_rhs += [np.zeros(Au.shape[0]), sd[L_rows(cfg.L, n, p)]]
    ones = np.zeros((1, nz))
    ones[0, ia] = 1.0
    eq_rows.append(ones)
    eq_rhs.append(np.ones(1))
    if cfg.u_s_fixed is not None:
        eq_rows.append(np.eye(nz)[iu])
        eq_rhs.append(cfg.u_s_fixed)

    in_rows, in_rhs = [np.zeros((0, nz))], [np.zeros(0)]
    if cfg.U is not None:
        for j in range(n, D):
            in_rows.append(cfg.U.A @ Pu[j * m:(j + 1) * m])
            in_rhs.append(cfg.U.b)
    if cfg.output_constraints is not None:
        Y = cfg.output_constraints
        for j in range(n, D):
            in_rows.append(Y.A @ Py[j * p:(j + 1) * p])
            in_rhs.append(Y.b + Y.A @ sd[j * p:(j + 1) * p])
    if cfg.U_s is not None:
        in_rows.append(cfg.U_s.lifted(nz, iu.start).A)
        in_rhs.append(cfg.U_s.b)
    if cfg.Y_s is not None:
        in_rows.append(cfg.Y_s.lifted(nz, iy.start).A)
        in_rhs.append(cfg.Y_s.b)

    qp = QpProblem(H, f, c0, np.vstack(eq_rows), np.concatenate(eq_rhs),
                   np.vstack(in_rows), np.concatenate(in_rhs), layout)
    init = np.concatenate([u_init.ravel(), y_init.ravel()])
    return MpcProblem(qp, cfg, Hu, Hy, sd, anchor, lam_a, lam_s, init)


def L_rows(L: int, n: int, q: int) -> slice:
    """Stacked rows of steps ``k = L-n..L`` for a ``q``-dimensional signal."""
    return slice(L * q, (L + n + 1) * q)


def _hankels(cfg: MpcConfig, data: Trajectory) -> tuple[np.ndarray, np.ndarray]:
    if data.m != cfg.m or data.p != cfg.p:
        raise DimensionError(f"data has (m, p) = ({data.m}, {data.p}), config expects "
                             f"({cfg.m}, {cfg.p})")
    return hankel(data.inputs, cfg.depth), hankel(data.outputs, cfg.depth)


def build_online_problem(cfg: MpcConfig, window: Trajectory, xi_t, alpha_anchor) -> MpcProblem:
    """Slack-relaxed problem on the most recent ``N`` measurements."""
    Hu, Hy = _hankels(cfg, window)
    u0, y0 = _as_xi(xi_t, cfg.n, cfg.m, cfg.p)
    return _assemble(cfg, Hu, Hy, u0, y0, alpha_anchor, cfg.lambda_alpha, cfg.lambda_sigma)


def build_linearized_problem(cfg: MpcConfig, window_linearized: Trajectory, xi_prime,
                             alpha_anchor, sigma_tilde=None) -> MpcProblem:
    """Slack-free problem with a fixed perturbation ``sigma_tilde = (init, dyn)``.

    ``sigma_tilde`` has ``n(m+p)`` initial-condition entries followed by
    ``p(L+n+1)`` output entries; ``None`` means zero.
    """
    Hu, Hy = _hankels(cfg, window_linearized)
    u0, y0 = _as_xi(xi_prime, cfg.n, cfg.m, cfg.p)
    n_init = cfg.n * (cfg.m + cfg.p)
    if sigma_tilde is not None:
        st = np.asarray(sigma_tilde, float).ravel()
        if st.size != n_init + cfg.p * cfg.depth:
            raise DimensionError(f"sigma_tilde must have {n_init + cfg.p * cfg.depth} entries")
        du, dy = split_extended_state(st[:n_init], cfg.n, cfg.m, cfg.p)
        u0, y0 = u0 + du, y0 + dy
        sd = st[n_init:]
    else:
        sd = None
    return _assemble(cfg, Hu, Hy, u0, y0, alpha_anchor, cfg.lambda_alpha, None, sd)


def build_robust_problem(cfg: MpcConfig, fixed_data: Trajectory, xi_t_noisy, alpha_anchor,
                         eps_bar: Optional[float] = None) -> MpcProblem:
    """Offline-data problem with noise-scaled regularization weights."""
    Hu, Hy = _hankels(cfg, fixed_data)
    u0, y0 = _as_xi(xi_t_noisy, cfg.n, cfg.m, cfg.p)
    la, ls = cfg.scaled_lambdas(eps_bar)
    return _assemble(cfg, Hu, Hy, u0, y0, alpha_anchor, la, ls)


def build_nominal_problem(cfg: MpcConfig, data: Trajectory, xi_t, alpha_anchor,
                          eps_bar: Optional[float] = None) -> MpcProblem:
    """Nominal counterpart of :func:`build_robust_problem` (no slack)."""
    Hu, Hy = _hankels(cfg, data)
    u0, y0 = _as_xi(xi_t, cfg.n, cfg.m, cfg.p)
    la, _ = cfg.scaled_lambdas(eps_bar)
    return _assemble(cfg, Hu, Hy, u0, y0, alpha_anchor, la, None)


def solve_mpc(problem: MpcProblem, warm_start: Optional[np.ndarray] = None) -> MpcSolution:
    """Solve and decode; raises :class:`MpcInfeasibleError` unless optimal."""
    t0 = time.perf_counter()
    sol = solve_qp(problem.qp, warm_start=warm_start)
    elapsed = time.perf_counter() - t0
    if sol.status is not QpStatus.OPTIMAL:
        raise MpcInfeasibleError(f"MPC QP status: {sol.status.value}", sol)
    return decode(problem, sol, elapsed)


def decode(problem: MpcProblem, sol: QpSolution, solve_time: float = 0.0) -> MpcSolution:
    cfg = problem.config
    lay = problem.layout
    z = sol.z_star
    alpha = z[lay["alpha"]]
    sigma = z[lay["sigma"]]
    u_s = z[lay["u_s"]]
    y_s = z[lay["y_s"]]
    D = cfg.depth
    u_bar = (problem.Hu @ alpha).reshape(D, cfg.m)
    y_vec = problem.Hy @ alpha - problem.sigma_dyn
    if sigma.size:
        y_vec = y_vec - sigma
    y_bar = y_vec.reshape(D, cfg.p)
    du = u_bar - u_s
    dy = y_bar - y_s
    tracking = float(np.einsum("ki,ij,kj->", du, cfg.R, du) + np.einsum("ki,ij,kj->", dy, cfg.Q, dy))
    ds = y_s - cfg.y_ref
    setpoint = float(ds @ cfg.S @ ds)
    da = alpha - problem.anchor
    a_cost = problem.lambda_alpha * float(da @ da)
    s_cost = (problem.lambda_sigma or 0.0) * float(sigma @ sigma)
    return MpcSolution(u_bar, y_bar, alpha, sigma, u_s, y_s, sol.cost, tracking, setpoint,
                       a_cost, s_cost, sol, solve_time)


@dataclass
class DataDrivenController:
    """Stateful n-step controller (rolling window or fixed data).

    For ``ROBUST`` and ``NOMINAL`` the prediction data are fixed at
    construction and the anchor is computed once; for ``ONLINE`` the
    caller passes the current window at every step.
    """

    config: MpcConfig
    kind: ControllerKind = ControllerKind.ONLINE
    fixed_data: Optional[Trajectory] = None
    alpha_anchor: Optional[np.ndarray] = None
    warm_start: bool = True
    _prev_alpha: Optional[np.ndarray] = field(default=None, repr=False)
    _prev_z: Optional[np.ndarray] = field(default=None, repr=False)
    anchor_history: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.kind = ControllerKind(self.kind)
        if self.kind is not ControllerKind.ONLINE:
            if self.fixed_data is None:
                raise ValueError(f"{self.kind.value} controller needs fixed offline data")
            if self.alpha_anchor is None:
                self.alpha_anchor = self._anchor_for(self.fixed_data, first=True)

    def _anchor_for(self, data: Trajectory, first: bool) -> np.ndarray:
        cfg = self.config
        na = data.length - cfg.L - cfg.n
        policy = cfg.anchor_policy
        if policy is AnchorPolicy.ZERO:
            return np.zeros(na)
        if policy is AnchorPolicy.PREVIOUS_ALPHA and not first and self._prev_alpha is not None:
            return self._prev_alpha
        if policy is AnchorPolicy.EQUILIBRIUM:
            return optimal_equilibrium_data(data, cfg.equilibrium_spec()).alpha_s
        la = cfg.lambda_alpha_s if cfg.lambda_alpha_s is not None else cfg.lambda_alpha
        ls = cfg.lambda_sigma_s if cfg.lambda_sigma_s is not None else cfg.lambda_sigma
        return optimal_equilibrium_robust(data, cfg.equilibrium_spec(), la, ls).alpha_s

    def build(self, xi_t, window: Optional[Trajectory] = None) -> MpcProblem:
        cfg = self.config
        if self.kind is ControllerKind.ONLINE:
            if window is None:
                raise ValueError("nonlinear controller needs the current data window")
            anchor = self._anchor_for(window, first=self._prev_alpha is None)
            prob = build_online_problem(cfg, window, xi_t, anchor)
        elif self.kind is ControllerKind.ROBUST:
            prob = build_robust_problem(cfg, self.fixed_data, xi_t, self.alpha_anchor)
        else:
            prob = build_nominal_problem(cfg, self.fixed_data, xi_t, self.alpha_anchor)
        return prob

    def step(self, xi_t, window: Optional[Trajectory] = None) -> tuple[np.ndarray, MpcSolution]:
        """Solve once and return the next ``n`` inputs with the solution."""
        prob = self.build(xi_t, window)
        self.anchor_history.append(float(np.linalg.norm(prob.anchor)))
        warm = self._prev_z if (self.warm_start and self._prev_z is not None
                                and self._prev_z.size == prob.qp.n_vars) else None
        sol = solve_mpc(prob, warm)
        self._prev_alpha = sol.alpha.copy()
        self._prev_z = sol.z.copy()
        return sol.first_inputs(self.config.n), sol


def controller_step(controller: DataDrivenController, xi_t,
                    window: Optional[Trajectory] = None) -> tuple[np.ndarray, MpcSolution]:
    return controller.step(xi_t, window)


def incremental_config(L: int, n: int, Q, R, S, R_delta, lambda_alpha: float,
                       lambda_sigma: float, y_ref, U: Polytope, U_s: Polytope,
                       **kw) -> MpcConfig:
    """Config for a plant whose input is carried as extra output ``(y, u)`` driven by ``du``.

    Output weight becomes ``diag(Q, R)``, the increment weight ``R_delta``
    plays the role of ``R``, the setpoint weight acts on ``y`` only, the
    increment setpoint is pinned to zero, and ``U``/``U_s`` become
    constraints on the input block of the predicted outputs.
    """
    Q = np.atleast_2d(np.asarray(Q, float))
    R = np.atleast_2d(np.asarray(R, float))
    S = np.atleast_2d(np.asarray(S, float))
    Rd = np.atleast_2d(np.asarray(R_delta, float))
    p0, m = Q.shape[0], R.shape[0]
    Qh = np.block([[Q, np.zeros((p0, m))], [np.zeros((m, p0)), R]])
    Sh = np.block([[S, np.zeros((p0, m))], [np.zeros((m, p0)), np.zeros((m, m))]])
    y_ref = np.concatenate([np.asarray(y_ref, float).ravel(), np.zeros(m)])
    return MpcConfig(L=L, n=n, Q=Qh, R=Rd, S=Sh, lambda_alpha=lambda_alpha,
                     lambda_sigma=lambda_sigma, y_ref=y_ref, U=None, U_s=None,
                     output_constraints=U.lifted(p0 + m, p0), Y_s=U_s.lifted(p0 + m, p0),
                     u_s_fixed=np.zeros(m), **kw)
