"""Identification-based baseline: affine ARX fit plus model-based tracking MPC.

The model of order ``n`` is

    y_k = sum_{i=1..n} A_i y_{k-i} + sum_{i=0..n} B_i u_{k-i} + c

and is refitted on the most recent ``N`` samples before every solve, with a
quadratic pull toward the previous estimate.  For the closed loop it is
written as an affine state-space model with state
``(y_{k-1}, ..., y_{k-n}, u_{k-1}, ..., u_{k-n})``.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .qp import QpProblem, QpStatus, solve_qp
from .sets import Polytope
from .simulate import ClosedLoopLog, ExperimentFault, ExperimentPlan, _Plant
from .systems import AffineSystem


class ArxRidgeWarning(UserWarning):
    """Regression Gram matrix was singular and a ridge term was added."""


@dataclass(frozen=True)
class ArxModel:
    A: np.ndarray          # (n, p, p), A[i-1] multiplies y_{k-i}
    B: np.ndarray          # (n+1, p, m), B[i] multiplies u_{k-i}
    c: np.ndarray          # (p,)
    residual: float        # RMS one-step residual on the fit data
    ridge: float = 0.0

    @property
    def order(self) -> int:
        return self.A.shape[0]

    @property
    def p(self) -> int:
        return self.c.size

    @property
    def m(self) -> int:
        return self.B.shape[2]

    def theta(self) -> np.ndarray:
        """Coefficients as a ``(n p + (n+1) m + 1, p)`` matrix (regressor order)."""
        blocks = [a.T for a in self.A] + [b.T for b in self.B] + [self.c[None, :]]
        return np.vstack(blocks)

    @classmethod
    def from_theta(cls, theta, n: int, m: int, p: int, residual=0.0, ridge=0.0) -> "ArxModel":
        th = np.asarray(theta, float)
        A = np.stack([th[i * p:(i + 1) * p].T for i in range(n)])
        off = n * p
        B = np.stack([th[off + i * m: off + (i + 1) * m].T for i in range(n + 1)])
        c = th[-1].copy()
        return cls(A, B, c, float(residual), float(ridge))

    def predict(self, y_past, u_window) -> np.ndarray:
        """One-step output from ``y_past = (y_{k-1},..,y_{k-n})`` and ``u_window = (u_k,..,u_{k-n})``."""
        y = self.c.copy()
        for i in range(self.order):
            y += self.A[i] @ y_past[i]
        for i in range(self.order + 1):
            y += self.B[i] @ u_window[i]
        return y

    def steady_state_rows(self) -> tuple[np.ndarray, np.ndarray]:
        """``(Gy, Gu)`` with equilibria satisfying ``Gy y - Gu u = c``."""
        return np.eye(self.p) - self.A.sum(axis=0), self.B.sum(axis=0)


def _regressors(u: np.ndarray, y: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    rows, targets = [], []
    for k in range(n, len(y)):
        phi = [y[k - i] for i in range(1, n + 1)] + [u[k - i] for i in range(n + 1)] + [[1.0]]
        rows.append(np.concatenate([np.ravel(v) for v in phi]))
        targets.append(y[k])
    return np.asarray(rows), np.asarray(targets)


def fit_arx(u, y, order: int, prior: Optional[ArxModel] = None, reg: float = 0.0,
            ridge: float = 1e-8) -> ArxModel:
    """Least-squares fit, optionally pulled toward ``prior`` with weight ``reg``.

    Solves ``min ||Y - Phi theta||^2 + reg ||theta - theta_prior||^2``.  When
    the resulting normal matrix is numerically singular a ridge of
    ``ridge * max(1, trace/dim)`` is added and :class:`ArxRidgeWarning` raised.
    """
    u = np.atleast_2d(np.asarray(u, float).T).T
    y = np.atleast_2d(np.asarray(y, float).T).T
    m, p = u.shape[1], y.shape[1]
    Phi, Y = _regressors(u, y, order)
    G = Phi.T @ Phi
    rhs = Phi.T @ Y
    d = G.shape[0]
    if prior is not None and reg > 0:
        G = G + reg * np.eye(d)
        rhs = rhs + reg * prior.theta()
    ev = np.linalg.eigvalsh(G)
    used = 0.0
    if ev[0] <= 1e-12 * max(ev[-1], 1.0):
        used = ridge * max(1.0, np.trace(G) / d)
        warnings.warn(f"ARX regression is singular (min eigenvalue {ev[0]:.2e}); "
                      f"adding ridge {used:.2e}", ArxRidgeWarning, stacklevel=2)
        G = G + used * np.eye(d)
    theta = np.linalg.solve(G, rhs)
    res = float(np.sqrt(np.mean((Y - Phi @ theta) ** 2))) if len(Y) else 0.0
    return ArxModel.from_theta(theta, order, m, p, res, used)


def arx_state_space(model: ArxModel) -> AffineSystem:
    """Affine realization with state ``(y_{k-1..k-n}, u_{k-1..k-n})``."""
    n, m, p = model.order, model.m, model.p
    nx = n * (p + m)
    A = np.zeros((nx, nx))
    B = np.zeros((nx, m))
    C = np.zeros((p, nx))
    for i in range(n):
        C[:, i * p:(i + 1) * p] = model.A[i]
        C[:, n * p + i * m: n * p + (i + 1) * m] = model.B[i + 1]
    D = model.B[0].copy()
    # new y_{k} enters the first output slot, the rest shift down
    A[:p] = C
    B[:p] = D
    for i in range(1, n):
        A[i * p:(i + 1) * p, (i - 1) * p:i * p] = np.eye(p)
    u0 = n * p
    B[u0:u0 + m] = np.eye(m)
    for i in range(1, n):
        A[u0 + i * m:u0 + (i + 1) * m, u0 + (i - 1) * m:u0 + i * m] = np.eye(m)
    e = np.zeros(nx)
    e[:p] = model.c
    return AffineSystem(A, B, C, D, e=e, r=model.c.copy())


def lifted_state(y_past, u_past) -> np.ndarray:
    """Stack ``y_{k-1..k-n}`` then ``u_{k-1..k-n}`` (most recent first)."""
    return np.concatenate([np.ravel(y_past), np.ravel(u_past)])


@dataclass(frozen=True)
class ArxMpcConfig:
    L: int
    Q: np.ndarray
    R: np.ndarray
    S: np.ndarray
    R_delta: np.ndarray
    y_ref: np.ndarray
    U: Polytope
    U_s: Polytope
    order: int = 2
    reg: float = 1.0
    n_apply: Optional[int] = None

    def __post_init__(self):
        for k in ("Q", "R", "S", "R_delta"):
            object.__setattr__(self, k, np.atleast_2d(np.asarray(getattr(self, k), float)))
        object.__setattr__(self, "y_ref", np.atleast_1d(np.asarray(self.y_ref, float)))
        if self.L < 2 * self.order:
            raise ValueError("horizon must be at least twice the model order")


def _response(sys: AffineSystem, x0: np.ndarray, steps: int) -> tuple[np.ndarray, np.ndarray]:
    """Outputs over ``steps`` samples as ``w = w0 + J v`` for stacked inputs ``v``."""
    m, p = sys.m, sys.p
    nx = x0.size
    # state map x_j = Phi_j x0 + sum Gamma v + offsets, built recursively
    X = np.zeros((nx, steps * m))
    xc = x0.copy()
    w0 = np.empty(steps * p)
    J = np.zeros((steps * p, steps * m))
    for j in range(steps):
        w0[j * p:(j + 1) * p] = sys.C @ xc + sys.r
        J[j * p:(j + 1) * p] = sys.C @ X
        J[j * p:(j + 1) * p, j * m:(j + 1) * m] += sys.D
        X = sys.A @ X
        X[:, j * m:(j + 1) * m] += sys.B
        xc = sys.A @ xc + sys.e
    return w0, J


def arx_mpc_problem(cfg: ArxMpcConfig, model: ArxModel, y_past, u_past, u_now) -> QpProblem:
    """Tracking QP over ``z = (v_0..v_L, u_s, y_s)`` with ``v_0 = u_now`` fixed.

    The last ``order`` predicted inputs and outputs are pinned to the
    artificial setpoint, which must itself be an equilibrium of the model.
    """
    n, m, p, L = model.order, model.m, model.p, cfg.L
    sys = arx_state_space(model)
    x0 = lifted_state(y_past, u_past)
    steps = L + 1
    w0, J = _response(sys, x0, steps)
    nv = steps * m
    nz = nv + m + p
    iv, ius, iys = slice(0, nv), slice(nv, nv + m), slice(nv + m, nz)
    Eu_s = np.zeros((nv, nz))
    Ey_s = np.zeros((steps * p, nz))
    for j in range(steps):
        Eu_s[j * m:(j + 1) * m, ius] = np.eye(m)
        Ey_s[j * p:(j + 1) * p, iys] = np.eye(p)
    Ev = np.zeros((nv, nz))
    Ev[:, iv] = np.eye(nv)
    Ew = np.zeros((steps * p, nz))
    Ew[:, iv] = J
    Qb = np.kron(np.eye(steps), cfg.Q)
    Rb = np.kron(np.eye(steps), cfg.R)
    Db = np.kron(np.eye(steps), cfg.R_delta)
    # increments v_j - v_{j-1}, with v_{-1} the previously applied input
    Dm = np.eye(nv) - np.eye(nv, k=-m)
    Ed = Dm @ Ev
    d0 = np.zeros(nv)
    d0[:m] = -np.ravel(u_past)[:m]
    Ou = Ev - Eu_s
    Oy = Ew - Ey_s
    H = 2 * (Ou.T @ Rb @ Ou + Oy.T @ Qb @ Oy + Ed.T @ Db @ Ed)
    Ss = np.zeros((nz, nz))
    Ss[iys, iys] = cfg.S
    H += 2 * Ss
    f = 2 * (Oy.T @ Qb @ w0 + Ed.T @ Db @ d0)
    f[iys] -= 2 * cfg.S @ cfg.y_ref
    c0 = float(w0 @ Qb @ w0 + d0 @ Db @ d0 + cfg.y_ref @ cfg.S @ cfg.y_ref)

    eq_A, eq_b = [], []
    row = np.zeros((m, nz))
    row[:, :m] = np.eye(m)
    eq_A.append(row)
    eq_b.append(np.ravel(u_now))
    for j in range(L - n + 1, steps):
        eq_A.append(Ou[j * m:(j + 1) * m])
        eq_b.append(np.zeros(m))
        eq_A.append(Oy[j * p:(j + 1) * p])
        eq_b.append(-w0[j * p:(j + 1) * p])
    Gy, Gu = model.steady_state_rows()
    row = np.zeros((p, nz))
    row[:, iys] = Gy
    row[:, ius] = -Gu
    eq_A.append(row)
    eq_b.append(model.c)
    in_A, in_b = [], []
    for j in range(1, steps):
        in_A.append(cfg.U.lifted(nz, j * m).A)
        in_b.append(cfg.U.b)
    in_A.append(cfg.U_s.lifted(nz, nv).A)
    in_b.append(cfg.U_s.b)
    H = 0.5 * (H + H.T)
    return QpProblem(H, f, c0, np.vstack(eq_A), np.concatenate(eq_b),
                     np.vstack(in_A), np.concatenate(in_b))


def run_arx_baseline(plan: ExperimentPlan, cfg: ArxMpcConfig) -> ClosedLoopLog:
    """Closed loop of the ARX baseline on an incremental-input plant.

    ``plan.plant`` takes input increments and outputs ``(y, u)``; the
    physical input and output are read back from that output.  The
    excitation phase is identical to the data-driven run, so both logs can
    be compared sample by sample.  An infeasible solve is retried with the
    previous model and then falls back to the rest of the last feasible
    input plan; each solve record carries the route taken in ``fallback``.
    """
    P = _Plant(plan.plant)
    m = cfg.R.shape[0]
    p0 = P.p - m
    n = cfg.order
    N = plan.N
    n_apply = cfg.n_apply or n
    log = ClosedLoopLog(plan)
    v_exc, lvl = plan.excitation.inputs(P.m)
    x = np.asarray(plan.x0, float).copy()
    if lvl is not None:
        x[-P.m:] = lvl

    def apply(t, dv, mpc_flag):
        nonlocal x
        y = P.out(x, dv)
        if not np.all(np.isfinite(y)):
            raise ExperimentFault(f"plant diverged at t={t}")
        for lst, v in ((log.u, dv), (log.u_meas, dv), (log.y, y), (log.y_meas, y)):
            lst.append(np.asarray(v, float).copy())
        log.t.append(t)
        log.x.append(x.copy())
        log.from_mpc.append(mpc_flag)
        x = P.step(x, dv)

    model: Optional[ArxModel] = None
    prev_z = None
    plan_tail: list = []
    n_fallback = 0
    try:
        for t in range(plan.excitation.steps):
            apply(t, v_exc[t], False)
        t = plan.excitation.steps
        while t < plan.T:
            Y = np.asarray(log.y)
            y_phys, u_phys = Y[:, :p0], Y[:, p0:]
            old = model
            model = fit_arx(u_phys[-N:], y_phys[-N:], n, prior=model, reg=cfg.reg)
            u_now = u_phys[-1] + log.u[-1]
            y_past = y_phys[-1:-n - 1:-1]
            u_past = u_phys[-1:-n - 1:-1]
            t0 = time.perf_counter()
            sol = solve_qp(arx_mpc_problem(cfg, model, y_past, u_past, u_now), warm_start=prev_z)
            used = "fit"
            if sol.status is not QpStatus.OPTIMAL and old is not None:
                sol = solve_qp(arx_mpc_problem(cfg, old, y_past, u_past, u_now))
                used = "previous_model"
                if sol.status is QpStatus.OPTIMAL:
                    model = old
            dt = time.perf_counter() - t0
            if sol.status is QpStatus.OPTIMAL:
                prev_z = sol.z_star
                v = sol.z_star[:(cfg.L + 1) * m].reshape(-1, m)
                dv = list(np.diff(v, axis=0))
                u_s = sol.z_star[(cfg.L + 1) * m:(cfg.L + 2) * m]
                y_s = sol.z_star[(cfg.L + 2) * m:]
                rec = {"cost": sol.cost, "u_s": u_s.tolist(), "y_s": y_s.tolist(),
                       "setpoint_cost": float((y_s - cfg.y_ref) @ cfg.S @ (y_s - cfg.y_ref)),
                       "active_set_size": len(sol.active_set),
                       "kkt_max": sol.kkt_residuals.max(), "iterations": sol.iterations}
            elif len(plan_tail) >= n_apply:
                # keep following the last feasible plan
                dv = plan_tail
                used = "shifted_plan"
                rec = {"cost": float("nan")}
            else:
                raise ExperimentFault(f"controller fault at t={t}: ARX MPC QP {sol.status.value}")
            if used != "fit":
                n_fallback += 1
            rec.update({"t": t, "fit_residual": model.residual, "ridge": model.ridge,
                        "fallback": used, "solve_time": dt})
            log.solves.append(rec)
            for k in range(n_apply):
                if t >= plan.T:
                    break
                apply(t, dv[k], True)
                t += 1
            plan_tail = dv[n_apply:]
    except ExperimentFault as exc:
        log.fault = str(exc)
    return log
