"""Strictly convex QP: ``min 1/2 z'Hz + f'z + c0  s.t.  A_eq z = b_eq, A_in z <= b_in``.

Equalities are eliminated with an orthonormal null-space basis; the reduced
inequality-constrained problem is solved by a primal active-set method with
Schur-complement steps.  Variables are Jacobi-scaled and constraint rows
normalized before any of this happens; certificates are reported in the
original coordinates.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import scipy.linalg as sla
from scipy.optimize import linprog

TOL_KKT = 1e-8
NONCONVEX_TOL = 1e-10
_FEAS_TOL = 1e-10


class QpStatus(str, enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    MAX_ITER = "max_iter"


class NonConvexError(ValueError):
    """Reduced Hessian is not positive definite."""


def _mat(a, cols: int) -> np.ndarray:
    if a is None:
        return np.zeros((0, cols))
    return np.asarray(a, float).reshape(-1, cols)


def _vec(a, size: int) -> np.ndarray:
    if a is None:
        return np.zeros(size)
    return np.asarray(a, float).reshape(size)


@dataclass(frozen=True)
class QpProblem:
    H: np.ndarray
    f: np.ndarray
    c0: float = 0.0
    A_eq: Optional[np.ndarray] = None
    b_eq: Optional[np.ndarray] = None
    A_in: Optional[np.ndarray] = None
    b_in: Optional[np.ndarray] = None
    variable_layout: Mapping[str, slice] = field(default_factory=dict)

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, float))
        nz = H.shape[0]
        if H.shape != (nz, nz):
            raise ValueError(f"H must be square, got {H.shape}")
        if not np.allclose(H, H.T, rtol=0, atol=1e-12 * max(1.0, np.abs(H).max())):
            raise ValueError("H is not symmetric")
        A_eq = _mat(self.A_eq, nz)
        A_in = _mat(self.A_in, nz)
        object.__setattr__(self, "H", 0.5 * (H + H.T))
        object.__setattr__(self, "f", _vec(self.f, nz))
        object.__setattr__(self, "c0", float(self.c0))
        object.__setattr__(self, "A_eq", A_eq)
        object.__setattr__(self, "b_eq", _vec(self.b_eq, A_eq.shape[0]))
        object.__setattr__(self, "A_in", A_in)
        object.__setattr__(self, "b_in", _vec(self.b_in, A_in.shape[0]))
        object.__setattr__(self, "variable_layout", dict(self.variable_layout))

    @property
    def n_vars(self) -> int:
        return self.H.shape[0]

    def objective(self, z) -> float:
        z = np.asarray(z, float)
        return float(0.5 * z @ self.H @ z + self.f @ z + self.c0)

    def scaled(self, s: float) -> "QpProblem":
        """Same constraints, objective multiplied by ``s``."""
        return QpProblem(s * self.H, s * self.f, s * self.c0, self.A_eq, self.b_eq,
                         self.A_in, self.b_in, self.variable_layout)


@dataclass(frozen=True)
class KktResiduals:
    stationarity: float
    primal_eq: float
    primal_in: float
    complementarity: float
    dual_in: float

    def max(self) -> float:
        return max(self.stationarity, self.primal_eq, self.primal_in,
                   self.complementarity, self.dual_in)


@dataclass(frozen=True)
class QpSolution:
    z_star: np.ndarray
    cost: float
    eq_multipliers: np.ndarray
    in_multipliers: np.ndarray
    status: QpStatus
    kkt_residuals: Optional[KktResiduals]
    active_set: tuple[int, ...]
    iterations: int = 0
    removed_eq_rows: tuple[int, ...] = ()

    @property
    def optimal(self) -> bool:
        return self.status is QpStatus.OPTIMAL

    def part(self, layout: Mapping[str, slice], name: str) -> np.ndarray:
        return self.z_star[layout[name]]


def kkt_residuals(p: QpProblem, z, lam, mu) -> KktResiduals:
    """Infinity-norm KKT residuals in the problem's own coordinates."""
    z = np.asarray(z, float)
    grad = p.H @ z + p.f + p.A_eq.T @ lam + p.A_in.T @ mu
    r_eq = p.A_eq @ z - p.b_eq
    slack = p.A_in @ z - p.b_in
    inf = lambda v: float(np.max(np.abs(v))) if v.size else 0.0
    return KktResiduals(
        stationarity=inf(grad),
        primal_eq=inf(r_eq),
        primal_in=float(max(0.0, slack.max())) if slack.size else 0.0,
        complementarity=inf(mu * slack),
        dual_in=float(max(0.0, -mu.min())) if mu.size else 0.0,
    )


@dataclass(frozen=True)
class ReducedQp:
    """Equality-free form in ``w``: ``z = D (z_p + Z w)``.

    ``D`` is the diagonal variable scaling, ``G w <= h`` the row-normalized
    inequalities, and ``removed_rows`` the indices of equality rows found to
    be linearly dependent on the others.
    """

    H_r: np.ndarray
    f_r: np.ndarray
    G: np.ndarray
    h: np.ndarray
    Z: np.ndarray
    z_p: np.ndarray
    D: np.ndarray
    row_scale: np.ndarray
    removed_rows: tuple[int, ...]
    eq_consistent: bool
    chol: Optional[np.ndarray] = None
    in_mask: Optional[np.ndarray] = None    # inequality rows the solver has to track

    def lift(self, w) -> np.ndarray:
        return self.D * (self.z_p + self.Z @ w)

    def project(self, z) -> np.ndarray:
        return self.Z.T @ (np.asarray(z, float) / self.D - self.z_p)


def _independent_rows(A: np.ndarray, rtol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    if A.shape[0] == 0:
        return np.zeros(0, int), np.zeros(0, int)
    _, R, piv = sla.qr(A.T, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    rank = int(np.sum(d > rtol * max(A.shape) * (d[0] if d.size else 0.0)))
    return np.sort(piv[:rank]), np.sort(piv[rank:])


def _eq_nullspace(Aeq, beq, keep, nz):
    if keep.size:
        Ak = Aeq[keep]
        Q, _ = sla.qr(Ak.T, mode="full")
        r = keep.size
        Y, Z = Q[:, :r], Q[:, r:]
        z_p = Y @ np.linalg.solve(Ak @ Y, beq[keep])
    else:
        Z = np.eye(nz)
        z_p = np.zeros(nz)
    consistent = True
    if Aeq.shape[0]:
        scale = max(1.0, float(np.abs(beq).max()))
        consistent = bool(np.max(np.abs(Aeq @ z_p - beq)) <= 1e-9 * scale)
    return Z, z_p, consistent


def assemble_reduced(p: QpProblem) -> ReducedQp:
    """Scale, drop redundant equalities and move to the equality null space.

    Raises :class:`NonConvexError` unless the reduced Hessian is positive
    definite.
    """
    nz = p.n_vars
    diag = np.diag(p.H).copy()
    D = np.where(diag > 0, 1.0 / np.sqrt(np.where(diag > 0, diag, 1.0)), 1.0)
    Hs = p.H * D[:, None] * D[None, :]
    fs = p.f * D

    Aeq = p.A_eq * D[None, :]
    beq = p.b_eq.copy()
    nrm = np.linalg.norm(Aeq, axis=1)
    nrm[nrm == 0] = 1.0
    Aeq /= nrm[:, None]
    beq /= nrm
    # A row only counts as redundant if the remaining rows still reproduce
    # it.  Ill-conditioned but independent rows (small singular values in a
    # weakly excited Hankel block) fail that test and are kept by retrying at
    # the machine-precision rank cutoff.
    for rtol in (1e-10, np.finfo(float).eps):
        keep, drop = _independent_rows(Aeq, rtol)
        Z, z_p, consistent = _eq_nullspace(Aeq, beq, keep, nz)
        if consistent or drop.size == 0:
            break

    H_r = Z.T @ Hs @ Z
    H_r = 0.5 * (H_r + H_r.T)
    f_r = Z.T @ (Hs @ z_p + fs)

    G = p.A_in * D[None, :]
    h = p.b_in.copy()
    rs = np.linalg.norm(G, axis=1)
    rs[rs == 0] = 1.0
    G /= rs[:, None]
    h /= rs
    G_r = G @ Z
    h_r = h - G @ z_p
    # renormalize in the reduced space; rows that vanish there are constant
    # over the equality set and rows that coincide are duplicates of another
    rn = np.linalg.norm(G_r, axis=1)
    live = rn > 1e-12
    if np.any(h_r[~live] < -1e-9 * max(1.0, float(np.abs(h).max(initial=0.0)))):
        consistent = False
    rn[~live] = 1.0
    G_r = G_r / rn[:, None]
    h_r = h_r / rn
    rs = rs * rn
    keep_in = live.copy()
    idx = np.flatnonzero(live)
    if idx.size > 1:
        Gl = G_r[idx]
        close = np.abs(Gl @ Gl.T - 1.0) < 1e-12
        for a in range(idx.size):
            if not keep_in[idx[a]]:
                continue
            for b in np.flatnonzero(close[a, a + 1:]) + a + 1:
                if not keep_in[idx[b]]:
                    continue
                # keep the tighter of two parallel rows, lowest index on ties
                if h_r[idx[b]] < h_r[idx[a]] - 1e-14:
                    keep_in[idx[a]] = False
                    break
                keep_in[idx[b]] = False

    chol = None
    if Z.shape[1]:
        try:
            chol = sla.cholesky(H_r, lower=True)
        except np.linalg.LinAlgError:
            ev = float(np.linalg.eigvalsh(H_r).min())
            if ev < -NONCONVEX_TOL:
                raise NonConvexError(f"reduced Hessian has eigenvalue {ev:.3e}") from None
            raise NonConvexError(
                f"reduced Hessian is singular (min eigenvalue {ev:.3e}); problem is not strictly convex"
            ) from None
        if np.min(np.diag(chol)) ** 2 <= 1e-14 * np.max(np.diag(H_r)):
            ev = float(np.linalg.eigvalsh(H_r).min())
            if ev <= 1e-14 * np.max(np.diag(H_r)):
                raise NonConvexError(
                    f"reduced Hessian is numerically singular (min eigenvalue {ev:.3e})")
    return ReducedQp(H_r, f_r, G_r, h_r, Z, z_p, D, rs, tuple(int(i) for i in drop),
                     consistent, chol, keep_in)


class ActiveSetSolver:
    """Single-use primal active-set solver on a :class:`ReducedQp`."""

    def __init__(self, red: ReducedQp, max_iter: Optional[int] = None, tol: float = 1e-12):
        self.red = red
        m_in = red.G.shape[0]
        self.mask = red.in_mask if red.in_mask is not None else np.ones(m_in, bool)
        self.max_iter = max_iter if max_iter is not None else max(50 * m_in, 50)
        self.tol = tol
        self.iterations = 0
        if red.chol is not None and red.chol.shape[0]:
            self._Hinv_Gt = sla.cho_solve((red.chol, True), red.G.T)
        else:
            self._Hinv_Gt = np.zeros((0, m_in))
        self._M = red.G @ self._Hinv_Gt

    def _hsolve(self, v):
        return sla.cho_solve((self.red.chol, True), v)

    def _feasible(self, w) -> bool:
        if not self.mask.any():
            return True
        G, h = self.red.G[self.mask], self.red.h[self.mask]
        return bool(np.max(G @ w - h) <= _FEAS_TOL * max(1.0, np.abs(h).max()))

    def _phase1(self) -> Optional[np.ndarray]:
        G, h = self.red.G[self.mask], self.red.h[self.mask]
        nw = G.shape[1]
        c = np.zeros(nw + 1)
        c[-1] = 1.0
        A = np.hstack([G, -np.ones((G.shape[0], 1))])
        bounds = [(None, None)] * nw + [(0.0, None)]
        res = linprog(c, A_ub=A, b_ub=h, bounds=bounds, method="highs")
        if res.status != 0 or res.x[-1] > 1e-9 * max(1.0, np.abs(h).max()):
            return None
        return res.x[:nw]

    def _initial_working_set(self, w) -> list[int]:
        G, h = self.red.G, self.red.h
        if G.shape[0] == 0:
            return []
        act = np.flatnonzero(self.mask & (G @ w - h >= -1e-9 * max(1.0, np.abs(h).max())))
        W: list[int] = []
        for i in act:
            trial = W + [int(i)]
            if np.linalg.matrix_rank(self._M[np.ix_(trial, trial)], tol=1e-10) == len(trial):
                W = trial
            if len(W) >= G.shape[1]:
                break
        return W

    def solve(self, w_warm: Optional[np.ndarray] = None):
        red = self.red
        nw = red.Z.shape[1]
        m_in = red.G.shape[0]
        if nw == 0:
            w = np.zeros(0)
            ok = self._feasible(w)
            return (w, np.zeros(m_in), QpStatus.OPTIMAL if ok else QpStatus.INFEASIBLE, ())
        w_free = -self._hsolve(red.f_r)
        if self._feasible(w_free):
            return w_free, np.zeros(m_in), QpStatus.OPTIMAL, ()
        w = None
        if w_warm is not None and self._feasible(w_warm):
            w = np.asarray(w_warm, float).copy()
        if w is None:
            w = self._phase1()
            if w is None:
                return np.full(nw, np.nan), np.zeros(m_in), QpStatus.INFEASIBLE, ()
        W = self._initial_working_set(w)
        G, h = red.G, red.h
        mu = np.zeros(m_in)
        at_min = False
        for it in range(self.max_iter):
            self.iterations = it + 1
            g = red.H_r @ w + red.f_r
            Hg = self._hsolve(g)
            if W:
                Mw = self._M[np.ix_(W, W)]
                try:
                    lam = np.linalg.solve(Mw, -(G[W] @ Hg))
                except np.linalg.LinAlgError:
                    lam = np.linalg.lstsq(Mw, -(G[W] @ Hg), rcond=None)[0]
                step = -(Hg + self._Hinv_Gt[:, W] @ lam)
            else:
                lam = np.zeros(0)
                step = -Hg
            if at_min or np.linalg.norm(step, np.inf) <= self.tol * max(1.0, np.linalg.norm(w, np.inf)):
                at_min = False
                if lam.size == 0 or lam.min() >= -1e-12 * max(1.0, np.abs(lam).max()):
                    mu[:] = 0.0
                    mu[W] = np.maximum(lam, 0.0)
                    return w, mu, QpStatus.OPTIMAL, tuple(sorted(W))
                j = int(np.argmin(lam))  # argmin returns the lowest index on ties
                W.pop(j)
                continue
            Gp = G @ step
            t_best = 1.0
            block = -1
            inW = np.zeros(m_in, bool)
            inW[W] = True
            cand = np.flatnonzero(self.mask & (~inW)
                                  & (Gp > 1e-11 * np.linalg.norm(step, np.inf)))
            if cand.size:
                ratios = (h[cand] - G[cand] @ w) / Gp[cand]
                ratios = np.maximum(ratios, 0.0)
                k = int(np.argmin(ratios))
                if ratios[k] < t_best:
                    t_best = float(ratios[k])
                    block = int(cand[k])
            w = w + t_best * step
            if block >= 0:
                W.append(block)
            else:
                # full step: w now minimizes over the current working set
                at_min = True
        mu[:] = 0.0
        return w, mu, QpStatus.MAX_ITER, tuple(sorted(W))


def _recover_multipliers(p: QpProblem, red: ReducedQp, z, mu_scaled):
    # inequality rows were scaled as (A_in D)/rs, so mu_orig = mu_scaled / rs
    mu = mu_scaled / red.row_scale
    residual = -(p.H @ z + p.f + p.A_in.T @ mu)
    if p.A_eq.shape[0]:
        lam, *_ = np.linalg.lstsq(p.A_eq.T, residual, rcond=None)
    else:
        lam = np.zeros(0)
    return lam, mu


def solve_qp(p: QpProblem, warm_start: Optional[np.ndarray] = None,
             max_iter: Optional[int] = None, polish: bool = True) -> QpSolution:
    """Solve ``p``; infeasibility and iteration caps are reported via ``status``."""
    red = assemble_reduced(p)
    nz = p.n_vars
    if not red.eq_consistent:
        return QpSolution(np.full(nz, np.nan), np.nan, np.zeros(p.A_eq.shape[0]),
                          np.zeros(p.A_in.shape[0]), QpStatus.INFEASIBLE, None, (),
                          0, red.removed_rows)
    solver = ActiveSetSolver(red, max_iter=max_iter)
    w_warm = red.project(warm_start) if warm_start is not None else None
    w, mu_s, status, active = solver.solve(w_warm)
    if status is QpStatus.INFEASIBLE:
        return QpSolution(np.full(nz, np.nan), np.nan, np.zeros(p.A_eq.shape[0]),
                          np.zeros(p.A_in.shape[0]), status, None, (),
                          solver.iterations, red.removed_rows)
    z = red.lift(w)
    lam, mu = _recover_multipliers(p, red, z, mu_s)
    res = kkt_residuals(p, z, lam, mu)
    if polish and status is QpStatus.OPTIMAL and res.max() > TOL_KKT:
        z, lam, mu = _polish(p, z, active, lam, mu)
        res = kkt_residuals(p, z, lam, mu)
    return QpSolution(z, p.objective(z), lam, mu, status, res, active,
                      solver.iterations, red.removed_rows)


def _polish(p: QpProblem, z, active, lam, mu):
    """Refine on the final active set; keep whichever candidate certifies best.

    Two candidates: Newton refinement on the full KKT system, and a
    minimum-``H``-norm correction onto the active constraints followed by a
    least-squares multiplier fit.  The second copes better with nearly
    dependent equality rows, where the KKT matrix is close to singular.
    """
    act = list(active)
    A = np.vstack([p.A_eq, p.A_in[act]]) if act else p.A_eq
    b = np.concatenate([p.b_eq, p.b_in[act]]) if act else p.b_eq
    nz, n_eq = p.n_vars, p.A_eq.shape[0]

    def unpack(y):
        mu_new = np.zeros_like(mu)
        if act:
            mu_new[act] = y[n_eq:]
        return y[:n_eq], mu_new

    best = (kkt_residuals(p, z, lam, mu).max(), z, lam, mu)

    K = np.block([[p.H, A.T], [A, np.zeros((A.shape[0], A.shape[0]))]])
    y = np.concatenate([z, lam, mu[act]])
    rhs = np.concatenate([-p.f, b])
    for _ in range(2):
        dy, *_ = np.linalg.lstsq(K, rhs - K @ y, rcond=None)
        y = y + dy
    cand = (y[:nz], *unpack(y[nz:]))
    best = min(best, (kkt_residuals(p, *cand).max(), *cand), key=lambda t: t[0])

    if A.shape[0]:
        try:
            chol = sla.cho_factor(p.H)
        except np.linalg.LinAlgError:
            chol = None
        if chol is not None:
            HiAt = sla.cho_solve(chol, A.T)
            zc = z - HiAt @ np.linalg.lstsq(A @ HiAt, A @ z - b, rcond=None)[0]
            yc, *_ = np.linalg.lstsq(A.T, -(p.H @ zc + p.f), rcond=None)
            cand = (zc, *unpack(yc))
            best = min(best, (kkt_residuals(p, *cand).max(), *cand), key=lambda t: t[0])
    return best[1:]


# --- debug dump ------------------------------------------------------------

_DUMP_FIELDS = ("H", "f", "A_eq", "b_eq", "A_in", "b_in")


def dump_qp(p: QpProblem, path) -> None:
    """Plain-text dump: per matrix a ``name rows cols`` line then row-major values."""
    with open(path, "w") as fh:
        fh.write(f"# qp n_vars={p.n_vars} c0={p.c0!r}\n")
        for name in _DUMP_FIELDS:
            M = np.atleast_2d(getattr(p, name))
            if name in ("f", "b_eq", "b_in"):
                M = M.reshape(-1, 1)
            fh.write(f"{name} {M.shape[0]} {M.shape[1]}\n")
            for row in M:
                fh.write(" ".join(format(v, ".17g") for v in row) + "\n")


def load_qp(path) -> QpProblem:
    lines = Path(path).read_text().splitlines()
    c0 = float(lines[0].split("c0=")[1])
    out = {}
    i = 1
    while i < len(lines):
        name, r, c = lines[i].split()
        r, c = int(r), int(c)
        rows = [np.array(lines[i + 1 + k].split(), float) for k in range(r)]
        out[name] = np.array(rows).reshape(r, c)
        i += 1 + r
    return QpProblem(out["H"], out["f"].ravel(), c0, out["A_eq"], out["b_eq"].ravel(),
                     out["A_in"], out["b_in"].ravel())
