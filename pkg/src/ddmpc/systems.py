"""Plant models: affine systems, control-affine nonlinear plants, linearization.

Nonlinear plants follow ``x+ = f0(x) + B u``, ``y = h0(x) + D u``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .trajdata import DimensionError, Trajectory, as_sequence


@dataclass(frozen=True)
class AffineSystem:
    """``x+ = A x + B u + e``, ``y = C x + D u + r``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    e: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, float))
        if A.shape[0] != A.shape[1]:
            raise DimensionError(f"A must be square, got {A.shape}")
        B = np.asarray(self.B, float).reshape(A.shape[0], -1)
        C = np.asarray(self.C, float).reshape(-1, A.shape[0])
        D = np.asarray(self.D, float).reshape(C.shape[0], B.shape[1])
        e = np.asarray(self.e, float).reshape(A.shape[0])
        r = np.asarray(self.r, float).reshape(C.shape[0])
        for name, val in zip("ABCDer", (A, B, C, D, e, r)):
            object.__setattr__(self, name, val)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    def is_controllable(self) -> bool:
        blocks = [self.B]
        for _ in range(self.n - 1):
            blocks.append(self.A @ blocks[-1])
        return np.linalg.matrix_rank(np.hstack(blocks)) == self.n

    def is_observable(self) -> bool:
        blocks = [self.C]
        for _ in range(self.n - 1):
            blocks.append(blocks[-1] @ self.A)
        return np.linalg.matrix_rank(np.vstack(blocks)) == self.n

    def has_unique_steady_state(self) -> bool:
        M = np.block([[self.A - np.eye(self.n), self.B], [self.C, self.D]])
        return np.linalg.matrix_rank(M) == self.n + self.m

    def equilibrium(self, u_s) -> tuple[np.ndarray, np.ndarray]:
        """State and output at the equilibrium for constant input ``u_s``."""
        u_s = np.asarray(u_s, float).reshape(self.m)
        x = np.linalg.solve(np.eye(self.n) - self.A, self.B @ u_s + self.e)
        return x, self.C @ x + self.D @ u_s + self.r

    def as_plant(self) -> "NonlinearPlant":
        A, C, e, r = self.A, self.C, self.e, self.r
        return NonlinearPlant(
            n=self.n, m=self.m, p=self.p,
            f0=lambda x: A @ x + e, h0=lambda x: C @ x + r,
            B=self.B, D=self.D,
            jac_f0=lambda x: A, jac_h0=lambda x: C)


def random_affine_system(rng: np.random.Generator, n: int, m: int, p: int,
                         spectral_radius: float = 0.9, offsets: bool = True) -> AffineSystem:
    """Random stable, controllable, observable affine system."""
    while True:
        A = rng.standard_normal((n, n))
        A *= spectral_radius / max(np.abs(np.linalg.eigvals(A)).max(), 1e-9)
        B = rng.standard_normal((n, m))
        C = rng.standard_normal((p, n))
        D = rng.standard_normal((p, m)) * 0.5
        e = rng.standard_normal(n) if offsets else np.zeros(n)
        r = rng.standard_normal(p) if offsets else np.zeros(p)
        sys = AffineSystem(A, B, C, D, e, r)
        if sys.is_controllable() and sys.is_observable():
            return sys


def simulate_affine(sys: AffineSystem, x0, u) -> Trajectory:
    """Forward recursion; returned states are ``x_0..x_{N-1}``."""
    u = as_sequence(u, "u")
    if u.shape[1] != sys.m:
        raise DimensionError(f"input has {u.shape[1]} channels, system has {sys.m}")
    x = np.asarray(x0, float).reshape(sys.n)
    N = u.shape[0]
    xs = np.empty((N, sys.n))
    ys = np.empty((N, sys.p))
    for k in range(N):
        xs[k] = x
        ys[k] = sys.C @ x + sys.D @ u[k] + sys.r
        x = sys.A @ x + sys.B @ u[k] + sys.e
    return Trajectory(u, ys, xs)


def _fd_jacobian(fun, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, float)
    f0 = np.asarray(fun(x), float)
    J = np.empty((f0.size, x.size))
    for i in range(x.size):
        h = 1e-6 * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        J[:, i] = (np.asarray(fun(xp)) - np.asarray(fun(xm))) / (2 * h)
    return J


@dataclass(frozen=True)
class NonlinearPlant:
    """Control-affine plant ``x+ = f0(x) + B u``, ``y = h0(x) + D u``.

    Jacobians of ``f0``/``h0`` fall back to central finite differences with
    step ``1e-6 * max(1, |x_i|)`` when not supplied.
    """

    n: int
    m: int
    p: int
    f0: Callable[[np.ndarray], np.ndarray]
    h0: Callable[[np.ndarray], np.ndarray]
    B: np.ndarray
    D: np.ndarray
    jac_f0: Optional[Callable[[np.ndarray], np.ndarray]] = None
    jac_h0: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = "plant"
    # incremental wrappers keep a handle on the plant they augment
    base: Optional[object] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "B", np.asarray(self.B, float).reshape(self.n, self.m))
        object.__setattr__(self, "D", np.asarray(self.D, float).reshape(self.p, self.m))

    def step(self, x, u) -> np.ndarray:
        return np.asarray(self.f0(x), float) + self.B @ u

    def output(self, x, u) -> np.ndarray:
        return np.asarray(self.h0(x), float) + self.D @ u

    def A_at(self, x) -> np.ndarray:
        if self.jac_f0 is not None:
            return np.atleast_2d(np.asarray(self.jac_f0(x), float))
        return _fd_jacobian(self.f0, x)

    def C_at(self, x) -> np.ndarray:
        if self.jac_h0 is not None:
            return np.atleast_2d(np.asarray(self.jac_h0(x), float)).reshape(self.p, self.n)
        return _fd_jacobian(self.h0, x)

    def state_jacobian(self, x, u) -> np.ndarray:
        return self.A_at(x)


@dataclass(frozen=True)
class GeneralPlant:
    """Discrete-time plant ``x+ = f(x, u)``, ``y = h(x, u)`` without affine structure.

    Used for steady-state oracles and as the base of incremental wrappers.
    """

    n: int
    m: int
    p: int
    f: Callable[[np.ndarray, np.ndarray], np.ndarray]
    h: Callable[[np.ndarray, np.ndarray], np.ndarray]
    jac_x: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    name: str = "plant"

    def step(self, x, u) -> np.ndarray:
        return np.asarray(self.f(np.asarray(x, float), np.asarray(u, float)), float)

    def output(self, x, u) -> np.ndarray:
        return np.asarray(self.h(np.asarray(x, float), np.asarray(u, float)), float).reshape(self.p)

    def state_jacobian(self, x, u) -> np.ndarray:
        if self.jac_x is not None:
            return np.asarray(self.jac_x(x, u), float)
        return _fd_jacobian(lambda z: self.step(z, u), x)


def simulate_nonlinear(plant, x0, u) -> Trajectory:
    """Simulate any plant exposing ``step(x, u)`` and ``output(x, u)``."""
    u = as_sequence(u, "u")
    if u.shape[1] != plant.m:
        raise DimensionError(f"input has {u.shape[1]} channels, plant has {plant.m}")
    x = np.asarray(x0, float).reshape(plant.n)
    N = u.shape[0]
    xs = np.empty((N, plant.n))
    ys = np.empty((N, plant.p))
    for k in range(N):
        xs[k] = x
        ys[k] = plant.output(x, u[k])
        x = plant.step(x, u[k])
    return Trajectory(u, ys, xs)


@dataclass(frozen=True)
class LinearizationPoint:
    x_tilde: np.ndarray
    A: np.ndarray
    C: np.ndarray
    e: np.ndarray
    r: np.ndarray
    B: np.ndarray
    D: np.ndarray

    def f(self, x, u) -> np.ndarray:
        return self.A @ x + self.B @ u + self.e

    def h(self, x, u) -> np.ndarray:
        return self.C @ x + self.D @ u + self.r

    def as_affine(self) -> AffineSystem:
        return AffineSystem(self.A, self.B, self.C, self.D, self.e, self.r)


def linearize(plant: NonlinearPlant, x_tilde) -> LinearizationPoint:
    """Affine model of ``plant`` linearized at ``(x_tilde, 0)``."""
    xt = np.asarray(x_tilde, float).reshape(plant.n)
    A = plant.A_at(xt)
    C = plant.C_at(xt)
    e = np.asarray(plant.f0(xt), float) - A @ xt
    r = np.asarray(plant.h0(xt), float) - C @ xt
    return LinearizationPoint(xt, A, C, e, r, plant.B, plant.D)


@dataclass(frozen=True)
class LinearizationErrorData:
    """Linearized-dynamics data around ``x_t``; index ``j`` maps to ``k = j - N``."""

    y_prime: np.ndarray   # (N+n, p) outputs y'_k(t), k in [-N, n-1]
    x_prime: np.ndarray   # (N+n+1, n) states x'_k(t), k in [-N, n]
    delta: np.ndarray     # (N+n, p) y_{t+k} - y'_k(t)


def linearization_error_data(plant: NonlinearPlant, x_t, x_start, u, y=None,
                             ) -> LinearizationErrorData:
    """Drive the dynamics linearized at ``x_t`` from ``x_start`` with ``u``.

    ``u`` holds the inputs applied over ``[t-N, t+n-1]`` and ``x_start`` is the
    nonlinear state at ``t-N``.  When the measured outputs ``y`` over the same
    interval are omitted they are recomputed by simulating the plant.
    """
    u = as_sequence(u, "u")
    lin = linearize(plant, x_t)
    K = u.shape[0]
    xp = np.empty((K + 1, plant.n))
    yp = np.empty((K, plant.p))
    xp[0] = np.asarray(x_start, float).reshape(plant.n)
    for k in range(K):
        yp[k] = lin.h(xp[k], u[k])
        xp[k + 1] = lin.f(xp[k], u[k])
    if y is None:
        y = simulate_nonlinear(plant, x_start, u).outputs
    y = as_sequence(y, "y")
    return LinearizationErrorData(yp, xp, y - yp)


def equilibrium_state(plant, u_s, x_guess, tol: float = 1e-12,
                      max_iter: int = 100) -> Optional[np.ndarray]:
    """Damped Newton on ``x = f(x, u_s)``; ``None`` if it fails to converge."""
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        return _newton_equilibrium(plant, u_s, x_guess, tol, max_iter)


def _newton_equilibrium(plant, u_s, x_guess, tol, max_iter):
    u_s = np.asarray(u_s, float).reshape(plant.m)
    x = np.asarray(x_guess, float).reshape(plant.n).copy()
    I = np.eye(plant.n)
    for _ in range(max_iter):
        res = plant.step(x, u_s) - x
        nres = np.linalg.norm(res)
        if not np.isfinite(nres):
            return None
        if nres <= tol:
            return x
        try:
            dx = np.linalg.solve(I - plant.state_jacobian(x, u_s), res)
        except np.linalg.LinAlgError:
            return None
        step = 1.0
        while step > 1e-8:
            xn = x + step * dx
            rn = plant.step(xn, u_s) - xn
            if np.all(np.isfinite(rn)) and np.linalg.norm(rn) < nres:
                break
            step *= 0.5
        else:
            return None
        x = xn
    res = np.linalg.norm(plant.step(x, u_s) - x)
    return x if res <= max(tol, 1e-10) else None


def wrap_incremental(plant) -> NonlinearPlant:
    """Augment with the input as a state: state ``(x, u)``, input ``du``, output ``(y, u)``.

    The augmented plant is control-affine in ``du`` regardless of how the
    original dynamics depend on ``u``, so ``plant`` may be a
    :class:`GeneralPlant` as well as a :class:`NonlinearPlant`.
    """
    n0, m, p0 = plant.n, plant.m, plant.p
    f, h = plant.step, plant.output

    def f0(z):
        x, u = z[:n0], z[n0:]
        return np.concatenate([f(x, u), u])

    def h0(z):
        x, u = z[:n0], z[n0:]
        return np.concatenate([h(x, u), u])

    B = np.vstack([np.zeros((n0, m)), np.eye(m)])
    D = np.zeros((p0 + m, m))

    jac_f0 = jac_h0 = None
    if isinstance(plant, NonlinearPlant):
        def jac_f0(z):
            return np.block([[plant.A_at(z[:n0]), plant.B],
                             [np.zeros((m, n0)), np.eye(m)]])

        def jac_h0(z):
            return np.block([[plant.C_at(z[:n0]), plant.D],
                             [np.zeros((m, n0)), np.eye(m)]])
    elif plant.jac_x is not None:
        def jac_f0(z):
            x, u = z[:n0], z[n0:]
            hu = 1e-6 * np.maximum(1.0, np.abs(u))
            Bu = np.column_stack([(f(x, u + hu[i] * e) - f(x, u - hu[i] * e)) / (2 * hu[i])
                                  for i, e in enumerate(np.eye(m))])
            return np.block([[plant.state_jacobian(x, u), Bu],
                             [np.zeros((m, n0)), np.eye(m)]])

    return NonlinearPlant(n=n0 + m, m=m, p=p0 + m, f0=f0, h0=h0, B=B, D=D,
                          jac_f0=jac_f0, jac_h0=jac_h0,
                          name=f"incremental({plant.name})", base=plant)


def unwrap_incremental(traj: Trajectory, n0: int, p0: int) -> Trajectory:
    """Recover the original trajectory ``(u, y, x)`` from an augmented one."""
    u = traj.outputs[:, p0:]
    y = traj.outputs[:, :p0]
    x = None if traj.states is None else traj.states[:, :n0]
    return Trajectory(u, y, x)


# --- CSTR ------------------------------------------------------------------

@dataclass(frozen=True)
class CstrParameters:
    """Two-state CSTR (dimensionless concentration/temperature, coolant flow input)."""

    theta: float = 20.0
    k: float = 300.0
    M: float = 5.0
    x_f: float = 0.3947
    x_c: float = 0.3816
    alpha: float = 0.117
    dt: float = 0.2
    substeps: int = 1


def cstr_rhs(x: np.ndarray, u, prm: CstrParameters) -> np.ndarray:
    x1, x2 = x
    rate = prm.k * x1 * np.exp(-prm.M / x2)
    u = float(np.asarray(u).ravel()[0])
    return np.array([
        (1.0 - x1) / prm.theta - rate,
        (prm.x_f - x2) / prm.theta + rate - prm.alpha * u * (x2 - prm.x_c),
    ])


def cstr_rhs_jacobian(x: np.ndarray, u, prm: CstrParameters) -> np.ndarray:
    x1, x2 = x
    u = float(np.asarray(u).ravel()[0])
    ex = np.exp(-prm.M / x2)
    dr_dx1 = prm.k * ex
    dr_dx2 = prm.k * x1 * ex * prm.M / x2 ** 2
    return np.array([
        [-1.0 / prm.theta - dr_dx1, -dr_dx2],
        [dr_dx1, -1.0 / prm.theta + dr_dx2 - prm.alpha * u],
    ])


def cstr_step(x, u, prm: CstrParameters) -> np.ndarray:
    """One sampling period with fixed-step RK4."""
    x = np.asarray(x, float)
    h = prm.dt / prm.substeps
    for _ in range(prm.substeps):
        k1 = cstr_rhs(x, u, prm)
        k2 = cstr_rhs(x + 0.5 * h * k1, u, prm)
        k3 = cstr_rhs(x + 0.5 * h * k2, u, prm)
        k4 = cstr_rhs(x + h * k3, u, prm)
        x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


def cstr_step_jacobian(x, u, prm: CstrParameters) -> np.ndarray:
    """Analytic state Jacobian of :func:`cstr_step` (RK4 chain rule)."""
    x = np.asarray(x, float)
    h = prm.dt / prm.substeps
    J = np.eye(2)
    I = np.eye(2)
    for _ in range(prm.substeps):
        k1 = cstr_rhs(x, u, prm)
        J1 = cstr_rhs_jacobian(x, u, prm)
        x2 = x + 0.5 * h * k1
        k2 = cstr_rhs(x2, u, prm)
        J2 = cstr_rhs_jacobian(x2, u, prm) @ (I + 0.5 * h * J1)
        x3 = x + 0.5 * h * k2
        k3 = cstr_rhs(x3, u, prm)
        J3 = cstr_rhs_jacobian(x3, u, prm) @ (I + 0.5 * h * J2)
        x4 = x + h * k3
        k4 = cstr_rhs(x4, u, prm)
        J4 = cstr_rhs_jacobian(x4, u, prm) @ (I + h * J3)
        Jstep = I + h / 6.0 * (J1 + 2 * J2 + 2 * J3 + J4)
        J = Jstep @ J
        x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return J


def cstr_base_plant(prm: CstrParameters = CstrParameters()) -> GeneralPlant:
    """Reactor with coolant flow ``u`` as input and temperature ``x2`` as output."""
    return GeneralPlant(n=2, m=1, p=1,
                        f=lambda x, u: cstr_step(x, u, prm),
                        h=lambda x, u: np.array([x[1]]),
                        jac_x=lambda x, u: cstr_step_jacobian(x, u, prm), name="cstr")


def cstr_plant(prm: CstrParameters = CstrParameters()) -> NonlinearPlant:
    """Incremental-input CSTR: state ``(x1, x2, u)``, input ``du``, output ``(x2, u)``.

    The reactor is not control-affine in the coolant flow ``u`` (it enters
    multiplied by the temperature), so the input is integrated as a state.
    """
    plant = wrap_incremental(cstr_base_plant(prm))
    C = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    return NonlinearPlant(n=3, m=1, p=2, f0=plant.f0, h0=plant.h0, B=plant.B, D=plant.D,
                          jac_f0=plant.jac_f0, jac_h0=lambda z: C,
                          name="cstr_incremental", base=plant.base)
