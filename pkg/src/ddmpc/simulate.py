"""Closed-loop experiments: excitation, n-step MPC, data windows, noise, diagnostics."""
from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .mpc import (ControllerKind, DataDrivenController, MpcConfig, MpcInfeasibleError,
                  MpcSolution, build_nominal_problem, solve_mpc)
from .qp import NonConvexError
from .systems import AffineSystem, NonlinearPlant, linearization_error_data
from .trajdata import Trajectory, build_hux, pinv_norm


class WindowPolicy(str, enum.Enum):
    ALWAYS = "always"
    STOP_ON_TRACKING_COST = "stop_on_tracking_cost"
    NEVER = "never"


class ExperimentFault(RuntimeError):
    pass


def sample_ball(rng: np.random.Generator, dim: int, radius: float, size: int) -> np.ndarray:
    """``size`` points uniform in the Euclidean ball of ``radius`` in ``R^dim``.

    The draws do not depend on ``radius``, so equal seeds give noise
    sequences that are exact rescalings of each other.
    """
    g = rng.standard_normal((size, dim))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    r = rng.uniform(0.0, 1.0, size) ** (1.0 / dim)
    return radius * g * r[:, None]


@dataclass(frozen=True)
class ExcitationSpec:
    """Uniform random input during the first ``steps`` samples.

    ``mode="level"`` draws the physical input level ``u`` and applies its
    increments (for plants with an integrated input); ``"direct"`` draws
    the controller-side input itself.
    """

    low: Sequence[float]
    high: Sequence[float]
    steps: int
    seed: int = 0
    mode: str = "direct"

    def inputs(self, m: int) -> tuple[np.ndarray, Optional[np.ndarray]]:
        rng = np.random.default_rng(self.seed)
        lo = np.broadcast_to(np.asarray(self.low, float), (m,))
        hi = np.broadcast_to(np.asarray(self.high, float), (m,))
        if self.mode == "direct":
            return rng.uniform(lo, hi, (self.steps, m)), None
        if self.mode == "level":
            lv = rng.uniform(lo, hi, (self.steps + 1, m))
            return np.diff(lv, axis=0), lv[0]
        raise ValueError(f"unknown excitation mode {self.mode!r}")


@dataclass(frozen=True)
class NoiseSpec:
    """Bounded noise levels (uniform on balls) and their seeds.

    ``data`` perturbs offline output data, ``input``/``output`` the online
    measurements used for initial conditions, ``disturbance`` is added to
    the applied input.
    """

    data: float = 0.0
    input: float = 0.0
    output: float = 0.0
    disturbance: float = 0.0
    seed_data: int = 11
    seed_online: int = 12

    @classmethod
    def uniform(cls, eps_bar: float, seed: int = 11, disturbance: float = 0.0) -> "NoiseSpec":
        return cls(eps_bar, eps_bar, eps_bar, disturbance, seed, seed + 1)


@dataclass(frozen=True)
class DiagnosticsSpec:
    theta_bar: bool = True
    hux: bool = False
    lyapunov: bool = False


@dataclass(frozen=True)
class ExperimentPlan:
    """Everything needed for a deterministic closed-loop run.

    For ``ROBUST``/``NOMINAL`` controllers the offline data come from a
    separate excitation run from ``x0_data`` (``offline`` spec) and the
    online run starts from ``x0`` after ``excitation.steps`` warm-up inputs.
    For ``ONLINE`` the excitation phase fills the first window.
    """

    plant: object
    x0: np.ndarray
    kind: ControllerKind
    config: MpcConfig
    N: int
    T: int
    excitation: ExcitationSpec
    noise: NoiseSpec = NoiseSpec()
    window_policy: WindowPolicy = WindowPolicy.ALWAYS
    stop_threshold: float = 1e-5
    diagnostics: DiagnosticsSpec = DiagnosticsSpec()
    offline: Optional[ExcitationSpec] = None
    x0_data: Optional[np.ndarray] = None
    name: str = "experiment"

    def __post_init__(self):
        object.__setattr__(self, "kind", ControllerKind(self.kind))
        object.__setattr__(self, "window_policy", WindowPolicy(self.window_policy))
        if self.T < self.N:
            raise ValueError("T must be at least N")
        if self.N < self.config.L + self.config.n + 1:
            raise ValueError("N too short for the horizon")


@dataclass
class ClosedLoopLog:
    plan: ExperimentPlan
    t: list = field(default_factory=list)
    u: list = field(default_factory=list)
    y: list = field(default_factory=list)
    y_meas: list = field(default_factory=list)
    u_meas: list = field(default_factory=list)
    x: list = field(default_factory=list)
    from_mpc: list = field(default_factory=list)
    solves: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    fault: Optional[str] = None
    frozen_at: Optional[int] = None
    offline_data: Optional[Trajectory] = None
    offline_clean: Optional[Trajectory] = None
    solutions: list = field(default_factory=list, repr=False)
    windows: list = field(default_factory=list, repr=False)

    def arrays(self) -> dict:
        return {k: np.asarray(getattr(self, k)) for k in
                ("t", "u", "y", "y_meas", "u_meas", "x", "from_mpc")}

    def outputs(self) -> np.ndarray:
        return np.asarray(self.y)

    def inputs(self) -> np.ndarray:
        return np.asarray(self.u)

    def solve_times(self) -> np.ndarray:
        return np.array([s["solve_time"] for s in self.solves])

    def solve_series(self, key: str) -> np.ndarray:
        return np.array([s[key] for s in self.solves])

    def diag_series(self, key: str) -> np.ndarray:
        return np.array([d.get(key, np.nan) for d in self.diagnostics], float)

    def xi(self, t: int, measured: bool = True) -> np.ndarray:
        n = self.plan.config.n
        u = np.asarray(self.u_meas if measured else self.u)[t - n:t]
        y = np.asarray(self.y_meas if measured else self.y)[t - n:t]
        return np.concatenate([u.ravel(), y.ravel()])

    # --- export -------------------------------------------------------
    def write_csv(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        arr = self.arrays()
        m = arr["u"].shape[1]
        p = arr["y"].shape[1]
        nx = arr["x"].shape[1]
        paths = {}
        header = (["t"] + [f"u_{i}" for i in range(m)] + [f"y_{i}" for i in range(p)]
                  + [f"u_meas_{i}" for i in range(m)] + [f"y_meas_{i}" for i in range(p)]
                  + [f"x_{i}" for i in range(nx)] + ["from_mpc"])
        paths["steps"] = out / "steps.csv"
        with open(paths["steps"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k in range(len(self.t)):
                w.writerow([self.t[k]] + [_f(v) for v in arr["u"][k]] + [_f(v) for v in arr["y"][k]]
                           + [_f(v) for v in arr["u_meas"][k]] + [_f(v) for v in arr["y_meas"][k]]
                           + [_f(v) for v in arr["x"][k]] + [int(self.from_mpc[k])])
        paths["solves"] = out / "solves.csv"
        _write_records(paths["solves"], self.solves)
        paths["diagnostics"] = out / "diagnostics.csv"
        _write_records(paths["diagnostics"], self.diagnostics)
        paths["manifest"] = out / "manifest.json"
        paths["manifest"].write_text(json.dumps(self.manifest(), indent=2))
        return paths

    def manifest(self) -> dict:
        plan = self.plan
        return {
            "name": plan.name,
            "kind": plan.kind.value,
            "N": plan.N, "T": plan.T,
            "window_policy": plan.window_policy.value,
            "stop_threshold": plan.stop_threshold,
            "x0": np.asarray(plan.x0, float).tolist(),
            "excitation": asdict(plan.excitation),
            "offline": asdict(plan.offline) if plan.offline else None,
            "noise": asdict(plan.noise),
            "config": _config_dict(plan.config),
            "fault": self.fault,
            "frozen_at": self.frozen_at,
            "n_solves": len(self.solves),
        }


def _f(v) -> str:
    return format(float(v), ".17g")


def _write_records(path: Path, records: list) -> None:
    keys: list = []
    for r in records:
        for k in r:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for r in records:
            row = []
            for k in keys:
                v = r.get(k, "")
                if isinstance(v, (list, tuple, np.ndarray)):
                    v = " ".join(_f(x) for x in np.ravel(v))
                elif isinstance(v, (float, np.floating)):
                    v = _f(v)
                row.append(v)
            w.writerow(row)


def _config_dict(cfg: MpcConfig) -> dict:
    d = {}
    for k, v in cfg.__dict__.items():
        if hasattr(v, "to_dict"):
            v = v.to_dict()
        elif isinstance(v, np.ndarray):
            v = v.tolist()
        elif isinstance(v, enum.Enum):
            v = v.value
        d[k] = v
    return d


class _Plant:
    """Uniform stepping interface over affine and nonlinear plants."""

    def __init__(self, plant):
        self.plant = plant
        if isinstance(plant, AffineSystem):
            self.n, self.m, self.p = plant.n, plant.m, plant.p
            self.step = lambda x, u: plant.A @ x + plant.B @ u + plant.e
            self.out = lambda x, u: plant.C @ x + plant.D @ u + plant.r
        else:
            self.n, self.m, self.p = plant.n, plant.m, plant.p
            self.step = plant.step
            self.out = plant.output


def _offline_data(plan: ExperimentPlan, P: _Plant) -> tuple[Trajectory, Trajectory]:
    spec = plan.offline or plan.excitation
    v, lvl = spec.inputs(P.m)
    if spec.steps != plan.N:
        raise ValueError("offline excitation must have N steps")
    x = np.asarray(plan.x0_data if plan.x0_data is not None else plan.x0, float).copy()
    if lvl is not None:
        x[-P.m:] = lvl
    ys = np.empty((plan.N, P.p))
    for k in range(plan.N):
        ys[k] = P.out(x, v[k])
        x = P.step(x, v[k])
    rng = np.random.default_rng(plan.noise.seed_data)
    noisy = ys + sample_ball(rng, P.p, plan.noise.data, plan.N)
    return Trajectory(v, noisy), Trajectory(v, ys)


def run_experiment(plan: ExperimentPlan, keep_solutions: bool = False,
                   lyapunov_oracle: Optional["LyapunovOracle"] = None,
                   hux_plant: Optional[NonlinearPlant] = None) -> ClosedLoopLog:
    """Run ``plan``; faults truncate the log and are recorded in ``log.fault``."""
    P = _Plant(plan.plant)
    cfg = plan.config
    n, N = cfg.n, plan.N
    log = ClosedLoopLog(plan)
    rng_on = np.random.default_rng(plan.noise.seed_online)

    if plan.kind is ControllerKind.ONLINE:
        ctrl = DataDrivenController(cfg, plan.kind)
    else:
        data, clean = _offline_data(plan, P)
        log.offline_data, log.offline_clean = data, clean
        ctrl = DataDrivenController(cfg, plan.kind, fixed_data=data)

    v_exc, lvl = plan.excitation.inputs(P.m)
    x = np.asarray(plan.x0, float).copy()
    if lvl is not None:
        x[-P.m:] = lvl

    def apply(t, v, mpc_flag):
        nonlocal x
        y = P.out(x, v)
        if not np.all(np.isfinite(y)) or not np.all(np.isfinite(x)):
            raise ExperimentFault(f"plant diverged at t={t}")
        em = sample_ball(rng_on, P.m, plan.noise.input, 1)[0]
        ey = sample_ball(rng_on, P.p, plan.noise.output, 1)[0]
        log.t.append(t)
        log.u.append(np.asarray(v, float).copy())
        log.u_meas.append(v + em)
        log.y.append(y)
        log.y_meas.append(y + ey)
        log.x.append(x.copy())
        log.from_mpc.append(mpc_flag)
        x = P.step(x, v)

    try:
        for t in range(plan.excitation.steps):
            apply(t, v_exc[t], False)
        t = plan.excitation.steps
        window: Optional[Trajectory] = None
        w0 = t - N
        frozen = False
        while t < plan.T:
            if plan.kind is ControllerKind.ONLINE:
                if (not frozen and plan.window_policy is not WindowPolicy.NEVER) or window is None:
                    window = Trajectory(np.asarray(log.u[-N:]), np.asarray(log.y_meas[-N:]))
                    w0 = t - N
            xi = log.xi(t)
            try:
                v_seq, sol = ctrl.step(xi, window)
            except (MpcInfeasibleError, NonConvexError) as exc:
                raise ExperimentFault(f"controller fault at t={t}: {exc}") from exc
            if keep_solutions:
                log.solutions.append(sol)
                log.windows.append(window)
            rec = _solve_record(t, sol, frozen, ctrl)
            log.solves.append(rec)
            log.diagnostics.append(_diagnostics(plan, log, t, w0, lyapunov_oracle, hux_plant))
            if (plan.window_policy is WindowPolicy.STOP_ON_TRACKING_COST and not frozen
                    and sol.tracking_cost <= plan.stop_threshold):
                frozen = True
                log.frozen_at = t
            d = sample_ball(rng_on, P.m, plan.noise.disturbance, n)
            for k in range(n):
                if t >= plan.T:
                    break
                apply(t, v_seq[k] + d[k], True)
                t += 1
    except ExperimentFault as exc:
        log.fault = str(exc)
    return log


def _solve_record(t: int, sol: MpcSolution, frozen: bool, ctrl: DataDrivenController) -> dict:
    qp = sol.qp
    n_eq = qp.eq_multipliers.size
    return {
        "t": t,
        "cost": sol.cost,
        "tracking_cost": sol.tracking_cost,
        "setpoint_cost": sol.setpoint_cost,
        "alpha_norm": float(np.linalg.norm(sol.alpha)),
        "sigma_norm": float(np.linalg.norm(sol.sigma)),
        "anchor_norm": ctrl.anchor_history[-1] if ctrl.anchor_history else float("nan"),
        "u_s": sol.u_s.tolist(),
        "y_s": sol.y_s.tolist(),
        "active_set_size": len(qp.active_set),
        "licq_flag": int(len(qp.active_set) + n_eq - len(qp.removed_eq_rows) > sol.z.size),
        "kkt_max": qp.kkt_residuals.max() if qp.kkt_residuals else float("nan"),
        "iterations": qp.iterations,
        "solve_time": sol.solve_time,
        "frozen": int(frozen),
    }


def theta_bar(xi_series: np.ndarray, t: int, N: int, n: int) -> float:
    """``max_{i in [t-N, t-1], i >= n} ||xi_t - xi_i||`` given ``xi_series[i] = xi_i``."""
    lo = max(t - N, n)
    if lo >= t:
        return 0.0
    d = xi_series[lo:t] - xi_series[t]
    return float(np.max(np.linalg.norm(d, axis=1)))


def _diagnostics(plan: ExperimentPlan, log: ClosedLoopLog, t: int, w0: int,
                 oracle, hux_plant) -> dict:
    """Per-solve diagnostics; ``w0`` is the first sample of the prediction window."""
    cfg = plan.config
    n, N = cfg.n, plan.N
    rec: dict = {"t": t}
    if plan.diagnostics.theta_bar:
        u = np.asarray(log.u_meas)
        y = np.asarray(log.y_meas)
        lo = max(t - N, n)
        xi_t = log.xi(t)
        best = 0.0
        for i in range(lo, t):
            xi_i = np.concatenate([u[i - n:i].ravel(), y[i - n:i].ravel()])
            best = max(best, float(np.linalg.norm(xi_t - xi_i)))
        rec["theta_bar"] = best
    if plan.diagnostics.hux and hux_plant is not None:
        xs = np.asarray(log.x)
        us = np.asarray(log.u)
        # states of the dynamics linearized at the current state x_t
        x_t = _current_state(log, plan)
        data = linearization_error_data(hux_plant, x_t, xs[w0], us[w0:w0 + N],
                                        np.asarray(log.y)[w0:w0 + N])
        H = build_hux(us[w0:w0 + N], data.x_prime[:N], cfg.L, n)
        pn = pinv_norm(H)
        rec["hux_pinv"] = pn.norm
        rec["hux_full_rank"] = int(pn.full_row_rank)
        if "theta_bar" in rec:
            rec["product"] = pn.norm * rec["theta_bar"]
    if plan.diagnostics.lyapunov and oracle is not None:
        rec["V"] = oracle.V(log.xi(t, measured=False))
        rec["xi_err2"] = oracle.xi_error2(log.xi(t, measured=False))
    return rec


def _current_state(log: ClosedLoopLog, plan: ExperimentPlan) -> np.ndarray:
    """Plant state ``x_t`` right before the solve at time ``t = len(log.t)``."""
    P = _Plant(plan.plant)
    return P.step(log.x[-1], log.u[-1])


# --- oracles and probes ------------------------------------------------------

@dataclass
class LyapunovOracle:
    """``V(xi) = J_check(xi) - J_eq`` from a slack-free problem on clean data."""

    config: MpcConfig
    clean_data: Trajectory
    alpha_sr: np.ndarray
    J_eq: float
    xi_sr: np.ndarray
    eps_bar: Optional[float] = None

    def solve(self, xi) -> MpcSolution:
        prob = build_nominal_problem(self.config, self.clean_data, xi, self.alpha_sr, self.eps_bar)
        return solve_mpc(prob)

    def V(self, xi) -> float:
        try:
            return self.solve(xi).cost - self.J_eq
        except MpcInfeasibleError:
            return float("nan")

    def xi_error2(self, xi) -> float:
        d = np.asarray(xi, float) - self.xi_sr
        return float(d @ d)


def equilibrium_xi(u_s, y_s, n: int) -> np.ndarray:
    return np.concatenate([np.tile(np.ravel(u_s), n), np.tile(np.ravel(y_s), n)])


@dataclass(frozen=True)
class StabilityReport:
    V_series: Optional[np.ndarray]
    xi_error_series: np.ndarray
    fitted_decay: float
    plateau: float
    transient_end: int


def _fit_rate(series: np.ndarray) -> float:
    s = np.asarray(series, float)
    ok = np.isfinite(s) & (s > 0)
    if ok.sum() < 2:
        return float("nan")
    k = np.flatnonzero(ok)
    slope = np.polyfit(k, np.log(s[ok]), 1)[0]
    return float(math.exp(slope))


def stability_probe(log: ClosedLoopLog, xi_sr, V_series: Optional[np.ndarray] = None,
                    tail_fraction: float = 0.25, floor: float = 0.0) -> StabilityReport:
    """Fit a geometric rate to the transient and take the tail max as plateau.

    The series is sampled at solve times (every ``n`` steps).  The plateau
    is the maximum over the final ``tail_fraction`` of solves; the transient
    ends at the first sample below ``max(plateau, floor)``.
    """
    xi_sr = np.asarray(xi_sr, float)
    ts = [s["t"] for s in log.solves]
    err = np.array([np.sum((log.xi(t, measured=False) - xi_sr) ** 2) for t in ts])
    series = np.asarray(V_series, float) if V_series is not None else err
    k0 = int(len(err) * (1 - tail_fraction))
    plateau = float(np.max(err[k0:])) if len(err) else float("nan")
    ref_plateau = float(np.max(series[k0:])) if len(series) else float("nan")
    thresh = max(ref_plateau, floor)
    below = np.flatnonzero(series <= thresh)
    end = int(below[0]) if below.size else len(series)
    rate = _fit_rate(series[:max(end, 2)])
    return StabilityReport(V_series, err, rate, plateau, end)


@dataclass(frozen=True)
class LinearizationSample:
    t: int
    delta_max: float
    excursion_sum: float
    ratio: float


def linearization_probe(log: ClosedLoopLog, plant: NonlinearPlant, times: Sequence[int]) -> list:
    """Empirical linearization-error constants at the requested solve times."""
    N = log.plan.N
    n = log.plan.config.n
    xs = np.asarray(log.x)
    us = np.asarray(log.u)
    ys = np.asarray(log.y)
    out = []
    for t in times:
        if t - N < 0 or t + n > len(xs):
            continue
        x_t = xs[t]
        data = linearization_error_data(plant, x_t, xs[t - N], us[t - N:t + n], ys[t - N:t + n])
        dmax = float(np.max(np.linalg.norm(data.delta, axis=1)))
        exc = float(np.sum(np.linalg.norm(xs[t - N:t + n] - x_t, axis=1) ** 2))
        out.append(LinearizationSample(t, dmax, exc, dmax / exc if exc > 0 else 0.0))
    return out


@dataclass(frozen=True)
class ExcitationReport:
    theta_bar: np.ndarray
    hux_pinv: np.ndarray
    product: np.ndarray
    c_H_bar: float
    times: np.ndarray


def excitation_monitor(log: ClosedLoopLog) -> ExcitationReport:
    th = log.diag_series("theta_bar")
    hp = log.diag_series("hux_pinv")
    pr = log.diag_series("product")
    ts = log.diag_series("t")
    finite = pr[np.isfinite(pr)]
    return ExcitationReport(th, hp, pr, float(finite.max()) if finite.size else float("nan"), ts)


def summarize(log: ClosedLoopLog, y_target=None, tail: int = 500) -> dict:
    y = log.outputs()
    out = {"steps": len(log.t), "solves": len(log.solves), "fault": log.fault,
           "frozen_at": log.frozen_at}
    st = log.solve_times()
    if st.size:
        out["solve_time_median"] = float(np.median(st))
        out["solve_time_mean"] = float(np.mean(st))
    if y_target is not None and len(y):
        yt = np.asarray(y_target, float).ravel()
        out["tail_mean_abs_error"] = float(np.mean(np.abs(y[-tail:, :yt.size] - yt)))
    return out
