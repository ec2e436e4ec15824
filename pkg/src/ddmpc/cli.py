"""``ddmpc`` command line: run, sweep, baseline, verify.

Every verb writes plain CSV logs first and draws plots from those files
only, so figures can be regenerated later with ``ddmpc plot DIR``.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from .config import (ConfigError, ExperimentConfig, build_plan, build_plant,
                     bundled_configs, load_config, _box)
from .mpc import ControllerKind
from .simulate import (ClosedLoopLog, LyapunovOracle, equilibrium_xi, run_experiment,
                       summarize)
from .steady import (EquilibriumSpec, _start_grid, optimal_equilibrium_data,
                     optimal_equilibrium_model)
from .systems import AffineSystem


# --- helpers -----------------------------------------------------------------

def _io_columns(cfg: ExperimentConfig) -> tuple[list[str], list[str]]:
    """Column names of the physical input and output in ``steps.csv``."""
    ctrl = cfg.section("controller")
    p0 = np.atleast_1d(ctrl["y_ref"]).size
    if cfg.section("plant")["type"] == "cstr":
        m = np.atleast_2d(ctrl["R"]).shape[0]
        return [f"y_{p0 + i}" for i in range(m)], [f"y_{i}" for i in range(p0)]
    m = np.atleast_2d(ctrl["R"]).shape[0]
    return [f"u_{i}" for i in range(m)], [f"y_{i}" for i in range(p0)]


def physical_outputs(cfg: ExperimentConfig, log: ClosedLoopLog) -> np.ndarray:
    p0 = np.atleast_1d(cfg.section("controller")["y_ref"]).size
    return log.outputs()[:, :p0]


def _settled_states(cfg: ExperimentConfig, base, spec, steps: int = 5000) -> list:
    """Newton guesses: the initial state and where constant inputs on ``U_s`` drive it."""
    x0 = np.asarray(cfg.section("plant")["x0"], float)[:base.n]
    guesses = [x0]
    for u in _start_grid(spec.U_s, base.m, 5):
        x = x0.copy()
        for _ in range(steps):
            x = base.step(x, u)
        if np.all(np.isfinite(x)):
            guesses.append(x)
    return guesses


def reference_equilibrium(cfg: ExperimentConfig) -> dict:
    """Model-based optimal reachable equilibrium ``(u_sr, y_sr)`` on the physical signals."""
    ctrl = cfg.section("controller")
    plant = build_plant(cfg)
    S = np.atleast_2d(np.asarray(ctrl["S"], float))
    spec = EquilibriumSpec(S, np.atleast_1d(np.asarray(ctrl["y_ref"], float)), _box(ctrl["U_s"]),
                           int(ctrl["L"]), int(ctrl["n"]))
    if isinstance(plant, AffineSystem):
        res = optimal_equilibrium_model(plant, spec)
    else:
        res = optimal_equilibrium_model(plant.base, spec, x_guesses=_settled_states(cfg, plant.base, spec))
    return {"u_sr": np.ravel(res.u_s).tolist(), "y_sr": np.ravel(res.y_s).tolist(),
            "J_eq": float(res.J_eq)}


def tracking_cost(cfg: ExperimentConfig, log: ClosedLoopLog) -> float:
    y = physical_outputs(cfg, log)
    ref = np.atleast_1d(np.asarray(cfg.section("controller")["y_ref"], float))
    return float(np.sum((y - ref) ** 2))


def _oracle(cfg: ExperimentConfig, plan, eq: dict) -> Optional[LyapunovOracle]:
    from .simulate import _offline_data, _Plant
    if plan.kind is ControllerKind.ONLINE or not plan.diagnostics.lyapunov:
        return None
    _, clean = _offline_data(plan, _Plant(plan.plant))
    sr = optimal_equilibrium_data(clean, plan.config.equilibrium_spec())
    return LyapunovOracle(plan.config, clean, sr.alpha_s, sr.J_eq,
                          equilibrium_xi(eq["u_sr"], eq["y_sr"], plan.config.n),
                          plan.config.eps_bar or None)


def _write_summary(out: Path, cfg: ExperimentConfig, log: ClosedLoopLog, extra: dict) -> dict:
    u_cols, y_cols = _io_columns(cfg)
    summary = summarize(log, cfg.section("controller")["y_ref"])
    summary.update({"name": cfg.name, "y_ref": list(np.atleast_1d(cfg.section("controller")["y_ref"])),
                    "input_columns": u_cols, "output_columns": y_cols,
                    "closed_loop_cost": tracking_cost(cfg, log)})
    summary.update(extra)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=float))
    (out / "config.yaml").write_text(cfg.to_yaml())
    return summary


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    if args.out:
        return Path(args.out)
    return Path(cfg.section("output").get("dir", f"runs/{cfg.name}"))


def _want_plot(cfg: ExperimentConfig) -> bool:
    return bool(cfg.section("output").get("plot", True))


# --- plotting (reads CSV/JSON only) -------------------------------------------

def _mpl():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _read_csv(path: Path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {}
    return {k: np.array([float(r[k]) if r[k] not in ("", None) else np.nan for r in rows])
            for k in rows[0] if _is_numeric(rows[0][k])}


def _is_numeric(s) -> bool:
    try:
        float(s)
        return True
    except (TypeError, ValueError):
        return False


def plot_run(run_dir) -> Path:
    """Input/output figure from ``steps.csv`` and ``summary.json`` in ``run_dir``."""
    plt = _mpl()
    d = Path(run_dir)
    steps = _read_csv(d / "steps.csv")
    summary = json.loads((d / "summary.json").read_text())
    t = steps["t"]
    fig, axes = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    for c in summary["output_columns"]:
        axes[0].plot(t, steps[c], lw=1.0, label=c)
    for i, yr in enumerate(summary["y_ref"]):
        axes[0].axhline(yr, color="k", ls="--", lw=0.8, label="y_ref" if i == 0 else None)
    for i, ys in enumerate(summary.get("y_sr") or []):
        axes[0].axhline(ys, color="tab:red", ls=":", lw=0.8, label="y_sr" if i == 0 else None)
    axes[0].set_ylabel("y")
    axes[0].legend(loc="best", fontsize=8)
    for c in summary["input_columns"]:
        axes[1].plot(t, steps[c], lw=1.0, label=c)
    axes[1].set_ylabel("u")
    axes[1].set_xlabel("t")
    title = summary["name"]
    if summary.get("fault"):
        title += " (fault)"
    fig.suptitle(title)
    fig.tight_layout()
    path = d / "plot.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_sweep(csv_path) -> Path:
    """Heatmap of normalized cost from ``sweep.csv``; faulted cells are marked."""
    plt = _mpl()
    csv_path = Path(csv_path)
    with open(csv_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    S = sorted({float(r["S"]) for r in rows})
    la = sorted({float(r["lambda_alpha"]) for r in rows})
    grid = np.full((len(S), len(la)), np.nan)
    for r in rows:
        grid[S.index(float(r["S"])), la.index(float(r["lambda_alpha"]))] = float(r["normalized_cost"])
    ref = rows[0]["normalization"] if rows else ""
    fig, ax = plt.subplots(figsize=(6, 4.5))
    im = ax.imshow(grid, origin="lower", aspect="auto", cmap="viridis")
    for i in range(len(S)):
        for j in range(len(la)):
            txt = "fault" if not np.isfinite(grid[i, j]) else f"{grid[i, j]:.2f}"
            ax.text(j, i, txt, ha="center", va="center", fontsize=8,
                    color="red" if txt == "fault" else "w")
    ax.set_xticks(range(len(la)), [f"{v:.0e}" for v in la])
    ax.set_yticks(range(len(S)), [f"{v:g}" for v in S])
    ax.set_xlabel("lambda_alpha")
    ax.set_ylabel("S")
    ax.set_title(f"normalized closed-loop cost ({ref})")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    path = csv_path.with_suffix(".png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


# --- verbs ---------------------------------------------------------------------

def _seed_of(args) -> Optional[int]:
    if args.seed is None:
        return None
    if not 0 <= args.seed < 2 ** 64:
        raise ConfigError("--seed must be an unsigned 64-bit integer")
    return int(args.seed)


def execute_run(cfg: ExperimentConfig, out: Path, seed: Optional[int] = None,
                plot: bool = True) -> tuple[ClosedLoopLog, dict]:
    plan = build_plan(cfg, seed=seed)
    eq = reference_equilibrium(cfg)
    oracle = _oracle(cfg, plan, eq)
    t0 = time.perf_counter()
    log = run_experiment(plan, lyapunov_oracle=oracle,
                         hux_plant=plan.plant if plan.diagnostics.hux else None)
    wall = time.perf_counter() - t0
    log.write_csv(out)
    summary = _write_summary(out, cfg, log, {**eq, "wall_time": wall})
    if plot:
        plot_run(out)
    return log, summary


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args, cfg)
    log, summary = execute_run(cfg, out, _seed_of(args), _want_plot(cfg))
    _report(summary, out)
    return 0 if log.fault is None else 1


def cmd_baseline(args) -> int:
    from .arx import ArxMpcConfig, run_arx_baseline
    cfg = load_config(args.config)
    if not cfg.section("baseline") and "baseline" not in cfg.data:
        raise ConfigError(f"{cfg.source}: config has no 'baseline' section")
    bl = cfg.section("baseline")
    ctrl = cfg.section("controller")
    out = _out_dir(args, cfg)
    plan = build_plan(cfg, seed=_seed_of(args))
    acfg = ArxMpcConfig(L=int(ctrl["L"]), Q=ctrl["Q"], R=ctrl["R"], S=bl.get("S", ctrl["S"]),
                        R_delta=ctrl.get("R_delta", 0.0), y_ref=ctrl["y_ref"], U=_box(ctrl["U"]),
                        U_s=_box(ctrl["U_s"]), order=int(bl.get("order", 2)),
                        reg=float(bl.get("reg", 1.0)), n_apply=bl.get("n_apply"))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        t0 = time.perf_counter()
        log = run_arx_baseline(plan, acfg)
        wall = time.perf_counter() - t0
    log.write_csv(out)
    eq = reference_equilibrium(cfg)
    summary = _write_summary(out, cfg, log, {**eq, "wall_time": wall, "controller": "arx_baseline",
                                             "warnings": len(caught),
                                             "fallback_solves": sum(1 for s in log.solves
                                                                    if s.get("fallback") != "fit")})
    if _want_plot(cfg):
        plot_run(out)
    _report(summary, out)
    return 0 if log.fault is None else 1


def _sweep_cell(payload) -> dict:
    data, source, idx, S, la, cell_seed, out = payload
    from .config import validate
    cfg = validate(data, source)
    nz = dict(cfg.section("noise"))
    nz["seed_data"] = int(cell_seed % 2 ** 32)
    nz["seed_online"] = int((cell_seed >> 32) % 2 ** 32)
    t0 = time.perf_counter()
    try:
        cfg = cfg.replace(**{"controller.S": S, "controller.lambda_alpha": la, "noise": nz,
                             "diagnostics": {"theta_bar": False, "hux": False,
                                             "lyapunov": False}})
        log = run_experiment(build_plan(cfg))
    except Exception as exc:  # a cell must never take the sweep down
        return {"cell": idx, "S": S, "lambda_alpha": la, "cost": math.nan,
                "fault": f"{type(exc).__name__}: {exc}", "wall_time": time.perf_counter() - t0}
    if out is not None:
        log.write_csv(Path(out) / f"cell_{idx:03d}")
    cost = tracking_cost(cfg, log) if log.fault is None else math.nan
    return {"cell": idx, "S": S, "lambda_alpha": la, "cost": cost, "fault": log.fault or "",
            "wall_time": time.perf_counter() - t0}


def cell_seeds(base: int, count: int) -> list[int]:
    """Independent 64-bit seeds for each sweep cell from a base seed."""
    ss = np.random.SeedSequence(base)
    return [int(c.generate_state(1, np.uint64)[0]) for c in ss.spawn(count)]


def run_sweep(cfg: ExperimentConfig, out: Path, jobs: int = 1, seed: int = 0,
              keep_cells: bool = False, plot: bool = True) -> list[dict]:
    sw = cfg.section("sweep")
    if not sw:
        raise ConfigError(f"{cfg.source}: config has no 'sweep' section")
    cells = [(float(S), float(la)) for S in sw["S"] for la in sw["lambda_alpha"]]
    seeds = cell_seeds(seed, len(cells))
    out.mkdir(parents=True, exist_ok=True)
    payloads = [(cfg.to_dict(), cfg.source, i, S, la, seeds[i], str(out) if keep_cells else None)
                for i, (S, la) in enumerate(cells)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            rows = list(ex.map(_sweep_cell, payloads))
    else:
        rows = [_sweep_cell(p) for p in payloads]
    costs = np.array([r["cost"] for r in rows], float)
    J_mdl = sw.get("J_mdl")
    if J_mdl:
        ref, label = float(J_mdl), "J_mdl"
    else:
        finite = costs[np.isfinite(costs)]
        ref = float(finite.min()) if finite.size else math.nan
        label = "relative to best cell"
    for r in rows:
        r["normalized_cost"] = r["cost"] / ref if np.isfinite(r["cost"]) else math.nan
        r["normalization"] = label
    path = out / "sweep.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["cell", "S", "lambda_alpha", "cost", "normalized_cost",
                                           "normalization", "fault", "wall_time"])
        w.writeheader()
        for r in rows:
            w.writerow({k: (format(v, ".17g") if isinstance(v, float) else v) for k, v in r.items()})
    (out / "config.yaml").write_text(cfg.to_yaml())
    if plot:
        plot_sweep(path)
    return rows


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args, cfg)
    rows = run_sweep(cfg, out, jobs=args.jobs, seed=_seed_of(args) or 0, plot=_want_plot(cfg))
    n_fault = sum(1 for r in rows if r["fault"])
    print(f"sweep: {len(rows)} cells, {n_fault} faulted -> {out / 'sweep.csv'}")
    return 0


def cmd_plot(args) -> int:
    d = Path(args.dir)
    if (d / "sweep.csv").exists():
        print(plot_sweep(d / "sweep.csv"))
    else:
        print(plot_run(d))
    return 0


def cmd_verify(args) -> int:
    from . import verify
    names = [args.config] if args.config else bundled_configs()
    ok = verify.run_all(names, full=args.full, jobs=args.jobs, stream=sys.stdout)
    return 0 if ok else 1


def _report(summary: dict, out: Path) -> None:
    keys = ("name", "steps", "solves", "fault", "frozen_at", "tail_mean_abs_error",
            "solve_time_median", "closed_loop_cost")
    for k in keys:
        if k in summary:
            print(f"{k}: {summary[k]}")
    print(f"output: {out}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ddmpc", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="verb", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required,
                       help="config file or bundled config name")
        p.add_argument("--out", help="output directory (default: output.dir of the config)")
        p.add_argument("--jobs", type=int, default=1, help="parallel jobs (sweep cells)")
        p.add_argument("--seed", type=int, default=None,
                       help="unsigned 64-bit seed (run: excitation, sweep: cell seeds)")

    common(sub.add_parser("run", help="closed-loop experiment"))
    common(sub.add_parser("sweep", help="cost grid over S and lambda_alpha"))
    common(sub.add_parser("baseline", help="ARX identification baseline"))
    v = sub.add_parser("verify", help="check bundled configs and core properties")
    common(v, config_required=False)
    v.add_argument("--full", action="store_true",
                   help="also run the closed-loop CSTR checks (minutes)")
    pl = sub.add_parser("plot", help="redraw figures from a run or sweep directory")
    pl.add_argument("dir")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"run": cmd_run, "sweep": cmd_sweep, "baseline": cmd_baseline,
                "verify": cmd_verify, "plot": cmd_plot}
    try:
        return handlers[args.verb](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
