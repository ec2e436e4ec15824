"""Self-check suite behind ``ddmpc verify``.

Quick checks (seconds): bundled configs parse and round-trip, random QPs
meet the KKT tolerance, the Hankel parametrization reproduces simulated
trajectories, and the affine toy loop converges.  ``full=True`` adds the
closed-loop CSTR runs.
"""
from __future__ import annotations

import sys
import tempfile
import time
from pathlib import Path
from typing import Callable

import numpy as np

from .config import load_config, parse_config
from .qp import QpProblem, TOL_KKT, solve_qp
from .systems import random_affine_system, simulate_affine
from .trajdata import affine_lemma_represent, affine_lemma_generate, pe_check_affine


def random_strictly_convex_qp(rng: np.random.Generator, n: int = None) -> QpProblem:
    n = n or int(rng.integers(2, 30))
    M = rng.standard_normal((n, n))
    H = M @ M.T + 0.1 * np.eye(n)
    f = rng.standard_normal(n)
    n_eq = int(rng.integers(0, max(1, n // 3)))
    n_in = int(rng.integers(0, 2 * n))
    z0 = rng.standard_normal(n)
    A_eq = rng.standard_normal((n_eq, n))
    A_in = rng.standard_normal((n_in, n))
    b_in = A_in @ z0 + rng.uniform(0, 1, n_in)
    return QpProblem(H, f, 0.0, A_eq, A_eq @ z0, A_in, b_in)


def check_qp(count: int = 50, seed: int = 0) -> str:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(count):
        sol = solve_qp(random_strictly_convex_qp(rng))
        if not sol.optimal:
            raise AssertionError(f"QP not solved: {sol.status}")
        worst = max(worst, sol.kkt_residuals.max())
    if worst > TOL_KKT:
        raise AssertionError(f"KKT residual {worst:.2e} above {TOL_KKT:.0e}")
    return f"{count} QPs, worst KKT residual {worst:.1e}"


def check_lemma(count: int = 20, seed: int = 1) -> str:
    rng = np.random.default_rng(seed)
    worst = 0.0
    done = 0
    while done < count:
        n = int(rng.integers(1, 5))
        m = int(rng.integers(1, 3))
        p = int(rng.integers(1, 3))
        sys_ = random_affine_system(rng, n, m, p)
        if not (sys_.is_controllable() and sys_.is_observable()):
            continue
        L = 6
        N = (m + 1) * (L + n) + 20
        data = simulate_affine(sys_, rng.standard_normal(n), rng.uniform(-1, 1, (N, m)))
        if not pe_check_affine(data.inputs, data.states, L).satisfied:
            continue
        cand = simulate_affine(sys_, rng.standard_normal(n), rng.uniform(-1, 1, (L, m)))
        rep = affine_lemma_represent(data, cand)
        if rep.alpha is None:
            raise AssertionError(f"trajectory not represented (residual {rep.residual:.2e})")
        gen = affine_lemma_generate(data, rep.alpha, L)
        worst = max(worst, rep.residual, float(np.max(np.abs(gen.outputs - cand.outputs))))
        done += 1
    if worst > 1e-8:
        raise AssertionError(f"residual {worst:.2e}")
    return f"{count} systems, worst residual {worst:.1e}"


def check_config(name: str) -> str:
    cfg = load_config(name)
    again = parse_config(cfg.to_yaml(), cfg.source)
    if again != cfg or parse_config(again.to_yaml()) != again:
        raise AssertionError("round trip changed the config")
    return "parse + round trip"


def check_affine_toy() -> str:
    from .cli import execute_run
    cfg = load_config("affine_toy")
    with tempfile.TemporaryDirectory() as d:
        log, summary = execute_run(cfg, Path(d), plot=False)
    V = log.diag_series("V")
    if log.fault or not np.isfinite(V[-1]) or V[-1] > 1e-8:
        raise AssertionError(f"final V = {V[-1]:.2e}, fault = {log.fault}")
    return f"final V {V[-1]:.1e}"


def check_cstr(name: str, predicate: Callable[[float], bool], expect: str) -> Callable[[], str]:
    def run() -> str:
        from .cli import execute_run
        cfg = load_config(name)
        with tempfile.TemporaryDirectory() as d:
            log, summary = execute_run(cfg, Path(d), plot=False)
        err = summary["tail_mean_abs_error"]
        if log.fault or not predicate(err):
            raise AssertionError(f"tail error {err:.4f} (expected {expect}), fault = {log.fault}")
        return f"tail error {err:.4f}"
    return run


def run_all(names, full: bool = False, jobs: int = 1, stream=sys.stdout) -> bool:
    checks: list[tuple[str, Callable[[], str]]] = [
        (f"config {n}", (lambda n=n: check_config(n))) for n in names]
    checks += [("qp kkt", check_qp), ("affine lemma", check_lemma),
               ("affine toy convergence", check_affine_toy)]
    if full:
        checks += [("cstr tracking", check_cstr("cstr_dd_mpc", lambda e: e <= 0.01, "<= 0.01")),
                   ("cstr static data", check_cstr("cstr_static_data", lambda e: e >= 0.3, ">= 0.3"))]
    ok = True
    for label, fn in checks:
        t0 = time.perf_counter()
        try:
            msg = fn()
            status = "PASS"
        except Exception as exc:  # report and keep going
            msg, status, ok = f"{type(exc).__name__}: {exc}", "FAIL", False
        print(f"[{status}] {label}: {msg} ({time.perf_counter() - t0:.1f}s)", file=stream)
    return ok
