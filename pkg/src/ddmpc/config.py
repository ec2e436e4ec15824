"""YAML experiment configs: strict parsing with line-numbered errors.

A config has the sections ``plant``, ``controller``, ``experiment`` and
optionally ``noise``, ``diagnostics``, ``sweep``, ``baseline`` and
``output``.  Every tuning value the controller depends on must be written
out; unknown keys are errors.  :func:`parse_config` followed by
:meth:`ExperimentConfig.to_yaml` and another parse gives back an equal
object.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from .mpc import ControllerKind, MpcConfig, incremental_config
from .sets import Polytope
from .simulate import (DiagnosticsSpec, ExcitationSpec, ExperimentPlan, NoiseSpec,
                       WindowPolicy)
from .systems import AffineSystem, CstrParameters, cstr_plant


class ConfigError(ValueError):
    """Invalid config; the message starts with ``file:line:`` when known."""


class _Map(dict):
    """Mapping that remembers the source line of each key."""

    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        self.lines: dict = {}
        self.line: Optional[int] = None


class _LineLoader(yaml.SafeLoader):
    pass


def _construct_map(loader: _LineLoader, node: yaml.MappingNode) -> _Map:
    out = _Map()
    out.line = node.start_mark.line + 1
    for k_node, v_node in node.value:
        key = loader.construct_object(k_node, deep=True)
        if key in out:
            raise ConfigError(f"{loader.name}:{k_node.start_mark.line + 1}: duplicate key {key!r}")
        out[key] = loader.construct_object(v_node, deep=True)
        out.lines[key] = k_node.start_mark.line + 1
    return out


_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_map)


# allowed keys per section: True = required, False = optional
_SCHEMA: dict[str, dict[str, bool]] = {
    "": {"name": True, "plant": True, "controller": True, "experiment": True, "noise": False,
         "diagnostics": False, "sweep": False, "baseline": False, "output": False},
    "plant": {"type": True, "x0": True, "parameters": False, "A": False, "B": False,
              "C": False, "D": False, "e": False, "r": False, "x0_data": False},
    "controller": {"kind": True, "L": True, "n": True, "Q": True, "R": True, "S": True,
                   "lambda_alpha": True, "lambda_sigma": True, "y_ref": True, "U": True,
                   "U_s": True, "R_delta": False, "anchor_policy": False, "beta_alpha": False,
                   "beta_sigma": False, "eps_bar": False, "lambda_alpha_s": False,
                   "lambda_sigma_s": False},
    "experiment": {"N": True, "T": True, "excitation": True, "window_policy": False,
                   "stop_threshold": False, "offline": False},
    "excitation": {"low": True, "high": True, "steps": True, "seed": True, "mode": False},
    "noise": {"data": False, "input": False, "output": False, "disturbance": False,
              "seed_data": False, "seed_online": False},
    "diagnostics": {"theta_bar": False, "hux": False, "lyapunov": False},
    "sweep": {"S": True, "lambda_alpha": True, "J_mdl": False},
    "baseline": {"S": False, "order": False, "reg": False, "n_apply": False},
    "output": {"dir": False, "plot": False},
    "box": {"lower": True, "upper": True},
    "parameters": {"theta": False, "k": False, "M": False, "x_f": False, "x_c": False,
                   "alpha": False, "dt": False, "substeps": False},
}
_PLANT_TYPES = ("cstr", "affine")


@dataclass
class ExperimentConfig:
    """Validated config tree (plain Python values) plus its source path."""

    data: dict
    source: str = "<string>"
    _lines: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def name(self) -> str:
        return self.data["name"]

    def section(self, key: str) -> dict:
        return self.data.get(key) or {}

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    def replace(self, **updates) -> "ExperimentConfig":
        """Copy with dotted-path overrides, e.g. ``{"controller.S": 20}``."""
        d = self.to_dict()
        for path, value in updates.items():
            node = d
            *head, last = path.split(".")
            for k in head:
                node = node.setdefault(k, {})
            node[last] = value
        return validate(d, self.source)

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self.data == other.data


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_plain(x) for x in v]
    return v


def _where(src: str, m: Any, key: Optional[str] = None) -> str:
    line = None
    if isinstance(m, _Map):
        line = m.lines.get(key) if key is not None else m.line
        if line is None:
            line = m.line
    return f"{src}:{line}: " if line else f"{src}: "


def _check_keys(m, schema: str, src: str, ctx: str) -> None:
    if not isinstance(m, dict):
        raise ConfigError(f"{_where(src, m)}section '{ctx}' must be a mapping")
    allowed = _SCHEMA[schema]
    for k in m:
        if k not in allowed:
            raise ConfigError(f"{_where(src, m, k)}unknown key '{k}' in {ctx or 'top level'}")
    for k, req in allowed.items():
        if req and k not in m:
            raise ConfigError(f"{_where(src, m)}missing required key '{k}' in {ctx or 'top level'}")


def _num(m, key, src, ctx, kind=float, positive=False):
    v = m[key]
    try:
        if isinstance(v, bool):
            raise TypeError
        out = kind(v)
        if kind is int and out != v:
            raise TypeError
    except (TypeError, ValueError):
        what = "an integer" if kind is int else "a number"
        raise ConfigError(f"{_where(src, m, key)}'{ctx}.{key}' must be {what}") from None
    if positive and not out > 0:
        raise ConfigError(f"{_where(src, m, key)}'{ctx}.{key}' must be positive")
    return out


def _matrix(m, key, src, ctx):
    try:
        a = np.atleast_2d(np.asarray(m[key], float))
    except (TypeError, ValueError):
        raise ConfigError(f"{_where(src, m, key)}'{ctx}.{key}' must be a number or matrix") from None
    return a


def validate(raw: dict, src: str = "<string>") -> ExperimentConfig:
    """Check a loaded mapping against the schema; returns an :class:`ExperimentConfig`."""
    _check_keys(raw, "", src, "")
    for sec in ("plant", "controller", "experiment", "noise", "diagnostics", "sweep",
                "baseline", "output"):
        if sec in raw and raw[sec] is not None:
            _check_keys(raw[sec], sec, src, sec)
    plant = raw["plant"]
    if plant["type"] not in _PLANT_TYPES:
        raise ConfigError(f"{_where(src, plant, 'type')}plant.type must be one of {_PLANT_TYPES}")
    if plant["type"] == "affine":
        for k in ("A", "B", "C"):
            if k not in plant:
                raise ConfigError(f"{_where(src, plant)}missing required key '{k}' in plant (affine)")
    if "parameters" in plant:
        _check_keys(plant["parameters"], "parameters", src, "plant.parameters")
    ctrl = raw["controller"]
    try:
        ControllerKind(ctrl["kind"])
    except ValueError:
        raise ConfigError(f"{_where(src, ctrl, 'kind')}unknown controller.kind {ctrl['kind']!r}") from None
    _num(ctrl, "L", src, "controller", int, True)
    _num(ctrl, "n", src, "controller", int, True)
    for k in ("lambda_alpha", "lambda_sigma"):
        _num(ctrl, k, src, "controller", float, True)
    for k in ("Q", "R", "S", "y_ref"):
        _matrix(ctrl, k, src, "controller")
    for k in ("U", "U_s"):
        _check_keys(ctrl[k], "box", src, f"controller.{k}")
    if plant["type"] == "cstr" and "R_delta" not in ctrl:
        raise ConfigError(f"{_where(src, ctrl)}missing required key 'R_delta' in controller "
                          "(incremental-input plant)")
    exp = raw["experiment"]
    _num(exp, "N", src, "experiment", int, True)
    _num(exp, "T", src, "experiment", int, True)
    _check_keys(exp["excitation"], "excitation", src, "experiment.excitation")
    if "offline" in exp:
        _check_keys(exp["offline"], "excitation", src, "experiment.offline")
    if "window_policy" in exp:
        try:
            WindowPolicy(exp["window_policy"])
        except ValueError:
            raise ConfigError(f"{_where(src, exp, 'window_policy')}unknown window_policy "
                              f"{exp['window_policy']!r}") from None
    if raw.get("sweep"):
        sw = raw["sweep"]
        for k in ("S", "lambda_alpha"):
            if not isinstance(sw[k], list) or not sw[k]:
                raise ConfigError(f"{_where(src, sw, k)}sweep.{k} must be a non-empty list")
    cfg = ExperimentConfig(_plain(raw), src)
    try:
        build_plan(cfg)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{src}: {exc}") from None
    return cfg


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    loader = _LineLoader(text)
    loader.name = source
    try:
        raw = loader.get_single_data()
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f"{mark.line + 1}:" if mark is not None else ""
        raise ConfigError(f"{source}:{line} YAML syntax error: {getattr(exc, 'problem', exc)}") from None
    finally:
        loader.dispose()
    if raw is None:
        raise ConfigError(f"{source}: empty config")
    return validate(raw, source)


def bundled_configs() -> list[str]:
    root = resources.files("ddmpc") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def load_config(path_or_name: str) -> ExperimentConfig:
    """Load a file path, or a bundled config by name (e.g. ``cstr_dd_mpc``)."""
    p = Path(path_or_name)
    if p.exists():
        return parse_config(p.read_text(), str(p))
    res = resources.files("ddmpc") / "configs" / f"{path_or_name}.yaml"
    if res.is_file():
        return parse_config(res.read_text(), f"<bundled>/{path_or_name}.yaml")
    raise ConfigError(f"{path_or_name}: no such file or bundled config "
                      f"(bundled: {', '.join(bundled_configs())})")


# --- config -> objects -------------------------------------------------------

def _box(d: dict) -> Polytope:
    return Polytope.box(np.atleast_1d(np.asarray(d["lower"], float)),
                        np.atleast_1d(np.asarray(d["upper"], float)))


def build_plant(cfg: ExperimentConfig):
    pl = cfg.section("plant")
    if pl["type"] == "cstr":
        return cstr_plant(CstrParameters(**pl.get("parameters", {})))
    A = np.atleast_2d(np.asarray(pl["A"], float))
    B = np.atleast_2d(np.asarray(pl["B"], float))
    C = np.atleast_2d(np.asarray(pl["C"], float))
    n, m, p = A.shape[0], B.shape[1], C.shape[0]
    D = np.atleast_2d(np.asarray(pl.get("D", np.zeros((p, m))), float))
    return AffineSystem(A, B, C, D, e=np.asarray(pl.get("e", np.zeros(n)), float).ravel(),
                        r=np.asarray(pl.get("r", np.zeros(p)), float).ravel())


def build_mpc_config(cfg: ExperimentConfig, **overrides) -> MpcConfig:
    c = dict(cfg.section("controller"))
    c.update(overrides)
    kw = {k: c[k] for k in ("anchor_policy", "beta_alpha", "beta_sigma", "eps_bar",
                            "lambda_alpha_s", "lambda_sigma_s") if k in c}
    if cfg.section("plant")["type"] == "cstr":
        return incremental_config(L=c["L"], n=c["n"], Q=c["Q"], R=c["R"], S=c["S"],
                                  R_delta=c["R_delta"], lambda_alpha=float(c["lambda_alpha"]),
                                  lambda_sigma=float(c["lambda_sigma"]), y_ref=c["y_ref"],
                                  U=_box(c["U"]), U_s=_box(c["U_s"]), **kw)
    return MpcConfig(L=c["L"], n=c["n"], Q=np.atleast_2d(np.asarray(c["Q"], float)),
                     R=np.atleast_2d(np.asarray(c["R"], float)),
                     S=np.atleast_2d(np.asarray(c["S"], float)),
                     lambda_alpha=float(c["lambda_alpha"]), lambda_sigma=float(c["lambda_sigma"]),
                     y_ref=np.atleast_1d(np.asarray(c["y_ref"], float)),
                     U=_box(c["U"]), U_s=_box(c["U_s"]), **kw)


def _excitation(d: dict, seed: Optional[int] = None) -> ExcitationSpec:
    return ExcitationSpec(d["low"], d["high"], int(d["steps"]),
                          int(d["seed"] if seed is None else seed), d.get("mode", "direct"))


def build_plan(cfg: ExperimentConfig, seed: Optional[int] = None, **controller) -> ExperimentPlan:
    """Experiment plan; ``seed`` overrides the excitation seed, ``controller`` any tuning key."""
    pl, exp = cfg.section("plant"), cfg.section("experiment")
    mcfg = build_mpc_config(cfg, **controller)
    nz = cfg.section("noise")
    noise = NoiseSpec(**{k: nz[k] for k in nz})
    dg = cfg.section("diagnostics")
    return ExperimentPlan(
        plant=build_plant(cfg), x0=np.asarray(pl["x0"], float),
        kind=ControllerKind(cfg.section("controller")["kind"]), config=mcfg,
        N=int(exp["N"]), T=int(exp["T"]), excitation=_excitation(exp["excitation"], seed),
        noise=noise, window_policy=exp.get("window_policy", "always"),
        stop_threshold=float(exp.get("stop_threshold", 1e-5)),
        diagnostics=DiagnosticsSpec(**dg),
        offline=_excitation(exp["offline"], None) if "offline" in exp else None,
        x0_data=np.asarray(pl["x0_data"], float) if "x0_data" in pl else None,
        name=cfg.name)
