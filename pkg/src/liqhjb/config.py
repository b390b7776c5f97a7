"""Flat key=value run configuration.

Model keys (the ModelParams symbols, with lambda for lam, plus the utility) may appear at the top
of the file or under ``[model]``; sampler, solver and Monte Carlo settings
live in ``[sampler]``, ``[solver]`` and ``[mc]``. Unknown sections or keys
are errors; missing keys take their defaults. Example::

    kappa = 0.004
    beta = 0.3
    utility = power
    gamma = 0.5

    [sampler]
    W_max = 8.0

    [solver]
    seeds = 0,1,2
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .market import DEFAULTS, ModelParams, UtilitySpec
from .montecarlo import PathConfig
from .policy_iteration import DEFAULT_BOX, GridSpec, IterationConfig


class ConfigError(ValueError):
    pass


_TOP = "__top__"   # holds keys written before any section header


# config key -> ModelParams field
MODEL_KEYS = {k: k for k in DEFAULTS if k != "lam"}
MODEL_KEYS["lambda"] = "lam"
UTILITY_KEYS = ("utility", "gamma", "eta")
SAMPLER_KEYS = ("W_min", "W_max", "L_min", "L_max", "n_interior", "n_terminal", "adaptive",
                "refresh_every", "pool_size", "keep_k", "n_validation")
SOLVER_KEYS = ("max_outer_iters", "pe_steps", "pi_steps", "stop_tol", "optimizer", "hidden_size",
               "learning_rate", "w_term", "seeds", "grid_W", "grid_L", "grid_n")
MC_KEYS = ("n_paths", "substeps", "seed", "cost_mode", "W0", "L0", "antithetic")


@dataclass
class RunConfig:
    params: ModelParams = field(default_factory=ModelParams)
    utility: UtilitySpec = field(default_factory=UtilitySpec)
    iteration: IterationConfig = field(default_factory=IterationConfig)
    paths: PathConfig = field(default_factory=PathConfig)
    source: str = ""

    def canonical(self) -> dict:
        it = self.iteration
        box = it.box
        return {
            "model": {k: getattr(self.params, f) for k, f in sorted(MODEL_KEYS.items())},
            "utility": {"utility": self.utility.kind, "gamma": self.utility.gamma, "eta": self.utility.eta},
            "sampler": {"W_min": box.W_min, "W_max": box.W_max, "L_min": box.L_min, "L_max": box.L_max,
                        "n_interior": it.n_interior, "n_terminal": it.n_terminal, "adaptive": it.adaptive,
                        "refresh_every": it.refresh_every, "pool_size": it.pool_size, "keep_k": it.keep_k,
                        "n_validation": it.n_validation},
            "solver": {"max_outer_iters": it.max_outer_iters, "pe_steps": it.pe_steps, "pi_steps": it.pi_steps,
                       "stop_tol": it.stop_tol, "optimizer": it.optimizer, "hidden_size": it.hidden_size,
                       "learning_rate": it.learning_rate, "w_term": it.w_term, "seeds": list(it.seeds),
                       "grid_W": list(it.grid.W), "grid_L": list(it.grid.L), "grid_n": list(it.grid.n)},
            "mc": {k: getattr(self.paths, k) for k in MC_KEYS},
        }

    def hash(self) -> str:
        """Stable under key order and formatting of the source file."""
        blob = json.dumps(self.canonical(), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _bool(key, v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {v!r}")


def _num(key, v: str, kind=float):
    try:
        x = kind(v)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {v!r}") from None
    return x


def _tuple(key, v: str, kind=float) -> tuple:
    parts = [p for p in v.replace(" ", "").split(",") if p]
    if not parts:
        raise ConfigError(f"{key}: empty list")
    return tuple(_num(key, p, kind) for p in parts)


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str      # keys are case-sensitive (sigma_S, W_max, ...)
    try:
        cp.read_string(f"[{_TOP}]\n" + text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    known = {_TOP, "model", "sampler", "solver", "mc"}
    for sec in cp.sections():
        if sec not in known:
            raise ConfigError(f"unknown section [{sec}]")
    model = dict(cp[_TOP])
    if cp.has_section("model"):
        for k, v in cp["model"].items():
            if k in model:
                raise ConfigError(f"key {k!r} given both at top level and in [model]")
            model[k] = v
    for k in model:
        if k not in MODEL_KEYS and k not in UTILITY_KEYS:
            raise ConfigError(f"unknown key {k!r}")
    pkw = {MODEL_KEYS[k]: _num(k, v) for k, v in model.items() if k in MODEL_KEYS}
    ukw = {}
    if "utility" in model:
        ukw["kind"] = model["utility"].strip().lower()
    for k in ("gamma", "eta"):
        if k in model:
            ukw[k] = _num(k, model[k])
    try:
        params = ModelParams(**pkw)
        utility = UtilitySpec(**ukw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    it = IterationConfig()
    box_kw, it_kw = {}, {}
    if cp.has_section("sampler"):
        for k, v in cp["sampler"].items():
            if k not in SAMPLER_KEYS:
                raise ConfigError(f"unknown key {k!r} in [sampler]")
            if k in ("W_min", "W_max", "L_min", "L_max"):
                box_kw[k] = _num(k, v)
            elif k == "adaptive":
                it_kw[k] = _bool(k, v)
            else:
                it_kw[k] = _num(k, v, int)
    grid_kw = {}
    if cp.has_section("solver"):
        for k, v in cp["solver"].items():
            if k not in SOLVER_KEYS:
                raise ConfigError(f"unknown key {k!r} in [solver]")
            if k in ("stop_tol", "learning_rate", "w_term"):
                it_kw[k] = _num(k, v)
            elif k == "optimizer":
                it_kw[k] = v.strip()
            elif k == "seeds":
                it_kw[k] = _tuple(k, v, int)
            elif k in ("grid_W", "grid_L"):
                grid_kw[k[-1]] = _tuple(k, v)
            elif k == "grid_n":
                grid_kw["n"] = _tuple(k, v, int)
            else:
                it_kw[k] = _num(k, v, int)
    try:
        box = replace(DEFAULT_BOX, T=params.T, **box_kw)
        grid = replace(GridSpec(), **grid_kw)
        it = replace(it, box=box, grid=grid, **it_kw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None

    mc_kw = {}
    if cp.has_section("mc"):
        for k, v in cp["mc"].items():
            if k not in MC_KEYS:
                raise ConfigError(f"unknown key {k!r} in [mc]")
            if k in ("n_paths", "substeps", "seed"):
                mc_kw[k] = _num(k, v, int)
            elif k == "antithetic":
                mc_kw[k] = _bool(k, v)
            elif k == "cost_mode":
                mc_kw[k] = v.strip()
            else:
                mc_kw[k] = _num(k, v)
    try:
        paths = PathConfig(**mc_kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(params, utility, it, paths, source)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), str(path))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def dump_config(cfg: RunConfig) -> str:
    """Text that ``parse_config`` maps back to an equal configuration."""
    c = cfg.canonical()
    lines = [f"{k} = {_fmt(v)}" for k, v in c["model"].items()]
    lines += [f"{k} = {_fmt(v)}" for k, v in c["utility"].items()]
    for sec in ("sampler", "solver", "mc"):
        lines += ["", f"[{sec}]"] + [f"{k} = {_fmt(v)}" for k, v in c[sec].items()]
    return "\n".join(lines) + "\n"

