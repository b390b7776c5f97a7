"""Command-line entry point: ``liqhjb solve|validate|sweep|mc-check``.

Exit codes: 0 success, 1 usage/config/runtime error, 2 non-convergence,
3 validation failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import subprocess
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from . import __version__
from . import montecarlo as mc
from . import net as nn
from . import oracles
from . import policy_iteration as pi
from .config import ConfigError, RunConfig, load_config
from .market import UtilitySpec

log = logging.getLogger("liqhjb")

EXIT_OK, EXIT_ERROR, EXIT_NONCONVERGED, EXIT_VALIDATION = 0, 1, 2, 3
OUT_ENV = "LIQHJB_OUT"
SWEEP_PARAMS = ("beta", "kappa", "theta_bar")
AXES = ("t", "W", "L", "theta_bar")
DEFAULT_SLICE = dict(W=2.5, L=0.6, t=0.5)


@dataclass
class SweepSpec:
    param: str
    values: tuple
    slice: dict = field(default_factory=lambda: dict(DEFAULT_SLICE))
    axis: str = "t"

    def __post_init__(self):
        if self.param not in SWEEP_PARAMS:
            raise ValueError(f"sweep parameter must be one of {SWEEP_PARAMS}")
        if not self.values:
            raise ValueError("sweep values must be non-empty")
        if self.axis not in AXES:
            raise ValueError(f"axis must be one of {AXES}")
        if self.axis == "theta_bar" and self.param != "theta_bar":
            raise ValueError("axis theta_bar requires sweeping theta_bar")

    def check_inside(self, box, T):
        s = self.slice
        if not (box.W_min <= s["W"] <= box.W_max and box.L_min <= s["L"] <= box.L_max and 0 <= s["t"] <= T):
            raise ValueError(f"slice {s} lies outside the training box")


@dataclass
class RunManifest:
    config_hash: str
    version: str
    seeds: list
    command: str
    started: str = ""
    finished: str = ""
    outputs: list = field(default_factory=list)

    def write(self, out: Path) -> Path:
        path = out / "manifest.json"
        self.outputs = sorted(set(self.outputs))
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n")
        tmp.replace(path)
        return path


def version_string() -> str:
    try:
        sha = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        sha = ""
    return f"{__version__}+g{sha}" if sha else __version__


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------


def _parse_slice(text: str) -> dict:
    out = dict(DEFAULT_SLICE)
    for part in text.split(","):
        if not part.strip():
            continue
        k, sep, v = part.partition("=")
        k = k.strip()
        if not sep or k not in out:
            raise ValueError(f"bad slice entry {part!r}; expected W=..,L=..,t=..")
        out[k] = float(v)
    return out


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.utility or args.gamma is not None or args.eta is not None:
        u = cfg.utility
        cfg.utility = UtilitySpec(args.utility or u.kind, args.gamma if args.gamma is not None else u.gamma,
                                  args.eta if args.eta is not None else u.eta)
    seeds = None
    if args.seed_list:
        seeds = tuple(int(s) for s in args.seed_list.split(",") if s.strip())
    elif args.seeds:
        seeds = tuple(range(args.seeds))
    if seeds:
        cfg.iteration = cfg.iteration.with_(seeds=seeds)
    if getattr(args, "paths", None):
        cfg.paths = replace(cfg.paths, n_paths=args.paths)
    if getattr(args, "cost_mode", None):
        cfg.paths = replace(cfg.paths, cost_mode=args.cost_mode)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or "liqhjb-out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_rows(path: Path, header, rows):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(pi.SCHEMA + "\n")
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    tmp.replace(path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_solve(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    seeds = list(cfg.iteration.seeds)
    man = RunManifest(cfg.hash(), version_string(), seeds, "solve", _now())
    results, failed = {}, {}
    for s in seeds:
        try:
            results[s] = pi.run(cfg.params, cfg.utility, cfg.iteration, seed=s)
        except pi.DivergenceError as exc:
            failed[s] = exc
            exc.trace.to_csv(out / f"trace_seed{s}.csv")
            man.outputs.append(f"trace_seed{s}.csv")
            log.error("seed %d diverged: %s", s, exc)
    for s, res in results.items():
        pi.export_surfaces(out / f"surface_seed{s}.csv", res.policy, res.value)
        res.trace.to_csv(out / f"trace_seed{s}.csv")
        nn.save_checkpoint(res.value_net, out / f"value_net_seed{s}.npz")
        nn.save_checkpoint(res.control_net, out / f"control_net_seed{s}.npz")
        man.outputs += [f"surface_seed{s}.csv", f"trace_seed{s}.csv", f"value_net_seed{s}.npz",
                        f"control_net_seed{s}.npz"]
    if len(results) >= 2:
        om = np.stack([r.policy.values for r in results.values()])
        Q = np.stack([r.value.values for r in results.values()])
        ens = pi.Ensemble(results, {s: str(e) for s, e in failed.items()}, om.mean(0), om.min(0), om.max(0),
                          Q.mean(0), Q.min(0), Q.max(0))
        ens.to_csv(out / "bands.csv")
        man.outputs.append("bands.csv")
    man.finished = _now()
    man.write(out)
    for s, res in results.items():
        print(f"seed {s}: {res.trace.stop_reason} after {res.trace.iterations} iterations")
    if failed or any(r.trace.stop_reason != "tolerance" for r in results.values()):
        return EXIT_NONCONVERGED
    return EXIT_OK


def merton_errors(Q, omega, X, sol: oracles.MertonSolution):
    """Max relative value error and max absolute policy error against the closed form."""
    Qs = sol.value(X[:, 0], X[:, 2])
    ws = sol.policy(X[:, 0], X[:, 2])
    ev = np.abs(Q - Qs) / np.abs(Qs)
    ep = np.abs(omega - ws)
    return ev, ep


def cmd_validate(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    params = cfg.params.frictionless()
    seed = cfg.iteration.seeds[0]
    man = RunManifest(cfg.hash(), version_string(), [seed], "validate", _now())
    res = pi.run(params, cfg.utility, cfg.iteration, seed=seed)
    sol = oracles.merton_solution(cfg.utility, params)
    grid = cfg.iteration.grid
    X = grid.points(params.T)
    Wax, Lax, tax = grid.axes(params.T)
    shape = (Wax.size, Lax.size, tax.size)
    jL = int(np.argmin(np.abs(Lax - args.slice["L"])))
    k0 = 0
    kmid = int(np.argmin(np.abs(tax - 0.5 * params.T)))
    rows = []
    logerr = []
    for k, (Q, om) in enumerate(zip(res.trace.values, res.trace.policies), start=1):
        ev, ep = merton_errors(Q, om, X, sol)
        ev, ep = ev.reshape(shape), ep.reshape(shape)
        le = math.log10(max(float(ev.max()), 1e-300))
        logerr.append(le)
        rows.append([k, le, math.log10(max(ev[:, jL, k0].max(), 1e-300)),
                     math.log10(max(ev[:, jL, kmid].max(), 1e-300)),
                     math.log10(max(ep[:, jL, k0].max(), 1e-300)), math.log10(max(ep[:, jL, kmid].max(), 1e-300)),
                     res.trace.records[k - 1].rel_change])
    _write_rows(out / "validate.csv", ["iteration", "log10_value_err", "log10_value_err_t0", "log10_value_err_tmid",
                                       "log10_policy_err_t0", "log10_policy_err_tmid", "rel_change"], rows)
    # final comparison on a 21 x 21 (W, t) grid at the L slice
    W2, t2 = np.meshgrid(np.linspace(*grid.W, 21), np.linspace(0.0, params.T, 21), indexing="ij")
    P = np.stack([W2.ravel(), np.full(W2.size, Lax[jL]), t2.ravel()], axis=1)
    ev, ep = merton_errors(nn.forward(res.value_net, P), nn.forward(res.control_net, P), P, sol)
    checks = [
        ("policy_sup_err", float(ep.max()), 0.02, P[int(np.argmax(ep))]),
        ("value_rel_err", float(ev.max()), 0.01, P[int(np.argmax(ev))]),
    ]
    trend = len(logerr) >= 3 and logerr[1] <= logerr[0] and logerr[2] <= logerr[1]
    man.outputs.append("validate.csv")
    man.finished = _now()
    man.write(out)
    ok = trend
    for name, val, tol, where in checks:
        passed = val < tol
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name} = {val:.3e} (< {tol}) worst at W={where[0]:.4g}, t={where[2]:.4g}")
    print(f"{'PASS' if trend else 'FAIL'} log10 value error non-increasing over first 3 iterations: "
          + ", ".join(f"{x:.3f}" for x in logerr[:3]))
    print(f"stopped: {res.trace.stop_reason} after {res.trace.iterations} iterations")
    return EXIT_OK if ok else EXIT_VALIDATION


def _axis_points(spec: SweepSpec, grid: pi.GridSpec, T: float):
    s = spec.slice
    if spec.axis == "t":
        v = np.linspace(0.0, T, 21)
        return v, np.stack([np.full(v.size, s["W"]), np.full(v.size, s["L"]), v], 1)
    if spec.axis == "W":
        v = np.linspace(*grid.W, 21)
        return v, np.stack([v, np.full(v.size, s["L"]), np.full(v.size, s["t"])], 1)
    if spec.axis == "L":
        v = np.linspace(*grid.L, 21)
        return v, np.stack([np.full(v.size, s["W"]), v, np.full(v.size, s["t"])], 1)
    return None, np.array([[s["W"], s["L"], s["t"]]])


def cmd_sweep(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    spec = SweepSpec(args.sweep_param, tuple(float(v) for v in args.sweep_values.split(",") if v.strip()),
                     args.slice, args.axis)
    spec.check_inside(cfg.iteration.box, cfg.params.T)
    seeds = list(cfg.iteration.seeds)
    man = RunManifest(cfg.hash(), version_string(), seeds, "sweep", _now())
    rows, code = [], EXIT_OK
    warm = {}
    for value in spec.values:
        params = cfg.params.with_(**{spec.param: value})
        axis_vals, X = _axis_points(spec, cfg.iteration.grid, params.T)
        omegas = []
        for s in seeds:
            try:
                v0, c0 = warm.get(s, (None, None)) if args.warm_start else (None, None)
                res = pi.run(params, cfg.utility, cfg.iteration, seed=s, value_net=v0, control_net=c0)
            except (pi.DivergenceError, FloatingPointError, np.linalg.LinAlgError) as exc:
                log.error("%s=%g seed %d failed: %s", spec.param, value, s, exc)
                code = EXIT_ERROR
                continue
            warm[s] = (res.value_net, res.control_net)
            omegas.append(nn.forward(res.control_net, X))
        if not omegas:
            continue
        om = np.stack(omegas)
        merton = oracles.merton_policy(cfg.utility, params, X[:, 0], X[:, 2]).omega
        axv = axis_vals if axis_vals is not None else np.array([value])
        for i, a in enumerate(axv):
            rows.append([float(a), value, float(om[:, i].mean()), float(om[:, i].min()), float(om[:, i].max()),
                         float(np.broadcast_to(merton, (X.shape[0],))[i])])
    name = f"sweep_{spec.param}_{spec.axis}.csv"
    _write_rows(out / name, ["axis_value", "sweep_value", "omega_mean", "omega_min", "omega_max", "merton_line"],
                rows)
    man.outputs.append(name)
    man.finished = _now()
    man.write(out)
    print(f"wrote {out / name} ({len(rows)} rows)")
    return code


def read_surface(path) -> tuple[pi.PolicySurface, pi.ValueSurface]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"surface file not found: {path}")
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if first != pi.SCHEMA:
            raise ValueError(f"{path}: unsupported schema line {first!r}")
        reader = csv.DictReader(fh)
        if reader.fieldnames != pi.SURFACE_HEADER:
            raise ValueError(f"{path}: expected columns {pi.SURFACE_HEADER}")
        recs = list(reader)
    arr = np.array([[float(r[k]) for k in ("W", "L", "t", "omega", "Q")] for r in recs])
    W, L, t = (np.unique(arr[:, i]) for i in range(3))
    if W.size * L.size * t.size != arr.shape[0]:
        raise ValueError(f"{path}: rows do not form a complete tensor grid")
    order = np.lexsort((arr[:, 2], arr[:, 1], arr[:, 0]))
    arr = arr[order]
    meta = {"seed": recs[0]["seed"], "iteration": recs[0]["iteration"]}
    return pi.PolicySurface(W, L, t, arr[:, 3], meta), pi.ValueSurface(W, L, t, arr[:, 4], meta)


def value_at(surface: pi.ValueSurface, W, L, t) -> float:
    method = "cubic" if min(surface.values.shape) >= 4 else "linear"
    f = RegularGridInterpolator((surface.W, surface.L, surface.t), surface.values, method=method)
    return float(f([[W, L, t]])[0])


def cmd_mc_check(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    policy, value = read_surface(args.surface)
    pc = cfg.paths
    if args.mc_seed is not None:
        pc = replace(pc, seed=args.mc_seed)
    man = RunManifest(cfg.hash(), version_string(), [pc.seed], "mc-check", _now())
    stats = mc.evaluate_policy_surface(policy, cfg.params, cfg.utility, pc)
    q = value_at(value, pc.W0, pc.L0, pc.t0)
    z = stats.z_score(q)
    _write_rows(out / "mc_check.csv",
                ["n_paths", "seed", "cost_mode", "W0", "L0", "mc_mean", "std_error", "solver_Q", "z_score",
                 "n_absorbed"],
                [[pc.n_paths, pc.seed, pc.cost_mode, pc.W0, pc.L0, repr(stats.mean_utility), repr(stats.std_error),
                  repr(q), repr(z), stats.n_absorbed]])
    man.outputs.append("mc_check.csv")
    man.finished = _now()
    man.write(out)
    print(f"MC {stats.mean_utility:.6f} +- {stats.std_error:.2e} vs solver {q:.6f}: {z:+.2f} SE "
          f"(n_paths={pc.n_paths}, seed={pc.seed})")
    return EXIT_VALIDATION if abs(z) > 4 else EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./liqhjb-out)")
    common.add_argument("--seeds", type=int, help="use seeds 0..N-1")
    common.add_argument("--seed-list", help="comma-separated seeds")
    common.add_argument("--utility", choices=("power", "log", "exp"))
    common.add_argument("--gamma", type=float)
    common.add_argument("--eta", type=float)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="liqhjb", description="Deep policy iteration for the liquidity/cost HJB.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="train and export surfaces, trace and checkpoints")
    v = sub.add_parser("validate", parents=[common], help="frictionless run compared with the closed form")
    v.add_argument("--slice", type=_parse_slice, default=dict(DEFAULT_SLICE))
    s = sub.add_parser("sweep", parents=[common], help="one solve per parameter value, figure-ready CSV")
    s.add_argument("--sweep-param", required=True, choices=SWEEP_PARAMS)
    s.add_argument("--sweep-values", required=True)
    s.add_argument("--axis", default="t", choices=AXES)
    s.add_argument("--slice", type=_parse_slice, default=dict(DEFAULT_SLICE))
    s.add_argument("--warm-start", action="store_true")
    m = sub.add_parser("mc-check", parents=[common], help="Monte Carlo check of an exported surface")
    m.add_argument("--surface", required=True)
    m.add_argument("--paths", type=int)
    m.add_argument("--cost-mode", choices=mc.COST_MODES)
    m.add_argument("--mc-seed", type=int)
    return p


COMMANDS = {"solve": cmd_solve, "validate": cmd_validate, "sweep": cmd_sweep, "mc-check": cmd_mc_check}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:     # argparse usage errors exit with 2; map them to 1
        return EXIT_OK if exc.code == 0 else EXIT_ERROR
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as exc:  # noqa: BLE001 - never surface a traceback as the exit path
        log.debug("unhandled", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
