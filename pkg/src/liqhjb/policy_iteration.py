"""Deep policy iteration: alternate value fitting and control improvement.

Each outer iteration k

  1. fits the value network Q_k to the PDE under the frozen control
     (policy evaluation),
  2. compares Q_k with Q_{k-1} on a fixed validation grid and stops when the
     mean relative change is below ``stop_tol``,
  3. otherwise fits the control network to maximise the generator applied to
     Q_k (policy improvement).

Two inner optimisers are available. "lm" (default) runs Levenberg-Marquardt
on the sum-of-squares form of both inner problems over a fixed collocation
batch; "adam" runs plain Adam on fresh uniform batches.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import hjb
from . import net as nn
from .collocation import CollocationBatch, TrainingBox, adaptive_resample, sample_uniform
from .market import ModelParams, UtilitySpec

log = logging.getLogger(__name__)

SURFACE_HEADER = ["W", "L", "t", "omega", "Q", "seed", "iteration"]
TRACE_HEADER = ["iteration", "pde_loss", "validation_loss", "improvement", "rel_change",
                "value_mean", "residual_sup", "wall_seconds"]
SCHEMA = "# liqhjb-csv/1"

# held-out validation batch stream, separate from the training streams
_VALIDATION_STREAM = 7919


class DivergenceError(RuntimeError):
    """The evaluation loss kept increasing; ``trace`` holds what ran."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class GridSpec:
    """Tensor grid (W, L, t); t always spans [0, T] of the model."""

    W: tuple = (0.59, 4.51)
    L: tuple = (0.209, 1.801)
    n: tuple = (21, 21, 11)

    def __post_init__(self):
        if self.W[0] >= self.W[1] or self.L[0] >= self.L[1]:
            raise ValueError("grid ranges must be increasing")
        if min(self.n) < 2:
            raise ValueError("grid needs at least 2 nodes per axis")

    @classmethod
    def interior_of(cls, box: TrainingBox, margin: float = 0.1, n=(21, 21, 11)) -> "GridSpec":
        inner = box.interior(margin)
        return cls((inner.W_min, inner.W_max), (inner.L_min, inner.L_max), tuple(n))

    def axes(self, T: float):
        return (np.linspace(*self.W, self.n[0]), np.linspace(*self.L, self.n[1]),
                np.linspace(0.0, T, self.n[2]))

    def points(self, T: float) -> np.ndarray:
        W, L, t = self.axes(T)
        return np.stack(np.meshgrid(W, L, t, indexing="ij"), axis=-1).reshape(-1, 3)


# The default training box reaches further in W than the evaluation grid.
# The wealth drift is positive, so the upper W face is where the backward
# equation takes its data; with no boundary condition there, the policy is
# unreliable within roughly one log-wealth standard deviation of that face.
DEFAULT_BOX = TrainingBox(W_max=8.0)


@dataclass
class IterationConfig:
    max_outer_iters: int = 20
    pe_steps: int = 200
    pi_steps: int = 40
    stop_tol: float = 1e-5
    optimizer: str = "lm"            # "lm" | "adam"
    hidden_size: int = 128
    learning_rate: float = 1e-3      # adam only
    n_interior: int = 4096
    n_terminal: int = 1024
    adaptive: bool = True
    refresh_every: int = 50          # inner steps between adaptive refreshes
    pool_size: int = 20000
    keep_k: int = 1024
    w_term: float = 1.0
    box: TrainingBox = DEFAULT_BOX
    grid: GridSpec = field(default_factory=GridSpec)
    seeds: tuple = (0,)
    n_validation: int = 1024
    divergence_patience: int = 3
    divergence_floor: float = 1e-8   # losses below this never count as divergence
    adam_dtype: str = "float32"

    def __post_init__(self):
        if self.optimizer not in ("lm", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        for name in ("max_outer_iters", "hidden_size", "n_interior", "n_terminal", "refresh_every",
                     "pool_size", "keep_k", "n_validation", "divergence_patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.pe_steps < 0 or self.pi_steps < 0:
            raise ValueError("step counts must be >= 0")
        if not self.stop_tol > 0:
            raise ValueError("stop_tol must be > 0")
        if self.keep_k > self.pool_size:
            raise ValueError("keep_k must not exceed pool_size")
        self.seeds = tuple(int(s) for s in self.seeds)

    def with_(self, **kw) -> "IterationConfig":
        return replace(self, **kw)


@dataclass
class IterationRecord:
    iteration: int
    pde_loss: float
    validation_loss: float
    improvement: float
    rel_change: float
    value_mean: float
    residual_sup: float
    wall_seconds: float


@dataclass
class IterationTrace:
    seed: int
    records: list = field(default_factory=list)
    values: list = field(default_factory=list)     # Q on the grid after each evaluation
    policies: list = field(default_factory=list)   # control used by each evaluation
    stop_reason: str = ""

    @property
    def iterations(self) -> int:
        return len(self.records)

    def to_csv(self, path) -> None:
        rows = [[getattr(r, h) for h in TRACE_HEADER] for r in self.records]
        _write_csv(path, TRACE_HEADER, rows)


def params_hash(params: ModelParams, utility: UtilitySpec) -> str:
    blob = json.dumps([params.as_dict(), [utility.kind, utility.gamma, utility.eta]], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


@dataclass
class _Surface:
    W: np.ndarray
    L: np.ndarray
    t: np.ndarray
    values: np.ndarray   # (nW, nL, nt)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("W", "L", "t"):
            ax = np.asarray(getattr(self, name), dtype=float)
            if ax.ndim != 1 or ax.size < 2 or np.any(np.diff(ax) <= 0):
                raise ValueError(f"axis {name} must be strictly increasing")
            setattr(self, name, ax)
        self.values = np.asarray(self.values, dtype=float).reshape(self.W.size, self.L.size, self.t.size)

    def at(self, W, L, t) -> float:
        """Value at a grid node (nearest node; intended for exact grid coordinates)."""
        i, j, k = (int(np.argmin(np.abs(ax - v))) for ax, v in ((self.W, W), (self.L, L), (self.t, t)))
        return float(self.values[i, j, k])


class ValueSurface(_Surface):
    pass


class PolicySurface(_Surface):
    def __post_init__(self):
        super().__post_init__()
        if np.any((self.values < 0) | (self.values > 1)):
            raise ValueError("policy surface has entries outside [0, 1]")


def tabulate(value_net, control_net, grid: GridSpec, T: float, meta=None):
    """(PolicySurface, ValueSurface) of the two networks on ``grid``."""
    W, L, t = grid.axes(T)
    X = grid.points(T)
    meta = dict(meta or {})
    omega = nn.forward(control_net, X)
    Q = nn.forward(value_net, X)
    return PolicySurface(W, L, t, omega, meta), ValueSurface(W, L, t, Q, meta)


def export_surfaces(path, policy: PolicySurface, value: ValueSurface) -> None:
    if np.any((policy.values < 0) | (policy.values > 1)):
        raise ValueError("refusing to export a policy outside [0, 1]")
    seed = policy.meta.get("seed", "")
    it = policy.meta.get("iteration", "")
    rows = []
    for i, w in enumerate(policy.W):
        for j, l in enumerate(policy.L):
            for k, tt in enumerate(policy.t):
                rows.append([repr(float(w)), repr(float(l)), repr(float(tt)),
                             repr(float(policy.values[i, j, k])), repr(float(value.values[i, j, k])), seed, it])
    _write_csv(path, SURFACE_HEADER, rows)


def _write_csv(path, header, rows) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(SCHEMA + "\n")
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    tmp.replace(path)


# ---------------------------------------------------------------------------
# inner problems
# ---------------------------------------------------------------------------


def initial_networks(config: IterationConfig, seed: int):
    """Value net with fan-in uniform weights; control net at sigmoid(0) = 0.5 everywhere."""
    box = config.box
    value_net = nn.init(config.hidden_size, seed=seed, lo=box.lo, hi=box.hi, head="linear")
    control_net = nn.init(config.hidden_size, seed=seed + 1_000_003, lo=box.lo, hi=box.hi,
                          head="sigmoid", zero_output=True)
    return value_net, control_net


def _residual_fn(problem, value_net, control_net):
    def evaluate(points):
        return hjb.evaluate_residuals(problem, value_net, control_net, points).residual
    return evaluate


def _refresh(problem, base: CollocationBatch, value_net, control_net, config, key):
    if not config.adaptive:
        return base
    extra = adaptive_resample(config.box, _residual_fn(problem, value_net, control_net),
                              config.pool_size, config.keep_k, key)
    return base.with_extra(extra)


@dataclass
class StepInfo:
    loss_entry: float
    loss_exit: float
    validation_entry: float
    validation_exit: float
    batch: CollocationBatch | None = None


def policy_evaluation(problem: hjb.HJBProblem, value_net, control_net, config: IterationConfig,
                      base: CollocationBatch | None = None, seed: int = 0, iteration: int = 1,
                      validation: CollocationBatch | None = None):
    """Fit ``value_net`` (in place) to the PDE with ``control_net`` frozen.

    Returns (value_net, StepInfo). Warns if the held-out loss went up.
    """
    if validation is None:
        validation = sample_uniform(config.box, config.n_validation, max(1, config.n_validation // 4),
                                    (seed, _VALIDATION_STREAM))
    val_entry = hjb.pde_loss(problem, value_net, control_net, validation)[0]
    if config.pe_steps == 0:
        return value_net, StepInfo(math.nan, math.nan, val_entry, val_entry, base)
    if config.optimizer == "lm":
        if base is None:
            base = sample_uniform(config.box, config.n_interior, config.n_terminal, (seed, 0))
        state = getattr(value_net, "_lm", None) or nn.LMState()   # damping carries over between calls
        batch = None
        entry = loss = math.nan
        for step in range(config.pe_steps):
            if batch is None or step % config.refresh_every == 0:
                batch = _refresh(problem, base, value_net, control_net, config, (seed, iteration, step, 1))
                lsq = hjb.EvaluationLSQ(problem, hjb.control_values(control_net, batch.interior), batch)
                if step == 0:
                    entry = lsq.loss(value_net)
            loss = nn.lm_step(value_net, lsq.residuals_and_jacobian, lsq.loss, state)
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite evaluation loss at step {step}")
        value_net._lm = state
    else:
        batch, entry, loss = _adam_evaluation(problem, value_net, control_net, config, seed, iteration)
    val_exit = hjb.pde_loss(problem, value_net, control_net, validation)[0]
    if val_exit > val_entry:
        warnings.warn(f"policy evaluation {iteration}: held-out loss rose {val_entry:.3e} -> {val_exit:.3e}",
                      RuntimeWarning, stacklevel=2)
    return value_net, StepInfo(entry, loss, val_entry, val_exit, batch)


def _adam_evaluation(problem, value_net, control_net, config, seed, iteration):
    dtype = np.dtype(config.adam_dtype)
    state = getattr(value_net, "_adam", None) or nn.AdamState.for_net(value_net, config.learning_rate)
    extra = None
    entry = loss = math.nan
    batch = None
    for step in range(config.pe_steps):
        batch = sample_uniform(config.box, config.n_interior, config.n_terminal, (seed, iteration, step, 2))
        if config.adaptive and step % config.refresh_every == 0:
            extra = adaptive_resample(config.box, _residual_fn(problem, value_net, control_net),
                                      config.pool_size, config.keep_k, (seed, iteration, step, 1))
        batch = batch.with_extra(extra)
        omega = hjb.control_values(control_net, batch.interior)
        loss, _, grad = hjb.pde_loss_and_grad(problem, value_net, omega, batch, dtype)
        if step == 0:
            entry = loss
        nn.adam_step(value_net, grad, state)
    value_net._adam = state
    return batch, entry, loss


def policy_improvement(problem: hjb.HJBProblem, value_net, control_net, config: IterationConfig,
                       points=None, seed: int = 0, iteration: int = 1):
    """Fit ``control_net`` (in place) to maximise the generator applied to the frozen value net.

    Returns (control_net, StepInfo) where the losses are improvement
    objectives (larger is better) on ``points`` and on held-out points.
    """
    held_out = sample_uniform(config.box, config.n_validation, 1, (seed, _VALIDATION_STREAM, 1)).interior
    quad_val = hjb.decompose_quadratic(problem.params, held_out, nn.forward_jet(value_net, held_out))
    val_entry = float(np.mean(quad_val(nn.forward(control_net, held_out))))
    if points is None:
        points = sample_uniform(config.box, config.n_interior, 1, (seed, 0)).interior
    quad = hjb.decompose_quadratic(problem.params, points, nn.forward_jet(value_net, points))
    entry = float(np.mean(quad(nn.forward(control_net, points))))
    if config.pi_steps == 0:
        return control_net, StepInfo(entry, entry, val_entry, val_entry)
    if config.optimizer == "lm":
        lsq = hjb.ImprovementLSQ(quad, points)
        state = nn.LMState()
        for _ in range(config.pi_steps):
            nn.lm_step(control_net, lsq.residuals_and_jacobian, lsq.loss, state)
    else:
        dtype = np.dtype(config.adam_dtype)
        state = getattr(control_net, "_adam", None) or nn.AdamState.for_net(control_net, config.learning_rate)
        for step in range(config.pi_steps):
            pts = sample_uniform(config.box, config.n_interior, 1, (seed, iteration, step, 3)).interior
            q = hjb.decompose_quadratic(problem.params, pts, nn.forward_jet(value_net, pts))
            _, grad = hjb.improvement_and_grad(q, control_net, pts, dtype)
            nn.adam_step(control_net, grad, state)
        control_net._adam = state
    exit_ = float(np.mean(quad(nn.forward(control_net, points))))
    val_exit = float(np.mean(quad_val(nn.forward(control_net, held_out))))
    if val_exit < val_entry:
        warnings.warn(f"policy improvement {iteration}: held-out objective fell {val_entry:.3e} -> {val_exit:.3e}",
                      RuntimeWarning, stacklevel=2)
    return control_net, StepInfo(entry, exit_, val_entry, val_exit)


# ---------------------------------------------------------------------------
# outer loop
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    value_net: nn.TwoLayerNet
    control_net: nn.TwoLayerNet
    trace: IterationTrace
    policy: PolicySurface
    value: ValueSurface

    def __iter__(self):
        return iter((self.value_net, self.control_net, self.trace))


def relative_change(Q_new, Q_old) -> float:
    return float(np.mean(np.abs(Q_new - Q_old) / (np.abs(Q_old) + 1e-8)))


def run(params: ModelParams, utility: UtilitySpec, config: IterationConfig | None = None,
        seed: int | None = None, value_net=None, control_net=None) -> RunResult:
    """Policy iteration for one seed; stops on the relative-change rule or after max_outer_iters.

    Pass ``value_net``/``control_net`` to warm-start from earlier networks.
    """
    config = config or IterationConfig()
    seed = config.seeds[0] if seed is None else int(seed)
    box = config.box
    if abs(box.T - params.T) > 1e-12:
        box = replace(box, T=params.T)
        config = config.with_(box=box)
    problem = hjb.HJBProblem(params, utility, box, config.w_term)
    v0, c0 = initial_networks(config, seed)
    value_net = value_net.copy() if value_net is not None else v0
    control_net = control_net.copy() if control_net is not None else c0
    X = config.grid.points(params.T)
    base = sample_uniform(box, config.n_interior, config.n_terminal, (seed, 0))
    validation = sample_uniform(box, config.n_validation, max(1, config.n_validation // 4),
                                (seed, _VALIDATION_STREAM))
    trace = IterationTrace(seed)
    Q_prev = nn.forward(value_net, X)
    meta = dict(params_hash=params_hash(params, utility), seed=seed)
    increases = 0
    prev_loss = math.inf
    for k in range(1, config.max_outer_iters + 1):
        t0 = time.perf_counter()
        omega_used = nn.forward(control_net, X)
        value_net, pe = policy_evaluation(problem, value_net, control_net, config, base, seed, k, validation)
        jet = nn.forward_jet(value_net, X)
        Q = jet.value
        res = hjb.apply_operator(params, X, jet, omega_used)
        rel = relative_change(Q, Q_prev)
        trace.values.append(Q.copy())
        trace.policies.append(omega_used)
        stop = rel < config.stop_tol
        improvement = math.nan
        if not stop:
            points = pe.batch.interior if pe.batch is not None else None
            control_net, pi = policy_improvement(problem, value_net, control_net, config, points, seed, k)
            improvement = pi.loss_exit
        trace.records.append(IterationRecord(
            k, pe.loss_exit, pe.validation_exit, improvement, rel, float(np.mean(Q)),
            float(np.max(np.abs(res))), time.perf_counter() - t0,
        ))
        log.info("seed %d iter %d: loss %.3e rel %.3e improvement %.4g", seed, k, pe.loss_exit, rel, improvement)
        loss_now = pe.validation_exit
        if loss_now > prev_loss and loss_now > config.divergence_floor:
            increases += 1
        else:
            increases = 0
        prev_loss = loss_now
        if increases >= config.divergence_patience:
            trace.stop_reason = "diverged"
            raise DivergenceError(f"evaluation loss increased {increases} outer iterations in a row", trace)
        if stop:
            trace.stop_reason = "tolerance"
            break
        Q_prev = Q
    else:
        trace.stop_reason = "max_iters"
    meta["iteration"] = trace.iterations
    policy, value = tabulate(value_net, control_net, config.grid, params.T, meta)
    return RunResult(value_net, control_net, trace, policy, value)


@dataclass
class Ensemble:
    results: dict                 # seed -> RunResult
    failed: dict                  # seed -> error message
    omega_mean: np.ndarray
    omega_min: np.ndarray
    omega_max: np.ndarray
    Q_mean: np.ndarray
    Q_min: np.ndarray
    Q_max: np.ndarray

    @property
    def partial(self) -> bool:
        return bool(self.failed)

    @property
    def axes(self):
        p = next(iter(self.results.values())).policy
        return p.W, p.L, p.t

    def band_at(self, W, L, t):
        """(mean, min, max) of omega at the grid node nearest to (W, L, t)."""
        ax = self.axes
        i, j, k = (int(np.argmin(np.abs(a - v))) for a, v in zip(ax, (W, L, t)))
        return float(self.omega_mean[i, j, k]), float(self.omega_min[i, j, k]), float(self.omega_max[i, j, k])

    def to_csv(self, path) -> None:
        W, L, t = self.axes
        header = ["W", "L", "t", "omega_mean", "omega_min", "omega_max", "Q_mean", "Q_min", "Q_max", "n_seeds"]
        rows = []
        for i, w in enumerate(W):
            for j, l in enumerate(L):
                for k, tt in enumerate(t):
                    rows.append([float(w), float(l), float(tt)] + [float(a[i, j, k]) for a in (
                        self.omega_mean, self.omega_min, self.omega_max, self.Q_mean, self.Q_min, self.Q_max)]
                        + [len(self.results)])
        _write_csv(path, header, rows)


def run_many_seeds(params: ModelParams, utility: UtilitySpec, config: IterationConfig) -> Ensemble:
    """Independent runs per seed with pointwise mean/min/max bands on the shared grid.

    Seeds run one after another; a seed that raises is recorded in ``failed``.
    """
    if len(config.seeds) < 2:
        raise ValueError("run_many_seeds needs at least 2 seeds")
    results, failed = {}, {}
    for s in config.seeds:
        try:
            results[s] = run(params, utility, config, seed=s)
        except (DivergenceError, FloatingPointError) as exc:
            log.warning("seed %d failed: %s", s, exc)
            failed[s] = str(exc)
    if not results:
        raise RuntimeError(f"all seeds failed: {failed}")
    om = np.stack([r.policy.values for r in results.values()])
    Q = np.stack([r.value.values for r in results.values()])
    return Ensemble(results, failed, om.mean(0), om.min(0), om.max(0), Q.mean(0), Q.min(0), Q.max(0))
