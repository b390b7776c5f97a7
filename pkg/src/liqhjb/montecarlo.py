"""Euler-Maruyama simulation of liquidity and wealth under a feedback policy.

Two cost treatments:

* ``expected_approx`` charges the deterministic drift c(L) w (1 - w) W dt,
* ``realized_exact`` tracks stock and bond holdings, lets them drift between
  rebalancing dates (every ``delta_t``) and charges kappa |trade value| at
  each rebalancing, with the trade solving y = w (W - kappa |y|) - X_S.

Randomness is drawn in fixed-size blocks of paths, each block from its own
counter-based stream keyed by (seed, block index), so results do not depend
on how blocks are scheduled.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from . import market
from .collocation import make_rng
from .market import ModelParams, UtilitySpec

BLOCK = 8192
COST_MODES = ("expected_approx", "realized_exact")
QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


def cholesky3(rho1: float, rho2: float, rho3: float, tol: float = 1e-10) -> np.ndarray:
    """Lower factor F with F F^T = corr(B^g, B^S, B^L).

    Semidefinite (singular) matrices get a factor with a zero pivot, accepted
    when the reconstruction error is below ``tol``.
    """
    C = market.correlation_matrix(rho1, rho2, rho3)
    if np.linalg.eigvalsh(C).min() < -1e-12:
        raise market.DomainError("correlation matrix is not positive semidefinite")
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        pass
    F = np.zeros((3, 3))
    for j in range(3):
        d = C[j, j] - F[j, :j] @ F[j, :j]
        F[j, j] = math.sqrt(d) if d > tol else 0.0
        for i in range(j + 1, 3):
            if F[j, j] > 0:
                F[i, j] = (C[i, j] - F[i, :j] @ F[j, :j]) / F[j, j]
    err = np.max(np.abs(F @ F.T - C))
    if err > tol:
        raise market.DomainError(f"could not factor the correlation matrix (residual {err:.3g})")
    return F


@dataclass(frozen=True)
class PathConfig:
    n_paths: int = 100_000
    substeps: int = 1
    seed: int = 0
    cost_mode: str = "expected_approx"
    W0: float = 2.5
    L0: float = 0.6
    t0: float = 0.0
    antithetic: bool = False
    wealth_floor: float = 1e-6      # fraction of W0 at which CRRA paths are absorbed
    negative_L: bool = False        # allow L < 0 (then g(L) = 0) instead of flooring at 0
    record_trades: bool = False
    keep_paths: bool = False

    def __post_init__(self):
        if self.n_paths < 1 or self.substeps < 1:
            raise ValueError("need n_paths >= 1 and substeps >= 1")
        if self.cost_mode not in COST_MODES:
            raise ValueError(f"cost_mode must be one of {COST_MODES}")
        if self.antithetic and self.n_paths % 2:
            raise ValueError("antithetic sampling needs an even n_paths")
        if self.L0 < 0 and not self.negative_L:
            raise ValueError("L0 must be >= 0")


@dataclass
class TradeRecord:
    step: int
    t: float
    nu: np.ndarray     # traded shares per path (signed)
    cost: np.ndarray   # kappa * S * |nu|

    def __post_init__(self):
        if np.any(self.cost < 0):
            raise ValueError("negative trading cost")


@dataclass
class PathStats:
    mean_utility: float
    std_error: float
    quantiles: dict
    mean_cost: float
    n_paths: int
    n_absorbed: int
    seed: int
    cost_mode: str
    mean_wealth: float = math.nan
    trades: list = field(default_factory=list)
    W_T: np.ndarray | None = None
    utility: np.ndarray | None = None
    total_cost: np.ndarray | None = None
    L_T: np.ndarray | None = None

    def z_score(self, reference: float) -> float:
        return (self.mean_utility - reference) / self.std_error if self.std_error > 0 else math.inf

    def to_csv(self, path) -> None:
        header = ["n_paths", "seed", "cost_mode", "mean_utility", "std_error", "mean_wealth", "mean_cost",
                  "n_absorbed"] + [f"W_T_q{int(q * 100):02d}" for q in QUANTILES]
        row = [self.n_paths, self.seed, self.cost_mode, repr(self.mean_utility), repr(self.std_error),
               repr(self.mean_wealth), repr(self.mean_cost), self.n_absorbed] + [
            repr(self.quantiles[q]) for q in QUANTILES]
        _write(path, header, [row])

    def dump_paths(self, path) -> None:
        if self.W_T is None:
            raise ValueError("paths were not kept; simulate with keep_paths=True")
        rows = ([i, repr(float(w)), repr(float(u)), repr(float(c))]
                for i, (w, u, c) in enumerate(zip(self.W_T, self.utility, self.total_cost)))
        _write(path, ["path_id", "W_T", "utility", "total_cost"], rows)


def _write(path, header, rows):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write("# liqhjb-csv/1\n")
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    tmp.replace(path)


def _theta(params: ModelParams, L):
    return params.theta_bar + params.kappa * params.lam * np.maximum(L, 0.0) ** params.zeta


def _policy_values(policy, W, L, t):
    w = np.asarray(policy(W, L, np.full_like(W, t)), dtype=float)
    w = np.broadcast_to(w, W.shape)
    if not np.all(np.isfinite(w)) or np.any((w < 0) | (w > 1)):
        raise ValueError(f"policy returned values outside [0, 1] at t={t:.4g}")
    return w


def _simulate_block(params, utility, policy, cfg: PathConfig, F, n, key, trades):
    p = params
    h = p.delta_t / cfg.substeps
    n_steps = int(round((p.T - cfg.t0) / h))
    rng = make_rng(*key)
    if cfg.antithetic:
        half = rng.standard_normal((n_steps, n // 2, 3))
        Z = np.concatenate([half, -half], axis=1)
    else:
        Z = rng.standard_normal((n_steps, n, 3))
    dB = (Z @ F.T) * math.sqrt(h)
    W = np.full(n, float(cfg.W0))
    L = np.full(n, float(cfg.L0))
    cost = np.zeros(n)
    floor = cfg.wealth_floor * cfg.W0 if utility.crra else -math.inf
    absorbed = np.zeros(n, bool)
    exact = cfg.cost_mode == "realized_exact"
    S = np.ones(n)
    t = cfg.t0
    w = _policy_values(policy, W, L, t)
    X = w * W                   # stock holding value (realized mode)
    for k in range(n_steps):
        live = ~absorbed
        dBg, dBS, dBL = dB[k, :, 0], dB[k, :, 1], dB[k, :, 2]
        ret = p.mu * h + p.beta * L * dBg + p.sigma_S * dBS
        if exact:
            X_new = X * (1.0 + ret)
            W_new = W + (W - X) * p.r * h + X * ret
        else:
            w = _policy_values(policy, W, L, t)
            c = np.asarray(market.cost_coefficient(p, np.maximum(L, 0.0)))
            drift = (p.r + (p.mu - p.r) * w - c * w * (1.0 - w)) * h
            W_new = W + W * (drift + w * (p.beta * L * dBg + p.sigma_S * dBS))
            cost += np.where(live, c * w * (1.0 - w) * W * h, 0.0)
        L = L + p.alpha * (_theta(p, L) - L) * h + p.sigma_L * dBL
        if not cfg.negative_L:
            L = np.maximum(L, 0.0)
        S = S * (1.0 + ret)
        t = cfg.t0 + (k + 1) * h
        W = np.where(live, W_new, W)
        if exact:
            X = np.where(live, X_new, X)
        hit = live & (W <= floor)
        if np.any(hit):
            W = np.where(hit, floor, W)
            X = np.where(hit, 0.0, X)
            absorbed |= hit
        if exact and (k + 1) % cfg.substeps == 0 and k + 1 < n_steps:
            w = _policy_values(policy, W, L, t)
            target = w * W - X
            sign = np.sign(target)                  # frictionless trade direction
            y = target / (1.0 + p.kappa * w * sign)
            sign = np.sign(y)                       # one correction pass
            y = target / (1.0 + p.kappa * w * sign)
            paid = np.where(absorbed, 0.0, p.kappa * np.abs(y))
            y = np.where(absorbed, 0.0, y)
            W = W - paid
            X = X + y
            cost += paid
            if trades is not None:
                trades.append(TradeRecord(k + 1, t, y / S, paid))
    return W, L, cost, absorbed


def simulate(params: ModelParams, utility: UtilitySpec, policy: Callable, config: PathConfig) -> PathStats:
    """Monte Carlo estimate of E[U(W_T)] from (W0, L0, t0) under ``policy(W, L, t)``."""
    if not config.t0 < params.T:
        raise ValueError("t0 must be before T")
    F = cholesky3(params.rho1, params.rho2, params.rho3)
    Ws, Ls, costs, flags = [], [], [], []
    trades = [] if config.record_trades else None
    done, b = 0, 0
    while done < config.n_paths:
        n = min(BLOCK, config.n_paths - done)
        W, L, c, a = _simulate_block(params, utility, policy, config, F, n, (config.seed, b), trades)
        Ws.append(W)
        Ls.append(L)
        costs.append(c)
        flags.append(a)
        done += n
        b += 1
    W_T = np.concatenate(Ws)
    cost = np.concatenate(costs)
    absorbed = np.concatenate(flags)
    U = np.asarray(market.utility(utility, W_T), dtype=float)
    if config.antithetic:
        pairs = _pair_means(U, [len(x) for x in Ws])
        se = float(np.std(pairs, ddof=1) / math.sqrt(pairs.size)) if pairs.size > 1 else math.nan
    else:
        se = float(np.std(U, ddof=1) / math.sqrt(U.size)) if U.size > 1 else math.nan
    q = np.quantile(W_T, QUANTILES)
    stats = PathStats(
        float(np.mean(U)), se, {qq: float(v) for qq, v in zip(QUANTILES, q)}, float(np.mean(cost)),
        config.n_paths, int(absorbed.sum()), config.seed, config.cost_mode, float(np.mean(W_T)),
        trades or [],
    )
    if config.keep_paths:
        stats.W_T, stats.utility, stats.total_cost = W_T, U, cost
        stats.L_T = np.concatenate(Ls)
    return stats


def _pair_means(U, block_sizes):
    out, start = [], 0
    for n in block_sizes:
        blk = U[start:start + n]
        out.append(0.5 * (blk[: n // 2] + blk[n // 2:]))
        start += n
    return np.concatenate(out)


def surface_policy(surface) -> Callable:
    """Multilinear interpolant of a PolicySurface; queries outside the grid are clamped to it."""
    axes = (surface.W, surface.L, surface.t)
    interp = RegularGridInterpolator(axes, surface.values, method="linear")
    lo = np.array([a[0] for a in axes])
    hi = np.array([a[-1] for a in axes])

    def policy(W, L, t):
        X = np.stack(np.broadcast_arrays(np.asarray(W, float), np.asarray(L, float), np.asarray(t, float)), -1)
        return np.clip(interp(np.clip(X, lo, hi)), 0.0, 1.0)

    return policy


def evaluate_policy_surface(surface, params: ModelParams, utility: UtilitySpec, config: PathConfig) -> PathStats:
    """Simulate under the interpolated surface; its t axis must span [t0, T]."""
    if surface.t[0] > config.t0 + 1e-9 or surface.t[-1] < params.T - 1e-9:
        raise ValueError(f"surface t axis [{surface.t[0]}, {surface.t[-1]}] does not span [{config.t0}, {params.T}]")
    if not surface.W[0] <= config.W0 <= surface.W[-1] or not surface.L[0] <= config.L0 <= surface.L[-1]:
        raise ValueError("starting state lies outside the surface grid")
    return simulate(params, utility, surface_policy(surface), config)
