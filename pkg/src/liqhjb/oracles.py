"""Reference solutions: Merton closed forms and a 1-D finite-difference oracle.

For power utility the substitution Q = (W^gamma / gamma) P(L, t) removes the
wealth variable, leaving a linear-in-P, quadratic-in-omega PDE in (L, t)
with P(L, T) = 1. ``solve_reduced_fd`` solves it by implicit Euler in time
with Howard policy iteration at each time level.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.linalg import solve_banded

from . import market
from .market import DomainError, ModelParams, UtilitySpec
from .net import InputJet


class ClampedPolicy(NamedTuple):
    omega: object
    clamped: object   # True where the unconstrained value fell outside [0, 1]


def _merton_excess(params: ModelParams):
    return params.mu - params.r, params.sigma_S**2


def merton_policy(utility: UtilitySpec, params: ModelParams, W=1.0, t=0.0) -> ClampedPolicy:
    """Frictionless optimal fraction in the stock (beta, kappa, sigma_L ignored)."""
    ex, var = _merton_excess(params)
    W = np.asarray(W, dtype=float)
    t = np.asarray(t, dtype=float)
    if utility.kind == "power":
        raw = np.full(np.broadcast(W, t).shape, ex / ((1.0 - utility.gamma) * var))
    elif utility.kind == "log":
        raw = np.full(np.broadcast(W, t).shape, ex / var)
    else:
        if np.any(W <= 0):
            raise DomainError("exponential-utility Merton policy needs W > 0")
        raw = np.exp(-params.r * (params.T - t)) * ex / (utility.eta * var * W)
    omega = np.clip(raw, 0.0, 1.0)
    clamped = (raw < 0) | (raw > 1)
    if omega.ndim == 0:
        return ClampedPolicy(float(omega), bool(clamped))
    return ClampedPolicy(omega, clamped)


@dataclass(frozen=True)
class MertonSolution:
    """Closed-form frictionless policy and value; certified against the operator on creation."""

    utility: UtilitySpec
    params: ModelParams
    max_residual: float = math.nan

    @classmethod
    def create(cls, utility: UtilitySpec, params: ModelParams) -> "MertonSolution":
        p = params.frictionless()
        sol = cls(utility, p)
        worst = sol.certify()
        if not worst < 1e-8:
            raise ArithmeticError(f"closed form fails its PDE check (relative residual {worst:.3g})")
        return cls(utility, p, worst)

    def policy(self, W, t):
        return merton_policy(self.utility, self.params, W, t).omega

    def value(self, W, t):
        return self.jet(W, t).value

    def jet(self, W, t) -> InputJet:
        """Closed-form (value, dW, dL, dt, dWW, dLL, dWL) of Q*."""
        p, u = self.params, self.utility
        W = np.asarray(W, dtype=float)
        tau = p.T - np.asarray(t, dtype=float)
        ex, var = _merton_excess(p)
        zero = np.zeros(np.broadcast(W, tau).shape)
        if u.kind == "power":
            g = u.gamma
            if np.any(W <= 0):
                raise DomainError("power utility needs W > 0")
            rate = g * (p.r + ex**2 / (2.0 * var * (1.0 - g)))
            f = np.exp(rate * tau)
            Q = W**g / g * f
            return InputJet(Q, W ** (g - 1) * f, zero, -rate * Q, (g - 1) * W ** (g - 2) * f, zero, zero)
        if u.kind == "log":
            if np.any(W <= 0):
                raise DomainError("log utility needs W > 0")
            rate = p.r + ex**2 / (2.0 * var)
            return InputJet(np.log(W) + rate * tau, 1.0 / W + zero, zero, -rate + zero, -1.0 / W**2 + zero,
                            zero, zero)
        eta = u.eta
        k = 0.5 * ex**2 / var
        growth = np.exp(p.r * tau)
        E = np.exp(-eta * W * growth - k * tau)
        return InputJet(1.0 - E, E * eta * growth, zero, -E * (eta * W * p.r * growth + k),
                        -E * (eta * growth) ** 2, zero, zero)

    def certify(self) -> float:
        """Max relative operator residual of (Q*, omega*) on a probe grid."""
        from .hjb import apply_operator   # local import: hjb imports this package's net module

        W, L, t = np.meshgrid(np.linspace(0.5, 5.0, 10), np.linspace(0.05, 2.0, 4),
                              np.linspace(0.0, self.params.T, 10), indexing="ij")
        W, L, t = W.ravel(), L.ravel(), t.ravel()
        pol = merton_policy(self.utility, self.params, W, t)
        ok = ~pol.clamped
        jet = self.jet(W[ok], t[ok])
        pts = np.stack([W[ok], L[ok], t[ok]], axis=1)
        res = apply_operator(self.params, pts, jet, pol.omega[ok])
        scale = np.abs(jet.t) + np.abs(jet.W * W[ok]) + np.abs(jet.value) + 1e-300
        return float(np.max(np.abs(res) / scale))


@lru_cache(maxsize=64)
def _certified(utility: UtilitySpec, params: ModelParams) -> MertonSolution:
    return MertonSolution.create(utility, params)


def merton_solution(utility: UtilitySpec, params: ModelParams) -> MertonSolution:
    return _certified(utility, params.frictionless())


def merton_value_power(params: ModelParams, gamma: float, W, t):
    """(W^g / g) * exp(g [r + (mu-r)^2 / (2 sigma_S^2 (1-g))] (T-t)), certified once per (params, gamma)."""
    if gamma == 0 or gamma >= 1:
        raise DomainError("power utility needs gamma < 1 and gamma != 0")
    out = merton_solution(UtilitySpec("power", gamma=gamma), params).value(W, t)
    return float(out) if np.ndim(out) == 0 else out


def merton_factor(params: ModelParams, gamma: float, t):
    """P(t) of the reduced problem in the frictionless limit."""
    ex, var = _merton_excess(params)
    return np.exp(gamma * (params.r + ex**2 / (2.0 * var * (1.0 - gamma))) * (params.T - np.asarray(t, float)))


# ---------------------------------------------------------------------------
# reduced 1-D problem
# ---------------------------------------------------------------------------


class PJet(NamedTuple):
    P: object
    P_t: object
    P_L: object
    P_LL: object


def _reduced_coefficients(params: ModelParams, gamma: float, L):
    """Per-node pieces of the reduced operator as polynomials in omega.

    reaction(w) = k0 + k1 w + k2 w^2 multiplies P; drift(w) = b0 + b1 w multiplies P_L.
    """
    p = params
    L = np.asarray(L, dtype=float)
    c = np.asarray(market.cost_coefficient(p, L))
    var = np.asarray(market.shock_variance(p, L))
    k0 = gamma * p.r + 0.0 * L
    k1 = gamma * (p.mu - p.r - c)
    k2 = gamma * c + 0.5 * gamma * (gamma - 1.0) * var
    b0 = p.alpha * (np.asarray(market.mean_reversion_level(p, L)) - L)
    b1 = (p.rho2 * p.sigma_S + p.rho3 * p.beta * L) * p.sigma_L * gamma
    return k0, k1, k2, b0, b1


def reduced_operator(params: ModelParams, gamma: float, L, t, jet: PJet, omega):
    """Residual of the reduced PDE for P(L, t) at control ``omega``."""
    omega = np.asarray(omega, dtype=float)
    if np.any((omega < 0) | (omega > 1)):
        raise DomainError("omega must lie in [0, 1]")
    for name, e in zip(PJet._fields, jet):
        if not np.all(np.isfinite(e)):
            raise FloatingPointError(f"non-finite jet entry {name}")
    k0, k1, k2, b0, b1 = _reduced_coefficients(params, gamma, L)
    out = (jet.P_t + (k0 + k1 * omega + k2 * omega**2) * jet.P + (b0 + b1 * omega) * jet.P_L
           + 0.5 * params.sigma_L**2 * jet.P_LL)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class FDGridSpec:
    n_L: int = 281
    n_t: int = 200
    L_min: float = 0.0
    L_max: float = 1.85
    max_howard: int = 50

    def __post_init__(self):
        if self.n_L < 50 or self.n_t < 50:
            raise ValueError("need n_L >= 50 and n_t >= 50")
        if not 0 <= self.L_min < self.L_max:
            raise ValueError("need 0 <= L_min < L_max")

    @classmethod
    def padded(cls, lo=0.1, hi=1.5, pad=0.25, **kw) -> "FDGridSpec":
        """Grid over [lo, hi] widened by ``pad`` of its width on each side, clipped at L = 0."""
        w = hi - lo
        return cls(L_min=max(0.0, lo - pad * w), L_max=hi + pad * w, **kw)


@dataclass
class Grid1D:
    L: np.ndarray          # (n_L,)
    t: np.ndarray          # (n_t + 1,), t[-1] = T
    P: np.ndarray          # (n_t + 1, n_L), P[-1] = 1
    omega: np.ndarray      # (n_t + 1, n_L)
    howard_iterations: np.ndarray   # (n_t,) iterations used per time level
    monotone: bool = True  # values never fell across Howard iterations

    def slice_t(self, t: float) -> int:
        k = int(np.argmin(np.abs(self.t - t)))
        if abs(self.t[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"t={t} is not a grid time")
        return k

    def omega_at(self, L, t: float):
        """Policy at time node t, linearly interpolated in L."""
        return np.interp(L, self.L, self.omega[self.slice_t(t)])

    def P_at(self, L, t: float):
        return np.interp(L, self.L, self.P[self.slice_t(t)])

    def to_csv(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w", newline="") as fh:
            fh.write("# liqhjb-csv/1\n")
            w = csv.writer(fh)
            w.writerow(["L", "t", "P", "omega"])
            for k, tt in enumerate(self.t):
                for i, l in enumerate(self.L):
                    w.writerow([repr(float(l)), repr(float(tt)), repr(float(self.P[k, i])),
                                repr(float(self.omega[k, i]))])
        tmp.replace(path)


def _best_control(P, Dp, Dm, k1, k2, b0, b1, force_fwd, force_bwd):
    """Exact argmax over [0, 1] of the discrete (upwinded) omega-dependent terms.

    f(w) = (k1 w + k2 w^2) P + b(w)^+ Dp - b(w)^- Dm with b(w) = b0 + b1 w,
    where at the boundary nodes the difference direction is fixed (inward).
    Piecewise quadratic with one possible kink at b = 0; candidates are the
    ends, the kink and each piece's vertex. Ties go to the smaller w.
    """
    n = P.shape[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        kink = np.where(b1 != 0, -b0 / b1, np.nan)
    cands = [np.zeros(n), np.ones(n), np.clip(np.nan_to_num(kink, nan=0.0), 0.0, 1.0)]
    a2 = k2 * P
    for D in (Dp, Dm):
        lin = k1 * P + b1 * D
        with np.errstate(divide="ignore", invalid="ignore"):
            v = np.where(a2 < 0, -lin / (2.0 * a2), 0.0)
        cands.append(np.clip(np.nan_to_num(v), 0.0, 1.0))
    C = np.stack(cands)                       # (5, n)

    def f(w):
        b = b0 + b1 * w
        up = np.where(force_fwd, 1.0, np.where(force_bwd, 0.0, (b > 0).astype(float)))
        return (k1 * w + k2 * w * w) * P + b * (up * Dp + (1.0 - up) * Dm)

    vals = np.stack([f(c) for c in C])
    best = vals.max(0)
    # smallest candidate within round-off of the best value
    tol = 1e-14 * (np.abs(best) + 1.0)
    masked = np.where(vals >= best - tol, C, np.inf)
    return masked.min(0)


def solve_reduced_fd(params: ModelParams, gamma: float = 0.5, grid: FDGridSpec | None = None) -> Grid1D:
    """Implicit-Euler / Howard solve of the reduced power-utility PDE.

    Interior nodes: central second difference, upwinded drift. End nodes:
    diffusion dropped (zero second derivative) and a one-sided difference
    pointing into the domain.
    """
    if gamma == 0 or gamma >= 1:
        raise DomainError("power utility needs gamma < 1 and gamma != 0")
    g = grid or FDGridSpec()
    L = np.linspace(g.L_min, g.L_max, g.n_L)
    h = L[1] - L[0]
    t = np.linspace(0.0, params.T, g.n_t + 1)
    dt = params.T / g.n_t
    k0, k1, k2, b0, b1 = _reduced_coefficients(params, gamma, L)
    diff = 0.5 * params.sigma_L**2 / h**2
    n = g.n_L
    first = np.zeros(n, bool)
    first[0] = True
    last = np.zeros(n, bool)
    last[-1] = True

    P = np.ones((g.n_t + 1, n))
    Om = np.zeros((g.n_t + 1, n))
    Om[-1] = _best_control(P[-1], np.zeros(n), np.zeros(n), k1, k2, b0, b1, first, last)
    iters = np.zeros(g.n_t, int)
    monotone = True
    for m in range(g.n_t - 1, -1, -1):
        rhs = P[m + 1] / dt
        w = Om[m + 1].copy()
        prev = None
        for it in range(1, g.max_howard + 1):
            b = b0 + b1 * w
            react = k0 + k1 * w + k2 * w * w
            up = np.where(first, True, np.where(last, False, b > 0))
            # tridiagonal: diag, lower (i, i-1), upper (i, i+1) of the operator
            lower = np.full(n, diff)
            upper = np.full(n, diff)
            diag = np.full(n, -2.0 * diff) + react
            bp = np.where(up, b, 0.0) / h       # forward difference weight
            bm = np.where(up, 0.0, b) / h       # backward difference weight
            upper += bp
            diag -= bp
            diag += bm
            lower -= bm
            lower[0] = upper[-1] = 0.0
            for i in (0, n - 1):   # boundary: no diffusion
                if i == 0:
                    upper[0] = bp[0]
                    diag[0] = react[0] - bp[0]
                else:
                    lower[-1] = -bm[-1]
                    diag[-1] = react[-1] + bm[-1]
            # (1/dt - Lw) P = P_next / dt
            ab = np.zeros((3, n))
            ab[0, 1:] = -upper[:-1]
            ab[1] = 1.0 / dt - diag
            ab[2, :-1] = -lower[1:]
            try:
                Pn = solve_banded((1, 1), ab, rhs)
            except (np.linalg.LinAlgError, ValueError) as exc:
                raise np.linalg.LinAlgError(f"FD solve failed at t={t[m]:.4g}: {exc}") from exc
            if not np.all(np.isfinite(Pn)):
                bad = int(np.flatnonzero(~np.isfinite(Pn))[0])
                raise np.linalg.LinAlgError(f"non-finite FD value at t={t[m]:.4g}, L={L[bad]:.4g}")
            if prev is not None and np.any(Pn < prev - 1e-12 * np.abs(prev)):
                monotone = False
            prev = Pn
            Dp = np.zeros(n)
            Dm = np.zeros(n)
            Dp[:-1] = (Pn[1:] - Pn[:-1]) / h
            Dm[1:] = (Pn[1:] - Pn[:-1]) / h
            w_new = _best_control(Pn, Dp, Dm, k1, k2, b0, b1, first, last)
            if np.max(np.abs(w_new - w)) <= 1e-10:   # policy fixed up to round-off
                break
            w = w_new
        iters[m] = it
        P[m] = Pn
        Om[m] = w
    return Grid1D(L, t, P, Om, iters, monotone)
