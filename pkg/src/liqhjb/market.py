"""Market coefficients, cost formulas and utilities for the liquidity/cost model.

Stock and liquidity follow

    dS = mu S dt + beta L S dB^g + sigma_S S dB^S
    dL = alpha (theta(L) - L) dt + sigma_L dB^L

with corr(B^g, B^S) = rho1, corr(B^L, B^S) = rho2, corr(B^g, B^L) = rho3, and
the cost-coupled mean-reversion level theta(L) = theta_bar + kappa*lam*L**zeta.
Rebalancing every ``delta_t`` years at proportional cost ``kappa`` yields the
expected cost drift ``c(L) * omega * (1 - omega) * W``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from typing import NamedTuple

import numpy as np


class DomainError(ValueError):
    """Argument outside the admissible domain of a model formula."""


# Reference parameter set; zeta defaults to 0.5 (it only has to lie in (0, 1)).
DEFAULTS = dict(
    r=0.02,
    mu=0.05,
    sigma_S=0.4,
    beta=0.3,
    rho1=0.2,
    rho2=0.5,
    rho3=0.3,
    alpha=2.0,
    theta_bar=0.6,
    sigma_L=0.2,
    lam=5.0,
    kappa=0.004,
    zeta=0.5,
    delta_t=1.0 / 12.0,
    T=1.0,
)


def correlation_matrix(rho1: float, rho2: float, rho3: float) -> np.ndarray:
    """Correlation of (B^g, B^S, B^L)."""
    return np.array(
        [
            [1.0, rho1, rho3],
            [rho1, 1.0, rho2],
            [rho3, rho2, 1.0],
        ]
    )


@dataclass(frozen=True)
class ModelParams:
    r: float = DEFAULTS["r"]
    mu: float = DEFAULTS["mu"]
    sigma_S: float = DEFAULTS["sigma_S"]
    beta: float = DEFAULTS["beta"]
    rho1: float = DEFAULTS["rho1"]
    rho2: float = DEFAULTS["rho2"]
    rho3: float = DEFAULTS["rho3"]
    alpha: float = DEFAULTS["alpha"]
    theta_bar: float = DEFAULTS["theta_bar"]
    sigma_L: float = DEFAULTS["sigma_L"]
    lam: float = DEFAULTS["lam"]
    kappa: float = DEFAULTS["kappa"]
    zeta: float = DEFAULTS["zeta"]
    delta_t: float = DEFAULTS["delta_t"]
    T: float = DEFAULTS["T"]

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v):
                raise DomainError(f"{f.name} must be finite, got {v!r}")
        if self.sigma_S <= 0:
            raise DomainError("sigma_S must be > 0")
        if self.sigma_L < 0:
            raise DomainError("sigma_L must be >= 0")
        if self.alpha < 0:
            raise DomainError("alpha must be >= 0")
        # beta = 0 is the frictionless (Merton) limit, so it is admitted.
        if self.beta < 0:
            raise DomainError("beta must be >= 0")
        if not 0 <= self.kappa < 1:
            raise DomainError("kappa must lie in [0, 1)")
        if self.delta_t <= 0 or self.T <= 0:
            raise DomainError("delta_t and T must be > 0")
        if not 0 < self.zeta < 1:
            raise DomainError("zeta must lie in (0, 1)")
        for name in ("rho1", "rho2", "rho3"):
            if abs(getattr(self, name)) > 1:
                raise DomainError(f"{name} must lie in [-1, 1]")
        eig = np.linalg.eigvalsh(self.correlation())
        if eig.min() < -1e-12:
            raise DomainError(
                f"correlation matrix is not positive semidefinite (min eigenvalue {eig.min():.3g})"
            )

    def correlation(self) -> np.ndarray:
        return correlation_matrix(self.rho1, self.rho2, self.rho3)

    def with_(self, **changes) -> "ModelParams":
        return replace(self, **changes)

    def frictionless(self) -> "ModelParams":
        """Same market with liquidity coupling and trading costs switched off."""
        return replace(self, beta=0.0, kappa=0.0, sigma_L=0.0)

    def as_dict(self) -> dict:
        return asdict(self)


def _check_L(L):
    L = np.asarray(L, dtype=float)
    if np.any(L < 0):
        raise DomainError("liquidity level L must be >= 0")
    return L


def _out(x):
    return float(x) if np.ndim(x) == 0 else x


def mean_reversion_level(params: ModelParams, L):
    """theta(L) = theta_bar + kappa * lam * L**zeta."""
    L = _check_L(L)
    return _out(params.theta_bar + params.kappa * params.lam * L**params.zeta)


def shock_variance(params: ModelParams, L):
    """Variance rate of beta*L*dB^g + sigma_S*dB^S per unit time.

    Equals (beta L + sigma_S rho1)^2 + (1 - rho1^2) sigma_S^2, which expands to
    beta^2 L^2 + sigma_S^2 + 2 rho1 sigma_S beta L.
    """
    L = np.asarray(L, dtype=float)
    p = params
    return _out((p.beta * L + p.sigma_S * p.rho1) ** 2 + (1.0 - p.rho1**2) * p.sigma_S**2)


def shock_std(params: ModelParams, L):
    L = _check_L(L)
    return _out(np.sqrt(shock_variance(params, L)))


def expected_abs_shock(params: ModelParams, L):
    """E|beta L dB^g + sigma_S dB^S| over one rebalancing interval."""
    return _out(math.sqrt(2.0 / math.pi) * np.asarray(shock_std(params, L)) * math.sqrt(params.delta_t))


def cost_coefficient(params: ModelParams, L):
    """c(L) such that the expected cost drift is c(L) * omega * (1 - omega) * W."""
    s = np.asarray(shock_std(params, L))
    return _out(math.sqrt(2.0 / (math.pi * params.delta_t)) * params.kappa * s)


class HJBCoefficients(NamedTuple):
    a_t: object
    a_W: object
    a_WW: object
    a_L: object
    a_LL: object
    a_WL: object


def hjb_coefficients(params: ModelParams, W, L, t, omega) -> HJBCoefficients:
    """Coefficients of the controlled generator acting on Q(W, L, t).

    Arrays broadcast; ``t`` only enters through the unit coefficient of Q_t.
    """
    W = np.asarray(W, dtype=float)
    L = _check_L(L)
    omega = np.asarray(omega, dtype=float)
    if np.any(W < 0):
        raise DomainError("wealth W must be >= 0")
    if np.any((omega < 0) | (omega > 1)):
        raise DomainError("omega must lie in [0, 1]")
    p = params
    c = np.asarray(cost_coefficient(p, L))
    a_t = np.ones(np.broadcast(W, L, t, omega).shape)
    a_W = p.r * W + (p.mu - p.r) * omega * W - c * omega * (1.0 - omega) * W
    a_WW = 0.5 * np.asarray(shock_variance(p, L)) * omega**2 * W**2
    a_L = p.alpha * (np.asarray(mean_reversion_level(p, L)) - L)
    a_LL = 0.5 * p.sigma_L**2 * np.ones_like(a_t)
    a_WL = (p.rho2 * p.sigma_S + p.rho3 * p.beta * L) * p.sigma_L * omega * W
    shape = a_t.shape
    return HJBCoefficients(
        *(_out(np.broadcast_to(a, shape).astype(float)) for a in (a_t, a_W, a_WW, a_L, a_LL, a_WL))
    )


# ---------------------------------------------------------------------------
# utilities
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UtilitySpec:
    """``kind`` is one of "power", "log", "exp"."""

    kind: str = "power"
    gamma: float = 0.5
    eta: float = 0.5

    def __post_init__(self):
        if self.kind not in ("power", "log", "exp"):
            raise DomainError(f"unknown utility kind {self.kind!r}")
        if self.kind == "power" and (self.gamma >= 1 or self.gamma == 0):
            raise DomainError("power utility needs gamma < 1 and gamma != 0")
        if self.kind == "exp" and self.eta <= 0:
            raise DomainError("exponential utility needs eta > 0")

    @property
    def crra(self) -> bool:
        return self.kind in ("power", "log")

    def label(self) -> str:
        if self.kind == "power":
            return f"power(gamma={self.gamma:g})"
        if self.kind == "exp":
            return f"exp(eta={self.eta:g})"
        return "log"


def _wealth(spec: UtilitySpec, W):
    W = np.asarray(W, dtype=float)
    if spec.crra and np.any(W <= 0):
        raise DomainError(f"{spec.kind} utility requires W > 0")
    return W


def utility(spec: UtilitySpec, W):
    W = _wealth(spec, W)
    if spec.kind == "power":
        return _out(W**spec.gamma / spec.gamma)
    if spec.kind == "log":
        return _out(np.log(W))
    return _out(1.0 - np.exp(-spec.eta * W))


def marginal_utility(spec: UtilitySpec, W):
    W = _wealth(spec, W)
    if spec.kind == "power":
        return _out(W ** (spec.gamma - 1.0))
    if spec.kind == "log":
        return _out(1.0 / W)
    return _out(spec.eta * np.exp(-spec.eta * W))


def utility_second_derivative(spec: UtilitySpec, W):
    W = _wealth(spec, W)
    if spec.kind == "power":
        return _out((spec.gamma - 1.0) * W ** (spec.gamma - 2.0))
    if spec.kind == "log":
        return _out(-1.0 / W**2)
    return _out(-(spec.eta**2) * np.exp(-spec.eta * W))


def utility_inverse_marginal(spec: UtilitySpec, y):
    """Wealth at which U'(W) = y (y > 0)."""
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise DomainError("marginal utility level must be > 0")
    if spec.kind == "power":
        return _out(y ** (1.0 / (spec.gamma - 1.0)))
    if spec.kind == "log":
        return _out(1.0 / y)
    return _out(-np.log(y / spec.eta) / spec.eta)


def relative_risk_aversion(spec: UtilitySpec, W):
    W = _wealth(spec, W)
    if spec.kind == "power":
        return _out(np.full_like(W, 1.0 - spec.gamma))
    if spec.kind == "log":
        return _out(np.ones_like(W))
    return _out(spec.eta * W)


def absolute_risk_aversion(spec: UtilitySpec, W):
    W = _wealth(spec, W)
    if spec.kind == "exp":
        return _out(np.full_like(W, spec.eta))
    return _out(np.asarray(relative_risk_aversion(spec, W)) / W)
