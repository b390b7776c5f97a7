"""Controlled generator, PINN loss and pointwise control maximiser."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import market
from .collocation import CollocationBatch, TrainingBox
from .market import ModelParams, UtilitySpec
from .net import (
    InputJet,
    ParamGrad,
    TwoLayerNet,
    forward,
    forward_jet,
    hidden_features,
    jet_and_pullback,
    residual_jacobian,
    value_and_pullback,
)


@dataclass(frozen=True)
class HJBProblem:
    params: ModelParams
    utility: UtilitySpec
    box: TrainingBox
    w_term: float = 1.0

    def __post_init__(self):
        if self.w_term < 0:
            raise ValueError("w_term must be >= 0")
        if abs(self.box.T - self.params.T) > 1e-12:
            raise ValueError(f"box horizon {self.box.T} differs from model horizon {self.params.T}")
        if self.utility.crra and self.box.W_min <= 0:
            raise ValueError("CRRA utilities need W_min > 0")


@dataclass
class QuadraticInOmega:
    """omega -> A omega^2 + B omega + C reproduces the generator at fixed (point, jet)."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __call__(self, omega):
        return (self.A * omega + self.B) * omega + self.C


@dataclass
class ResidualSample:
    points: np.ndarray
    jet: InputJet
    omega: np.ndarray
    residual: np.ndarray


def _split(points):
    points = np.atleast_2d(np.asarray(points, dtype=float))
    return points[:, 0], points[:, 1], points[:, 2]


def _check_jet(jet: InputJet):
    for name, e in zip(("value", "W", "L", "t", "WW", "LL", "WL"), jet.entries()):
        if not np.all(np.isfinite(e)):
            raise FloatingPointError(f"non-finite jet entry {name}")


def apply_operator(params: ModelParams, points, jet: InputJet, omega):
    """Generator L^omega applied to Q, given Q's jet at ``points``."""
    _check_jet(jet)
    W, L, t = _split(points)
    co = market.hjb_coefficients(params, W, L, t, omega)
    return _apply(co, jet)


def _apply(co, jet):
    return (co.a_t * jet.t + co.a_W * jet.W + co.a_WW * jet.WW
            + co.a_L * jet.L + co.a_LL * jet.LL + co.a_WL * jet.WL)


def decompose_quadratic(params: ModelParams, points, jet: InputJet) -> QuadraticInOmega:
    W, L, _ = _split(points)
    p = params
    c = np.asarray(market.cost_coefficient(p, L))
    var = np.asarray(market.shock_variance(p, L))
    WQW = W * jet.W
    A = 0.5 * var * W**2 * jet.WW + c * WQW
    B = (p.mu - p.r) * WQW - c * WQW + (p.rho2 * p.sigma_S + p.rho3 * p.beta * L) * p.sigma_L * W * jet.WL
    theta = np.asarray(market.mean_reversion_level(p, L))
    C = jet.t + p.r * WQW + p.alpha * (theta - L) * jet.L + 0.5 * p.sigma_L**2 * jet.LL
    return QuadraticInOmega(A, B, C)


def pointwise_optimal_control(quad: QuadraticInOmega):
    """Exact argmax over [0, 1] of A w^2 + B w (ties resolved to the smaller w)."""
    A = np.asarray(quad.A, dtype=float)
    B = np.asarray(quad.B, dtype=float)
    A, B = np.broadcast_arrays(A, B)
    out = np.zeros(A.shape)
    concave = A < 0
    with np.errstate(divide="ignore", invalid="ignore"):
        vertex = np.clip(-B / (2.0 * A), 0.0, 1.0)
    out = np.where(concave, vertex, out)
    # convex or linear: the better endpoint, f(0) = 0 vs f(1) = A + B
    out = np.where(~concave & (A + B > 0), 1.0, out)
    return float(out) if out.ndim == 0 else out


def terminal_utility(problem: HJBProblem, points) -> np.ndarray:
    W = np.atleast_2d(points)[:, 0]
    return np.asarray(market.utility(problem.utility, W), dtype=float)


def control_values(control_net: TwoLayerNet, points, dtype=np.float64) -> np.ndarray:
    return np.asarray(forward(control_net, np.atleast_2d(points), dtype), dtype=float)


def evaluate_residuals(problem: HJBProblem, value_net: TwoLayerNet, control_net: TwoLayerNet,
                       points) -> ResidualSample:
    points = np.atleast_2d(points)
    jet = forward_jet(value_net, points)
    omega = control_values(control_net, points)
    return ResidualSample(points, jet, omega, apply_operator(problem.params, points, jet, omega))


def pde_loss(problem: HJBProblem, value_net: TwoLayerNet, control_net: TwoLayerNet,
             batch: CollocationBatch):
    """Mean squared interior residual plus w_term times mean squared terminal mismatch.

    Returns (loss, interior residuals).
    """
    res = evaluate_residuals(problem, value_net, control_net, batch.interior).residual
    mismatch = forward(value_net, batch.terminal) - terminal_utility(problem, batch.terminal)
    loss = float(np.mean(res**2) + problem.w_term * np.mean(mismatch**2))
    if not np.isfinite(loss):
        bad = np.flatnonzero(~np.isfinite(res))
        where = batch.interior[bad[0]].tolist() if bad.size else "terminal batch"
        raise FloatingPointError(f"non-finite loss (first offending point: {where})")
    return loss, res


def pde_loss_terms(problem, value_net, control_net, batch):
    """(interior term, terminal term) of the loss, unweighted terminal term."""
    res = evaluate_residuals(problem, value_net, control_net, batch.interior).residual
    mismatch = forward(value_net, batch.terminal) - terminal_utility(problem, batch.terminal)
    return float(np.mean(res**2)), float(np.mean(mismatch**2))


def pde_loss_and_grad(problem: HJBProblem, value_net: TwoLayerNet, omega: np.ndarray,
                      batch: CollocationBatch, dtype=np.float64):
    """Loss, interior residuals and d(loss)/d(value-net parameters).

    ``omega`` holds the (frozen) control at the interior points.
    """
    X = batch.interior
    n = X.shape[0]
    jet, pull = jet_and_pullback(value_net, X, dtype)
    co = market.hjb_coefficients(problem.params, X[:, 0], X[:, 1], X[:, 2], omega)
    res = _apply(co, jet)
    g = (2.0 / n) * res
    cot = InputJet(0.0, g * co.a_W, g * co.a_L, g * co.a_t, g * co.a_WW, g * co.a_LL, g * co.a_WL)
    grad = pull(cot)
    y, pull_T = value_and_pullback(value_net, batch.terminal, dtype)
    mismatch = y - terminal_utility(problem, batch.terminal)
    m = batch.terminal.shape[0]
    grad = grad + pull_T((2.0 * problem.w_term / m) * mismatch)
    loss = float(np.mean(res.astype(float) ** 2) + problem.w_term * np.mean(mismatch.astype(float) ** 2))
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite PDE loss during policy evaluation")
    return loss, res, grad


def solve_output_layer(problem: HJBProblem, value_net: TwoLayerNet, omega: np.ndarray,
                       batch: CollocationBatch, ridge: float = 0.0) -> float:
    """Set (W2, b2) to the minimiser of loss + ridge*|W2|^2 on ``batch``; return the loss.

    Given the hidden layer, every jet entry is linear in the output layer, so
    the loss is a linear least-squares problem in (W2, b2). The ridge term
    keeps W2 small when hidden features are nearly collinear.
    """
    X, XT = batch.interior, batch.terminal
    n, m = X.shape[0], XT.shape[0]
    F = hidden_features(value_net, X)
    co = market.hjb_coefficients(problem.params, X[:, 0], X[:, 1], X[:, 2], omega)
    R = (co.a_t[:, None] * F.t + co.a_W[:, None] * F.W + co.a_WW[:, None] * F.WW
         + co.a_L[:, None] * F.L + co.a_LL[:, None] * F.LL + co.a_WL[:, None] * F.WL)
    HT = hidden_features(value_net, XT).value
    wi = 1.0 / np.sqrt(n)
    wt = np.sqrt(problem.w_term / m)
    N = value_net.hidden_size
    M = np.zeros((n + m + N, N + 1))
    M[:n, :N] = wi * R
    M[n:n + m, :N] = wt * HT
    M[n:n + m, N] = wt
    M[n + m:, :N] = np.sqrt(ridge) * np.eye(N)
    rhs = np.concatenate([np.zeros(n), wt * terminal_utility(problem, XT), np.zeros(N)])
    sol, *_ = np.linalg.lstsq(M, rhs, rcond=None)
    if not np.all(np.isfinite(sol)):
        raise FloatingPointError("output-layer least squares returned non-finite weights")
    value_net.W2 = sol[:N].copy()
    value_net.b2 = np.asarray(sol[N])
    fit = M[: n + m] @ sol - rhs[: n + m]
    return float(np.sum(fit**2))


def improvement_objective(problem: HJBProblem, value_net: TwoLayerNet, control_net: TwoLayerNet,
                          points) -> float:
    """Mean of L^omega Q over ``points`` with omega from the control network (signed)."""
    return float(np.mean(evaluate_residuals(problem, value_net, control_net, points).residual))


def improvement_and_grad(quad: QuadraticInOmega, control_net: TwoLayerNet, points,
                         dtype=np.float64) -> tuple[float, ParamGrad]:
    """Objective and the gradient of its *negative* (for a descent optimiser)."""
    omega, pull = value_and_pullback(control_net, points, dtype)
    n = omega.shape[0]
    obj = float(np.mean(quad(omega.astype(float))))
    g = -(2.0 * quad.A * omega + quad.B) / n
    return obj, pull(g)


class EvaluationLSQ:
    """The policy-evaluation loss as a sum of squares, for Gauss-Newton type solvers.

    Rows are interior residuals scaled by 1/sqrt(n) and terminal mismatches
    scaled by sqrt(w_term/m), so ``loss(net)`` equals ``pde_loss`` exactly.
    The control values at the interior points are frozen at construction.
    """

    def __init__(self, problem: HJBProblem, omega, batch: CollocationBatch):
        X, XT = batch.interior, batch.terminal
        omega = np.broadcast_to(np.asarray(omega, dtype=float), (X.shape[0],))
        self.X, self.XT = X, XT
        self.co = market.hjb_coefficients(problem.params, X[:, 0], X[:, 1], X[:, 2], omega)
        co = self.co
        self.coef = InputJet(0.0, co.a_W, co.a_L, co.a_t, co.a_WW, co.a_LL, co.a_WL)
        self.target = terminal_utility(problem, XT)
        self.wi = 1.0 / np.sqrt(X.shape[0])
        self.wt = np.sqrt(problem.w_term / XT.shape[0])

    def residuals_and_jacobian(self, net: TwoLayerNet):
        n, m = self.X.shape[0], self.XT.shape[0]
        J = np.empty((n + m, 5 * net.hidden_size + 1))
        r1, _ = residual_jacobian(net, self.X, self.coef, out=J[:n])
        r2, _ = residual_jacobian(net, self.XT, InputJet(1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0), out=J[n:])
        r = np.concatenate([self.wi * r1, self.wt * (r2 - self.target)])
        J[:n] *= self.wi
        J[n:] *= self.wt
        return r, J

    def terms(self, net: TwoLayerNet):
        res = _apply(self.co, forward_jet(net, self.X))
        mismatch = forward(net, self.XT) - self.target
        return res, mismatch

    def loss(self, net: TwoLayerNet) -> float:
        res, mismatch = self.terms(net)
        return float(np.sum((self.wi * res) ** 2) + np.sum((self.wt * mismatch) ** 2))


class ImprovementLSQ:
    """Policy improvement recast as weighted least squares in the control output.

    Where A < 0, A w^2 + B w = A (w - v)^2 + const with v = -B / (2A), so
    maximising the mean objective is minimising mean(|A| (w - v)^2). The
    target is the clamped maximiser on [0, 1] (which also covers the rare
    points with A >= 0, where the best endpoint is used).
    """

    def __init__(self, quad: QuadraticInOmega, points):
        self.points = np.atleast_2d(points)
        n = self.points.shape[0]
        self.quad = quad
        self.target = np.asarray(pointwise_optimal_control(quad), dtype=float).reshape(n)
        self.weight = np.sqrt(np.abs(np.asarray(quad.A, dtype=float)) / n)

    def residuals_and_jacobian(self, net: TwoLayerNet):
        y, J = residual_jacobian(net, self.points, InputJet(self.weight, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0))
        return y - self.weight * self.target, J

    def loss(self, net: TwoLayerNet) -> float:
        return float(np.sum((self.weight * (forward(net, self.points) - self.target)) ** 2))

    def objective(self, net: TwoLayerNet) -> float:
        return float(np.mean(self.quad(forward(net, self.points))))
