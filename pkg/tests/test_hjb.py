import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from liqhjb import hjb, net as nn, oracles
from liqhjb.collocation import TrainingBox, sample_uniform
from liqhjb.market import ModelParams, UtilitySpec
from helpers import random_net

P = ModelParams()
POWER = UtilitySpec("power", gamma=0.5)
BOX = TrainingBox(W_max=8.0)


def _jet(n, **kw):
    base = {k: np.zeros(n) for k in ("value", "W", "L", "t", "WW", "LL", "WL")}
    base.update({k: np.broadcast_to(np.asarray(v, float), (n,)).copy() for k, v in kw.items()})
    return nn.InputJet(**base)


def _grid(n=10):
    W, L, t = np.meshgrid(np.linspace(0.5, 5, n), np.linspace(0.05, 2, n), np.linspace(0, 1, n), indexing="ij")
    return np.stack([W.ravel(), L.ravel(), t.ravel()], 1)


def test_constant_value_has_zero_residual():
    X = _grid(4)
    res = hjb.apply_operator(P, X, _jet(len(X), value=3.0), 0.4)
    np.testing.assert_array_equal(res, 0.0)


def test_linear_wealth_all_bond():
    X = _grid(4)
    res = hjb.apply_operator(P, X, _jet(len(X), value=X[:, 0], W=1.0), 0.0)
    np.testing.assert_allclose(res, P.r * X[:, 0], rtol=1e-14)


def test_merton_closed_form_solves_frictionless_equation():
    f = P.frictionless()
    X = _grid(10)
    sol = oracles.merton_solution(POWER, f)
    jet = sol.jet(X[:, 0], X[:, 2])
    res = hjb.apply_operator(f, X, jet, sol.policy(X[:, 0], X[:, 2]))
    assert np.max(np.abs(res) / np.abs(jet.value)) < 1e-8


def test_quadratic_reconstructs_operator():
    rng = np.random.default_rng(0)
    X = _grid(5)
    jet = nn.InputJet(*(rng.normal(size=len(X)) for _ in range(7)))
    quad = hjb.decompose_quadratic(P, X, jet)
    for w in (0.0, 0.3, 1.0):
        np.testing.assert_allclose(quad(w), hjb.apply_operator(P, X, jet, w), atol=1e-10)


def test_quadratic_concave_without_friction():
    X = _grid(4)
    jet = _jet(len(X), W=1.0, WW=-0.5)
    quad = hjb.decompose_quadratic(P.with_(kappa=0.0), X, jet)
    assert np.all(quad.A < 0)
    zero = hjb.decompose_quadratic(P, X, _jet(len(X)))
    assert np.all(zero.A == 0) and np.all(zero.B == 0) and np.all(zero.C == 0)


def test_pointwise_optimal_control_examples():
    assert hjb.pointwise_optimal_control(hjb.QuadraticInOmega(-1.0, 0.6, 0.0)) == pytest.approx(0.3)
    assert hjb.pointwise_optimal_control(hjb.QuadraticInOmega(-1.0, 5.0, 0.0)) == 1.0
    assert hjb.pointwise_optimal_control(hjb.QuadraticInOmega(-1.0, -1.0, 0.0)) == 0.0
    assert hjb.pointwise_optimal_control(hjb.QuadraticInOmega(1.0, -0.5, 0.0)) == 1.0
    assert hjb.pointwise_optimal_control(hjb.QuadraticInOmega(1.0, -2.0, 0.0)) == 0.0
    assert hjb.pointwise_optimal_control(hjb.QuadraticInOmega(0.0, 0.0, 1.0)) == 0.0


def test_pointwise_optimal_control_matches_grid_search():
    rng = np.random.default_rng(1)
    A, B = rng.normal(size=1000), rng.normal(size=1000)
    quad = hjb.QuadraticInOmega(A, B, np.zeros(1000))
    w = hjb.pointwise_optimal_control(quad)
    grid = np.linspace(0, 1, 10001)
    vals = A[:, None] * grid**2 + B[:, None] * grid
    assert np.all(quad(w) >= vals.max(axis=1) - 1e-9)
    best = grid[np.argmax(vals, axis=1)]
    assert np.max(np.abs(w - best)) < 1e-3


@settings(max_examples=50, deadline=None)
@given(A=st.floats(-10, 10), B=st.floats(-10, 10))
def test_pointwise_optimum_not_beaten_by_endpoints(A, B):
    quad = hjb.QuadraticInOmega(A, B, 0.0)
    w = hjb.pointwise_optimal_control(quad)
    assert 0.0 <= w <= 1.0
    assert quad(w) >= max(quad(0.0), quad(1.0)) - 1e-12


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 1000), w=st.floats(0.0, 1.0), c=st.floats(-5.0, 5.0))
def test_operator_linear_in_jet(seed, w, c):
    rng = np.random.default_rng(seed)
    X = _grid(3)
    j1 = nn.InputJet(*(rng.normal(size=len(X)) for _ in range(7)))
    j2 = nn.InputJet(*(rng.normal(size=len(X)) for _ in range(7)))
    lhs = hjb.apply_operator(P, X, j1 + j2.scale(c), w)
    rhs = hjb.apply_operator(P, X, j1, w) + c * hjb.apply_operator(P, X, j2, w)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_nonfinite_jet_rejected():
    X = _grid(2)
    with pytest.raises(FloatingPointError, match="WW"):
        hjb.apply_operator(P, X, _jet(len(X), WW=np.nan), 0.1)


def test_problem_validation():
    with pytest.raises(ValueError):
        hjb.HJBProblem(P, POWER, TrainingBox(T=2.0))
    with pytest.raises(ValueError):
        hjb.HJBProblem(P, POWER, BOX, w_term=-1.0)


def _zero_net():
    net = nn.init(8, 0, BOX.lo, BOX.hi)
    net.W2[:] = 0.0
    return net


def test_zero_value_net_terminal_term():
    prob = hjb.HJBProblem(P, POWER, BOX)
    batch = sample_uniform(BOX, 64, 32, 0)
    batch.terminal[:, 0] = 1.0
    ctrl = nn.init(8, 1, BOX.lo, BOX.hi, head="sigmoid")
    interior, terminal = hjb.pde_loss_terms(prob, _zero_net(), ctrl, batch)
    assert interior == 0.0 and terminal == pytest.approx(4.0)
    loss, _ = hjb.pde_loss(prob, _zero_net(), ctrl, batch)
    loss2, _ = hjb.pde_loss(hjb.HJBProblem(P, POWER, BOX, 2.0), _zero_net(), ctrl, batch)
    assert loss == pytest.approx(4.0) and loss2 == pytest.approx(8.0)


def test_loss_gradient_and_lsq_forms_agree():
    prob = hjb.HJBProblem(P, POWER, BOX, 0.7)
    batch = sample_uniform(BOX, 50, 20, 1)
    v = random_net(3, hidden=10)
    v.lo, v.hi = BOX.lo, BOX.hi
    ctrl = random_net(4, hidden=10, head="sigmoid")
    omega = hjb.control_values(ctrl, batch.interior)
    loss, _ = hjb.pde_loss(prob, v, ctrl, batch)
    loss_g, _, grad = hjb.pde_loss_and_grad(prob, v, omega, batch)
    lsq = hjb.EvaluationLSQ(prob, omega, batch)
    r, J = lsq.residuals_and_jacobian(v)
    assert loss_g == pytest.approx(loss, rel=1e-12)
    assert lsq.loss(v) == pytest.approx(loss, rel=1e-12)
    assert float(r @ r) == pytest.approx(loss, rel=1e-12)
    flat = np.concatenate([a.ravel() for a in grad.arrays()])
    np.testing.assert_allclose(2 * J.T @ r, flat, rtol=1e-9, atol=1e-12)


def test_improvement_objective_ordering():
    rng = np.random.default_rng(5)
    X = _grid(4)
    jet = nn.InputJet(*(rng.normal(size=len(X)) for _ in range(7)))
    jet.WW = -np.abs(jet.WW) - 0.1
    quad = hjb.decompose_quadratic(P, X, jet)
    best = np.mean(quad(hjb.pointwise_optimal_control(quad)))
    for w in (0.0, 0.5, 1.0, rng.uniform(size=len(X))):
        assert best >= np.mean(quad(w)) - 1e-12
    assert np.mean(quad(0.0)) == pytest.approx(np.mean(quad.C))


def test_improvement_lsq_fit_raises_objective():
    rng = np.random.default_rng(6)
    X = _grid(5)
    jet = nn.InputJet(*(rng.normal(size=len(X)) for _ in range(7)))
    jet.WW = -np.abs(jet.WW) - 1.0
    quad = hjb.decompose_quadratic(P, X, jet)
    ctrl = nn.init(16, 0, BOX.lo, BOX.hi, head="sigmoid", zero_output=True)
    lsq = hjb.ImprovementLSQ(quad, X)
    start = lsq.objective(ctrl)
    state = nn.LMState()
    for _ in range(20):
        nn.lm_step(ctrl, lsq.residuals_and_jacobian, lsq.loss, state)
    assert lsq.objective(ctrl) > start
