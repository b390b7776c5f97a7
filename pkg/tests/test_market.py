import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from liqhjb import market
from liqhjb.market import DomainError, ModelParams, UtilitySpec

P = ModelParams()


def test_mean_reversion_level_default():
    # 0.6 + kappa * lambda * sqrt(0.6)
    assert market.mean_reversion_level(P, 0.6) == pytest.approx(0.6 + 0.004 * 5 * math.sqrt(0.6), abs=1e-12)
    assert market.mean_reversion_level(P, 0.6) == pytest.approx(0.615492, abs=1e-6)
    assert market.mean_reversion_level(P.with_(kappa=0.0), 1.3) == pytest.approx(0.6)


def test_mean_reversion_level_rejects_negative_L():
    with pytest.raises(DomainError):
        market.mean_reversion_level(P, -0.1)


def test_shock_std_default_and_zero_liquidity():
    assert market.shock_std(P, 0.6) == pytest.approx(math.sqrt(0.26**2 + 0.96 * 0.16), abs=1e-12)
    assert market.shock_std(P, 0.6) == pytest.approx(0.470319, abs=1e-6)
    assert market.shock_std(P, 0.0) == pytest.approx(0.4, abs=1e-12)


def test_shock_std_matches_sampled_combination():
    rng = np.random.default_rng(3)
    z1, z2 = rng.standard_normal((2, 400_000))
    a, b, r1 = 0.3 * 0.6, 0.4, 0.2
    x = a * z1 + b * (r1 * z1 + math.sqrt(1 - r1**2) * z2)
    est = np.mean(np.abs(x)) / math.sqrt(2 / math.pi)
    se = np.std(np.abs(x)) / math.sqrt(x.size) / math.sqrt(2 / math.pi)
    assert abs(est - market.shock_std(P, 0.6)) < 3 * se


def test_expected_abs_shock_arithmetic():
    # sqrt(2/pi) * 0.470319... * sqrt(1/12), recomputed here
    want = math.sqrt(2 / math.pi) * math.sqrt(0.2212) * math.sqrt(1 / 12)
    assert market.expected_abs_shock(P, 0.6) == pytest.approx(want, rel=1e-12)
    assert market.expected_abs_shock(P, 0.6) == pytest.approx(0.1083283, abs=1e-7)


def test_cost_coefficient_arithmetic():
    want = math.sqrt(24 / math.pi) * 0.004 * math.sqrt(0.2212)
    assert market.cost_coefficient(P, 0.6) == pytest.approx(want, rel=1e-12)
    assert market.cost_coefficient(P, 0.6) == pytest.approx(0.00519976, abs=1e-8)
    assert market.cost_coefficient(P.with_(kappa=0.0), 0.6) == 0.0


def test_cost_scales_linearly_in_kappa():
    for L in (0.0, 0.3, 1.7):
        c1 = market.cost_coefficient(P.with_(kappa=0.002), L)
        c2 = market.cost_coefficient(P.with_(kappa=0.004), L)
        assert c2 == pytest.approx(2 * c1, rel=1e-12)


def test_hjb_coefficients_default_point():
    co = market.hjb_coefficients(P, 2.5, 0.6, 0.0, 0.3)
    assert co.a_WW == pytest.approx(0.5 * 0.2212 * 0.09 * 6.25, rel=1e-12)
    assert co.a_WW == pytest.approx(0.0622125, abs=1e-9)
    c = market.cost_coefficient(P, 0.6)
    assert co.a_W == pytest.approx(0.02 * 2.5 + 0.03 * 0.3 * 2.5 - c * 0.3 * 0.7 * 2.5, rel=1e-12)
    assert co.a_L == pytest.approx(2.0 * (market.mean_reversion_level(P, 0.6) - 0.6), rel=1e-12)
    assert co.a_LL == pytest.approx(0.02, rel=1e-12)
    assert co.a_WL == pytest.approx((0.5 * 0.4 + 0.3 * 0.3 * 0.6) * 0.2 * 0.3 * 2.5, rel=1e-12)


def test_hjb_coefficients_zero_stock():
    co = market.hjb_coefficients(P, 3.0, 1.0, 0.2, 0.0)
    assert co.a_W == pytest.approx(0.06)
    assert co.a_WW == 0.0 and co.a_WL == 0.0


def test_params_validation():
    with pytest.raises(ValueError):
        ModelParams(sigma_S=-0.1)
    with pytest.raises(ValueError):
        ModelParams(rho1=0.99, rho2=0.99, rho3=-0.99)
    with pytest.raises(ValueError):
        ModelParams(T=0.0)
    assert ModelParams(beta=0.0).beta == 0.0


def test_frictionless():
    f = P.frictionless()
    assert f.kappa == 0.0 and f.beta == 0.0
    assert f.mu == P.mu and f.sigma_S == P.sigma_S


def test_utilities():
    pw = UtilitySpec("power", gamma=0.5)
    assert market.utility(pw, 4.0) == pytest.approx(4.0)
    assert market.marginal_utility(pw, 4.0) == pytest.approx(0.5)
    assert market.utility_inverse_marginal(pw, 0.5) == pytest.approx(4.0)
    assert market.relative_risk_aversion(pw, 3.0) == pytest.approx(0.5)
    lg = UtilitySpec("log")
    assert market.utility(lg, math.e) == pytest.approx(1.0)
    ex = UtilitySpec("exp", eta=0.5)
    assert market.utility(ex, 2.0) == pytest.approx(1 - math.exp(-1.0))
    assert market.absolute_risk_aversion(ex, 7.0) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        UtilitySpec("power", gamma=1.0)
    with pytest.raises(DomainError):
        market.utility(pw, -1.0)


@settings(max_examples=60, deadline=None)
@given(L1=st.floats(0.0, 3.0), L2=st.floats(0.0, 3.0), s=st.floats(0.0, 1.0))
def test_mean_reversion_level_concave(L1, L2, s):
    m = s * L1 + (1 - s) * L2
    lhs = market.mean_reversion_level(P, m)
    rhs = s * market.mean_reversion_level(P, L1) + (1 - s) * market.mean_reversion_level(P, L2)
    assert lhs >= rhs - 1e-12


@settings(max_examples=60, deadline=None)
@given(W=st.floats(0.1, 10.0), L=st.floats(0.0, 3.0), w=st.floats(0.0, 1.0),
       beta=st.floats(0.0, 1.0), rho1=st.floats(-0.9, 0.9))
def test_diffusion_coefficients_nonnegative(W, L, w, beta, rho1):
    p = P.with_(beta=beta, rho1=rho1, rho2=0.0, rho3=0.0)
    co = market.hjb_coefficients(p, W, L, 0.0, w)
    assert co.a_WW >= 0 and co.a_LL > 0
    # joint diffusion matrix is positive semidefinite
    M = np.array([[co.a_WW, 0.5 * co.a_WL], [0.5 * co.a_WL, co.a_LL]])
    assert np.linalg.eigvalsh(M).min() >= -1e-14
