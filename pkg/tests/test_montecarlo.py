import math

import numpy as np
import pytest

from liqhjb import montecarlo as mc, oracles
from liqhjb.market import DomainError, ModelParams, UtilitySpec
from liqhjb.policy_iteration import PolicySurface

P = ModelParams()
POWER = UtilitySpec("power", gamma=0.5)


def const(w):
    return lambda W, L, t: np.full_like(W, w)


def test_cholesky_identity_and_defaults():
    np.testing.assert_array_equal(mc.cholesky3(0, 0, 0), np.eye(3))
    F = mc.cholesky3(0.2, 0.5, 0.3)
    assert np.allclose(F, np.tril(F))
    C = np.array([[1, 0.2, 0.3], [0.2, 1, 0.5], [0.3, 0.5, 1]])
    assert np.max(np.abs(F @ F.T - C)) < 1e-12


def test_cholesky_degenerate_and_invalid():
    F = mc.cholesky3(1.0, 0.4, 0.4)
    C = np.array([[1, 1, 0.4], [1, 1, 0.4], [0.4, 0.4, 1]])
    assert np.max(np.abs(F @ F.T - C)) < 1e-10
    assert F[1, 1] == 0.0
    with pytest.raises(DomainError):
        mc.cholesky3(0.99, 0.99, -0.99)


def test_all_bond_grows_at_riskless_rate():
    for sub in (1, 4):
        s = mc.simulate(P, POWER, const(0.0), mc.PathConfig(n_paths=500, substeps=sub, keep_paths=True))
        exact = 2.5 * math.exp(P.r * P.T)
        h = P.delta_t / sub
        rel = np.abs(s.W_T / exact - 1.0)
        assert rel.max() < 0.5 * P.r**2 * P.T * h * 1.01
        assert np.ptp(s.W_T) == 0.0
        assert s.mean_cost == 0.0


@pytest.mark.parametrize("sub", [1, 2, 4])
def test_merton_constant_policy_within_three_se(sub):
    f = P.frictionless()
    s = mc.simulate(f, POWER, const(0.375), mc.PathConfig(n_paths=100_000, substeps=sub, W0=1.0, seed=sub))
    ref = oracles.merton_value_power(f, 0.5, 1.0, 0.0)
    assert abs(s.z_score(ref)) < 3
    assert s.n_absorbed == 0


def test_liquidity_marginals_match_ou_moments():
    p = P.with_(beta=0.0, kappa=0.0)
    cfg = mc.PathConfig(n_paths=100_000, substeps=32, L0=1.2, seed=11, keep_paths=True)
    s = mc.simulate(p, POWER, const(0.0), cfg)
    L = s.L_T
    mean = p.theta_bar + (1.2 - p.theta_bar) * math.exp(-p.alpha * p.T)
    var = p.sigma_L**2 * (1 - math.exp(-2 * p.alpha * p.T)) / (2 * p.alpha)
    se_mean = math.sqrt(var / L.size)
    se_var = var * math.sqrt(2.0 / (L.size - 1))
    assert abs(L.mean() - mean) < 3 * se_mean
    assert abs(L.var(ddof=1) - var) < 3 * se_var


def test_antithetic_agrees_with_plain():
    f = P.frictionless()
    a = mc.simulate(f, POWER, const(0.375), mc.PathConfig(n_paths=50_000, W0=1.0, seed=3, antithetic=True))
    b = mc.simulate(f, POWER, const(0.375), mc.PathConfig(n_paths=50_000, W0=1.0, seed=4))
    assert abs(a.mean_utility - b.mean_utility) < 3 * math.hypot(a.std_error, b.std_error)
    assert a.std_error < b.std_error


def test_cost_modes_agree_within_ten_percent():
    cfg = dict(n_paths=20_000, seed=5)
    e = mc.simulate(P, POWER, const(0.25), mc.PathConfig(cost_mode="expected_approx", **cfg))
    r = mc.simulate(P, POWER, const(0.25), mc.PathConfig(cost_mode="realized_exact", **cfg))
    assert e.mean_cost > 0 and r.mean_cost > 0
    assert abs(r.mean_cost / e.mean_cost - 1.0) < 0.10


def test_trade_records_nonnegative_cost():
    s = mc.simulate(P, POWER, const(0.4), mc.PathConfig(n_paths=200, cost_mode="realized_exact", record_trades=True))
    assert len(s.trades) == 11
    assert all(np.all(tr.cost >= 0) for tr in s.trades)
    with pytest.raises(ValueError):
        mc.TradeRecord(1, 0.1, np.zeros(2), np.array([0.1, -0.1]))


def test_zero_kappa_realized_mode_has_no_cost():
    s = mc.simulate(P.with_(kappa=0.0), POWER, const(0.4), mc.PathConfig(n_paths=500, cost_mode="realized_exact"))
    assert s.mean_cost == 0.0


def test_results_independent_of_block_layout():
    f = P.frictionless()
    a = mc.simulate(f, POWER, const(0.3), mc.PathConfig(n_paths=mc.BLOCK + 10, seed=2, keep_paths=True))
    b = mc.simulate(f, POWER, const(0.3), mc.PathConfig(n_paths=mc.BLOCK, seed=2, keep_paths=True))
    np.testing.assert_array_equal(a.W_T[: mc.BLOCK], b.W_T)


def test_standard_error_definition():
    s = mc.simulate(P, POWER, const(0.3), mc.PathConfig(n_paths=3000, keep_paths=True))
    assert s.std_error == pytest.approx(np.std(s.utility, ddof=1) / math.sqrt(3000), rel=1e-12)


def test_policy_outside_unit_interval_rejected():
    with pytest.raises(ValueError):
        mc.simulate(P, POWER, const(1.2), mc.PathConfig(n_paths=10))
    with pytest.raises(ValueError):
        mc.PathConfig(cost_mode="other")


def _surface(fn):
    W, L, t = np.linspace(0.5, 5, 6), np.linspace(0.1, 1.9, 5), np.linspace(0, 1, 4)
    G = np.meshgrid(W, L, t, indexing="ij")
    return PolicySurface(W, L, t, fn(*G))


def test_surface_policy_clamps_outside():
    s = _surface(lambda W, L, t: 0.1 * W / 5 + 0.05 * L)
    pol = mc.surface_policy(s)
    assert pol(np.array([10.0]), np.array([0.1]), np.array([0.0]))[0] == pytest.approx(0.1 + 0.005)
    assert pol(np.array([0.01]), np.array([5.0]), np.array([0.5]))[0] == pytest.approx(0.01 + 0.095)
    assert pol(np.array([2.0]), np.array([1.0]), np.array([0.3]))[0] == pytest.approx(0.04 + 0.05)


def test_constant_surface_reproduces_constant_policy():
    f = P.frictionless()
    cfg = mc.PathConfig(n_paths=20_000, W0=1.0, L0=0.6, seed=9)
    a = mc.evaluate_policy_surface(_surface(lambda W, L, t: 0.375 + 0 * W), f, POWER, cfg)
    b = mc.simulate(f, POWER, const(0.375), cfg)
    assert a.mean_utility == pytest.approx(b.mean_utility, rel=1e-12)


def test_surface_must_cover_horizon_and_start():
    W, L, t = np.linspace(0.5, 5, 3), np.linspace(0.1, 1.9, 3), np.linspace(0, 0.5, 3)
    s = PolicySurface(W, L, t, np.full((3, 3, 3), 0.3))
    with pytest.raises(ValueError):
        mc.evaluate_policy_surface(s, P, POWER, mc.PathConfig(n_paths=10))
    s = _surface(lambda W, L, t: 0.3 + 0 * W)
    with pytest.raises(ValueError):
        mc.evaluate_policy_surface(s, P, POWER, mc.PathConfig(n_paths=10, W0=9.0))


def test_csv_exports(tmp_path):
    s = mc.simulate(P, POWER, const(0.3), mc.PathConfig(n_paths=100, keep_paths=True))
    s.to_csv(tmp_path / "stats.csv")
    s.dump_paths(tmp_path / "paths.csv")
    lines = (tmp_path / "paths.csv").read_text().splitlines()
    assert lines[1] == "path_id,W_T,utility,total_cost" and len(lines) == 102
    assert (tmp_path / "stats.csv").read_text().splitlines()[1].startswith("n_paths,seed,cost_mode,mean_utility")
