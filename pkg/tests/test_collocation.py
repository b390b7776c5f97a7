import numpy as np
import pytest

from liqhjb.collocation import TrainingBox, adaptive_resample, make_rng, sample_uniform

BOX = TrainingBox()


def test_default_box_bounds():
    np.testing.assert_array_equal(BOX.lo, [0.1, 0.01, 0.0])
    np.testing.assert_array_equal(BOX.hi, [5.0, 2.0, 1.0])


def test_uniform_batch_inside_box_and_terminal_on_T():
    b = sample_uniform(BOX, 4096, 512, 3)
    assert b.interior.shape == (4096, 3) and b.terminal.shape == (512, 3)
    assert np.all(BOX.contains(b.interior)) and np.all(BOX.contains(b.terminal))
    assert np.all(b.terminal[:, 2] == BOX.T)


def test_uniform_batch_mean_within_three_se():
    b = sample_uniform(BOX, 50_000, 10, (1, 2))
    W = b.interior[:, 0]
    mid, se = 0.5 * (BOX.W_min + BOX.W_max), (BOX.W_max - BOX.W_min) / np.sqrt(12 * W.size)
    assert abs(W.mean() - mid) < 3 * se


def test_same_key_same_batch():
    a, b = sample_uniform(BOX, 100, 10, (4, 1, 7)), sample_uniform(BOX, 100, 10, (4, 1, 7))
    np.testing.assert_array_equal(a.interior, b.interior)
    assert not np.array_equal(a.interior, sample_uniform(BOX, 100, 10, (4, 1, 8)).interior)


def test_stream_is_counter_based():
    x = make_rng(5, 2).standard_normal(4)
    make_rng(5, 1).standard_normal(1000)
    np.testing.assert_array_equal(make_rng(5, 2).standard_normal(4), x)


def test_bad_box_and_sizes():
    with pytest.raises(ValueError):
        TrainingBox(W_min=0.0)
    with pytest.raises(ValueError):
        TrainingBox(L_min=2.0, L_max=1.0)
    with pytest.raises(ValueError):
        sample_uniform(BOX, 0, 10, 0)


def test_interior_box_margin():
    inner = BOX.interior(0.1)
    assert inner.W_min == pytest.approx(0.59) and inner.W_max == pytest.approx(4.51)
    assert inner.L_min == pytest.approx(0.209) and inner.L_max == pytest.approx(1.801)


def test_adaptive_keeps_largest_residuals():
    pts = adaptive_resample(BOX, lambda x: x[:, 0], 2000, 100, 0)
    pool = make_rng(0).uniform(BOX.lo, BOX.hi, size=(2000, 3))
    np.testing.assert_array_equal(np.sort(pts[:, 0]), np.sort(pool[:, 0])[-100:])


def test_adaptive_selection_beats_pool_mean():
    f = lambda x: np.sin(3 * x[:, 0]) * x[:, 1]
    pts = adaptive_resample(BOX, f, 5000, 500, 1)
    pool = make_rng(1).uniform(BOX.lo, BOX.hi, size=(5000, 3))
    assert np.mean(np.abs(f(pts))) >= np.mean(np.abs(f(pool)))
    assert len(np.unique(pts, axis=0)) == 500


def test_adaptive_ties_take_first_pool_points():
    pts = adaptive_resample(BOX, lambda x: np.ones(len(x)), 300, 20, 2)
    pool = make_rng(2).uniform(BOX.lo, BOX.hi, size=(300, 3))
    np.testing.assert_array_equal(pts, pool[:20])


def test_adaptive_concentrates_in_indicator_region():
    pts = adaptive_resample(BOX, lambda x: (x[:, 0] < 1.0).astype(float), 4000, 200, 3)
    assert np.all(pts[:, 0] < 1.0)


def test_adaptive_reports_nonfinite_point():
    def f(x):
        r = np.zeros(len(x))
        r[17] = np.nan
        return r

    with pytest.raises(FloatingPointError, match="candidate 17"):
        adaptive_resample(BOX, f, 100, 10, 0)
    with pytest.raises(ValueError):
        adaptive_resample(BOX, lambda x: x[:, 0], 10, 20, 0)
