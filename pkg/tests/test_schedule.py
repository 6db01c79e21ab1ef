import math

import numpy as np
import pytest

from idiff.schedule import linear_schedule, query


def test_four_step_tables():
    s = linear_schedule(4, 0.1, 0.4)
    np.testing.assert_allclose(s.betas, [0.1, 0.2, 0.3, 0.4], rtol=0, atol=1e-15)
    np.testing.assert_allclose(s.alphas, [0.9, 0.8, 0.7, 0.6], rtol=0, atol=1e-15)
    np.testing.assert_allclose(s.alpha_bars, [0.9, 0.72, 0.504, 0.3024], rtol=0, atol=1e-15)


def test_single_step():
    s = linear_schedule(1, 0.5, 0.5)
    assert s.betas.tolist() == [0.5]
    assert s.alpha_bars.tolist() == [0.5]


def test_thousand_steps_reach_noise():
    s = linear_schedule(1000, 1e-4, 0.02)
    oracle = math.prod(1.0 - b for b in np.linspace(1e-4, 0.02, 1000))
    assert s.alpha_bars[-1] == pytest.approx(oracle, rel=1e-12)
    assert s.alpha_bars[-1] < 1e-4


def test_query():
    s = linear_schedule(4, 0.1, 0.4)
    beta, alpha, ab, sigma = query(s, 2)
    assert (beta, alpha) == pytest.approx((0.2, 0.8))
    assert ab == pytest.approx(0.72)
    assert sigma == pytest.approx(math.sqrt(0.2))
    assert query(s, 1).alpha_bar == pytest.approx(0.9)
    with pytest.raises(ValueError):
        query(s, 0)
    with pytest.raises(ValueError):
        query(s, 5)


def test_posterior_sigma():
    s = linear_schedule(4, 0.1, 0.4, sigma="posterior")
    # t=1: (1 - ᾱ_0) = 0 so the posterior variance vanishes
    assert s.query(1).sigma == 0.0
    expected = 0.2 * (1 - 0.9) / (1 - 0.72)
    assert s.query(2).sigma == pytest.approx(math.sqrt(expected))


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_rejects_bad_endpoints(args):
    with pytest.raises(ValueError):
        linear_schedule(*args)


@pytest.mark.parametrize("T", [1, 2, 17, 1000, 10_000])
def test_running_product_and_monotone(T):
    s = linear_schedule(T, 1e-4, 0.02)
    acc = 1.0
    for i, a in enumerate(s.alphas):
        acc *= a
        assert abs(s.alpha_bars[i] - acc) <= 1e-12
    assert np.all(s.alphas == 1.0 - s.betas)
    assert np.all(np.diff(s.betas) >= 0)
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert 0 < s.alpha_bars[-1] <= s.alpha_bars[0] < 1
