import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from fuserl.errors import ConfigError, ContractViolation
from fuserl.exploration import (ExplorationBounds, ExplorationSpec, GaussianExplorationConfig, containment_stats,
                                efficiency_ratio, explore, explore_bounded, explore_gaussian, gaussian_containment,
                                penalty_distance)


def test_bounded_stays_in_box():
    rng = np.random.default_rng(0)
    bounds = ExplorationBounds(np.full(10, 0.5))
    samples = explore_bounded(ExplorationBounds(np.full((5000, 10), 0.5)), rng)
    assert samples.min() >= 0.35 and samples.max() <= 0.65
    per_dim, joint = containment_stats(samples, bounds)
    assert joint == 1.0 and np.all(per_dim == 1.0)


def test_bounded_degenerate_box():
    base = np.linspace(-0.5, 0.5, 10)
    out = explore_bounded(ExplorationBounds(base, 0.0, 0.0), np.random.default_rng(1))
    assert np.array_equal(out, base)


def test_bounded_clamps_to_legal_range():
    base = np.r_[np.full(5, 0.95), np.full(5, -0.95)]
    out = explore_bounded(ExplorationBounds(np.tile(base, (2000, 1))), np.random.default_rng(2))
    assert out.max() <= 1.0 and out.min() >= -1.0
    lo, hi = ExplorationBounds(base).edges()
    assert np.all(out >= np.maximum(lo, -1)) and np.all(out <= np.minimum(hi, 1))


def test_bounded_mean_and_uniformity():
    rng = np.random.default_rng(3)
    base = np.linspace(-0.6, 0.6, 10)
    samples = explore_bounded(ExplorationBounds(np.tile(base, (10**5, 1))), rng)
    assert np.all(np.abs(samples.mean(axis=0) - base) < 0.001)
    crit = 1.63 / math.sqrt(len(samples))  # asymptotic 1% critical value
    for d in range(10):
        ks = stats.kstest(samples[:, d] - base[d], stats.uniform(loc=-0.15, scale=0.3).cdf).statistic
        assert ks < crit


def test_gaussian_moments_and_degenerate():
    rng = np.random.default_rng(4)
    base = np.zeros(10)
    wide = (-100.0, 100.0)
    samples = explore_gaussian(np.zeros((10**6 // 10, 10)), GaussianExplorationConfig(0.0, 0.2), rng, wide)
    assert abs(samples.std() - 0.2) < 0.002
    tiny = explore_gaussian(base + 0.3, GaussianExplorationConfig(0.0, 1e-12), rng)
    assert np.allclose(tiny, 0.3, atol=1e-9)
    with pytest.raises(ConfigError):
        GaussianExplorationConfig(std=0.0)


def test_gaussian_containment_oracle():
    p = gaussian_containment(0.2, -0.15, 0.15)
    assert p == pytest.approx(math.erf(0.15 / (0.2 * math.sqrt(2))), abs=1e-15)
    assert p == pytest.approx(0.5467, abs=1e-4)
    ratio = efficiency_ratio(0.2, -0.15, 0.15, 10)
    assert ratio["joint"] == pytest.approx(p**10)
    assert ratio["nominal_ratio"] == 1024.0
    assert 400 < ratio["measured_ratio"] < 450


def test_gaussian_joint_equals_product_of_marginals():
    rng = np.random.default_rng(5)
    base = np.zeros((2 * 10**5, 10))
    samples = explore_gaussian(base, GaussianExplorationConfig(), rng)
    per_dim, joint = containment_stats(samples, ExplorationBounds(np.zeros(10)))
    assert np.all(np.abs(per_dim - 0.5467) < 0.01)
    assert joint == pytest.approx(np.prod(per_dim), rel=0.25)


def test_containment_empty_raises():
    with pytest.raises(ContractViolation):
        containment_stats(np.zeros((0, 3)), ExplorationBounds(np.zeros(3)))


def test_penalty_distance_examples():
    bounds = ExplorationBounds(np.full(3, 0.5))
    dev = penalty_distance(np.full(3, 0.5), bounds)
    assert dev.deviation.tolist() == [0, 0, 0] and dev.side.tolist() == [0, 0, 0]
    dev = penalty_distance(np.array([0.65, 0.74, 0.35]), bounds)
    assert dev.deviation[0] == 0.0 and dev.side[0] == 1
    assert dev.deviation[1] == pytest.approx(0.09, abs=1e-12) and dev.side[1] == 1
    assert dev.deviation[2] == 0.0 and dev.side[2] == -1
    with pytest.raises(ContractViolation):
        penalty_distance(np.zeros(4), bounds)


@given(st.floats(-1, 1), st.floats(-1, 1))
def test_penalty_distance_nonnegative(base, action):
    dev = penalty_distance(np.array([action]), ExplorationBounds(np.array([base])))
    assert dev.deviation[0] >= 0
    inside = base - 0.15 < action < base + 0.15
    assert (dev.side[0] == 0) == inside


def test_spec_validation_and_dispatch():
    with pytest.raises(ConfigError, match="exploration.lower"):
        ExplorationSpec(lower=0.2, upper=0.1).validate()
    with pytest.raises(ConfigError, match="exploration.variant"):
        ExplorationSpec(variant="ou").validate()
    base = np.full(10, 0.2)
    rng = np.random.default_rng(0)
    assert np.array_equal(explore(ExplorationSpec("none"), base, rng), base)
    out = explore(ExplorationSpec("bounded"), base, rng)
    assert np.all(np.abs(out - base) <= 0.15)
    with pytest.raises(ContractViolation):
        ExplorationSpec(lower=0.5, upper=0.6).check_box(np.full(10, 0.9))
