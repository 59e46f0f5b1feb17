import numpy as np
import pytest

from biphasic_cycle import (ModelParams, SimConfig, neg_loglik, onset_probabilities, preset,
                            simulate)
from biphasic_cycle.simulate import SafetyCap
from biphasic_cycle.stages import stage_length_pmf


@pytest.fixture(scope="module")
def sims10k(p3539):
    return simulate(SimConfig(p3539, 10_000, seed=99))


def test_shapes_and_onsets(small_sim):
    for s in small_sim:
        assert s.z[0] == 1 and s.z[-1] == 1 and s.z.sum() == 2
        assert s.n_days == s.meta["cycle_lengths"][0] + 1
        assert s.theta[0] == 0.0
        assert np.all(np.diff(s.theta) > 0)


def test_switch_day_bookkeeping(small_sim):
    for s in small_sim:
        sw = s.meta["switch_days"][0]
        frac = s.theta - np.floor(s.theta)
        assert frac[sw - 1] >= 0.5 or sw == s.n_days + 1
        assert np.all(frac[:sw - 1] < 0.5)
        assert s.meta["stage1_lengths"][0] + s.meta["stage2_lengths"][0] == s.cycle_length


def test_noiseless_means(p3539):
    for s in simulate(SimConfig(p3539, 20, seed=1, noiseless=True)):
        obs = ~np.isnan(s.y)
        frac = s.theta[obs] % 1
        expected = np.where(frac < 0.5, p3539.stage1.mu, p3539.stage2.mu)
        assert np.array_equal(s.y[obs], expected)


def test_missing_rate(p3539):
    sims = simulate(SimConfig(p3539, 2000, seed=3))
    y = np.concatenate([s.y for s in sims])
    assert abs(np.isnan(y).mean() - 0.15) < 0.01
    assert all(not np.isnan(s.z.astype(float)).any() for s in sims)


def test_seeded_determinism(p3539):
    a = simulate(SimConfig(p3539, 30, seed=5))
    b = simulate(SimConfig(p3539, 30, seed=5))
    c = simulate(SimConfig(p3539, 30, seed=6))
    assert all(np.array_equal(x.y, y.y, equal_nan=True) and np.array_equal(x.z, y.z)
               for x, y in zip(a, b))
    assert not all(np.array_equal(x.y, y.y, equal_nan=True) for x, y in zip(a, c))


def test_mean_cycle_length(sims10k, p3539):
    f = onset_probabilities(0.0, p3539, 200)
    mean_f = float(np.dot(np.arange(1, 201), f) / f.sum())
    mean_sim = np.mean([s.cycle_length for s in sims10k])
    assert abs(mean_sim - mean_f) < 0.2


def test_stage1_pmf(sims10k, p3539):
    s1 = np.array([s.meta["stage1_lengths"][0] for s in sims10k])
    # a stage-1 length counts the days before the switch, the pmf counts increments
    emp = np.bincount(s1, minlength=80)[1:80] / len(s1)
    pmf = stage_length_pmf(1, p3539, 79)
    assert np.abs(emp - pmf).max() < 0.01


def test_safety_cap():
    p = ModelParams.explicit(1.0, 5000.0, 1.0, 5000.0, 0, .2, .4, .2)
    with pytest.raises(SafetyCap):
        simulate(SimConfig(p, 2, max_days_per_cycle=100))


def test_multi_cycle_series(p3539):
    s = simulate(SimConfig(p3539, 3, seed=2, cycles_per_series=3))
    for x in s:
        assert x.z.sum() == 4
        assert len(x.meta["cycle_lengths"]) == 3


def test_config_round_trip(p3539):
    cfg = SimConfig(p3539, 10, missing_rate=0.2, seed=7, age_group="35-39")
    assert SimConfig.from_dict(cfg.to_dict()) == cfg


def test_bad_config(p3539):
    with pytest.raises(ValueError):
        SimConfig(p3539, 10, missing_rate=1.0)


def test_likelihood_concentrates_near_truth(p2529):
    data = simulate(SimConfig(p2529, 300, seed=31))
    base = neg_loglik(p2529, data, n_bins=128)
    rng = np.random.default_rng(0)
    for _ in range(10):
        f = rng.choice([0.5, 1.5], size=8)
        s1, s2 = p2529.stage1, p2529.stage2
        q = ModelParams.explicit(s1.alpha * f[0], s1.beta * f[1], s2.alpha * f[2], s2.beta * f[3],
                                 s1.mu + 0.5 * abs(s1.mu) * (f[4] - 1) * 2, s1.sigma * f[5],
                                 s2.mu * f[6], s2.sigma * f[7])
        assert base <= neg_loglik(q, data, n_bins=128)
