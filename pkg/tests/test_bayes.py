import numpy as np
import pytest

from voxcomm.bayes import OptimalFilter, bayes_filter_optimal
from voxcomm.cme import TruncationError
from voxcomm.model import ChannelKind, PoissonRate, act_deact
from voxcomm.ssa import extract_observations, simulate

from conftest import single_voxel


@pytest.fixture(scope="module")
def one_voxel():
    return single_voxel((PoissonRate(10.0), PoissonRate(30.0)), M=3)


def test_frozen_system_keeps_prior():
    m = single_voxel((PoissonRate(0.0), PoissonRate(0.0)), M=2, D=0.0).with_receiver(
        circuit=act_deact(k_on=0.0, k_off=0.0))
    obs = extract_observations(simulate(m, 0, 1.0, 1), m)
    assert len(obs.times) == 0
    out = bayes_filter_optimal(m, obs, 0, truncation=5, grid=[0.25, 0.5, 1.0], prior=0.3)
    assert np.allclose(out.L, np.log(0.3))
    assert np.all(out.mean_signal == 0)


def test_single_voxel_reduces_to_conditional_mean_filter(one_voxel):
    m = one_voxel
    g = m.channels_of(ChannelKind.ACTIVATION)[0].constant
    M = m.receiver.M
    tr = simulate(m, 1, 1.5, 4)
    obs = extract_observations(tr, m)
    ups = obs.times[obs.deltas[:, 0] > 0]
    assert len(ups) >= 2
    filt = OptimalFilter(m, 1, truncation=80)
    t_jump = float(ups[0])
    eps = 1e-9
    out = filt.run(obs, [t_jump - eps, t_jump])
    # the jump adds log E[N_R(t-) | k, history]
    assert out.L[1] - out.L[0] == pytest.approx(np.log(out.mean_signal[0, 0]), abs=1e-6)

    # between events L drifts at -g (M - X*) E[N_R | k, history]
    a, b = t_jump, float(obs.times[np.searchsorted(obs.times, t_jump, side="right")])
    fine = np.linspace(a, b - eps, 801)
    run = filt.run(obs, fine)
    x_star = obs.counts()[np.searchsorted(obs.times, t_jump, side="right") - 1, 0]
    expected = -g * (M - x_star) * np.trapezoid(run.mean_signal[0], fine)
    assert run.L[-1] - run.L[0] == pytest.approx(expected, rel=1e-4)


def test_posterior_mean_within_bounds(one_voxel):
    m = one_voxel
    obs = extract_observations(simulate(m, 0, 1.0, 7), m)
    out = bayes_filter_optimal(m, obs, 0, truncation=80, grid=np.linspace(0.1, 1.0, 10))
    assert np.all(out.mean_signal >= 0) and np.all(np.isfinite(out.L))
    assert out.leakage < 1e-6 and not out.impossible


def test_history_impossible_under_silent_symbol():
    m = single_voxel((PoissonRate(0.0), PoissonRate(30.0)), M=3)
    for i in range(20):
        obs = extract_observations(simulate(m, 1, 1.0, 3, replicate=i), m)
        if (obs.deltas > 0).any():
            break
    out = bayes_filter_optimal(m, obs, 0, truncation=60)
    assert out.impossible and out.L[-1] == -np.inf
    assert np.isfinite(bayes_filter_optimal(m, obs, 1, truncation=60).L[-1])


def test_leakage_is_reported():
    m = single_voxel((PoissonRate(10.0), PoissonRate(30.0)), M=3)
    obs = extract_observations(simulate(m, 1, 2.0, 5), m)
    with pytest.raises(TruncationError):
        bayes_filter_optimal(m, obs, 1, truncation=10)


def test_argument_checks(one_voxel, line3_partitioned):
    obs = extract_observations(simulate(one_voxel, 0, 1.0, 1), one_voxel)
    with pytest.raises(ValueError):
        bayes_filter_optimal(one_voxel, obs, 0, mode="mixed", truncation=40)
    filt = OptimalFilter(one_voxel, 0, truncation=40)
    with pytest.raises(ValueError):
        bayes_filter_optimal(one_voxel, obs, 1, filt=filt)
    with pytest.raises(ValueError):
        filt.run(obs, [2.0])
    other = extract_observations(simulate(line3_partitioned, 0, 1.0, 1), line3_partitioned)
    with pytest.raises(ValueError):
        filt.run(other, [1.0])


def test_three_voxel_filters_agree_on_most_decisions(line3_partitioned):
    from voxcomm.demod import demod_partitioned_approx
    from voxcomm.reference import estimate_references, time_grid
    m = line3_partitioned
    refs = estimate_references(m, "alpha", time_grid(2.0, 0.01), 200, seed=3)
    g = m.channels_of(ChannelKind.ACTIVATION)[0].constant
    filters = [OptimalFilter(m, k, 100) for k in range(2)]
    agree = 0
    for i in range(10):
        obs = extract_observations(simulate(m, i % 2, 2.0, 77, replicate=i), m)
        L = [f.run(obs, [2.0]).L[-1] for f in filters]
        agree += int(np.argmax(L) == demod_partitioned_approx(obs, refs, g, 10).decision[-1])
    assert agree >= 8
