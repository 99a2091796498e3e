import numpy as np
import pytest

from voxcomm.model import Boundary, PoissonRate, act_deact
from voxcomm.reference import (ReferenceCache, ReferenceSet, ReferenceSignal, estimate_alpha,
                               estimate_beta, estimate_references, time_grid)

from conftest import single_voxel


def birth_death(M=0, k_on=0.005):
    m = single_voxel((PoissonRate(10.0), PoissonRate(0.0)), M=M,
                     boundary=Boundary.absorbing(1 / 54))
    if k_on != 0.005:
        m = m.with_receiver(circuit=act_deact(k_on=k_on))
    return m


def test_time_grid():
    g = time_grid(2.5, 0.01)
    assert len(g) == 251 and g[0] == 0.0 and g[-1] == pytest.approx(2.5)
    with pytest.raises(ValueError):
        time_grid(1.0, 0.3)
    with pytest.raises(ValueError):
        time_grid(0.001, 0.01)


def test_alpha_birth_death_closed_form():
    (a,) = estimate_alpha(birth_death(), 0, time_grid(1.0, 0.05), n_runs=2000, seed=3)
    exact = 10 * (1 - np.exp(-1.0))
    assert exact == pytest.approx(6.32, abs=0.005)
    assert abs(a.values[-1] - exact) <= 3 * a.stderr[-1]
    assert a.n_runs == 2000 and a.seed == 3


def test_zero_emission_gives_zero_references():
    grid = time_grid(1.0, 0.1)
    (a,) = estimate_alpha(birth_death(M=5), 1, grid, n_runs=20)
    (b,) = estimate_beta(birth_death(M=5), 1, grid, n_runs=20)
    assert not a.values.any() and not b.values.any()


def test_beta_is_M_alpha_without_activation():
    m = birth_death(M=7, k_on=0.0)
    grid = time_grid(1.0, 0.1)
    (a,) = estimate_alpha(m, 0, grid, n_runs=200, seed=5)
    (b,) = estimate_beta(m, 0, grid, n_runs=200, seed=5)
    assert np.allclose(b.values, 7 * a.values)


def test_stderr_halves_with_four_times_the_runs():
    m = birth_death()
    grid = time_grid(1.0, 0.25)
    (small,) = estimate_alpha(m, 0, grid, n_runs=500, seed=1)
    (big,) = estimate_alpha(m, 0, grid, n_runs=2000, seed=2)
    ratio = small.stderr[1:] / big.stderr[1:]
    assert np.all((ratio > 1.6) & (ratio < 2.5))


def test_empty_grid_rejected():
    with pytest.raises(ValueError):
        estimate_alpha(birth_death(), 0, [], n_runs=5)


def test_piecewise_linear_interpolation_and_integral():
    sig = ReferenceSignal("alpha", 0, 0, np.array([0.0, 1.0, 2.0]), np.array([0.0, 2.0, 2.0]))
    assert sig(0.5) == pytest.approx(1.0)
    assert sig.integral(1.0) == pytest.approx(1.0)
    assert sig.integral(0.5) == pytest.approx(0.25)
    assert sig.integral(2.0) == pytest.approx(3.0)
    # held constant past the grid
    assert sig.integral(3.0) == pytest.approx(5.0)


def test_integral_matches_quadrature(rng):
    t = np.linspace(0, 2, 21)
    v = rng.uniform(0, 5, size=21)
    sig = ReferenceSignal("alpha", 0, 0, t, v)
    fine = np.linspace(0, 1.37, 200001)
    assert sig.integral(1.37) == pytest.approx(np.trapezoid(sig(fine), fine), rel=1e-6)


def test_signal_validation():
    with pytest.raises(ValueError):
        ReferenceSignal("alpha", 0, 0, np.array([0.0, 0.0]), np.array([1.0, 1.0]))
    with pytest.raises(ValueError):
        ReferenceSignal("alpha", 0, 0, np.array([0.0, 1.0]), np.array([1.0]))


def test_reference_set_shapes(line3_partitioned):
    refs = estimate_references(line3_partitioned, "alpha", time_grid(1.0, 0.1), n_runs=10, seed=4)
    assert refs.values.shape == (2, 2, 11)
    assert refs.at([0.05, 0.5]).shape == (2, 2, 2)
    assert refs.signal(1, 0).symbol == 1


def test_cache_round_trip(tmp_path, line3_partitioned):
    cache = ReferenceCache(tmp_path)
    grid = time_grid(1.0, 0.1)
    a = estimate_references(line3_partitioned, "beta", grid, n_runs=10, seed=4, cache=cache)
    assert len(list(tmp_path.iterdir())) == 4
    b = cache.load(line3_partitioned, "beta", grid, 10, 4)
    assert np.array_equal(a.values, b.values)
    assert cache.load(line3_partitioned, "beta", grid, 11, 4) is None
    assert cache.load(line3_partitioned, "alpha", grid, 10, 4) is None


def test_finer_grid_changes_filter_output_little(line3_partitioned):
    from voxcomm.demod import demod_partitioned_approx
    from voxcomm.model import ChannelKind
    from voxcomm.ssa import extract_observations, simulate
    m = line3_partitioned
    g = m.channels_of(ChannelKind.ACTIVATION)[0].constant
    # same seed, so both grids sample the same replicate trajectories
    coarse = estimate_references(m, "alpha", time_grid(2.0, 0.02), 400, seed=8)
    fine = estimate_references(m, "alpha", time_grid(2.0, 0.01), 400, seed=8)
    assert np.array_equal(coarse.values, fine.values[:, :, ::2])
    for i in range(5):
        obs = extract_observations(simulate(m, i % 2, 2.0, 5, replicate=i), m)
        z1 = demod_partitioned_approx(obs, coarse, g, 10).Z[:, -1]
        z2 = demod_partitioned_approx(obs, fine, g, 10).Z[:, -1]
        assert np.allclose(z1, z2, rtol=0.01)
