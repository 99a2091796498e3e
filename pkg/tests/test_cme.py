import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm
from scipy.stats import poisson

from voxcomm.cme import Propagator, TruncatedStateSpace, TruncationError, cme_transient_oracle
from voxcomm.model import PoissonRate, act_deact
from voxcomm.reference import estimate_alpha, estimate_beta, time_grid

from conftest import single_voxel


def test_pure_birth_is_poisson():
    m = single_voxel((PoissonRate(10.0), PoissonRate(0.0)))
    res = cme_transient_oracle(m, 0, 60, [0.5, 1.0], keep_distributions=True)
    assert res.mean_counts[:, 0] == pytest.approx([5.0, 10.0], rel=1e-9)
    n = res.space.states[:, 0]
    assert np.allclose(res.distributions[1], poisson.pmf(n, 10.0), atol=1e-12)
    assert res.leakage[-1] < 1e-12


def test_too_small_cap_is_flagged():
    m = single_voxel((PoissonRate(10.0), PoissonRate(0.0)))
    with pytest.raises(TruncationError):
        cme_transient_oracle(m, 0, 8, [1.0])
    res = cme_transient_oracle(m, 0, 8, [1.0], strict=False)
    assert res.leaked


def test_no_activation_keeps_receptors_idle():
    m = single_voxel((PoissonRate(10.0), PoissonRate(0.0)), M=3).with_receiver(circuit=act_deact(k_on=0.0))
    res = cme_transient_oracle(m, 0, 60, [0.5, 1.0])
    xs = m.output_slots[0]
    assert np.all(res.mean_counts[:, xs] == 0)
    assert np.all(res.mean_counts[:, m.species_slots["X"][0]] == pytest.approx(3.0))


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 7), st.floats(0.01, 3.0), st.integers(0, 10_000))
def test_propagator_matches_dense_expm(n, t, seed):
    rng = np.random.default_rng(seed)
    R = rng.uniform(0, 2, size=(n, n)) * (rng.uniform(size=(n, n)) < 0.6)
    np.fill_diagonal(R, 0)
    # extra exit rate models mass that leaves the sub-space
    exit_rate = R.sum(axis=1) + rng.uniform(0, 1, size=n) * (rng.uniform(size=n) < 0.5)
    G = R - np.diag(exit_rate)
    pi = rng.dirichlet(np.ones(n))
    got = Propagator(sp.csr_matrix(R), exit_rate)(pi, t)
    assert np.allclose(got, pi @ expm(G * t), atol=1e-11)


def test_probability_conserved_up_to_leakage(line3_partitioned):
    grid = time_grid(2.0, 0.5)
    res = cme_transient_oracle(line3_partitioned, 0, 40, grid, strict=False, keep_distributions=True)
    totals = res.distributions.sum(axis=1)
    assert np.all(res.distributions >= -1e-15)
    assert np.allclose(totals + res.leakage, 1.0, atol=1e-10)


def test_state_space_lookup(line3_partitioned):
    space = TruncatedStateSpace.build(line3_partitioned, 0, 30)
    idx = np.arange(0, space.n_states, 97)
    assert np.array_equal(space.lookup(space.states[idx]), idx)
    outside = space.states[:1].copy()
    outside[0, 0] = 31
    assert space.lookup(outside)[0] == -1


@pytest.mark.slow
def test_three_voxel_alpha_matches_simulation(line3_partitioned):
    grid = time_grid(2.0, 0.25)
    res = cme_transient_oracle(line3_partitioned, 0, 100, grid)
    mc = estimate_alpha(line3_partitioned, 0, grid, n_runs=500, seed=99)
    for p, sig in enumerate(mc):
        se = np.maximum(sig.stderr, 1e-12)
        assert np.all(np.abs(res.mean_signal[p] - sig.values) <= 3 * se)


@pytest.mark.slow
def test_three_voxel_mixed_beta_matches_simulation(line3_mixed):
    grid = time_grid(2.0, 0.25)
    res = cme_transient_oracle(line3_mixed, 0, 100, grid)
    mc = estimate_beta(line3_mixed, 0, grid, n_runs=500, seed=98)
    for p, sig in enumerate(mc):
        se = np.maximum(sig.stderr, 1e-12)
        assert np.all(np.abs(res.mean_product[p] - sig.values) <= 3 * se)
