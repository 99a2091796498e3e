import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from voxcomm.lna import (LNAError, _rk4, assemble_mean_system, build_noise_system, gaussian_ber,
                         lna_references, min_eigenvalue, solve_lyapunov, solve_mean_system,
                         z_moments_and_ber)
from voxcomm.model import (Boundary, MediumSpec, PoissonRate, Pulse, ReceiverSpec, TransmitterSpec,
                           act_deact, assemble_model, build_grid)
from voxcomm.reference import time_grid

from conftest import single_voxel


def hand_line(d_r=1.8):
    grid = build_grid((3, 1, 1), 1 / 3, Boundary.reflecting())
    tx = TransmitterSpec(((3, 1, 1),), (PoissonRate(10.0), PoissonRate(40.0)))
    rx = ReceiverSpec(((1, 1, 1), (2, 1, 1)), "mixed", d_r, act_deact(), 4)
    return assemble_model(grid, MediumSpec(1.0), tx, rx)


def cube2(d_r=0.2, M=10):
    grid = build_grid((2, 2, 2), 1 / 3, Boundary.reflecting())
    tx = TransmitterSpec(((1, 1, 1),), (Pulse(50.0, 0.2), Pulse(200.0, 0.2)))
    rx = ReceiverSpec(((1, 2, 2), (2, 2, 2)), "mixed", d_r, act_deact(), M)
    return assemble_model(grid, MediumSpec(1.0), tx, rx)


def birth_death(r=10.0, lam=1.0):
    return single_voxel((PoissonRate(r), PoissonRate(r)), boundary=Boundary.absorbing(lam / 54))


# ---------------------------------------------------------------- golden system

HAND_S = np.array([
    [-1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0],
    [1, -1, -1, 1, 0, 0, 0, 0, 0, 0, 0, 0],
    [0, 0, 1, -1, 0, 0, 0, 0, 0, 0, 0, 0],
    [0, 0, 0, 0, -1, 1, 0, 0, -1, 1, 0, 0],
    [0, 0, 0, 0, 1, -1, 0, 0, 0, 0, -1, 1],
    [0, 0, 0, 0, 0, 0, -1, 1, 1, -1, 0, 0],
    [0, 0, 0, 0, 0, 0, 1, -1, 0, 0, 1, -1],
])


def hand_rates(c, d, k_hat, k_minus, d_r):
    n1, n2, n3, x1, xs1, x2, xs2 = c
    return np.array([d * n1, d * n2, d * n2, d * n3,
                     k_hat * n1 * x1, k_minus * xs1, k_hat * n2 * x2, k_minus * xs2,
                     d_r * x1, d_r * x2, d_r * xs1, d_r * xs2])


def test_line_system_matches_hand_written_matrix(rng):
    m = hand_line(d_r=1.8)
    ms = assemble_mean_system(m)
    assert ms.species == ("S@(1, 1, 1)", "S@(2, 1, 1)", "S@(3, 1, 1)", "X@(1, 1, 1)", "X*@(1, 1, 1)",
                          "X@(2, 1, 1)", "X*@(2, 1, 1)")
    assert np.array_equal(ms.S, HAND_S)
    assert np.array_equal(ms.E[:, 0], [0, 0, 1, 0, 0, 0, 0])
    for _ in range(5):
        conc = rng.uniform(0, 200, size=7)
        expected = hand_rates(conc, 9.0, 0.005, 1.0, 1.8)
        assert np.allclose(ms.rates(conc), expected, rtol=1e-12)
    assert np.allclose(ms.rate_constants, [9, 9, 9, 9, 0.005, 1, 0.005, 1, 1.8, 1.8, 1.8, 1.8])


# ---------------------------------------------------------------- mean system

def test_no_input_no_mean():
    m = single_voxel((PoissonRate(0.0), PoissonRate(0.0)))
    tr = solve_mean_system(m, 0, time_grid(1.0, 0.1))
    assert np.all(tr.counts == 0)


def test_symmetric_receivers_have_equal_means():
    grid = build_grid((3, 1, 1), 1 / 3)
    tx = TransmitterSpec(((2, 1, 1),), (PoissonRate(10.0), PoissonRate(40.0)))
    rx = ReceiverSpec(((1, 1, 1), (3, 1, 1)), "partitioned", 0.0, act_deact(), 5)
    m = assemble_model(grid, MediumSpec(1.0), tx, rx)
    tr = solve_mean_system(m, 1, time_grid(2.0, 0.1))
    xs = tr.counts[:, m.output_slots]
    assert np.allclose(xs[:, 0], xs[:, 1], rtol=1e-12)
    assert xs[-1, 0] > 0


def test_birth_death_mean_exact():
    m = birth_death()
    g = time_grid(2.0, 0.1)
    tr = solve_mean_system(m, 0, g)
    assert np.allclose(tr.counts[:, 0], 10 * (1 - np.exp(-g)), atol=1e-9)


def test_receptor_mass_conserved_in_mixed_means():
    m = cube2()
    tr = solve_mean_system(m, 1, time_grid(3.0, 0.1))
    tot = tr.counts[:, m.species_slots["X"]].sum(axis=1) + tr.counts[:, m.output_slots].sum(axis=1)
    assert np.allclose(tot, 20.0, atol=1e-9)


def test_beta_surrogate_is_product_of_means():
    m = cube2()
    tr = solve_mean_system(m, 1, time_grid(3.0, 0.1), kind="beta")
    prod = tr.counts[:, m.signal_slots] * tr.counts[:, m.species_slots["X"]]
    assert np.allclose(tr.reference.T, prod, rtol=1e-6, atol=1e-9)


def test_rk4_gives_up_after_repeated_halving():
    with pytest.raises(LNAError):
        _rk4(lambda t, y: -y, 0.0, np.ones(1), 0.1, lambda y: False)
    assert _rk4(lambda t, y: -y, 0.0, np.ones(1), 0.01, lambda y: True)[0] == pytest.approx(np.exp(-0.01))


# ---------------------------------------------------------------- noise and Lyapunov

def test_zero_rates_give_zero_noise_system():
    m = single_voxel((PoissonRate(0.0), PoissonRate(0.0)))
    g = time_grid(1.0, 0.1)
    ns = build_noise_system(m, solve_mean_system(m, 0, g))
    # nothing moves, so no noise; the Jacobian keeps only the linear deactivation column
    assert np.all(ns.B == 0)
    assert np.allclose(ns.A[:, :, :2], 0.0)
    assert np.allclose(ns.A[:, 1:, 2], [[1.0, -1.0]] * len(g))


def test_poisson_input_variance_grows_linearly():
    m = single_voxel((PoissonRate(10.0), PoissonRate(10.0)))
    g = time_grid(1.0, 0.1)
    ns = build_noise_system(m, solve_mean_system(m, 0, g))
    assert np.allclose(ns.A[:, 0, 0], 0.0)
    assert np.allclose((ns.B @ ns.B.transpose(0, 2, 1))[:, 0, 0], 10.0)
    sig = solve_lyapunov(ns.A, ns.B, np.zeros((3, 3)), g)
    assert np.allclose(sig[:, 0, 0], 10.0 * g)


def test_lyapunov_constant_noise_closed_form():
    B = np.array([[1.0, 0.5], [0.0, 2.0]])
    s0 = np.array([[1.0, 0.2], [0.2, 3.0]])
    g = np.linspace(0, 2, 9)
    sig = solve_lyapunov(np.zeros((2, 2)), B, s0, g)
    assert np.allclose(sig, s0 + (B @ B.T) * g[:, None, None], atol=1e-12)


def test_lyapunov_pure_decay_closed_form():
    lam = 1.7
    s0 = np.array([[2.0, 0.3], [0.3, 1.0]])
    g = np.linspace(0, 2, 9)
    sig = solve_lyapunov(-lam * np.eye(2), np.zeros((2, 2)), s0, g)
    assert np.allclose(sig, np.exp(-2 * lam * g)[:, None, None] * s0, rtol=1e-9)


def test_ou_stationary_variance():
    sig = solve_lyapunov(-np.eye(1), np.eye(1), np.zeros((1, 1)), np.array([0.0, 20.0]))
    assert sig[-1, 0, 0] == pytest.approx(0.5, abs=1e-6)


def test_lyapunov_accepts_callables_and_rejects_asymmetric_start():
    g = np.linspace(0, 1, 5)
    sig = solve_lyapunov(lambda t: np.zeros((1, 1)), lambda t: np.array([[np.sqrt(2 * t)]]),
                         np.zeros((1, 1)), g)
    assert np.allclose(sig[:, 0, 0], g ** 2)
    with pytest.raises(ValueError):
        solve_lyapunov(np.zeros((2, 2)), np.zeros((2, 2)), np.array([[1.0, 0.0], [1.0, 1.0]]), g)


def test_birth_death_lna_is_exact():
    m = birth_death()
    g = time_grid(2.0, 0.25)
    mom = z_moments_and_ber(m, 0, g, kind="alpha")
    mean = 10 * (1 - np.exp(-g))
    assert np.allclose(mom.mean_counts[:, 0], mean, atol=1e-9)
    # Poisson: variance equals mean
    assert np.allclose(mom.species_var[:, 0], mean, atol=1e-8)


@pytest.fixture(scope="module")
def cube_moments():
    m = cube2()
    g = time_grid(4.0, 0.05)
    refs = lna_references(m, g)
    return m, g, [z_moments_and_ber(m, k, g, references=refs) for k in range(2)]


def test_covariance_symmetric_psd(cube_moments):
    _, _, moms = cube_moments
    for mom in moms:
        assert np.array_equal(mom.cov, mom.cov.transpose(0, 2, 1))
        assert min_eigenvalue(mom.cov).min() >= -1e-9


def test_ber_in_range_and_csv(cube_moments, tmp_path):
    m, g, moms = cube_moments
    for mom in moms:
        assert np.all((mom.ber >= 0) & (mom.ber <= 1))
        assert mom.ber[0] == 0.5
    path = tmp_path / "lna.csv"
    moms[0].to_csv(path)
    head = path.read_text().splitlines()[0].split(",")
    assert head[0] == "t" and head[-1] == "ber" and "mean_Z1" in head


@pytest.mark.slow
def test_halving_the_step_barely_moves_covariance():
    m = cube2()
    g = time_grid(4.0, 0.5)
    refs = lna_references(m, g)
    a = z_moments_and_ber(m, 1, g, h=1e-3, references=refs).cov[-1]
    b = z_moments_and_ber(m, 1, g, h=5e-4, references=refs).cov[-1]
    big = np.abs(b) > 1e-6 * np.abs(b).max()
    assert np.all(np.abs(a - b)[big] <= 1e-3 * np.abs(b)[big])


# ---------------------------------------------------------------- Gaussian BER

def test_gaussian_ber_special_values():
    assert gaussian_ber(0.0, 2.0, 0) == 0.5
    assert gaussian_ber(0.0, 0.0, 1) == 0.5
    assert gaussian_ber(50.0, 1.0, 0) < 1e-100
    assert gaussian_ber(50.0, 1.0, 1) == pytest.approx(1.0)
    assert gaussian_ber(-1.0, 0.0, 0) == 1.0


@given(st.floats(0, 20), st.floats(0, 20), st.floats(0.1, 5))
def test_gaussian_ber_decreases_with_snr(a, b, sigma):
    lo, hi = sorted((a, b))
    assert gaussian_ber(hi, sigma, 0) <= gaussian_ber(lo, sigma, 0)
    assert gaussian_ber(-hi, sigma, 1) <= gaussian_ber(-lo, sigma, 1)
