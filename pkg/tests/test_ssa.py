import numpy as np
import pytest

from voxcomm.model import (Boundary, DeterministicBursts, MediumSpec, PoissonRate, ReceiverSpec,
                           TransmitterSpec, act_deact, assemble_model, build_grid)
from voxcomm.ssa import (DUMP_HEADER, Cause, SimulationError, dump_trajectory, extract_observations,
                         iter_ensemble, output_event_mask, replicate_seed, run_ensemble, simulate)

from conftest import line3, single_voxel


def birth_death(r=10.0, lam=1.0):
    # a lone voxel has six exposed faces; pick the fraction so the total loss rate is lam
    d = 9.0
    return single_voxel((PoissonRate(r), PoissonRate(r)), boundary=Boundary.absorbing(lam / (6 * d)))


def two_voxel_diffusion(n=100):
    grid = build_grid((2, 1, 1), 1 / 3)
    tx = TransmitterSpec(((1, 1, 1),), (DeterministicBursts(((0.0, n),)), DeterministicBursts(((0.0, n),))))
    rx = ReceiverSpec(((2, 1, 1),), "partitioned", 0.0, act_deact(), 0)
    return assemble_model(grid, MediumSpec(1.0), tx, rx)


def test_zero_rates_give_no_events():
    m = single_voxel((PoissonRate(0.0), PoissonRate(0.0)), M=5)
    tr = simulate(m, 0, 3.0, seed=1)
    assert tr.n_events == 0
    assert np.array_equal(tr.final_state, m.initial_state)


def test_pure_birth_is_poisson():
    m = single_voxel((PoissonRate(10.0), PoissonRate(10.0)))
    n = np.array([simulate(m, 0, 1.0, 7, replicate=i).final_state[0] for i in range(2000)])
    assert abs(n.mean() - 10.0) <= 3 * np.sqrt(10.0 / 2000)
    assert n.var(ddof=1) == pytest.approx(10.0, rel=0.15)


def test_birth_death_mean_matches_closed_form():
    m = birth_death()
    grid = np.linspace(0.25, 2.5, 10)
    runs = np.array([simulate(m, 0, 2.5, 3, replicate=i, grid=grid, record_slots=[0]).samples[:, 0]
                     for i in range(2000)])
    exact = 10.0 * (1 - np.exp(-grid))
    se = runs.std(axis=0, ddof=1) / np.sqrt(len(runs))
    assert np.all(np.abs(runs.mean(axis=0) - exact) <= 3 * se)


def test_two_voxel_diffusion_equilibrium():
    m = two_voxel_diffusion()
    occ = np.array([simulate(m, 0, 5.0, 11, replicate=i, grid=[5.0], record_slots=[0]).samples[0, 0]
                    for i in range(1000)])
    se = occ.std(ddof=1) / np.sqrt(len(occ))
    assert abs(occ.mean() - 50.0) <= 3 * se
    assert abs(occ.mean() - 50.0) <= 2.0


def test_same_seed_same_trajectory(line3_mixed):
    a = simulate(line3_mixed, 1, 2.0, 5, replicate=3)
    b = simulate(line3_mixed, 1, 2.0, 5, replicate=3)
    c = simulate(line3_mixed, 1, 2.0, 5, replicate=4)
    assert np.array_equal(a.times, b.times) and np.array_equal(a.channels, b.channels)
    assert not np.array_equal(a.times, c.times)


def test_replicate_seed_is_deterministic():
    assert replicate_seed(1, 2) == replicate_seed(1, 2)
    assert replicate_seed(1, 2) != replicate_seed(2, 1)


def test_event_times_increase(line3_mixed):
    tr = simulate(line3_mixed, 0, 2.0, 9)
    # bursts share a time with nothing else; all stochastic event times are distinct
    assert np.all(np.diff(tr.times) >= 0)
    stoch = tr.times[~np.isin(tr.times, [0.0, 0.2, 0.4])]
    assert np.all(np.diff(stoch) > 0)


def test_counts_never_negative_and_conserved(line3_partitioned, line3_mixed):
    for m in (line3_partitioned, line3_mixed):
        X, Xs = m.species_slots["X"], m.species_slots["X*"]
        for i in range(50):
            states = simulate(m, i % 2, 2.0, 21, replicate=i).states_at_events()
            assert states.min() >= 0
            per_voxel = states[:, X] + states[:, Xs]
            if m.receiver.mixed:
                assert np.all(per_voxel.sum(axis=1) == m.P * m.receiver.M)
            else:
                assert np.all(per_voxel == m.receiver.M)


def test_run_ensemble_matches_simulate(line3_partitioned):
    ens = run_ensemble(line3_partitioned, 0, 3, 1.0, 17)
    for i, tr in enumerate(ens):
        ref = simulate(line3_partitioned, 0, 1.0, 17, replicate=i)
        assert np.array_equal(tr.times, ref.times)
    one = run_ensemble(line3_partitioned, 0, 1, 1.0, 17)[0]
    assert np.array_equal(one.channels, simulate(line3_partitioned, 0, 1.0, 17).channels)
    with pytest.raises(ValueError):
        list(iter_ensemble(line3_partitioned, 0, 0, 1.0, 17))


def test_parallel_ensemble_is_order_independent(line3_partitioned):
    serial = run_ensemble(line3_partitioned, 1, 6, 1.0, 4)
    parallel = run_ensemble(line3_partitioned, 1, 6, 1.0, 4, workers=2)
    for a, b in zip(serial, parallel):
        assert np.array_equal(a.channels, b.channels)


def test_event_mask_keeps_observations(line3_mixed):
    full = simulate(line3_mixed, 1, 2.0, 8)
    masked = simulate(line3_mixed, 1, 2.0, 8, event_mask=output_event_mask(line3_mixed))
    a = extract_observations(full, line3_mixed)
    b = extract_observations(masked, line3_mixed)
    assert np.array_equal(a.times, b.times) and np.array_equal(a.deltas, b.deltas)
    assert masked.n_events < full.n_events


def test_bad_arguments(line3_partitioned):
    with pytest.raises(ValueError):
        simulate(line3_partitioned, 0, 0.0, 1)
    with pytest.raises(ValueError):
        simulate(line3_partitioned, 2, 1.0, 1)


def test_propensity_overflow_aborts():
    m = single_voxel((PoissonRate(1e16), PoissonRate(1.0)))
    with pytest.raises(SimulationError):
        simulate(m, 0, 1.0, 1)


def test_observation_replay(line3_mixed):
    tr = simulate(line3_mixed, 1, 2.0, 2)
    obs = extract_observations(tr, line3_mixed)
    assert obs.counts().min() >= 0
    assert np.array_equal(obs.counts()[-1], tr.final_state[line3_mixed.output_slots])


def test_mixed_diffusion_is_one_paired_event(line3_mixed):
    saw = 0
    for i in range(20):
        obs = extract_observations(simulate(line3_mixed, 1, 2.0, 6, replicate=i), line3_mixed)
        for row in range(len(obs.times)):
            c = obs.causes[row]
            if Cause.DIFFUSION_IN in c:
                saw += 1
                assert sorted(obs.deltas[row].tolist()) == [-1, 1]
                p_in = int(np.nonzero(c == Cause.DIFFUSION_IN)[0][0])
                p_out = int(np.nonzero(c == Cause.DIFFUSION_OUT)[0][0])
                assert obs.partner[row, p_in] == p_out and obs.partner[row, p_out] == p_in
            else:
                assert np.count_nonzero(obs.deltas[row]) == 1
    assert saw > 0


def test_partitioned_has_no_diffusion_labels(line3_partitioned):
    obs = extract_observations(simulate(line3_partitioned, 1, 2.0, 6), line3_partitioned)
    assert not np.isin(obs.causes, [Cause.DIFFUSION_IN, Cause.DIFFUSION_OUT]).any()
    labels = {name for _, _, name in obs.voxel(0)}
    assert labels <= {"Activation", "Deactivation"}


def test_voxel_records_carry_partner(line3_mixed):
    obs = extract_observations(simulate(line3_mixed, 1, 2.0, 6, replicate=1), line3_mixed)
    names = {name for p in range(2) for _, _, name in obs.voxel(p)}
    assert names & {"DiffusionIn(0)", "DiffusionIn(1)"}


def test_only_restricts_to_one_voxel(line3_mixed):
    obs = extract_observations(simulate(line3_mixed, 1, 2.0, 6), line3_mixed)
    one = obs.only(1)
    assert one.P == 1 and not one.joint
    assert np.array_equal(one.counts()[-1], obs.counts()[-1, 1:])


def test_model_mismatch_rejected(line3_partitioned, line3_mixed):
    tr = simulate(line3_partitioned, 0, 1.0, 1)
    with pytest.raises(ValueError):
        extract_observations(tr, line3_mixed)


def test_dump(tmp_path, line3_mixed):
    tr = simulate(line3_mixed, 0, 0.5, 1)
    path = tmp_path / "events.tsv"
    dump_trajectory(tr, path)
    lines = path.read_text().splitlines()
    assert lines[0] == DUMP_HEADER
    assert len(lines) == tr.n_events + 1
    assert lines[1].split("\t")[1] == "EMISSION"
