"""Gillespie direct-method simulation of a compiled :class:`SystemModel`.

Random numbers come from numba's ``np.random`` (MT19937).  Each replicate
reseeds it with a 32-bit stream seed derived from ``(base_seed, index)`` by
:class:`numpy.random.SeedSequence`, so replicates are independent of
execution order and worker count.

Time-varying emission (rate windows) and deterministic bursts are handled
as scheduled breakpoints: when the next reaction time would pass a
breakpoint the clock is advanced to it and the waiting time is redrawn,
which is exact for piecewise-constant propensities.
"""
from __future__ import annotations

import enum
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Iterator, Sequence

import numba
import numpy as np

from .model import ChannelKind, SystemModel

STATUS_OK = 0
STATUS_OVERFLOW = 1
PROPENSITY_LIMIT = 1e15


class Cause(enum.IntEnum):
    NONE = 0
    ACTIVATION = 1
    DEACTIVATION = 2
    DIFFUSION_IN = 3
    DIFFUSION_OUT = 4


class SimulationError(RuntimeError):
    pass


def replicate_seed(base_seed: int, index: int) -> int:
    """32-bit stream seed for replicate ``index`` of ensemble ``base_seed``."""
    ss = np.random.SeedSequence([int(base_seed), int(index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@numba.njit(cache=True)
def _prop(c, x, reac, const, on):
    a = const[c] * on[c]
    r1 = reac[c, 0]
    if r1 >= 0:
        a *= x[r1]
        r2 = reac[c, 1]
        if r2 >= 0:
            a *= x[r2]
    return a


@numba.njit(cache=True)
def _ssa_kernel(x0, reac, const, cslot, cdelta, dep_ptr, dep_idx, t_on, t_off,
                sched_times, burst_time, t_end, seed, grid, rec_slots, ev_mask):
    np.random.seed(seed)
    C = const.shape[0]
    x = x0.copy()
    on = np.zeros(C)
    a = np.zeros(C)
    n_grid = grid.shape[0]
    samples = np.zeros((n_grid, rec_slots.shape[0]), dtype=np.int64)
    cap = 1024
    ev_t = np.empty(cap)
    ev_c = np.empty(cap, dtype=np.int64)
    n_ev = 0
    gi = 0
    si = 0
    t = 0.0
    status = 0
    n_sched = sched_times.shape[0]
    first = True

    while True:
        if first or (si < n_sched and sched_times[si] <= t):
            first = False
            while gi < n_grid and grid[gi] < t:
                for j in range(rec_slots.shape[0]):
                    samples[gi, j] = x[rec_slots[j]]
                gi += 1
            # apply every scheduled burst due now
            while si < n_sched and sched_times[si] <= t:
                st = sched_times[si]
                for c in range(C):
                    if burst_time[c] == st:
                        for j in range(4):
                            s = cslot[c, j]
                            if s >= 0:
                                x[s] += cdelta[c, j]
                        if ev_mask[c]:
                            if n_ev == cap:
                                cap *= 2
                                nt = np.empty(cap)
                                nc = np.empty(cap, dtype=np.int64)
                                nt[:n_ev] = ev_t[:n_ev]
                                nc[:n_ev] = ev_c[:n_ev]
                                ev_t = nt
                                ev_c = nc
                            ev_t[n_ev] = st
                            ev_c[n_ev] = c
                            n_ev += 1
                si += 1
            for c in range(C):
                on[c] = 1.0 if (t_on[c] <= t and t < t_off[c]) else 0.0
            for c in range(C):
                a[c] = _prop(c, x, reac, const, on)

        a0 = 0.0
        for c in range(C):
            a0 += a[c]
        if not (a0 < 1e15):
            status = 1
            break
        t_next_sched = sched_times[si] if si < n_sched else np.inf
        horizon = min(t_next_sched, t_end)
        if a0 > 0.0:
            tau = -math.log(1.0 - np.random.random()) / a0
        else:
            tau = np.inf
        if t + tau >= horizon:
            if t_next_sched < t_end:
                t = t_next_sched
                continue
            t = t_end
            break
        t += tau
        while gi < n_grid and grid[gi] < t:
            for j in range(rec_slots.shape[0]):
                samples[gi, j] = x[rec_slots[j]]
            gi += 1
        r = np.random.random() * a0
        acc = 0.0
        chosen = -1
        for c in range(C):
            if a[c] > 0.0:
                acc += a[c]
                chosen = c
                if r < acc:
                    break
        for j in range(4):
            s = cslot[chosen, j]
            if s >= 0:
                x[s] += cdelta[chosen, j]
        for k in range(dep_ptr[chosen], dep_ptr[chosen + 1]):
            dc = dep_idx[k]
            a[dc] = _prop(dc, x, reac, const, on)
        if ev_mask[chosen]:
            if n_ev == cap:
                cap *= 2
                nt = np.empty(cap)
                nc = np.empty(cap, dtype=np.int64)
                nt[:n_ev] = ev_t[:n_ev]
                nc[:n_ev] = ev_c[:n_ev]
                ev_t = nt
                ev_c = nc
            ev_t[n_ev] = t
            ev_c[n_ev] = chosen
            n_ev += 1

    while gi < n_grid and grid[gi] <= t:
        for j in range(rec_slots.shape[0]):
            samples[gi, j] = x[rec_slots[j]]
        gi += 1
    return ev_t[:n_ev].copy(), ev_c[:n_ev].copy(), samples, x, status, t


@dataclass(frozen=True)
class _SymbolPlan:
    const: np.ndarray
    t_on: np.ndarray
    t_off: np.ndarray
    burst_time: np.ndarray
    sched_times: np.ndarray


def _plan(model: SystemModel, k: int) -> _SymbolPlan:
    cache = model.__dict__.setdefault("_plans", {})
    if k in cache:
        return cache[k]
    if not 0 <= k < model.K:
        raise ValueError(f"symbol {k} out of range for K={model.K}")
    arr = model.arrays()
    emission = arr.kind == int(ChannelKind.EMISSION)
    other_symbol = emission & (arr.symbol != k)
    const = np.where(other_symbol, 0.0, arr.constant)
    t_on = np.where(emission, arr.t_on, -np.inf)
    t_off = np.where(emission, arr.t_off, np.inf)
    t_on = np.where(other_symbol, np.inf, t_on)
    burst = np.where(other_symbol, np.nan, arr.burst_time)
    pts = [*t_on[emission & ~other_symbol], *t_off[emission & ~other_symbol],
           *burst[~np.isnan(burst)]]
    sched = np.unique(np.array([p for p in pts if np.isfinite(p) and p >= 0], dtype=float))
    plan = _SymbolPlan(const, t_on, t_off, burst, sched)
    cache[k] = plan
    return plan


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Event record of one SSA run.

    ``times``/``channels`` list the recorded events (all events unless an
    event mask was used).  ``samples`` holds the counts of ``record_slots``
    at each point of ``grid`` (state after all events at or before it).
    """

    model: SystemModel
    symbol: int
    seed: int
    stream_seed: int
    t_end: float
    times: np.ndarray
    channels: np.ndarray
    final_state: np.ndarray
    grid: np.ndarray
    record_slots: np.ndarray
    samples: np.ndarray
    event_mask: np.ndarray | None = None

    @property
    def n_events(self) -> int:
        return len(self.times)

    def states_at_events(self, slots: Sequence[int] | None = None) -> np.ndarray:
        """Counts of ``slots`` after each recorded event (complete records only)."""
        if self.event_mask is not None and not self.event_mask.all():
            raise ValueError("state replay needs a complete event record")
        arr = self.model.arrays()
        slots = np.arange(self.model.n_slots) if slots is None else np.asarray(slots)
        col = {int(s): i for i, s in enumerate(slots)}
        inc = np.zeros((len(self.times), len(slots)), dtype=np.int64)
        for j in range(4):
            s = arr.change_slot[self.channels, j]
            d = arr.change_delta[self.channels, j]
            for s_val, i in col.items():
                hit = s == s_val
                inc[hit, i] += d[hit]
        return self.model.initial_state[slots] + np.cumsum(inc, axis=0)


def simulate(model: SystemModel, k: int, t_end: float, seed: int, *, replicate: int = 0,
             grid=None, record_slots=None, event_mask=None) -> Trajectory:
    """Run one SSA trajectory of ``model`` with symbol ``k`` transmitted."""
    if not t_end > 0:
        raise ValueError("t_end must be positive")
    plan = _plan(model, k)
    arr = model.arrays()
    grid = np.zeros(0) if grid is None else np.asarray(grid, dtype=float)
    rec = np.zeros(0, dtype=np.int64) if record_slots is None else np.asarray(record_slots, dtype=np.int64)
    mask = np.ones(len(model.channels), dtype=np.bool_) if event_mask is None else np.asarray(event_mask, dtype=np.bool_)
    stream = replicate_seed(seed, replicate)
    ev_t, ev_c, samples, x, status, _ = _ssa_kernel(
        np.asarray(model.initial_state, dtype=np.int64), arr.reactants, plan.const,
        arr.change_slot, arr.change_delta, arr.dep_ptr, arr.dep_idx, plan.t_on, plan.t_off,
        plan.sched_times, plan.burst_time, float(t_end), stream, grid, rec, mask)
    if status == STATUS_OVERFLOW:
        raise SimulationError(
            f"total propensity exceeded {PROPENSITY_LIMIT:g}/s (symbol {k}, seed {seed}, "
            f"replicate {replicate}); check zeroth-order rates")
    return Trajectory(model, k, int(seed), stream, float(t_end), ev_t, ev_c, x, grid, rec, samples,
                      None if event_mask is None else mask)


def output_event_mask(model: SystemModel) -> np.ndarray:
    """Channels whose firing changes an output-species count."""
    arr = model.arrays()
    return np.isin(arr.change_slot, model.output_slots).any(axis=1)


def _run_chunk(args):
    model, k, t_end, base_seed, indices, kw = args
    return [simulate(model, k, t_end, base_seed, replicate=i, **kw) for i in indices]


def iter_ensemble(model: SystemModel, k: int, n_runs: int, t_end: float, base_seed: int,
                  **kw) -> Iterator[Trajectory]:
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    for i in range(n_runs):
        yield simulate(model, k, t_end, base_seed, replicate=i, **kw)


def run_ensemble(model: SystemModel, k: int, n_runs: int, t_end: float, base_seed: int,
                 workers: int = 1, **kw) -> list[Trajectory]:
    """Replicate ``i`` always uses stream seed ``replicate_seed(base_seed, i)``."""
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    if workers <= 1:
        return list(iter_ensemble(model, k, n_runs, t_end, base_seed, **kw))
    chunks = np.array_split(np.arange(n_runs), workers)
    jobs = [(model, k, t_end, base_seed, [int(i) for i in c], kw) for c in chunks if len(c)]
    with ProcessPoolExecutor(workers) as pool:
        parts = list(pool.map(_run_chunk, jobs))
    return [tr for part in parts for tr in part]


# --------------------------------------------------------------------------
# observations
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ObservationStream:
    """Output-species jumps seen by the receiver.

    One row per event that changed any output count.  ``deltas[i, p]`` is the
    change of the output count in receiver voxel ``p``; ``causes[i, p]`` the
    true cause (:class:`Cause`); ``partner[i, p]`` the other voxel of a
    receptor diffusion jump.  A diffusion jump is a single row with a -1 and
    a +1 entry.
    """

    initial: np.ndarray
    times: np.ndarray
    deltas: np.ndarray
    causes: np.ndarray
    partner: np.ndarray
    t_end: float
    joint: bool = True

    @property
    def P(self) -> int:
        return len(self.initial)

    def only(self, p: int) -> "ObservationStream":
        """The record of voxel ``p`` alone, as a single-voxel observer sees it."""
        rows = self.deltas[:, p] != 0
        sl = slice(p, p + 1)
        return ObservationStream(self.initial[sl].copy(), self.times[rows], self.deltas[rows, sl],
                                 self.causes[rows, sl], self.partner[rows, sl], self.t_end, joint=False)

    def counts(self) -> np.ndarray:
        """Output counts after each event, shape (n_events, P)."""
        return self.initial + np.cumsum(self.deltas, axis=0)

    def voxel(self, p: int) -> list[tuple[float, int, str]]:
        """Ordered (time, delta, cause) records of receiver voxel ``p``."""
        rows = np.nonzero(self.deltas[:, p])[0]
        out = []
        for i in rows:
            cause = Cause(int(self.causes[i, p]))
            name = {Cause.DIFFUSION_IN: f"DiffusionIn({self.partner[i, p]})",
                    Cause.DIFFUSION_OUT: f"DiffusionOut({self.partner[i, p]})"}.get(cause, cause.name.title())
            out.append((float(self.times[i]), int(self.deltas[i, p]), name))
        return out


def _observation_tables(model: SystemModel):
    cached = model.__dict__.get("_obs_tables")
    if cached is not None:
        return cached
    C, P = len(model.channels), model.P
    delta = np.zeros((C, P), dtype=np.int64)
    cause = np.zeros((C, P), dtype=np.int64)
    partner = np.full((C, P), -1, dtype=np.int64)
    out_index = {int(s): p for p, s in enumerate(model.output_slots)}
    for c in model.channels:
        for s, dl in c.changes:
            p = out_index.get(s)
            if p is None:
                continue
            delta[c.index, p] += dl
            if c.kind == ChannelKind.RECEIVER_DIFFUSION:
                cause[c.index, p] = Cause.DIFFUSION_IN if dl > 0 else Cause.DIFFUSION_OUT
                partner[c.index, p] = c.target if dl < 0 else c.receiver
            elif dl > 0:
                cause[c.index, p] = Cause.ACTIVATION
            else:
                cause[c.index, p] = Cause.DEACTIVATION
    tables = (delta, cause, partner)
    object.__setattr__(model, "_obs_tables", tables)
    return tables


def extract_observations(trajectory: Trajectory, model: SystemModel) -> ObservationStream:
    if trajectory.model is not model and trajectory.model.canonical() != model.canonical():
        raise ValueError("trajectory was produced by a different model")
    delta, cause, partner = _observation_tables(model)
    if trajectory.event_mask is not None:
        needed = output_event_mask(model)
        if (needed & ~trajectory.event_mask).any():
            raise ValueError("trajectory event mask omits output-changing channels")
    ch = trajectory.channels
    if len(ch) and (ch.min() < 0 or ch.max() >= len(model.channels)):
        raise ValueError("trajectory references channels absent from the model")
    d = delta[ch]
    keep = (d != 0).any(axis=1)
    return ObservationStream(
        initial=model.initial_state[model.output_slots].copy(),
        times=trajectory.times[keep],
        deltas=d[keep],
        causes=cause[ch][keep],
        partner=partner[ch][keep],
        t_end=trajectory.t_end,
    )


DUMP_HEADER = "# time\tkind\tvoxels\tspecies\tdelta"


def dump_trajectory(trajectory: Trajectory, path) -> None:
    """Tab-separated event record; voxels are 1-based x,y,z joined by '>'."""
    model = trajectory.model
    with open(path, "w") as fh:
        fh.write(DUMP_HEADER + "\n")
        for t, c in zip(trajectory.times, trajectory.channels):
            ch = model.channels[c]
            vox = ">".join(",".join(map(str, model.grid.coords(model.slots[s][1]))) for s, _ in ch.changes)
            species = ",".join(dict.fromkeys(model.slots[s][0] for s, _ in ch.changes))
            deltas = ",".join(f"{dl:+d}" for _, dl in ch.changes)
            fh.write(f"{t!r}\t{ch.kind.name}\t{vox}\t{species}\t{deltas}\n")
