"""Truncated state spaces and the forward master equation.

The reachable state set of a small model is enumerated breadth-first from
the initial state, honouring a per-voxel cap on signalling molecules.
Transitions that would exceed the cap are dropped from the state space and
accounted for as probability leakage.

Transient solutions use uniformization, which keeps the probability
vector non-negative and needs no step-size control.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .model import ChannelKind, SystemModel
from .reference import product_slots
from .ssa import _plan

MAX_STATES = 10_000_000
LEAK_TOL = 1e-6


class TruncationError(RuntimeError):
    pass


@dataclass(eq=False)
class TruncatedStateSpace:
    """Enumerated reachable states of ``model`` with symbol ``k`` transmitted.

    ``states[i]`` is the full slot-count vector of state ``i``; states are
    sorted by their mixed-radix code.
    """

    model: SystemModel
    symbol: int
    cap: int
    states: np.ndarray
    codes: np.ndarray
    radix: np.ndarray
    _tables: dict = field(default_factory=dict, repr=False)

    @property
    def n_states(self) -> int:
        return len(self.states)

    def encode(self, states: np.ndarray) -> np.ndarray:
        return states @ self.radix

    def lookup(self, states: np.ndarray) -> np.ndarray:
        """Index of each state, -1 where it is not in the space."""
        codes = self.encode(states)
        pos = np.searchsorted(self.codes, codes)
        pos = np.clip(pos, 0, len(self.codes) - 1)
        return np.where(self.codes[pos] == codes, pos, -1)

    def index_of(self, state) -> int:
        return int(self.lookup(np.asarray(state, dtype=np.int64)[None, :])[0])

    @classmethod
    def build(cls, model: SystemModel, k: int, cap: int = 100,
              max_states: int = MAX_STATES) -> "TruncatedStateSpace":
        plan = _plan(model, k)
        arr = model.arrays()
        n = model.n_slots
        V = model.grid.n_voxels
        limits = np.full(n, model.receiver.M * model.P, dtype=np.int64)
        limits[:V] = cap
        radix = np.ones(n, dtype=np.int64)
        span = 1
        for i in range(n):
            radix[i] = span
            span *= int(limits[i]) + 1
            if span > 2 ** 62:
                raise TruncationError("state encoding overflows; reduce the cap or the model")

        live = [c for c in model.channels if plan.const[c.index] > 0]
        changes = []
        for c in live:
            dv = np.zeros(n, dtype=np.int64)
            for s, dl in c.changes:
                dv[s] += dl
            changes.append((np.array(c.reactants, dtype=np.int64), dv))

        def closure(seed_states, known_codes):
            frontier = seed_states
            found = [seed_states]
            known = known_codes
            while len(frontier):
                new = []
                for reac, dv in changes:
                    ok = np.ones(len(frontier), dtype=bool)
                    for s in reac:
                        ok &= frontier[:, s] > 0
                    nxt = frontier[ok] + dv
                    inside = ((nxt >= 0) & (nxt <= limits)).all(axis=1)
                    new.append(nxt[inside])
                cand = np.concatenate(new) if new else np.zeros((0, n), dtype=np.int64)
                codes = cand @ radix
                codes, first = np.unique(codes, return_index=True)
                fresh = ~np.isin(codes, known, assume_unique=True)
                frontier = cand[first[fresh]]
                known = np.union1d(known, codes[fresh])
                found.append(frontier)
                if len(known) > max_states:
                    raise TruncationError(f"state space exceeds {max_states} states")
            return np.concatenate(found), known

        x0 = np.asarray(model.initial_state, dtype=np.int64)[None, :]
        states, known = closure(x0, x0 @ radix)
        burst_ids = [c.index for c in model.channels
                     if c.kind == ChannelKind.EMISSION and c.is_burst and c.symbol == k]
        for t_b in sorted({model.channels[i].burst_time for i in burst_ids}):
            dv = np.zeros(n, dtype=np.int64)
            for i in burst_ids:
                if model.channels[i].burst_time == t_b:
                    for s, dl in model.channels[i].changes:
                        dv[s] += dl
            shifted = states + dv
            shifted = shifted[(shifted <= limits).all(axis=1)]
            sc = shifted @ radix
            fresh = ~np.isin(sc, known)
            if fresh.any():
                sc_u, first = np.unique(sc[fresh], return_index=True)
                more, known = closure(shifted[fresh][first], np.union1d(known, sc_u))
                states = np.concatenate([states, more])
        codes = states @ radix
        codes, first = np.unique(codes, return_index=True)
        return cls(model, k, cap, states[first], codes, radix)

    # ------------------------------------------------------------------
    def channel_table(self, c: int):
        """(rows, cols, rates, leak) for channel ``c``; cols = -1 marks leakage."""
        if c in self._tables:
            return self._tables[c]
        ch = self.model.channels[c]
        rates = np.full(self.n_states, ch.constant)
        for s in ch.reactants:
            rates = rates * self.states[:, s]
        rows = np.nonzero(rates > 0)[0]
        tgt = self.states[rows].copy()
        for s, dl in ch.changes:
            tgt[:, s] += dl
        cols = self.lookup(tgt) if len(rows) else np.zeros(0, dtype=np.int64)
        out = (rows, cols, rates[rows])
        self._tables[c] = out
        return out

    def transition_matrix(self, channels, scale=None) -> tuple[sp.csr_matrix, np.ndarray]:
        """Off-diagonal rate matrix (from -> to) and total exit rate per state."""
        rows, cols, vals = [], [], []
        exit_rate = np.zeros(self.n_states)
        for j, c in enumerate(channels):
            r, cl, v = self.channel_table(c)
            if scale is not None:
                v = v * scale[j]
            np.add.at(exit_rate, r, v)
            ok = cl >= 0
            rows.append(r[ok])
            cols.append(cl[ok])
            vals.append(v[ok])
        if rows:
            R = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(self.n_states, self.n_states))
        else:
            R = sp.csr_matrix((self.n_states, self.n_states))
        return R, exit_rate

    def burst_map(self, t_b: float) -> tuple[np.ndarray, np.ndarray]:
        """Index map applied at burst time ``t_b`` (target -1 = leaked)."""
        dv = np.zeros(self.model.n_slots, dtype=np.int64)
        for c in self.model.channels:
            if c.kind == ChannelKind.EMISSION and c.symbol == self.symbol and c.burst_time == t_b:
                for s, dl in c.changes:
                    dv[s] += dl
        return np.arange(self.n_states), self.lookup(self.states + dv)


def apply_map(pi: np.ndarray, src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, float]:
    out = np.zeros_like(pi)
    ok = dst >= 0
    np.add.at(out, dst[ok], pi[src[ok]])
    return out, float(pi[src[~ok]].sum())


class Propagator:
    """``pi -> pi @ expm(G t)`` for a (sub-)generator ``G = R - diag(exit)``.

    ``R`` holds the non-negative off-diagonal rates (rows = from).  Mass lost
    through ``exit`` rates that do not re-enter ``R`` disappears, which is
    what the filter needs for likelihoods.
    """

    def __init__(self, R: sp.csr_matrix, exit_rate: np.ndarray, max_poisson: float = 30.0):
        self.RT = R.T.tocsr()
        self.exit = np.asarray(exit_rate, dtype=float)
        self.lam = float(self.exit.max()) if len(self.exit) else 0.0
        self.max_poisson = max_poisson

    def __call__(self, pi: np.ndarray, t: float) -> np.ndarray:
        if t <= 0 or self.lam == 0.0:
            return pi
        n_sub = max(1, math.ceil(self.lam * t / self.max_poisson))
        h = t / n_sub
        lt = self.lam * h
        keep = 1.0 - self.exit / self.lam
        for _ in range(n_sub):
            w = math.exp(-lt)
            v = pi
            acc = w * v
            total = w
            n = 0
            limit = lt + 12.0 * math.sqrt(lt) + 30
            while total < 1.0 - 1e-14 and n < limit:
                n += 1
                v = keep * v + (self.RT @ v) / self.lam
                w *= lt / n
                acc = acc + w * v
                total += w
            pi = acc
        return pi


@dataclass(frozen=True, eq=False)
class CMEResult:
    times: np.ndarray
    mean_signal: np.ndarray  # (P, n_grid) E[N_R,p]
    mean_product: np.ndarray  # (P, n_grid) E[activation reactant product]
    mean_counts: np.ndarray  # (n_grid, n_slots)
    leakage: np.ndarray  # cumulative lost mass at each grid point
    space: TruncatedStateSpace
    final: np.ndarray
    distributions: np.ndarray | None = None

    @property
    def leaked(self) -> bool:
        return bool(self.leakage[-1] > LEAK_TOL)


def cme_transient_oracle(model: SystemModel, k: int, truncation: int, grid, *,
                         leak_tol: float = LEAK_TOL, keep_distributions: bool = False,
                         strict: bool = True) -> CMEResult:
    """Exact transient marginals of the truncated master equation.

    Raises :class:`TruncationError` when more than ``leak_tol`` probability
    leaves the truncated space (``strict=False`` only flags it).
    """
    grid = np.asarray(grid, dtype=float)
    space = TruncatedStateSpace.build(model, k, truncation)
    plan = _plan(model, k)
    static = [c.index for c in model.channels
              if c.kind != ChannelKind.EMISSION and plan.const[c.index] > 0]
    windowed = [c.index for c in model.channels
                if c.kind == ChannelKind.EMISSION and not c.is_burst and c.symbol == k and c.constant > 0]
    R_s, e_s = space.transition_matrix(static)

    props = {}

    def propagator(t):
        on = tuple(c for c in windowed if plan.t_on[c] <= t < plan.t_off[c])
        if on not in props:
            R_w, e_w = space.transition_matrix(list(on))
            props[on] = Propagator(R_s + R_w, e_s + e_w)
        return props[on]

    pi = np.zeros(space.n_states)
    pi[space.index_of(model.initial_state)] = 1.0
    events = sorted(set(plan.sched_times.tolist()) | set(grid.tolist()))
    burst_times = set(plan.burst_time[~np.isnan(plan.burst_time)].tolist())
    prod = product_slots(model)
    sig = model.signal_slots
    means, prods, counts, leak, dists = [], [], [], [], []
    t = 0.0
    lost = 0.0
    on_grid = set(grid.tolist())
    for te in events:
        if te > t:
            before = pi.sum()
            pi = propagator(t)(pi, te - t)
            lost += before - pi.sum()
            t = te
        if te in burst_times:
            pi, l = apply_map(pi, *space.burst_map(te))
            lost += l
        if te in on_grid:
            st = space.states
            means.append(pi @ st[:, sig])
            prods.append(np.array([pi @ np.prod(st[:, list(f)], axis=1) for f in prod]))
            counts.append(pi @ st)
            leak.append(lost)
            if keep_distributions:
                dists.append(pi.copy())
    leak = np.array(leak)
    if strict and leak[-1] > leak_tol:
        raise TruncationError(f"truncation leaked {leak[-1]:.3g} probability (> {leak_tol:g})")
    return CMEResult(grid, np.array(means).T, np.array(prods).T, np.array(counts), leak, space, pi,
                     np.array(dists) if keep_distributions else None)
