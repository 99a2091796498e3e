"""Symbol-conditioned reference signals for the approximate demodulators.

``alpha[k, p](t) = E[N_R,p(t) | k]`` and ``beta[k, p](t) = E[X_p(t) N_R,p(t) | k]``
estimated by Monte Carlo over SSA replicates on a uniform time grid.  For a
generic circuit "beta" is the mean product of the reactant counts of the
voxel's output-producing channel.

Between grid points the signals are linear, so their running integral is
piecewise quadratic and evaluated in closed form.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from .model import ChannelKind, SystemModel
from .ssa import iter_ensemble

DEFAULT_DT = 0.01
DEFAULT_RUNS = 500


def time_grid(t_end: float, dt: float = DEFAULT_DT) -> np.ndarray:
    n = int(round(t_end / dt))
    if n < 1:
        raise ValueError("reference grid is empty")
    if not np.isclose(n * dt, t_end):
        raise ValueError(f"t_end={t_end} is not a multiple of dt={dt}")
    return np.linspace(0.0, n * dt, n + 1)


@dataclass(frozen=True, eq=False)
class ReferenceSignal:
    kind: str  # "alpha" or "beta"
    symbol: int
    voxel: int
    times: np.ndarray
    values: np.ndarray
    stderr: np.ndarray | None = None
    n_runs: int = 0
    seed: int | None = None

    def __post_init__(self):
        if len(self.times) < 2 or np.any(np.diff(self.times) <= 0):
            raise ValueError("reference grid must be strictly increasing with >= 2 points")
        if len(self.values) != len(self.times):
            raise ValueError("one value per grid point required")

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def __call__(self, t):
        return np.interp(t, self.times, self.values)

    def integral(self, t):
        """Integral of the piecewise-linear signal from 0 to ``t``."""
        return _cumulative_integral(self.times, self.values, t)

    def to_csv(self, path) -> None:
        cols = [self.times, self.values]
        header = "t,value"
        if self.stderr is not None:
            cols.append(self.stderr)
            header += ",stderr"
        np.savetxt(path, np.column_stack(cols), delimiter=",", header=header, comments="")


def _cumulative_integral(times, values, t):
    t = np.asarray(t, dtype=float)
    seg = np.diff(times) * 0.5 * (values[1:] + values[:-1])
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    tc = np.clip(t, times[0], times[-1])
    i = np.clip(np.searchsorted(times, tc, side="right") - 1, 0, len(times) - 2)
    h = tc - times[i]
    slope = (values[i + 1] - values[i]) / (times[i + 1] - times[i])
    inside = cum[i] + values[i] * h + 0.5 * slope * h * h
    # constant extrapolation past the last grid point
    beyond = np.maximum(t - times[-1], 0.0) * values[-1]
    return inside + beyond


@dataclass(frozen=True, eq=False)
class ReferenceSet:
    """Reference signals for every (symbol, receiver voxel) on one grid."""

    kind: str
    times: np.ndarray
    values: np.ndarray  # (K, P, n_grid)
    stderr: np.ndarray | None = None
    n_runs: int = 0
    seed: int | None = None

    @property
    def K(self) -> int:
        return self.values.shape[0]

    @property
    def P(self) -> int:
        return self.values.shape[1]

    def signal(self, k: int, p: int) -> ReferenceSignal:
        se = None if self.stderr is None else self.stderr[k, p]
        return ReferenceSignal(self.kind, k, p, self.times, self.values[k, p], se, self.n_runs, self.seed)

    def at(self, t) -> np.ndarray:
        """Values at times ``t``, shape (K, P, len(t))."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.empty((self.K, self.P, len(t)))
        for k in range(self.K):
            for p in range(self.P):
                out[k, p] = np.interp(t, self.times, self.values[k, p])
        return out

    def integral(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.empty((self.K, self.P, len(t)))
        for k in range(self.K):
            for p in range(self.P):
                out[k, p] = _cumulative_integral(self.times, self.values[k, p], t)
        return out

    @classmethod
    def from_signals(cls, signals) -> "ReferenceSet":
        signals = list(signals)
        K = max(s.symbol for s in signals) + 1
        P = max(s.voxel for s in signals) + 1
        times = signals[0].times
        vals = np.zeros((K, P, len(times)))
        se = np.zeros_like(vals) if all(s.stderr is not None for s in signals) else None
        for s in signals:
            vals[s.symbol, s.voxel] = s.values
            if se is not None:
                se[s.symbol, s.voxel] = s.stderr
        return cls(signals[0].kind, times, vals, se, signals[0].n_runs, signals[0].seed)


def product_slots(model: SystemModel) -> list[tuple[int, ...]]:
    """Reactant slots of each receiver voxel's output-producing reaction."""
    out = []
    for p in range(model.P):
        acts = [c for c in model.channels if c.kind == ChannelKind.ACTIVATION and c.receiver == p]
        if len(acts) != 1:
            raise ValueError(f"receiver voxel {p} has {len(acts)} output-producing reactions; exactly one supported")
        out.append(acts[0].reactants)
    return out


def _estimate(model: SystemModel, k: int, grid, n_runs: int, seed: int, kind: str):
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("reference grid is empty")
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    if kind == "alpha":
        factors = [(int(s),) for s in model.signal_slots]
    elif kind == "beta":
        factors = product_slots(model)
    else:
        raise ValueError(f"unknown reference kind {kind!r}")
    rec = sorted({s for f in factors for s in f})
    col = {s: i for i, s in enumerate(rec)}
    mask = np.zeros(len(model.channels), dtype=bool)
    total = np.zeros((model.P, len(grid)))
    total_sq = np.zeros_like(total)
    for tr in iter_ensemble(model, k, n_runs, float(grid[-1]), seed, grid=grid,
                            record_slots=rec, event_mask=mask):
        prod = np.ones((model.P, len(grid)))
        for p, f in enumerate(factors):
            for s in f:
                prod[p] *= tr.samples[:, col[s]]
        total += prod
        total_sq += prod * prod
    mean = total / n_runs
    var = np.maximum(total_sq / n_runs - mean ** 2, 0.0)
    se = np.sqrt(var / max(n_runs - 1, 1))
    return [ReferenceSignal(kind, k, p, grid, mean[p], se[p], n_runs, seed) for p in range(model.P)]


def estimate_alpha(model: SystemModel, k: int, grid, n_runs: int = DEFAULT_RUNS, seed: int = 0):
    """Monte Carlo ``E[N_R,p(t) | k]`` for every receiver voxel."""
    return _estimate(model, k, grid, n_runs, seed, "alpha")


def estimate_beta(model: SystemModel, k: int, grid, n_runs: int = DEFAULT_RUNS, seed: int = 0):
    """Monte Carlo ``E[X_p(t) N_R,p(t) | k]`` (mean activation-reactant product)."""
    return _estimate(model, k, grid, n_runs, seed, "beta")


def estimate_references(model: SystemModel, kind: str, grid, n_runs: int = DEFAULT_RUNS,
                        seed: int = 0, cache: "ReferenceCache | None" = None) -> ReferenceSet:
    """References for all symbols; symbol ``k`` uses base seed ``seed + k``."""
    if cache is not None:
        hit = cache.load(model, kind, grid, n_runs, seed)
        if hit is not None:
            return hit
    signals = []
    for k in range(model.K):
        signals += _estimate(model, k, grid, n_runs, seed + k, kind)
    refs = ReferenceSet.from_signals(signals)
    refs = ReferenceSet(kind, refs.times, refs.values, refs.stderr, n_runs, seed)
    if cache is not None:
        cache.save(model, refs)
    return refs


def scenario_hash(model: SystemModel) -> str:
    return hashlib.sha256(model.canonical().encode()).hexdigest()[:16]


class ReferenceCache:
    """On-disk store of reference signals, one text file per (kind, k, p).

    Each file starts with ``# key: value`` header lines (scenario hash, kind,
    k, p, dt, n_runs, seed) followed by ``t,value,stderr`` rows.
    """

    def __init__(self, directory):
        self.directory = os.fspath(directory)
        os.makedirs(self.directory, exist_ok=True)

    def _stem(self, model, kind, grid, n_runs, seed):
        grid = np.asarray(grid, dtype=float)
        key = json.dumps([scenario_hash(model), kind, len(grid), float(grid[-1]), n_runs, seed])
        return hashlib.sha256(key.encode()).hexdigest()[:20]

    def path(self, model, kind, grid, n_runs, seed, k, p):
        return os.path.join(self.directory,
                            f"{kind}_{self._stem(model, kind, grid, n_runs, seed)}_k{k}_p{p}.csv")

    def save(self, model: SystemModel, refs: ReferenceSet) -> None:
        h = scenario_hash(model)
        dt = float(refs.times[1] - refs.times[0])
        for k in range(refs.K):
            for p in range(refs.P):
                path = self.path(model, refs.kind, refs.times, refs.n_runs, refs.seed, k, p)
                se = refs.stderr[k, p] if refs.stderr is not None else np.zeros(len(refs.times))
                header = "\n".join([
                    f"# scenario: {h}", f"# kind: {refs.kind}", f"# k: {k}", f"# p: {p}",
                    f"# dt: {dt!r}", f"# n_runs: {refs.n_runs}", f"# seed: {refs.seed}",
                    "t,value,stderr"])
                np.savetxt(path, np.column_stack([refs.times, refs.values[k, p], se]),
                           delimiter=",", header=header, comments="", fmt="%.17g")

    def load(self, model: SystemModel, kind: str, grid, n_runs: int, seed: int) -> ReferenceSet | None:
        signals = []
        for k in range(model.K):
            for p in range(model.P):
                path = self.path(model, kind, grid, n_runs, seed, k, p)
                if not os.path.exists(path):
                    return None
                meta = {}
                with open(path) as fh:
                    for line in fh:
                        if not line.startswith("#"):
                            break
                        key, _, val = line[1:].partition(":")
                        meta[key.strip()] = val.strip()
                if meta.get("scenario") != scenario_hash(model):
                    raise ValueError(f"cached reference {path} belongs to another scenario")
                data = np.loadtxt(path, delimiter=",", skiprows=len(meta) + 1, ndmin=2)
                signals.append(ReferenceSignal(kind, k, p, data[:, 0], data[:, 1], data[:, 2], n_runs, seed))
        refs = ReferenceSet.from_signals(signals)
        return ReferenceSet(kind, refs.times, refs.values, refs.stderr, n_runs, seed)
