"""Approximate MAP demodulation filters and BER bookkeeping.

Every approximate filter has the same shape.  For symbol ``k`` and receiver
voxel ``p`` the log-posterior accumulator ``Z[k, p]`` jumps by
``log ref[k, p](t-)`` at each counted +1 jump of the output count and
drifts down at rate ``g * w_p(t) * ref[k, p](t)`` in between, where

* partitioned filter: ``ref = alpha``, ``w_p = M_p - X*_p(t)`` (free receptors)
* mixed / generic filter: ``ref = beta``, ``w_p = 1``

Reference signals are piecewise linear, so the drift integrals are exact.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .model import ChannelKind, SystemModel
from .reference import ReferenceSet
from .ssa import Cause, ObservationStream

LOG_FLOOR = 1e-6
Z95 = float(norm.ppf(0.975))


@dataclass(frozen=True, eq=False)
class DemodulatorOutput:
    """Filter values ``Z[k]`` on ``times``; ``Z_voxel[k, p]`` excludes the prior."""

    times: np.ndarray
    Z: np.ndarray  # (K, n)
    Z_voxel: np.ndarray  # (K, P, n)
    jump_times: np.ndarray
    jump_voxels: np.ndarray
    jump_sizes: np.ndarray  # (n_jumps, K)
    clamped: int
    horizon: float

    @property
    def decision(self) -> np.ndarray:
        return np.argmax(self.Z, axis=0)

    def to_csv(self, path) -> None:
        K = self.Z.shape[0]
        header = ",".join(["t", *[f"Z_{k}" for k in range(K)], "decision"])
        data = np.column_stack([self.times, self.Z.T, self.decision])
        np.savetxt(path, data, delimiter=",", header=header, comments="",
                   fmt=["%.10g"] * (K + 1) + ["%d"])

    def ledger_to_csv(self, path) -> None:
        K = self.jump_sizes.shape[1]
        header = ",".join(["t", "voxel", *[f"jump_{k}" for k in range(K)]])
        data = np.column_stack([self.jump_times, self.jump_voxels, self.jump_sizes])
        np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.10g")


def _initial(priors, K):
    if priors is None:
        return np.zeros(K)
    priors = np.asarray(priors, dtype=float)
    if priors.shape != (K,):
        raise ValueError("one prior per symbol required")
    with np.errstate(divide="ignore"):
        return np.log(priors)


def _report_times(obs: ObservationStream, times):
    if times is None:
        return np.array([obs.t_end])
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if np.any(times > obs.t_end + 1e-12):
        raise ValueError("report time beyond the observation horizon")
    return times


def _filter(obs: ObservationStream, refs: ReferenceSet, g: float, counted: np.ndarray,
            free_receptors: np.ndarray | None, priors, times) -> DemodulatorOutput:
    if refs.P != obs.P:
        raise ValueError(f"references cover {refs.P} voxels, observations {obs.P}")
    times = _report_times(obs, times)
    K, P = refs.K, refs.P
    ev = obs.times
    n_ev = len(ev)

    # jumps
    jv, je = np.nonzero(counted.T)  # voxel-major so the ledger is grouped per voxel
    order = np.lexsort((jv, ev[je]))
    jv, je = jv[order], je[order]
    jt = ev[je]
    raw = refs.at(jt) if len(jt) else np.zeros((K, P, 0))
    vals = raw[:, jv, np.arange(len(jt))] if len(jt) else np.zeros((K, 0))
    clamped = int(np.sum(vals < LOG_FLOOR))
    sizes = np.log(np.maximum(vals, LOG_FLOOR))  # (K, n_jumps)

    Zv = np.zeros((K, P, len(times)))
    for p in range(P):
        sel = jv == p
        cum = np.concatenate([np.zeros((K, 1)), np.cumsum(sizes[:, sel], axis=1)], axis=1)
        n_before = np.searchsorted(jt[sel], times, side="right")
        Zv[:, p] += cum[:, n_before]

    # drift
    Ct = refs.integral(times)  # (K, P, n)
    if free_receptors is None:
        drift = Ct
    else:
        edges = np.concatenate([[0.0], ev])
        Ce = refs.integral(edges)  # (K, P, n_ev + 1)
        x = np.vstack([obs.initial[None, :], obs.initial + np.cumsum(obs.deltas, axis=0)])  # (n_ev+1, P)
        seg = x[:-1].T[None] * np.diff(Ce, axis=2)  # (K, P, n_ev)
        F = np.concatenate([np.zeros((K, P, 1)), np.cumsum(seg, axis=2)], axis=2)
        i = np.searchsorted(ev, times, side="right")  # events at or before t
        idx = np.arange(P)[:, None]
        xi = x[i].T  # (P, n)
        occupied = F[:, idx, i[None, :]] + xi[None] * (Ct - Ce[:, idx, i[None, :]])
        drift = free_receptors[None, :, None] * Ct - occupied
    Zv -= g * drift
    Z = _initial(priors, K)[:, None] + Zv.sum(axis=1)
    return DemodulatorOutput(times, Z, Zv, jt, jv, sizes.T, clamped, obs.t_end)


def plus_jumps(obs: ObservationStream) -> np.ndarray:
    """All +1 jumps of the output counts (the [dX*/dt]+ train)."""
    return obs.deltas > 0


def demod_partitioned_approx(obs: ObservationStream, alpha: ReferenceSet, g_plus: float, M,
                             priors=None, times=None) -> DemodulatorOutput:
    """Partitioned-receiver filter driven by ``alpha = E[N_R,p | k]``."""
    M = np.broadcast_to(np.asarray(M, dtype=float), (obs.P,))
    return _filter(obs, alpha, g_plus, plus_jumps(obs), M, priors, times)


def demod_mixed_approx(obs: ObservationStream, beta: ReferenceSet, g_plus: float,
                       priors=None, times=None) -> DemodulatorOutput:
    """Mixed-receiver filter driven by ``beta = E[X_p N_R,p | k]``; every +1 jump counts."""
    return _filter(obs, beta, g_plus, plus_jumps(obs), None, priors, times)


@dataclass(frozen=True)
class ActivationTrain:
    times: tuple[np.ndarray, ...]  # per receiver voxel

    def mask(self, obs: ObservationStream) -> np.ndarray:
        m = np.zeros(obs.deltas.shape, dtype=bool)
        for p, ts in enumerate(self.times):
            rows = np.nonzero(obs.deltas[:, p] > 0)[0]
            m[rows, p] = np.isin(obs.times[rows], ts)
        return m


def extract_activation_trains(obs: ObservationStream, mode: str = "oracle",
                              mixed: bool = True) -> ActivationTrain:
    """Activation times per receiver voxel.

    ``oracle`` reads the simulator's cause labels.  ``inferred`` classifies a
    +1 at ``p`` as an activation unless another voxel drops by one in the same
    event, which needs the joint multi-voxel record.
    """
    if mode == "oracle":
        act = obs.causes == Cause.ACTIVATION
    elif mode == "inferred":
        if mixed and not obs.joint:
            raise ValueError("activation inference in a mixed receiver needs joint multi-voxel observations")
        up = obs.deltas == 1
        down = obs.deltas == -1
        other_down = down.sum(axis=1, keepdims=True) - down > 0
        act = up & ~other_down
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return ActivationTrain(tuple(obs.times[act[:, p]] for p in range(obs.P)))


def demod_mixed_oracle(obs: ObservationStream, train: ActivationTrain, beta: ReferenceSet,
                       g_plus: float, priors=None, times=None) -> DemodulatorOutput:
    """Mixed filter with jumps only at true activation times."""
    return _filter(obs, beta, g_plus, train.mask(obs), None, priors, times)


def forward_constant(model: SystemModel) -> float:
    """Propensity constant of the (unique) output-producing reaction."""
    consts = set()
    for p in range(model.P):
        acts = [c for c in model.channels if c.kind == ChannelKind.ACTIVATION and c.receiver == p]
        if len(acts) != 1:
            raise ValueError(f"receiver voxel {p} has {len(acts)} output-producing reactions; "
                             "the generic filter needs exactly one")
        consts.add(acts[0].constant)
    if len(consts) != 1:
        raise ValueError("output-producing reactions differ between receiver voxels")
    return consts.pop()


def demod_generic_approx(obs: ObservationStream, refs: ReferenceSet, model: SystemModel,
                         priors=None, times=None) -> DemodulatorOutput:
    """Mixed-style filter for any circuit with one output-producing reaction per voxel.

    ``refs`` hold the mean reactant product of that reaction given ``k``.
    """
    return _filter(obs, refs, forward_constant(model), plus_jumps(obs), None, priors, times)


# --------------------------------------------------------------------------
# decisions
# --------------------------------------------------------------------------

def wilson_interval(errors, n, z: float = Z95):
    errors = np.asarray(errors, dtype=float)
    n = np.asarray(n, dtype=float)
    p = errors / n
    denom = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    lo = np.where(errors == 0, 0.0, np.clip(centre - half, 0, 1))
    hi = np.where(errors == n, 1.0, np.clip(centre + half, 0, 1))
    return lo, hi


@dataclass(frozen=True, eq=False)
class BERTable:
    times: np.ndarray
    symbols: np.ndarray  # symbols present, ascending
    errors: np.ndarray  # (n_symbols, n_times)
    n: np.ndarray  # (n_symbols,)

    @property
    def ber(self) -> np.ndarray:
        return self.errors / self.n[:, None]

    @property
    def ci(self) -> tuple[np.ndarray, np.ndarray]:
        return wilson_interval(self.errors, self.n[:, None])

    def row(self, symbol: int) -> int:
        return int(np.nonzero(self.symbols == symbol)[0][0])


def decide(Z: np.ndarray) -> np.ndarray:
    """argmax over symbols (axis 0); ties go to the lowest index."""
    return np.argmax(np.asarray(Z), axis=0)


def decide_and_ber(outputs, decision_times, true_symbols) -> BERTable:
    outputs = list(outputs)
    if not outputs:
        raise ValueError("at least one replicate is required")
    decision_times = np.atleast_1d(np.asarray(decision_times, dtype=float))
    true_symbols = np.asarray(true_symbols)
    symbols = np.unique(true_symbols)
    errors = np.zeros((len(symbols), len(decision_times)), dtype=np.int64)
    n = np.zeros(len(symbols), dtype=np.int64)
    for out, k in zip(outputs, true_symbols):
        if np.any(decision_times > out.horizon + 1e-12):
            raise ValueError("decision time beyond the trajectory horizon")
        cols = np.searchsorted(out.times, decision_times - 1e-12)
        if np.any(cols >= len(out.times)) or not np.allclose(out.times[cols], decision_times):
            raise ValueError("filter output was not reported at the decision times")
        row = int(np.searchsorted(symbols, k))
        errors[row] += out.decision[cols] != k
        n[row] += 1
    return BERTable(decision_times, symbols, errors, n)
