"""Optimal Bayesian demodulation on a truncated joint state space.

For a hypothesis ``k`` the filter carries the unnormalised conditional law of
the hidden state given the output history.  States are grouped by their
observable part (the output counts); only the group matching the current
observation can carry mass.

* between observed events the law evolves under the channels that leave the
  outputs unchanged, and is discounted by the total rate of the observable
  channels (survival weighting);
* at an observed event it is pushed through the observable channels whose
  output change matches the event.

``L_k`` accumulates log-likelihood increments minus terms that are the same
for every hypothesis: the rate of observable channels whose reactants are
fully fixed by the observation (e.g. deactivation) and, at each event, the
observation-fixed factor of the matched channel's propensity.  With these
terms dropped ``L_k`` is directly comparable to the approximate ``Z_k``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .cme import Propagator, TruncatedStateSpace, TruncationError, LEAK_TOL
from .model import ChannelKind, SystemModel
from .reference import product_slots
from .ssa import ObservationStream, _observation_tables, _plan

NORM_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class BayesOutput:
    times: np.ndarray
    L: np.ndarray  # (n,)
    mean_signal: np.ndarray  # (P, n) E[N_R,p | k, history]
    mean_product: np.ndarray  # (P, n) E[activation reactant product | k, history]
    leakage: float
    impossible: bool  # the history has zero likelihood under k


class OptimalFilter:
    """Reusable optimal filter for one model and hypothesis ``k``.

    Sub-generators for each observed count vector are built lazily and
    cached, so running many observation streams through one instance is cheap.
    """

    def __init__(self, model: SystemModel, k: int, truncation: int = 100):
        self.model = model
        self.k = k
        space = TruncatedStateSpace.build(model, k, truncation)
        self.space = space
        plan = _plan(model, k)
        self.plan = plan
        delta, _, _ = _observation_tables(model)
        out = np.asarray(model.output_slots)
        obs = space.states[:, out]
        self.max_output = model.receiver.M * model.P
        self.obase = max(int(obs.max()), self.max_output) + 2
        self.oradix = self.obase ** np.arange(model.P, dtype=np.int64)
        ocode = obs @ self.oradix
        order = np.argsort(ocode, kind="stable")
        uniq, start = np.unique(ocode[order], return_index=True)
        bounds = np.append(start, len(order))
        self.groups = {int(u): np.sort(order[bounds[i]:bounds[i + 1]]) for i, u in enumerate(uniq)}

        live = [c for c in model.channels if plan.const[c.index] > 0]
        self.windowed = [c.index for c in live if c.kind == ChannelKind.EMISSION and not c.is_burst]
        hidden = [c.index for c in live if c.kind != ChannelKind.EMISSION and not delta[c.index].any()]
        self.observable = [c.index for c in live if c.kind != ChannelKind.EMISSION and delta[c.index].any()]
        self.obs_delta = {c: tuple(int(x) for x in delta[c]) for c in self.observable}

        # hidden transitions leaving the truncation are suppressed; their
        # rate is tracked separately as leakage
        self.R_h, e_h = space.transition_matrix(hidden)
        self.leak_h = e_h - np.asarray(self.R_h.sum(axis=1)).ravel()
        self.e_h = e_h - self.leak_h
        self.lam_obs = np.zeros(space.n_states)
        self.T = {}
        for c in self.observable:
            r, cl, v = space.channel_table(c)
            np.add.at(self.lam_obs, r, v)
            if (cl < 0).any():
                raise TruncationError("an observable transition leaves the truncated space")
            m = sp.csr_matrix((v, (r, cl)), shape=(space.n_states, space.n_states))
            d = self.obs_delta[c]
            self.T[d] = self.T[d] + m if d in self.T else m
        self._win = {}
        self._props = {}
        self._jumps = {}
        self._bursts = {}
        self._fixed = {}
        self.prod = product_slots(model)

    # ------------------------------------------------------------------
    def _ocode(self, counts) -> int:
        return int(np.asarray(counts, dtype=np.int64) @ self.oradix)

    def _group(self, ocode: int) -> np.ndarray:
        g = self.groups.get(ocode)
        if g is None:
            raise TruncationError("observed output counts lie outside the truncated space")
        return g

    def _windowed_parts(self, on):
        if on not in self._win:
            R, e = self.space.transition_matrix(list(on))
            leak = e - np.asarray(R.sum(axis=1)).ravel()
            self._win[on] = (R, e - leak, leak)
        return self._win[on]

    def _propagator(self, ocode: int, on):
        key = (ocode, on)
        if key not in self._props:
            idx = self._group(ocode)
            R = self.R_h
            e = self.e_h + self.lam_obs
            leak = self.leak_h
            if on:
                Rw, ew, lw = self._windowed_parts(on)
                R = R + Rw
                e = e + ew
                leak = leak + lw
            R_sub = R[idx][:, idx].tocsr()
            self._props[key] = (Propagator(R_sub, e[idx]), leak[idx])
        return self._props[key]

    def _fixed_terms(self, ocode: int):
        """Observation-fixed drift rate and per-delta log jump factors for a group."""
        if ocode not in self._fixed:
            st = self.space.states[self._group(ocode)]
            fixed = st.min(axis=0) == st.max(axis=0)
            val = st[0]
            rate = 0.0
            factor = {}
            matched = {}
            for c in self.observable:
                ch = self.model.channels[c]
                f = ch.constant
                all_fixed = True
                for s in ch.reactants:
                    if fixed[s]:
                        f *= val[s]
                    else:
                        all_fixed = False
                if all_fixed:
                    rate += f
                d = self.obs_delta[c]
                matched[d] = matched.get(d, 0) + 1
                factor[d] = f
            # several channels sharing one output change cannot be separated
            logf = {d: (np.log(f) if matched[d] == 1 and f > 0 else 0.0) for d, f in factor.items()}
            self._fixed[ocode] = (rate, logf)
        return self._fixed[ocode]

    def _jump(self, ocode: int, d: tuple, ocode_new: int):
        key = (ocode, d)
        if key not in self._jumps:
            T = self.T.get(d)
            if T is None:
                self._jumps[key] = None
            else:
                self._jumps[key] = T[self._group(ocode)][:, self._group(ocode_new)].T.tocsr()
        return self._jumps[key]

    def _burst(self, ocode: int, t_b: float):
        key = (ocode, t_b)
        if key not in self._bursts:
            idx = self._group(ocode)
            _, dst = self.space.burst_map(t_b)
            tgt = dst[idx]
            pos = np.searchsorted(idx, tgt)
            pos = np.clip(pos, 0, len(idx) - 1)
            ok = (tgt >= 0) & (idx[pos] == tgt)
            self._bursts[key] = (np.nonzero(ok)[0], pos[ok], np.nonzero(~ok)[0])
        return self._bursts[key]

    # ------------------------------------------------------------------
    def run(self, obs: ObservationStream, grid, prior: float = 1.0,
            leak_tol: float = LEAK_TOL) -> BayesOutput:
        model, plan = self.model, self.plan
        if obs.P != model.P:
            raise ValueError("observation stream does not match the model's receiver")
        grid = np.atleast_1d(np.asarray(grid, dtype=float))
        if np.any(grid > obs.t_end + 1e-12):
            raise ValueError("grid extends beyond the observation horizon")
        st = self.space.states
        sig = np.asarray(model.signal_slots)
        bursts = sorted(set(plan.burst_time[~np.isnan(plan.burst_time)].tolist()))
        stops = sorted(set(grid.tolist()) | set(plan.sched_times.tolist()) | set(obs.times.tolist()))
        ev_at = {}
        for i, t in enumerate(obs.times):
            ev_at.setdefault(float(t), []).append(i)
        on_grid = set(grid.tolist())
        burst_set = set(bursts)

        counts = np.asarray(obs.initial, dtype=np.int64).copy()
        oc = self._ocode(counts)
        idx = self._group(oc)
        x0 = self.space.index_of(model.initial_state)
        pi = np.zeros(len(idx))
        pi[np.searchsorted(idx, x0)] = 1.0
        L = float(np.log(prior)) if prior > 0 else -np.inf
        leak = 0.0
        impossible = False
        out_L, out_sig, out_prod = [], [], []
        t = 0.0
        for te in stops:
            if te > obs.t_end + 1e-12:
                break
            if te > t and not impossible:
                on = tuple(c for c in self.windowed if plan.t_on[c] <= t < plan.t_off[c])
                prop, leak_rate = self._propagator(oc, on)
                leak += (te - t) * float(pi @ leak_rate)
                pi = prop(pi, te - t)
                rate, _ = self._fixed_terms(oc)
                L += (te - t) * rate + self._renorm_log(pi)
                if not np.isfinite(L):
                    impossible = True
                else:
                    pi /= pi.sum()
            t = max(t, te)
            if te in burst_set and not impossible:
                src, dst, lost = self._burst(oc, te)
                new = np.zeros_like(pi)
                np.add.at(new, dst, pi[src])
                gone = float(pi[lost].sum())
                leak += gone
                pi = new / (1.0 - gone) if gone < 1 else new
            for i in ev_at.get(te, ()):
                if impossible:
                    break
                d = tuple(int(x) for x in obs.deltas[i])
                new_counts = counts + obs.deltas[i]
                oc_new = self._ocode(new_counts)
                if oc_new not in self.groups:
                    if (new_counts < 0).any():
                        raise ValueError("observation stream drives an output count negative")
                    if (new_counts > self.max_output).any():
                        raise TruncationError("observed output counts lie outside the truncated space")
                    # receptor counts are never truncated, so the history cannot occur under k
                    impossible = True
                    L = -np.inf
                    break
                J = self._jump(oc, d, oc_new)
                pi_new = J @ pi if J is not None else np.zeros(len(self._group(oc_new)))
                _, logf = self._fixed_terms(oc)
                L += self._renorm_log(pi_new) - logf.get(d, 0.0)
                counts, oc = new_counts, oc_new
                if not np.isfinite(L):
                    impossible = True
                    pi = pi_new
                    break
                pi = pi_new / pi_new.sum()
                if abs(pi.sum() - 1.0) > NORM_TOL:
                    raise FloatingPointError("posterior lost normalisation")
            if te in on_grid:
                out_L.append(L if not impossible else -np.inf)
                if impossible:
                    out_sig.append(np.full(model.P, np.nan))
                    out_prod.append(np.full(model.P, np.nan))
                else:
                    sub = st[self._group(oc)]
                    out_sig.append(pi @ sub[:, sig])
                    out_prod.append(np.array([pi @ np.prod(sub[:, list(f)], axis=1) for f in self.prod]))
        if leak > leak_tol:
            raise TruncationError(f"filter leaked {leak:.3g} probability past the truncation")
        return BayesOutput(grid, np.array(out_L), np.array(out_sig).T, np.array(out_prod).T,
                           leak, impossible)

    @staticmethod
    def _renorm_log(pi) -> float:
        s = float(pi.sum())
        return float(np.log(s)) if s > 0 else -np.inf


def bayes_filter_optimal(model: SystemModel, obs: ObservationStream, k: int, mode: str | None = None,
                         truncation: int = 100, grid=None, prior: float = 1.0,
                         filt: OptimalFilter | None = None) -> BayesOutput:
    """Run the optimal filter for hypothesis ``k`` over one observation stream.

    ``mode`` ("partitioned" or "mixed") must agree with the model's receiver
    when given.  Pass a prebuilt :class:`OptimalFilter` to reuse its caches.
    """
    if mode is not None and mode != model.receiver.configuration:
        raise ValueError(f"model receiver is {model.receiver.configuration}, not {mode}")
    if filt is None:
        filt = OptimalFilter(model, k, truncation)
    elif filt.model is not model or filt.k != k:
        raise ValueError("prebuilt filter belongs to a different model or symbol")
    if grid is None:
        grid = [obs.t_end]
    return filt.run(obs, grid, prior)
