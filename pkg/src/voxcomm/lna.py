"""Linear noise approximation of the receiver and of the filter outputs.

The mean system is assembled mechanically from the model's channel list:
``dx/dt = S r(x) + E u_k(t)`` in concentration units (molecules per voxel
volume).  Fluctuations are handled in count units, where the covariance
obeys ``dSigma/dt = A Sigma + Sigma A^T + G diag(a) G^T`` with ``a`` the
propensities at the mean and ``G`` the stoichiometry columns.

For BER prediction the fluctuation state is augmented with the filter
outputs ``Z_0 .. Z_{K-1}``.  A counted +1 jump of an output species is
linearised as its mean rate plus a term linear in the count fluctuations
plus the shot noise of the channels that produce it; those noise columns are
shared with the species rows.  The reference signals inside the filter are
the deterministic mean-system surrogates (product of means for ``beta``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .model import ChannelKind, SystemModel, emission_bursts, emission_segments
from .reference import ReferenceSet, product_slots

DEFAULT_STEP = 1e-3
MAX_HALVINGS = 20
LOG_FLOOR = 1e-6
PSD_FLOOR = -1e-9


class LNAError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class MeanSystem:
    """Reaction-rate equations of a model (emission enters as an input)."""

    model: SystemModel
    species: tuple[str, ...]
    channels: tuple[int, ...]  # model channel indices, one column of S each
    S: np.ndarray  # (n_species, n_channels)
    order: np.ndarray  # reaction order per channel
    reac: np.ndarray  # (n_channels, 2) slots, -1 padded
    propensity: np.ndarray  # propensity constants (count units)
    E: np.ndarray  # (n_species, n_tx) input injection
    volume: float

    @property
    def rate_constants(self) -> np.ndarray:
        """Concentration-unit constants: ``c/V`` (order 0), ``c`` (1), ``c V`` (2)."""
        return self.propensity * self.volume ** (self.order - 1.0)

    def rates(self, x: np.ndarray) -> np.ndarray:
        """Channel rates at concentrations ``x`` (concentration per time)."""
        return self.propensities(x * self.volume) / self.volume

    def propensities(self, counts: np.ndarray) -> np.ndarray:
        """Propensities at (real-valued) mean counts; leading batch axes allowed."""
        counts = np.asarray(counts, dtype=float)
        pad = np.concatenate([counts, np.ones(counts.shape[:-1] + (1,))], axis=-1)
        return self.propensity * pad[..., self.reac[:, 0]] * pad[..., self.reac[:, 1]]

    def jacobian(self, counts: np.ndarray) -> np.ndarray:
        """d(propensity)/d(counts), shape (..., n_channels, n_species)."""
        counts = np.asarray(counts, dtype=float)
        n = len(self.species)
        pad = np.concatenate([counts, np.ones(counts.shape[:-1] + (1,))], axis=-1)
        J = np.zeros(counts.shape[:-1] + (len(self.channels), n + 1))
        rows = np.arange(len(self.channels))
        a, b = self.reac[:, 0], self.reac[:, 1]
        J[..., rows, a] += self.propensity * pad[..., b]
        J[..., rows, b] += self.propensity * pad[..., a]
        return J[..., :n]

    def input(self, k: int, t: float) -> np.ndarray:
        """Emission into each species at time ``t`` for symbol ``k``, counts/s."""
        return self.E @ _input_rates(self.model, k, t)


def _input_rates(model: SystemModel, k: int, t: float) -> np.ndarray:
    sym = model.transmitter.symbols[k]
    n_tx = len(model.transmitter.voxels)
    rate = sum(r for a, b, r in emission_segments(sym) if a <= t < b)
    return np.full(n_tx, rate / n_tx)


def assemble_mean_system(model: SystemModel) -> MeanSystem:
    cached = model.__dict__.get("_mean_system")
    if cached is not None:
        return cached
    n = model.n_slots
    chans = [c for c in model.channels if c.kind != ChannelKind.EMISSION]
    S = np.zeros((n, len(chans)))
    reac = np.full((len(chans), 2), n, dtype=np.int64)  # n points at the constant-1 pad
    order = np.zeros(len(chans))
    for j, c in enumerate(chans):
        for s, dl in c.changes:
            S[s, j] += dl
        for i, s in enumerate(c.reactants):
            reac[j, i] = s
        order[j] = len(c.reactants)
    tx = [model.grid.index(v) for v in model.transmitter.voxels]
    sig_slot = {model.slots[s][1]: s for s in range(n) if model.slots[s][0] == "S"}
    E = np.zeros((n, len(tx)))
    for i, v in enumerate(tx):
        E[sig_slot[v], i] = 1.0
    ms = MeanSystem(model, tuple(model.slot_label(s) for s in range(n)), tuple(c.index for c in chans),
                    S, order, reac, np.array([c.constant for c in chans]), E, model.volume)
    object.__setattr__(model, "_mean_system", ms)
    return ms


# --------------------------------------------------------------------------
# stepping
# --------------------------------------------------------------------------

def _step_points(model: SystemModel, grid: np.ndarray, h: float) -> np.ndarray:
    t_end = float(grid[-1])
    pts = [np.arange(0.0, t_end, h), grid, [t_end]]
    for sym in model.transmitter.symbols:
        for a, b, _ in emission_segments(sym):
            pts.append([x for x in (a, b) if 0 <= x <= t_end])
        pts.append([t for t, _ in emission_bursts(sym) if 0 <= t <= t_end])
    pts = np.unique(np.concatenate([np.asarray(p, dtype=float) for p in pts]))
    # merge points closer than a tiny tolerance (float noise from arange)
    keep = np.concatenate([[True], np.diff(pts) > 1e-12])
    return pts[keep]


def _bursts(model: SystemModel, k: int) -> dict[float, np.ndarray]:
    ms = assemble_mean_system(model)
    n_tx = ms.E.shape[1]
    out = {}
    for t, count in emission_bursts(model.transmitter.symbols[k]):
        out[t] = out.get(t, 0) + ms.E @ np.full(n_tx, count / n_tx)
    return out


def _rk4(f, t, y, h, check):
    """One RK4 step; halves recursively while ``check`` rejects the result."""
    for attempt in range(MAX_HALVINGS + 1):
        n_sub = 2 ** attempt
        hs = h / n_sub
        yy, tt, ok = y, t, True
        for _ in range(n_sub):
            k1 = f(tt, yy)
            k2 = f(tt + hs / 2, yy + hs / 2 * k1)
            k3 = f(tt + hs / 2, yy + hs / 2 * k2)
            k4 = f(tt + hs, yy + hs * k3)
            yy = yy + hs / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            tt += hs
            if not check(yy):
                ok = False
                break
        if ok:
            return yy
    raise LNAError(f"mean went negative at t={t:.6g} after {MAX_HALVINGS} step halvings")


@dataclass(frozen=True, eq=False)
class MeanTrajectory:
    symbol: int
    times: np.ndarray
    counts: np.ndarray  # (n_grid, n_species) mean counts
    reference: np.ndarray  # (P, n_grid) surrogate reference (alpha or beta)
    kind: str


def _ref_factors(model: SystemModel, kind: str):
    if kind == "alpha":
        return [(int(s),) for s in model.signal_slots]
    if kind == "beta":
        return [tuple(f) for f in product_slots(model)]
    raise ValueError(f"unknown reference kind {kind!r}")


def default_kind(model: SystemModel) -> str:
    return "beta" if model.receiver.mixed else "alpha"


def solve_mean_system(model: SystemModel, k: int, grid, h: float = DEFAULT_STEP,
                      kind: str | None = None) -> MeanTrajectory:
    """Mean counts and the reference surrogate for symbol ``k``.

    The surrogate (``alpha``: mean signal count, ``beta``: product of mean
    reactant counts) is carried as an extra ODE state through the product
    rule, starting from the product of the initial means.
    """
    kind = kind or default_kind(model)
    grid = np.asarray(grid, dtype=float)
    ms = assemble_mean_system(model)
    n = len(ms.species)
    factors = _ref_factors(model, kind)
    bursts = _bursts(model, k)

    def product(x):
        return np.array([np.prod(x[list(f)]) for f in factors])

    def rhs_with(u):
        def f(t, y):
            x = y[:n]
            dx = ms.S @ ms.propensities(x) + u
            dref = np.array([sum(dx[s] * np.prod([x[o] for j, o in enumerate(fac) if j != i])
                                 for i, s in enumerate(fac)) for fac in factors])
            return np.concatenate([dx, dref])
        return f

    y = np.concatenate([np.asarray(model.initial_state, dtype=float), np.zeros(len(factors))])
    y[n:] = product(y[:n])
    pts = _step_points(model, grid, h)
    out = _GridRecorder(grid)
    t = 0.0
    for t_next in pts:
        if t_next > t:
            u = ms.input(k, 0.5 * (t + t_next))
            y = _rk4(rhs_with(u), t, y, t_next - t, lambda v: v[:n].min() >= -1e-9)
            t = t_next
        if t in bursts:
            y[:n] += bursts[t]
            y[n:] = product(y[:n])
        out.record(t, y)
    rec = out.result()
    return MeanTrajectory(k, grid, rec[:, :n], rec[:, n:].T.copy(), kind)


class _GridRecorder:
    def __init__(self, grid):
        self.grid = np.asarray(grid, dtype=float)
        self.rows = [None] * len(self.grid)

    def record(self, t, y):
        i = np.searchsorted(self.grid, t - 1e-12)
        if i < len(self.grid) and abs(self.grid[i] - t) <= 1e-12:
            self.rows[i] = np.array(y, copy=True)

    def result(self):
        if any(r is None for r in self.rows):
            raise LNAError("report grid point was not reached by the stepper")
        return np.array(self.rows)


# --------------------------------------------------------------------------
# fluctuations
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NoiseSystem:
    """Linearised fluctuation dynamics (count units) along a mean trajectory.

    ``B[i]`` has one column per non-emission channel followed by one per
    transmitter voxel (Poisson emission noise).
    """

    times: np.ndarray
    A: np.ndarray  # (n_grid, n, n)
    B: np.ndarray  # (n_grid, n, n_channels + n_tx)


def build_noise_system(model: SystemModel, mean: MeanTrajectory) -> NoiseSystem:
    ms = assemble_mean_system(model)
    x = mean.counts
    a = ms.propensities(x)
    if np.any(a < -1e-12):
        raise LNAError("negative propensity at the mean trajectory")
    a = np.maximum(a, 0.0)
    A = np.einsum("sc,tcn->tsn", ms.S, ms.jacobian(x))
    u = np.array([_input_rates(model, mean.symbol, t) for t in mean.times])
    B = np.concatenate([ms.S[None] * np.sqrt(a)[:, None, :],
                        ms.E[None] * np.sqrt(u)[:, None, :]], axis=2)
    return NoiseSystem(mean.times, A, B)


def solve_lyapunov(A, B, sigma0, grid, h: float = DEFAULT_STEP) -> np.ndarray:
    """Integrate ``dSigma/dt = A Sigma + Sigma A^T + B B^T`` on ``grid``.

    ``A`` and ``B`` are callables of time or arrays sampled on ``grid``
    (linearly interpolated in between).  Returns ``Sigma`` at every grid point.
    """
    grid = np.asarray(grid, dtype=float)
    A_f = _as_function(A, grid)
    B_f = _as_function(B, grid)
    sigma = np.array(sigma0, dtype=float)
    if not np.allclose(sigma, sigma.T):
        raise ValueError("initial covariance must be symmetric")

    def f(t, s):
        At = A_f(t)
        Bt = B_f(t)
        return At @ s + s @ At.T + Bt @ Bt.T

    out = [sigma.copy()]
    t = float(grid[0])
    for t_next in grid[1:]:
        n_sub = max(1, int(np.ceil((t_next - t) / h - 1e-9)))
        hs = (t_next - t) / n_sub
        for _ in range(n_sub):
            k1 = f(t, sigma)
            k2 = f(t + hs / 2, sigma + hs / 2 * k1)
            k3 = f(t + hs / 2, sigma + hs / 2 * k2)
            k4 = f(t + hs, sigma + hs * k3)
            sigma = sigma + hs / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            sigma = 0.5 * (sigma + sigma.T)
            t += hs
            if not np.all(np.isfinite(sigma)):
                raise LNAError(f"covariance became non-finite at t={t:.6g}")
        t = float(t_next)
        out.append(sigma.copy())
    return np.array(out)


def _as_function(M, grid):
    if callable(M):
        return M
    M = np.asarray(M, dtype=float)
    if M.ndim == 2:
        return lambda t: M
    if len(M) != len(grid):
        raise ValueError("matrix samples must match the grid")

    def f(t):
        i = int(np.clip(np.searchsorted(grid, t, side="right") - 1, 0, len(grid) - 2))
        w = (t - grid[i]) / (grid[i + 1] - grid[i])
        w = min(max(w, 0.0), 1.0)
        return (1 - w) * M[i] + w * M[i + 1]
    return f


# --------------------------------------------------------------------------
# filter-output moments and BER
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LNAMoments:
    """LNA statistics for one transmitted symbol.

    ``z_cov`` is the covariance of the filter outputs; ``cov`` the full
    augmented covariance (species counts then ``Z``).
    """

    symbol: int
    times: np.ndarray
    mean_counts: np.ndarray  # (n_grid, n)
    cov: np.ndarray  # (n_grid, n + K, n + K)
    z_mean: np.ndarray  # (K, n_grid)
    references: ReferenceSet
    ber: np.ndarray | None  # (n_grid,), K = 2 only

    @property
    def n_species(self) -> int:
        return self.mean_counts.shape[1]

    @property
    def z_cov(self) -> np.ndarray:
        n = self.n_species
        return self.cov[:, n:, n:]

    @property
    def species_var(self) -> np.ndarray:
        n = self.n_species
        return np.diagonal(self.cov[:, :n, :n], axis1=1, axis2=2)

    def to_csv(self, path, labels=None) -> None:
        n = self.n_species
        labels = labels or [f"s{i}" for i in range(n)]
        K = self.z_mean.shape[0]
        cols = [self.times]
        head = ["t"]
        for i, lab in enumerate(labels):
            cols += [self.mean_counts[:, i], self.species_var[:, i]]
            head += [f"mean_{lab}", f"var_{lab}"]
        for k in range(K):
            cols += [self.z_mean[k], self.z_cov[:, k, k]]
            head += [f"mean_Z{k}", f"var_Z{k}"]
        if self.ber is not None:
            cols.append(self.ber)
            head.append("ber")
        np.savetxt(path, np.column_stack(cols), delimiter=",", header=",".join(head), comments="")


def gaussian_ber(mu_y, sigma_y, symbol: int):
    """P[wrong decision] for K = 2 with ``Y = Z_0 - Z_1 ~ N(mu_y, sigma_y^2)``."""
    mu_y = np.asarray(mu_y, dtype=float)
    sigma_y = np.asarray(sigma_y, dtype=float)
    sign = -1.0 if symbol == 0 else 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(sigma_y > 0, sign * mu_y / np.where(sigma_y > 0, sigma_y, 1.0),
                     np.where(sign * mu_y > 0, np.inf, np.where(sign * mu_y < 0, -np.inf, 0.0)))
    return norm.cdf(r)


def lna_references(model: SystemModel, grid, h: float = DEFAULT_STEP, kind: str | None = None) -> ReferenceSet:
    """Mean-system surrogate references for every symbol as a :class:`ReferenceSet`."""
    kind = kind or default_kind(model)
    trajs = [solve_mean_system(model, k, grid, h, kind) for k in range(model.K)]
    vals = np.array([tr.reference for tr in trajs])
    return ReferenceSet(kind, np.asarray(grid, dtype=float), vals)


def z_moments_and_ber(model: SystemModel, k: int, grid, h: float = DEFAULT_STEP,
                      kind: str | None = None, references: ReferenceSet | None = None) -> LNAMoments:
    """Augmented LNA for transmitted symbol ``k``.

    ``kind`` selects the filter: ``alpha`` (partitioned filter with its
    ``M_p - X*_p`` drift weight) or ``beta`` (mixed / generic filter).  The
    filter's references default to the mean-system surrogates on ``grid``.
    """
    kind = kind or default_kind(model)
    grid = np.asarray(grid, dtype=float)
    ms = assemble_mean_system(model)
    n, C = ms.S.shape
    K, P = model.K, model.P
    if references is None:
        references = lna_references(model, grid, h, kind)
    out_slots = np.asarray(model.output_slots)
    # counted jumps: channels raising an output count by one
    counted = np.zeros((P, C))
    for j, ci in enumerate(ms.channels):
        for s, dl in model.channels[ci].changes:
            hit = np.nonzero(out_slots == s)[0]
            if len(hit) and dl > 0:
                counted[hit[0], j] = 1.0
    if kind == "alpha":
        acts = [next(c for c in model.channels if c.kind == ChannelKind.ACTIVATION and c.receiver == p)
                for p in range(P)]
        g = np.array([c.constant for c in acts])
        loaded = model.species_slots[model.receiver.circuit.loaded]
        M = (model.initial_state[loaded] + model.initial_state[out_slots]).astype(float)
    else:
        from .demod import forward_constant
        g = np.full(P, forward_constant(model))
        M = None
    bursts = _bursts(model, k)
    n_tx = ms.E.shape[1]
    G_top = np.concatenate([ms.S, ms.E], axis=1)
    counted_full = np.concatenate([counted, np.zeros((P, n_tx))], axis=1)

    second = (ms.order == 2).astype(float)
    ra = np.minimum(ms.reac[:, 0], n - 1)
    rb = np.minimum(ms.reac[:, 1], n - 1)
    rt = references.times
    rv = references.values

    def ref_at(t):
        i = int(np.clip(np.searchsorted(rt, t, side="right") - 1, 0, len(rt) - 2))
        w = min(max((t - rt[i]) / (rt[i + 1] - rt[i]), 0.0), 1.0)
        return (1 - w) * rv[:, :, i] + w * rv[:, :, i + 1]

    def unpack(y):
        x = y[:n]
        zbar = y[n:n + K]
        sig = y[n + K:].reshape(n + K, n + K)
        return x, zbar, sig

    def rhs_with(u):
        def f(t, y):
            x, zbar, sig = unpack(y)
            a = np.maximum(ms.propensities(x), 0.0)
            J = ms.jacobian(x)
            A = ms.S @ J
            ref = ref_at(t)
            logref = np.log(np.maximum(ref, LOG_FLOOR))  # (K, P)
            # Gaussian expectation of the (bilinear) counted propensities
            in_rate = counted @ (a + ms.propensity * second * sig[ra, rb])
            L = counted @ J  # (P, n)
            if kind == "alpha":
                w = M - x[out_slots]
                dz = logref @ in_rate - (g * w * ref).sum(axis=1)
                Cz = logref @ L
                Cz[:, out_slots] += g * ref
            else:
                dz = logref @ in_rate - (g * ref).sum(axis=1)
                Cz = logref @ L
            dx = ms.S @ a + ms.E @ u
            Aaug = np.zeros((n + K, n + K))
            Aaug[:n, :n] = A
            Aaug[n:, :n] = Cz
            Gm = np.vstack([G_top, logref @ counted_full])
            rates = np.concatenate([a, u])
            D = (Gm * rates) @ Gm.T
            dsig = Aaug @ sig + sig @ Aaug.T + D
            return np.concatenate([dx, dz, dsig.ravel()])
        return f

    y = np.concatenate([np.asarray(model.initial_state, dtype=float), np.zeros(K),
                        np.zeros((n + K) ** 2)])
    pts = _step_points(model, grid, h)
    rec = _GridRecorder(grid)
    t = 0.0
    for t_next in pts:
        if t_next > t:
            u = _input_rates(model, k, 0.5 * (t + t_next))
            y = _rk4(rhs_with(u), t, y, t_next - t, lambda v: v[:n].min() >= -1e-9)
            sig = y[n + K:].reshape(n + K, n + K)
            y[n + K:] = (0.5 * (sig + sig.T)).ravel()
            if not np.all(np.isfinite(y)):
                raise LNAError(f"augmented covariance became non-finite at t={t_next:.6g}")
            t = t_next
        if t in bursts:
            y[:n] += bursts[t]
        rec.record(t, y)
    Y = rec.result()
    x = Y[:, :n]
    zbar = Y[:, n:n + K].T
    cov = Y[:, n + K:].reshape(len(grid), n + K, n + K)
    ber = None
    if K == 2:
        mu = zbar[0] - zbar[1]
        var = cov[:, n, n] + cov[:, n + 1, n + 1] - 2 * cov[:, n, n + 1]
        ber = gaussian_ber(mu, np.sqrt(np.maximum(var, 0.0)), k)
    return LNAMoments(k, grid, x, cov, zbar, references, ber)


def min_eigenvalue(cov: np.ndarray) -> np.ndarray:
    """Smallest eigenvalue of each covariance matrix in a stack."""
    return np.linalg.eigvalsh(np.asarray(cov)).min(axis=-1)
