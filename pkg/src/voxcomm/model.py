"""System declaration and compilation.

A scenario is declared as a grid, a medium, a transmitter and a receiver.
:func:`assemble_model` turns that declaration into a :class:`SystemModel`:
a flat, immutable list of channels (diffusion jumps, boundary absorption,
receiver circuit reactions, receptor diffusion and emission) acting on a
table of *slots*, one slot per (species, voxel) pair.

Slot layout: the signalling species ``S`` occupies slots ``0 .. V-1`` (one per
voxel, linear voxel order); receiver species follow, grouped by receiver
voxel, in the circuit's species order.
"""
from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

SIGNAL = "S"


class ChannelKind(enum.IntEnum):
    SIGNAL_DIFFUSION = 0
    BOUNDARY_ABSORB = 1
    ACTIVATION = 2
    DEACTIVATION = 3
    RECEIVER_DIFFUSION = 4
    EMISSION = 5
    CIRCUIT_OTHER = 6


class ReactionKind(enum.Enum):
    ZEROTH = 0
    FIRST = 1
    SECOND_HETERO = 2


# --------------------------------------------------------------------------
# grid and medium
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Boundary:
    """Boundary condition of the medium.

    ``rate_fraction`` is the absorption rate per exposed face expressed as a
    fraction of the inter-voxel jump rate ``d``; it is ignored for
    reflecting boundaries.
    """

    kind: str = "reflecting"
    rate_fraction: float = 0.0

    def __post_init__(self):
        if self.kind not in ("reflecting", "absorbing"):
            raise ValueError(f"unknown boundary kind {self.kind!r}")
        if self.rate_fraction < 0:
            raise ValueError("rate_fraction must be non-negative")

    @classmethod
    def reflecting(cls) -> "Boundary":
        return cls("reflecting", 0.0)

    @classmethod
    def absorbing(cls, rate_fraction: float = 1.0 / 50.0) -> "Boundary":
        return cls("absorbing", rate_fraction)

    @property
    def is_absorbing(self) -> bool:
        return self.kind == "absorbing"


@dataclass(frozen=True)
class SpatialGrid:
    dims: tuple[int, int, int]
    w: float
    boundary: Boundary = Boundary()

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def volume(self) -> float:
        return self.w ** 3

    def contains(self, voxel: Sequence[int]) -> bool:
        return len(voxel) == 3 and all(1 <= c <= n for c, n in zip(voxel, self.dims))

    def index(self, voxel: Sequence[int]) -> int:
        """Linear index of a 1-based ``(x, y, z)`` voxel."""
        if not self.contains(voxel):
            raise ValueError(f"voxel {tuple(voxel)} outside grid {self.dims}")
        x, y, z = voxel
        nx, ny, _ = self.dims
        return (x - 1) + nx * (y - 1) + nx * ny * (z - 1)

    def coords(self, index: int) -> tuple[int, int, int]:
        nx, ny, _ = self.dims
        return (index % nx + 1, (index // nx) % ny + 1, index // (nx * ny) + 1)

    def neighbors(self, voxel: Sequence[int]) -> list[tuple[int, int, int]]:
        out = []
        for axis in range(3):
            for step in (-1, 1):
                nb = list(voxel)
                nb[axis] += step
                if 1 <= nb[axis] <= self.dims[axis]:
                    out.append(tuple(nb))
        return out

    def exposed_faces(self, voxel: Sequence[int]) -> int:
        return sum((c == 1) + (c == n) for c, n in zip(voxel, self.dims))

    def directed_pairs(self) -> list[tuple[int, int]]:
        """All ordered (source, destination) neighbour pairs, in linear order."""
        pairs = []
        for i in range(self.n_voxels):
            for nb in self.neighbors(self.coords(i)):
                pairs.append((i, self.index(nb)))
        return pairs


def build_grid(dims, w: float, boundary: Boundary | None = None) -> SpatialGrid:
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or any(n < 1 for n in dims):
        raise ValueError(f"grid dimensions must be three positive integers, got {dims}")
    if not w > 0:
        raise ValueError("voxel edge length must be positive")
    return SpatialGrid(dims, float(w), boundary or Boundary.reflecting())


@dataclass(frozen=True)
class MediumSpec:
    D: float = 1.0  # um^2/s

    def __post_init__(self):
        if self.D < 0:
            raise ValueError("diffusion coefficient must be non-negative")

    def jump_rate(self, grid: SpatialGrid) -> float:
        return self.D / grid.w ** 2


def convert_rate_constant(k_hat: float, volume: float) -> float:
    """Second-order concentration rate constant (um^3/s) to propensity constant (1/s)."""
    if not volume > 0:
        raise ValueError("voxel volume must be positive")
    return k_hat / volume


# --------------------------------------------------------------------------
# reactions and circuits
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ReactionSpec:
    """Mass-action reaction inside one receiver voxel.

    ``rate_constant`` is in concentration units: um^3/s for second order,
    1/s for first order, um^-3 s^-1 for zeroth order.  The stochastic
    propensity constant depends on the voxel volume.
    """

    name: str
    reactants: tuple[str, ...]
    products: tuple[str, ...]
    rate_constant: float

    def __post_init__(self):
        if self.rate_constant < 0:
            raise ValueError(f"reaction {self.name}: negative rate constant")
        if len(self.reactants) > 2:
            raise ValueError(f"reaction {self.name}: at most two reactants supported")
        if len(self.reactants) == 2 and self.reactants[0] == self.reactants[1]:
            raise ValueError(f"reaction {self.name}: homodimerisation not supported")

    @property
    def kind(self) -> ReactionKind:
        return ReactionKind(len(self.reactants))

    def propensity_constant(self, volume: float) -> float:
        if self.kind is ReactionKind.SECOND_HETERO:
            return convert_rate_constant(self.rate_constant, volume)
        if self.kind is ReactionKind.ZEROTH:
            return self.rate_constant * volume
        return self.rate_constant


@dataclass(frozen=True)
class CircuitSpec:
    """Receiver front-end circuit replicated in every receiver voxel.

    ``loaded`` is the species that holds the ``M`` receptors at t = 0.
    ``output`` is the observed species.
    """

    name: str
    species: tuple[str, ...]
    output: str
    loaded: str
    reactions: tuple[ReactionSpec, ...]

    def __post_init__(self):
        known = set(self.species) | {SIGNAL}
        if self.output not in self.species or self.loaded not in self.species:
            raise ValueError("output and loaded species must be circuit species")
        for r in self.reactions:
            unknown = (set(r.reactants) | set(r.products)) - known
            if unknown:
                raise ValueError(f"reaction {r.name} uses unknown species {sorted(unknown)}")


def act_deact(k_on: float = 0.005, k_off: float = 1.0) -> CircuitSpec:
    """S + X -> S + X* (k_on, um^3/s), X* -> X (k_off, 1/s)."""
    return CircuitSpec(
        "act_deact", ("X", "X*"), output="X*", loaded="X",
        reactions=(
            ReactionSpec("activation", (SIGNAL, "X"), (SIGNAL, "X*"), k_on),
            ReactionSpec("deactivation", ("X*",), ("X",), k_off),
        ),
    )


def two_site(l1: float = 0.005, m1: float = 1.0, l2: float = 0.005, m2: float = 1.0) -> CircuitSpec:
    """Receptor E with two binding sites: S + E <-> C1, S + C1 <-> C2; C2 observed."""
    return CircuitSpec(
        "two_site", ("E", "C1", "C2"), output="C2", loaded="E",
        reactions=(
            ReactionSpec("bind1", (SIGNAL, "E"), ("C1",), l1),
            ReactionSpec("unbind1", ("C1",), (SIGNAL, "E"), m1),
            ReactionSpec("bind2", (SIGNAL, "C1"), ("C2",), l2),
            ReactionSpec("unbind2", ("C2",), (SIGNAL, "C1"), m2),
        ),
    )


CIRCUITS = {"act_deact": act_deact, "two_site": two_site}


# --------------------------------------------------------------------------
# transmitter
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PoissonRate:
    rate: float  # molecules/s
    duration: float = math.inf

    def __post_init__(self):
        if self.rate < 0 or self.duration < 0:
            raise ValueError("emission rate and duration must be non-negative")


@dataclass(frozen=True)
class Pulse:
    rate: float
    width: float

    def __post_init__(self):
        if self.rate < 0 or self.width < 0:
            raise ValueError("pulse rate and width must be non-negative")


@dataclass(frozen=True)
class DeterministicBursts:
    bursts: tuple[tuple[float, int], ...]

    def __post_init__(self):
        times = [t for t, _ in self.bursts]
        if any(c < 0 for _, c in self.bursts) or any(t < 0 for t in times):
            raise ValueError("burst times and counts must be non-negative")
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError("burst times must be non-decreasing")


SymbolDef = Union[PoissonRate, Pulse, DeterministicBursts]


def emission_segments(symbol: SymbolDef) -> list[tuple[float, float, float]]:
    """(t_on, t_off, rate) windows of constant-rate Poisson emission."""
    if isinstance(symbol, PoissonRate):
        return [(0.0, symbol.duration, symbol.rate)]
    if isinstance(symbol, Pulse):
        return [(0.0, symbol.width, symbol.rate)]
    return []


def emission_bursts(symbol: SymbolDef) -> list[tuple[float, int]]:
    if isinstance(symbol, DeterministicBursts):
        return [(float(t), int(c)) for t, c in symbol.bursts]
    return []


@dataclass(frozen=True)
class TransmitterSpec:
    """Transmitter occupying one or more voxels.

    Emission rates are split evenly across the transmitter voxels; burst
    counts must divide evenly.
    """

    voxels: tuple[tuple[int, int, int], ...]
    symbols: tuple[SymbolDef, ...]
    priors: tuple[float, ...] | None = None

    def __post_init__(self):
        if len(self.symbols) < 2:
            raise ValueError("a transmitter needs at least two symbols")
        if not self.voxels:
            raise ValueError("a transmitter needs at least one voxel")
        if self.priors is not None:
            if len(self.priors) != len(self.symbols):
                raise ValueError("one prior per symbol required")
            if any(p < 0 for p in self.priors) or not math.isclose(sum(self.priors), 1.0, abs_tol=1e-9):
                raise ValueError("priors must be a probability vector")

    @property
    def K(self) -> int:
        return len(self.symbols)

    @property
    def prior_vector(self) -> np.ndarray:
        if self.priors is None:
            return np.full(self.K, 1.0 / self.K)
        return np.asarray(self.priors, dtype=float)


# --------------------------------------------------------------------------
# receiver
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ReceiverSpec:
    voxels: tuple[tuple[int, int, int], ...]
    configuration: str = "partitioned"  # or "mixed"
    d_r: float = 0.0  # receptor inter-voxel jump rate, 1/s
    circuit: CircuitSpec = field(default_factory=act_deact)
    M: int = 10

    def __post_init__(self):
        if not self.voxels:
            raise ValueError("receiver needs at least one voxel")
        if len(set(self.voxels)) != len(self.voxels):
            raise ValueError("receiver voxels must be distinct")
        if self.configuration not in ("partitioned", "mixed"):
            raise ValueError(f"unknown receiver configuration {self.configuration!r}")
        if self.d_r < 0:
            raise ValueError("d_r must be non-negative")
        if self.configuration == "partitioned" and self.d_r != 0:
            raise ValueError("a partitioned receiver has d_r = 0")
        if self.M < 0:
            raise ValueError("M must be non-negative")

    @property
    def P(self) -> int:
        return len(self.voxels)

    @property
    def mixed(self) -> bool:
        return self.configuration == "mixed"


# --------------------------------------------------------------------------
# compiled model
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Channel:
    index: int
    kind: ChannelKind
    reactants: tuple[int, ...]
    changes: tuple[tuple[int, int], ...]
    constant: float
    label: str
    receiver: int = -1  # receiver voxel p (source voxel for receptor diffusion)
    target: int = -1  # destination receiver voxel for receptor diffusion
    symbol: int = -1  # emission channels only
    window: tuple[float, float] = (0.0, math.inf)
    burst_time: float = math.nan

    @property
    def is_burst(self) -> bool:
        return not math.isnan(self.burst_time)


def _frozen(a) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SystemModel:
    grid: SpatialGrid
    medium: MediumSpec
    transmitter: TransmitterSpec
    receiver: ReceiverSpec
    slots: tuple[tuple[str, int], ...]
    channels: tuple[Channel, ...]
    initial_state: np.ndarray
    signal_slots: np.ndarray  # per receiver voxel p
    output_slots: np.ndarray  # per receiver voxel p
    species_slots: dict  # circuit species -> array of slots per receiver voxel

    @property
    def d(self) -> float:
        return self.medium.jump_rate(self.grid)

    @property
    def volume(self) -> float:
        return self.grid.volume

    @property
    def n_slots(self) -> int:
        return len(self.slots)

    @property
    def K(self) -> int:
        return self.transmitter.K

    @property
    def P(self) -> int:
        return self.receiver.P

    def channels_of(self, kind: ChannelKind) -> list[Channel]:
        return [c for c in self.channels if c.kind == kind]

    def slot_label(self, slot: int) -> str:
        sp, vox = self.slots[slot]
        return f"{sp}@{self.grid.coords(vox)}"

    def receiver_pairs(self) -> list[tuple[int, int]]:
        """Unordered adjacent receiver-voxel pairs (p, q), p < q."""
        vox = self.receiver.voxels
        return [(p, q) for p, q in itertools.combinations(range(len(vox)), 2)
                if sum(abs(a - b) for a, b in zip(vox[p], vox[q])) == 1]

    def with_receiver(self, **changes) -> "SystemModel":
        from dataclasses import replace
        rx = replace(self.receiver, **changes)
        return assemble_model(self.grid, self.medium, self.transmitter, rx)

    # flat arrays consumed by the simulator and the master-equation code
    def arrays(self) -> "ChannelArrays":
        cached = self.__dict__.get("_arrays")
        if cached is None:
            cached = ChannelArrays.from_model(self)
            object.__setattr__(self, "_arrays", cached)
        return cached

    def canonical(self) -> str:
        """Deterministic text rendering of the compiled channel list."""
        lines = [f"slots {len(self.slots)}"]
        for c in self.channels:
            lines.append(
                f"{c.index} {c.kind.name} r={c.reactants} ch={c.changes} k={c.constant!r} "
                f"p={c.receiver} q={c.target} sym={c.symbol} win={c.window} burst={c.burst_time!r}"
            )
        return "\n".join(lines)


@dataclass(frozen=True, eq=False)
class ChannelArrays:
    reactants: np.ndarray  # (C, 2) slot or -1
    constant: np.ndarray  # (C,)
    change_slot: np.ndarray  # (C, 4) slot or -1
    change_delta: np.ndarray  # (C, 4)
    kind: np.ndarray
    symbol: np.ndarray
    t_on: np.ndarray
    t_off: np.ndarray
    burst_time: np.ndarray
    dep_ptr: np.ndarray
    dep_idx: np.ndarray

    @classmethod
    def from_model(cls, model: SystemModel) -> "ChannelArrays":
        C = len(model.channels)
        reac = np.full((C, 2), -1, dtype=np.int64)
        cslot = np.full((C, 4), -1, dtype=np.int64)
        cdelta = np.zeros((C, 4), dtype=np.int64)
        for c in model.channels:
            reac[c.index, :len(c.reactants)] = c.reactants
            for j, (s, dlt) in enumerate(c.changes):
                cslot[c.index, j] = s
                cdelta[c.index, j] = dlt
        # channel c affects every channel with a reactant among c's changed slots
        readers: dict[int, list[int]] = {}
        for c in model.channels:
            for s in c.reactants:
                readers.setdefault(s, []).append(c.index)
        ptr = [0]
        idx: list[int] = []
        for c in model.channels:
            deps = sorted({r for s, _ in c.changes for r in readers.get(s, ())})
            idx.extend(deps)
            ptr.append(len(idx))
        return cls(
            reactants=_frozen(reac),
            constant=_frozen(np.array([c.constant for c in model.channels], dtype=float)),
            change_slot=_frozen(cslot),
            change_delta=_frozen(cdelta),
            kind=_frozen(np.array([int(c.kind) for c in model.channels], dtype=np.int64)),
            symbol=_frozen(np.array([c.symbol for c in model.channels], dtype=np.int64)),
            t_on=_frozen(np.array([c.window[0] for c in model.channels], dtype=float)),
            t_off=_frozen(np.array([c.window[1] for c in model.channels], dtype=float)),
            burst_time=_frozen(np.array([c.burst_time for c in model.channels], dtype=float)),
            dep_ptr=_frozen(np.array(ptr, dtype=np.int64)),
            dep_idx=_frozen(np.array(idx, dtype=np.int64)),
        )


def assemble_model(grid: SpatialGrid, medium: MediumSpec, tx: TransmitterSpec,
                   rx: ReceiverSpec) -> SystemModel:
    for v in tx.voxels:
        if not grid.contains(v):
            raise ValueError(f"transmitter voxel {v} outside grid {grid.dims}")
    for v in rx.voxels:
        if not grid.contains(v):
            raise ValueError(f"receiver voxel {v} outside grid {grid.dims}")

    V = grid.n_voxels
    vol = grid.volume
    d = medium.jump_rate(grid)
    circuit = rx.circuit
    ns = len(circuit.species)

    slots = [(SIGNAL, i) for i in range(V)]
    rx_index = [grid.index(v) for v in rx.voxels]
    for p, vi in enumerate(rx_index):
        slots.extend((sp, vi) for sp in circuit.species)

    def rslot(p: int, species: str) -> int:
        if species == SIGNAL:
            return rx_index[p]
        return V + p * ns + circuit.species.index(species)

    init = np.zeros(len(slots), dtype=np.int64)
    for p in range(rx.P):
        init[rslot(p, circuit.loaded)] = rx.M

    channels: list[Channel] = []

    def add(kind, reactants, changes, const, label, **kw):
        channels.append(Channel(len(channels), kind, tuple(reactants), tuple(changes),
                                float(const), label, **kw))

    # emission, one set per symbol; only the transmitted symbol's set is live
    nt = len(tx.voxels)
    for k, sym in enumerate(tx.symbols):
        for v in tx.voxels:
            vi = grid.index(v)
            for t_on, t_off, rate in emission_segments(sym):
                add(ChannelKind.EMISSION, (), ((vi, 1),), rate / nt,
                    f"emit k={k} -> {v}", symbol=k, window=(t_on, t_off))
        for t_b, count in emission_bursts(sym):
            if count % nt:
                raise ValueError("burst count must divide evenly across transmitter voxels")
            for v in tx.voxels:
                add(ChannelKind.EMISSION, (), ((grid.index(v), count // nt),), 0.0,
                    f"burst k={k} t={t_b} -> {v}", symbol=k, burst_time=t_b)

    for src, dst in grid.directed_pairs():
        add(ChannelKind.SIGNAL_DIFFUSION, (src,), ((src, -1), (dst, 1)), d,
            f"S {grid.coords(src)}->{grid.coords(dst)}")

    if grid.boundary.is_absorbing:
        rate = d * grid.boundary.rate_fraction
        for i in range(V):
            for face in range(grid.exposed_faces(grid.coords(i))):
                add(ChannelKind.BOUNDARY_ABSORB, (i,), ((i, -1),), rate,
                    f"S {grid.coords(i)} leaves (face {face})")

    for p in range(rx.P):
        for r in circuit.reactions:
            delta: dict[int, int] = {}
            for sp in r.reactants:
                delta[rslot(p, sp)] = delta.get(rslot(p, sp), 0) - 1
            for sp in r.products:
                delta[rslot(p, sp)] = delta.get(rslot(p, sp), 0) + 1
            changes = tuple((s, dl) for s, dl in sorted(delta.items()) if dl != 0)
            out_change = delta.get(rslot(p, circuit.output), 0)
            kind = (ChannelKind.ACTIVATION if out_change > 0 else
                    ChannelKind.DEACTIVATION if out_change < 0 else ChannelKind.CIRCUIT_OTHER)
            add(kind, [rslot(p, sp) for sp in r.reactants], changes,
                r.propensity_constant(vol), f"{r.name} rv{p + 1}", receiver=p)

    model_pairs = []
    if rx.mixed:
        vox = rx.voxels
        model_pairs = [(p, q) for p, q in itertools.combinations(range(rx.P), 2)
                       if sum(abs(a - b) for a, b in zip(vox[p], vox[q])) == 1]
    for p, q in model_pairs:
        for sp in circuit.species:
            for a, b in ((p, q), (q, p)):
                add(ChannelKind.RECEIVER_DIFFUSION, (rslot(a, sp),),
                    ((rslot(a, sp), -1), (rslot(b, sp), 1)), rx.d_r,
                    f"{sp} rv{a + 1}->rv{b + 1}", receiver=a, target=b)

    species_slots = {sp: _frozen(np.array([rslot(p, sp) for p in range(rx.P)], dtype=np.int64))
                     for sp in circuit.species}
    return SystemModel(
        grid=grid, medium=medium, transmitter=tx, receiver=rx,
        slots=tuple(slots), channels=tuple(channels), initial_state=_frozen(init),
        signal_slots=_frozen(np.array(rx_index, dtype=np.int64)),
        output_slots=species_slots[circuit.output],
        species_slots=species_slots,
    )


def propensity_eval(model: SystemModel, state, channel: Channel | int,
                    t: float | None = None, symbol: int | None = None) -> float:
    """Propensity (1/s) of ``channel`` in ``state``.

    Emission channels are live only for ``symbol`` (any symbol when ``None``)
    and inside their time window (ignored when ``t`` is ``None``).  Bursts
    are scheduled events and have zero propensity.
    """
    c = model.channels[channel] if isinstance(channel, (int, np.integer)) else channel
    if c.kind == ChannelKind.EMISSION:
        if c.is_burst or (symbol is not None and c.symbol != symbol):
            return 0.0
        if t is not None and not (c.window[0] <= t < c.window[1]):
            return 0.0
    a = c.constant
    for s in c.reactants:
        a *= state[s]
    return float(a)
