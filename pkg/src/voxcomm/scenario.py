"""Scenario configuration: a validated, hashable description of one experiment.

Scenario files are YAML with five sections::

    name: example
    grid: {dims: [5, 5, 5], w: 1/3, boundary: absorbing, boundary_fraction: 0.02}
    medium: {D: 1.0}
    transmitter:
      voxels: [[1, 1, 1]]
      symbols: [{type: poisson, rate: 10}, {type: poisson, rate: 40}]
    receiver: {voxels: [[4, 5, 5], [5, 5, 5]], d_r: 0.0, M: 10}
    run: {t_end: 2.5, n_runs_ber: 300, seed: 1}

Unknown keys anywhere are rejected.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import yaml

from .model import (CIRCUITS, Boundary, DeterministicBursts, MediumSpec, PoissonRate, Pulse,
                    ReceiverSpec, SystemModel, TransmitterSpec, assemble_model, build_grid)

DEMODULATORS = ("auto", "partitioned", "mixed", "mixed_oracle", "generic")
REFERENCE_SOURCES = ("ssa", "lna")


class ConfigError(ValueError):
    pass


def _number(v, what):
    if isinstance(v, str):
        try:
            return float(Fraction(v.strip()))
        except (ValueError, ZeroDivisionError):
            raise ConfigError(f"{what}: cannot parse {v!r} as a number") from None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{what}: expected a number, got {v!r}")
    return float(v)


def _voxels(v, what):
    try:
        out = tuple(tuple(int(c) for c in vox) for vox in v)
    except TypeError:
        raise ConfigError(f"{what}: expected a list of [x, y, z] triples") from None
    if not out or any(len(vox) != 3 for vox in out):
        raise ConfigError(f"{what}: expected a non-empty list of [x, y, z] triples")
    return out


def _check_keys(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping")
    extra = set(d) - set(allowed)
    if extra:
        raise ConfigError(f"{where}: unknown key(s) {sorted(extra)}")


def symbol_from_dict(d):
    _check_keys(d, {"type", "rate", "width", "duration", "bursts"}, "symbol")
    kind = d.get("type")
    if kind == "poisson":
        _check_keys(d, {"type", "rate", "duration"}, "poisson symbol")
        dur = _number(d["duration"], "duration") if "duration" in d else float("inf")
        return PoissonRate(_number(d["rate"], "rate"), dur)
    if kind == "pulse":
        _check_keys(d, {"type", "rate", "width"}, "pulse symbol")
        return Pulse(_number(d["rate"], "rate"), _number(d["width"], "width"))
    if kind == "bursts":
        _check_keys(d, {"type", "bursts"}, "burst symbol")
        return DeterministicBursts(tuple((_number(t, "burst time"), int(n)) for t, n in d["bursts"]))
    raise ConfigError(f"unknown symbol type {kind!r}")


def symbol_to_dict(s):
    if isinstance(s, PoissonRate):
        d = {"type": "poisson", "rate": s.rate}
        if np.isfinite(s.duration):
            d["duration"] = s.duration
        return d
    if isinstance(s, Pulse):
        return {"type": "pulse", "rate": s.rate, "width": s.width}
    return {"type": "bursts", "bursts": [[t, n] for t, n in s.bursts]}


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "scenario"
    # grid / medium
    dims: tuple[int, int, int] = (5, 5, 5)
    w: float = 1.0 / 3.0
    boundary: str = "absorbing"
    boundary_fraction: float = 1.0 / 50.0
    D: float = 1.0
    # transmitter
    tx_voxels: tuple = ((1, 1, 1),)
    symbols: tuple = (PoissonRate(10.0), PoissonRate(40.0))
    priors: tuple | None = None
    # receiver
    rx_voxels: tuple = ((4, 5, 5), (5, 5, 5))
    configuration: str = "auto"  # partitioned when d_r == 0, else mixed
    d_r: float = 0.0
    circuit: str = "act_deact"
    circuit_params: dict = field(default_factory=dict)
    M: int = 10
    # run parameters
    t_end: float = 2.5
    n_runs_ber: int = 300
    n_runs_ref: int = 500
    dt_ref: float = 0.01
    decision_times: tuple | None = None  # default: every decision_dt up to t_end
    decision_dt: float = 0.05
    seed: int = 1
    ref_seed: int | None = None  # default seed + 1000
    demodulator: str = "auto"
    references: str = "ssa"
    truncation: int = 100

    def __post_init__(self):
        if self.demodulator not in DEMODULATORS:
            raise ConfigError(f"demodulator must be one of {DEMODULATORS}")
        if self.references not in REFERENCE_SOURCES:
            raise ConfigError(f"references must be one of {REFERENCE_SOURCES}")
        if self.configuration not in ("auto", "partitioned", "mixed"):
            raise ConfigError("configuration must be auto, partitioned or mixed")
        if self.circuit not in CIRCUITS:
            raise ConfigError(f"unknown circuit {self.circuit!r}; known: {sorted(CIRCUITS)}")
        if self.boundary not in ("absorbing", "reflecting"):
            raise ConfigError("boundary must be absorbing or reflecting")
        if self.n_runs_ber < 1 or self.n_runs_ref < 1:
            raise ConfigError("run counts must be at least 1")
        if not self.t_end > 0:
            raise ConfigError("t_end must be positive")

    # ------------------------------------------------------------------
    @property
    def receiver_configuration(self) -> str:
        if self.configuration != "auto":
            return self.configuration
        return "partitioned" if self.d_r == 0 else "mixed"

    @property
    def demod(self) -> str:
        if self.demodulator != "auto":
            return self.demodulator
        if self.circuit != "act_deact":
            return "generic"
        return "mixed" if self.receiver_configuration == "mixed" else "partitioned"

    @property
    def reference_kind(self) -> str:
        return "alpha" if self.demod == "partitioned" else "beta"

    @property
    def reference_seed(self) -> int:
        return self.seed + 1000 if self.ref_seed is None else self.ref_seed

    def times(self) -> np.ndarray:
        if self.decision_times is not None:
            t = np.asarray(self.decision_times, dtype=float)
        else:
            n = int(round(self.t_end / self.decision_dt))
            t = np.linspace(self.decision_dt, n * self.decision_dt, n)
        if np.any(t > self.t_end + 1e-12) or np.any(t < 0):
            raise ConfigError("decision times must lie in [0, t_end]")
        return t

    def build_model(self) -> SystemModel:
        bnd = Boundary.absorbing(self.boundary_fraction) if self.boundary == "absorbing" else Boundary.reflecting()
        grid = build_grid(self.dims, self.w, bnd)
        tx = TransmitterSpec(self.tx_voxels, self.symbols, self.priors)
        circuit = CIRCUITS[self.circuit](**self.circuit_params)
        rx = ReceiverSpec(self.rx_voxels, self.receiver_configuration, self.d_r, circuit, self.M)
        return assemble_model(grid, MediumSpec(self.D), tx, rx)

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    # ------------------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "grid": {"dims": list(self.dims), "w": self.w, "boundary": self.boundary,
                     "boundary_fraction": self.boundary_fraction},
            "medium": {"D": self.D},
            "transmitter": {"voxels": [list(v) for v in self.tx_voxels],
                            "symbols": [symbol_to_dict(s) for s in self.symbols],
                            "priors": None if self.priors is None else list(self.priors)},
            "receiver": {"voxels": [list(v) for v in self.rx_voxels], "configuration": self.configuration,
                         "d_r": self.d_r, "circuit": self.circuit,
                         "circuit_params": dict(sorted(self.circuit_params.items())), "M": self.M},
            "run": {"t_end": self.t_end, "n_runs_ber": self.n_runs_ber, "n_runs_ref": self.n_runs_ref,
                    "dt_ref": self.dt_ref,
                    "decision_times": None if self.decision_times is None else list(self.decision_times),
                    "decision_dt": self.decision_dt, "seed": self.seed, "ref_seed": self.ref_seed,
                    "demodulator": self.demodulator, "references": self.references,
                    "truncation": self.truncation},
        }

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        _check_keys(d, {"name", "grid", "medium", "transmitter", "receiver", "run"}, "scenario")
        kw = {}
        if "name" in d:
            kw["name"] = str(d["name"])
        g = d.get("grid", {})
        _check_keys(g, {"dims", "w", "boundary", "boundary_fraction"}, "grid")
        if "dims" in g:
            dims = tuple(int(x) for x in g["dims"])
            if len(dims) != 3:
                raise ConfigError("grid.dims needs three entries")
            kw["dims"] = dims
        for key in ("w", "boundary_fraction"):
            if key in g:
                kw[key] = _number(g[key], f"grid.{key}")
        if "boundary" in g:
            kw["boundary"] = str(g["boundary"])
        med = d.get("medium", {})
        _check_keys(med, {"D"}, "medium")
        if "D" in med:
            kw["D"] = _number(med["D"], "medium.D")
        tx = d.get("transmitter", {})
        _check_keys(tx, {"voxels", "symbols", "priors"}, "transmitter")
        if "voxels" in tx:
            kw["tx_voxels"] = _voxels(tx["voxels"], "transmitter.voxels")
        if "symbols" in tx:
            kw["symbols"] = tuple(symbol_from_dict(s) for s in tx["symbols"])
        if tx.get("priors") is not None:
            kw["priors"] = tuple(_number(p, "prior") for p in tx["priors"])
        rx = d.get("receiver", {})
        _check_keys(rx, {"voxels", "configuration", "d_r", "circuit", "circuit_params", "M"}, "receiver")
        if "voxels" in rx:
            kw["rx_voxels"] = _voxels(rx["voxels"], "receiver.voxels")
        for key in ("configuration", "circuit"):
            if key in rx:
                kw[key] = str(rx[key])
        if "d_r" in rx:
            kw["d_r"] = _number(rx["d_r"], "receiver.d_r")
        if "M" in rx:
            kw["M"] = int(rx["M"])
        if "circuit_params" in rx:
            kw["circuit_params"] = {str(k): _number(v, f"circuit_params.{k}")
                                    for k, v in (rx["circuit_params"] or {}).items()}
        run = d.get("run", {})
        allowed = {"t_end", "n_runs_ber", "n_runs_ref", "dt_ref", "decision_times", "decision_dt", "seed",
                   "ref_seed", "demodulator", "references", "truncation"}
        _check_keys(run, allowed, "run")
        for key in ("t_end", "dt_ref", "decision_dt"):
            if key in run:
                kw[key] = _number(run[key], f"run.{key}")
        for key in ("n_runs_ber", "n_runs_ref", "seed", "truncation"):
            if key in run:
                kw[key] = int(run[key])
        if run.get("ref_seed") is not None:
            kw["ref_seed"] = int(run["ref_seed"])
        if run.get("decision_times") is not None:
            kw["decision_times"] = tuple(_number(t, "decision time") for t in run["decision_times"])
        for key in ("demodulator", "references"):
            if key in run:
                kw[key] = str(run[key])
        try:
            return cls(**kw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_yaml(cls, path) -> "ScenarioConfig":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})

    def to_yaml(self, path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)
