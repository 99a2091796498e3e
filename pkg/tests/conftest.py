import numpy as np
import pytest

from voxcomm.model import (Boundary, DeterministicBursts, MediumSpec, PoissonRate, ReceiverSpec,
                           TransmitterSpec, act_deact, assemble_model, build_grid)


def line3(configuration="partitioned", d_r=0.0, M=10, symbols=None, boundary=None):
    """Three voxels in a row: transmitter at x=1, receivers at x=2 and x=3."""
    grid = build_grid((3, 1, 1), 1 / 3, boundary or Boundary.reflecting())
    symbols = symbols or (DeterministicBursts(((0.0, 8), (0.2, 8), (0.4, 8))),
                          DeterministicBursts(((0.0, 20), (0.2, 20), (0.4, 20))))
    tx = TransmitterSpec(((1, 1, 1),), symbols)
    rx = ReceiverSpec(((2, 1, 1), (3, 1, 1)), configuration, d_r, act_deact(), M)
    return assemble_model(grid, MediumSpec(1.0), tx, rx)


def single_voxel(symbols, M=0, D=1.0, boundary=None):
    grid = build_grid((1, 1, 1), 1 / 3, boundary or Boundary.reflecting())
    tx = TransmitterSpec(((1, 1, 1),), symbols)
    rx = ReceiverSpec(((1, 1, 1),), "partitioned", 0.0, act_deact(), M)
    return assemble_model(grid, MediumSpec(D), tx, rx)


@pytest.fixture
def line3_partitioned():
    return line3()


@pytest.fixture
def line3_mixed():
    return line3("mixed", d_r=1.8, M=4,
                 symbols=(DeterministicBursts(((0.0, 10), (0.2, 10), (0.4, 10))),
                          DeterministicBursts(((0.0, 15), (0.2, 15), (0.4, 15)))))


@pytest.fixture
def cube5():
    grid = build_grid((5, 5, 5), 1 / 3, Boundary.absorbing())
    tx = TransmitterSpec(((1, 1, 1),), (PoissonRate(10.0), PoissonRate(40.0)))
    rx = ReceiverSpec(((4, 5, 5), (5, 5, 5)), "partitioned", 0.0, act_deact(), 10)
    return assemble_model(grid, MediumSpec(1.0), tx, rx)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
