"""Voxel reaction-diffusion simulation and demodulation for molecular communication."""

__version__ = "0.1.0"
