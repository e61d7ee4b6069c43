"""Generalise-then-personalise activity recognition: offline 1D-CNN training, on-device head updates, drift benchmarks."""

__version__ = "0.1.0"
