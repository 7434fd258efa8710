"""Desk-scale pure-Mamba language model: kernels, training recipe, inference engine, benchmarks."""

__version__ = "0.1.0"
