"""Parallel-attention backbone, triplet metric trainer, and identity evaluator."""

__version__ = "0.1.0"
