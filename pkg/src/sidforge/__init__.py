"""Desk-scale semantic-ID generation toolkit: a unified end-to-end
SID/embedding model, residual-quantization baselines, and an evaluation
suite over synthetic hierarchical ad catalogs."""

__version__ = "0.1.0"
