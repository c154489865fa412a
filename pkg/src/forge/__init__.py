"""Corpus refinement and layer-selective tuning toolkit."""

__version__ = "0.1.0"
