"""Desk-scale workbench for bimodal autoregressive transformers.

Builds tiny decoder-only models with several modality-routing schemes on a
float64 tape autodiff, trains them on a synthetic text+image corpus, and
measures debiased gradient conflict and n-gram conditional entropy.
"""

__version__ = "0.1.0"
