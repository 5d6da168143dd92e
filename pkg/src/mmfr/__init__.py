"""Curation pipeline for multimodal reasoning corpora.

Turns heterogeneous visual QA sources into a unified training corpus:
source adaptation and image normalization, prompt-driven question
cleaning, long chain-of-thought distillation from a teacher model,
multi-stage quality filtering, pass-rate difficulty scoring, subset
selection, and corpus analytics. Every model-facing stage runs against
a pluggable backend, including a deterministic scripted backend for
offline, reproducible runs.
"""

from mmfr.records import Decision, FilterVerdict, Reason, SampleRecord, canonical_key

__version__ = "0.1.0"

__all__ = [
    "Decision",
    "FilterVerdict",
    "Reason",
    "SampleRecord",
    "canonical_key",
    "__version__",
]
