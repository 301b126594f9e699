"""Measure the flow of language between academic fields.

fieldflow trains partially labeled topic models over multi-label document
corpora (one latent topic family per observed label plus one shared
background topic), re-infers every document against the full label set,
and aggregates the resulting per-token attributions into incorporation
matrices, pairwise flow series, bootstrap-tested net source scores and
cross-model consistency reports.
"""

__version__ = "0.1.0"

from .corpus import Document, RawRecord, TextPreprocessor, Vocabulary, preprocess, tokenize
from .plda import AttributionResult, PartiallyLabeledLDA, PldaConfig
from .porter import stem
from .taxonomy import BACKGROUND_LABEL, LabelTaxonomy, relabel_documents

__all__ = [
    "AttributionResult",
    "BACKGROUND_LABEL",
    "Document",
    "LabelTaxonomy",
    "PartiallyLabeledLDA",
    "PldaConfig",
    "RawRecord",
    "TextPreprocessor",
    "Vocabulary",
    "preprocess",
    "relabel_documents",
    "stem",
    "tokenize",
]
