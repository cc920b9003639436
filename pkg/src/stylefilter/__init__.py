"""Best-of-N filtering and evaluation of style-transfer triplets."""

from .content import ContentScoreConfig, ContentScorer, content_score
from .data import (Manifest, RatedImage, ScoreRecord, StyleLabeledImage, Triplet, load_manifest,
                   write_manifest)
from .errors import BackendError, ConfigError, DataError, StyleFilterError
from .filtering import FilterConfig, Scorers, combine, filter_dataset, select_best

__version__ = "0.1.0"

__all__ = [
    "BackendError", "ConfigError", "ContentScoreConfig", "ContentScorer", "DataError",
    "FilterConfig", "Manifest", "RatedImage", "ScoreRecord", "Scorers", "StyleFilterError",
    "StyleLabeledImage", "Triplet", "combine", "content_score", "filter_dataset",
    "load_manifest", "select_best", "write_manifest",
]
