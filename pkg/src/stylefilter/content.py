"""Content preservation: caption-image semantic similarity blended with
image-image structural similarity, ``C = alpha * S_sem + (1 - alpha) * S_struct``.

Both similarities are raw cosines; no rescaling is applied before blending.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .backends import cosine
from .cache import EmbeddingService
from .errors import ConfigError, EmptyCaption

DEFAULT_ALPHA = 0.5


@dataclass(frozen=True)
class ContentScoreConfig:
    alpha: float = DEFAULT_ALPHA
    semantic_backend: str = "ref-joint"
    structural_backend: str = "ref-stats"

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0) or math.isnan(self.alpha):
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")


def content_score(s_sem: float, s_struct: float, cfg: ContentScoreConfig | float = DEFAULT_ALPHA) -> float:
    alpha = cfg.alpha if isinstance(cfg, ContentScoreConfig) else float(cfg)
    c = alpha * s_sem + (1.0 - alpha) * s_struct
    # clipping to the input range keeps rounding from leaving it; still monotone in both inputs
    return min(max(c, min(s_sem, s_struct)), max(s_sem, s_struct))


class ContentScorer:
    def __init__(self, service: EmbeddingService, cfg: ContentScoreConfig | None = None):
        self.service = service
        self.cfg = cfg or ContentScoreConfig()
        if not service.descriptor(self.cfg.semantic_backend).supports_text:
            raise ConfigError(f"semantic backend {self.cfg.semantic_backend!r} needs image+text modality")

    @property
    def backend_ids(self) -> dict[str, str]:
        return {"semantic": self.cfg.semantic_backend, "structural": self.cfg.structural_backend}

    def semantic_score(self, stylized: np.ndarray, caption: str) -> float:
        if not caption or not caption.strip():
            raise EmptyCaption("content caption is empty")
        img = self.service.image(self.cfg.semantic_backend, stylized)
        txt = self.service.text(self.cfg.semantic_backend, caption)
        return cosine(img, txt)

    def structural_score(self, stylized: np.ndarray, content: np.ndarray) -> float:
        a = self.service.image(self.cfg.structural_backend, stylized)
        b = self.service.image(self.cfg.structural_backend, content)
        return cosine(a, b)

    def score(self, stylized: np.ndarray, content: np.ndarray, caption: str) -> float:
        return content_score(self.semantic_score(stylized, caption),
                             self.structural_score(stylized, content), self.cfg)
