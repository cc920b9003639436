"""Aesthetic appeal regression.

An image is captioned against the attribute prompt, the image embedding and
the caption's text embedding are concatenated, and an MLP regresses the
rating on the corpus-native scale with an MSE objective. Training runs on a
natural-image corpus first and then continues on an artistic corpus from the
stage-1 weights with a fresh optimizer.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .backends import EmbeddingVector, load_prompt
from .cache import EmbeddingService
from .data import RatedImage, load_image
from .errors import CheckpointCorrupt, ConfigError, DataError, EmptyCaption, NonFiniteLoss
from .nn import MLP, Adam, Standardizer, cosine_lr, load_container, save_container

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "aesthetic-regressor"


@dataclass
class AestheticTrainConfig:
    feature_backend: str = "ref-joint"
    captioner_backend: str = "ref-caption"
    head_dims: list[int] = field(default_factory=lambda: [64, 32, 1])
    learning_rate: float = 1e-2
    learning_rate_stage2: float | None = None
    epochs_stage1: int = 200
    epochs_stage2: int = 50
    batch_size: int = 64
    seed: int = 0
    prompt_path: str | None = None

    def __post_init__(self):
        self.head_dims = [int(d) for d in self.head_dims]
        if not self.head_dims or self.head_dims[-1] != 1:
            raise ConfigError("aesthetic head must end in a width-1 output layer")
        if self.batch_size < 1 or self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")


def fuse_features(image: np.ndarray, attribute_caption: str, cfg: AestheticTrainConfig,
                  service: EmbeddingService | None = None) -> EmbeddingVector:
    """Concatenate the image embedding and the caption's text embedding."""
    if not attribute_caption or not attribute_caption.strip():
        raise EmptyCaption("attribute caption is empty")
    service = service or EmbeddingService()
    img = service.image(cfg.feature_backend, image)
    txt = service.text(cfg.feature_backend, attribute_caption)
    return EmbeddingVector(np.concatenate([img.values, txt.values]),
                           f"fused[{cfg.feature_backend}]")


class AestheticCheckpoint:
    def __init__(self, config: AestheticTrainConfig, head: MLP, standardizer: Standardizer,
                 stage_metrics: dict | None = None, prompt: str | None = None):
        self.config = config
        self.head = head
        self.standardizer = standardizer
        self.stage_metrics = {k: [(int(e), float(m)) for e, m in v]
                              for k, v in (stage_metrics or {}).items()}
        self.prompt = load_prompt(config.prompt_path) if prompt is None else prompt

    def predict(self, fused: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(fused, dtype=np.float64))
        return self.head(self.standardizer(x))[:, 0]

    def arrays(self) -> dict[str, np.ndarray]:
        st = self.head.state("head")
        st["norm.mean"] = self.standardizer.mean
        st["norm.scale"] = self.standardizer.scale
        return st

    def save(self, path) -> str:
        meta = {"config": asdict(self.config), "prompt": self.prompt,
                "stage_metrics": self.stage_metrics}
        return save_container(path, CHECKPOINT_KIND, meta, self.arrays())

    @classmethod
    def load(cls, path) -> "AestheticCheckpoint":
        meta, arrays = load_container(path, CHECKPOINT_KIND)
        try:
            cfg = AestheticTrainConfig(**meta["config"])
            in_dim = arrays["norm.mean"].shape[0]
            head = MLP.from_state([in_dim] + cfg.head_dims, arrays, "head")
            return cls(cfg, head, Standardizer(arrays["norm.mean"], arrays["norm.scale"]),
                       meta["stage_metrics"], meta["prompt"])
        except (KeyError, TypeError, ConfigError) as exc:
            raise CheckpointCorrupt(f"{path}: bad aesthetic checkpoint ({exc})") from None


def _features(rows: list[RatedImage], cfg: AestheticTrainConfig, prompt: str,
              service: EmbeddingService) -> np.ndarray:
    out = []
    for r in rows:
        img = load_image(r.image_path)
        cap = service.caption(cfg.captioner_backend, img, prompt)
        out.append(fuse_features(img, cap, cfg, service).values.astype(np.float64))
    return np.stack(out)


def mse_loss_and_grad(head: MLP, x: np.ndarray, y: np.ndarray):
    """MSE of ``head(x)`` against ``y`` and its parameter gradients."""
    pred, cache = head.forward(x)
    resid = pred[:, 0] - y
    loss = float(np.mean(resid ** 2))
    grad_out = (2.0 / len(y)) * resid[:, None]
    return loss, head.backward(cache, grad_out)


def _run_stage(head: MLP, x: np.ndarray, y: np.ndarray, epochs: int, lr: float,
               batch_size: int, rng: np.random.Generator, stage: str) -> list[tuple[int, float]]:
    opt = Adam(head.params)
    n = len(y)
    per_epoch = -(-n // batch_size)
    total = epochs * per_epoch
    step = 0
    metrics = []
    for epoch in range(epochs):
        perm = rng.permutation(n)
        for j in range(0, n, batch_size):
            idx = perm[j:j + batch_size]
            loss, grads = mse_loss_and_grad(head, x[idx], y[idx])
            if not np.isfinite(loss):
                raise NonFiniteLoss(step, stage)
            opt.step(head.params, grads, cosine_lr(lr, step, total))
            step += 1
        full = float(np.mean((head(x)[:, 0] - y) ** 2))
        metrics.append((epoch, full))
        log.debug("%s epoch %d mse %.6f", stage, epoch, full)
    return metrics


def train_aesthetic(stage1: list[RatedImage], stage2: list[RatedImage],
                    cfg: AestheticTrainConfig,
                    service: EmbeddingService | None = None) -> AestheticCheckpoint:
    """Two-stage MSE training; an empty ``stage2`` gives single-stage training.

    Per-epoch metrics are the full-stage MSE measured after each epoch.
    """
    if not stage1:
        raise DataError("stage-1 corpus is empty")
    service = service or EmbeddingService()
    prompt = load_prompt(cfg.prompt_path)
    x1 = _features(stage1, cfg, prompt, service)
    y1 = np.array([r.score for r in stage1], dtype=np.float64)
    norm = Standardizer.fit(x1)
    head = MLP([x1.shape[1]] + cfg.head_dims, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    metrics = {}
    if cfg.epochs_stage1 > 0:
        metrics["stage1"] = _run_stage(head, norm(x1), y1, cfg.epochs_stage1, cfg.learning_rate,
                                       cfg.batch_size, rng, "stage1")
    if stage2 and cfg.epochs_stage2 > 0:
        x2 = _features(stage2, cfg, prompt, service)
        y2 = np.array([r.score for r in stage2], dtype=np.float64)
        lr2 = cfg.learning_rate if cfg.learning_rate_stage2 is None else cfg.learning_rate_stage2
        metrics["stage2"] = _run_stage(head, norm(x2), y2, cfg.epochs_stage2, lr2,
                                       cfg.batch_size, rng, "stage2")
    return AestheticCheckpoint(cfg, head, norm, metrics, prompt)


class AestheticScorer:
    def __init__(self, service: EmbeddingService, ckpt: AestheticCheckpoint):
        self.service = service
        self.ckpt = ckpt

    @property
    def backend_ids(self) -> dict[str, str]:
        return {"aesthetic_features": self.ckpt.config.feature_backend,
                "captioner": self.ckpt.config.captioner_backend}

    def features(self, image: np.ndarray) -> np.ndarray:
        cap = self.service.caption(self.ckpt.config.captioner_backend, image, self.ckpt.prompt)
        return fuse_features(image, cap, self.ckpt.config, self.service).values

    def score(self, image: np.ndarray) -> float:
        return float(self.ckpt.predict(self.features(image))[0])


def aesthetic_score(image: np.ndarray, ckpt: AestheticCheckpoint,
                    service: EmbeddingService | None = None) -> float:
    return AestheticScorer(service or EmbeddingService(), ckpt).score(image)
