"""Style consistency: a contrastively trained projection head over a frozen
base embedder, its similarity score, and Rank@k retrieval evaluation.

The loss is the multi-positive, temperature-scaled cross-entropy over
in-batch candidates. For unit embeddings ``e`` and temperature ``T``, with
``s_ik = e_i . e_k / T``, anchor ``i`` with positive set ``P(i)`` (same label,
``k != i``) contributes::

    L_i = -1/|P(i)| * sum_{p in P(i)} [ s_ip - log sum_{k != i} exp(s_ik) ]

and the batch loss is the mean of ``L_i`` over anchors with ``|P(i)| > 0``.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .backends import EmbeddingVector, cosine_arrays
from .cache import EmbeddingService
from .data import StyleLabeledImage, load_image
from .errors import (CheckpointCorrupt, ConfigError, InsufficientLabels,
                     LabelMissingInKeys, NonFiniteLoss, NoPositivePair)
from .nn import MLP, Adam, Standardizer, load_container, save_container

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "style-encoder"
LOSS_NAME = "supcon-multipositive"


@dataclass
class ContrastiveTrainConfig:
    base_backend: str = "ref-stats"
    head_dims: list[int] = field(default_factory=lambda: [64, 32])
    temperature: float = 0.07
    batch_size: int = 32
    epochs: int = 10
    learning_rate: float = 1e-3
    seed: int = 0
    finetune_base: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not self.head_dims or any(int(d) <= 0 for d in self.head_dims):
            raise ConfigError(f"bad head_dims {self.head_dims}")
        self.head_dims = [int(d) for d in self.head_dims]


# -- batching -----------------------------------------------------------------

def _eligible(labels: list[str]) -> dict[str, list[int]]:
    by_label: dict[str, list[int]] = {}
    for i, lab in enumerate(labels):
        by_label.setdefault(lab, []).append(i)
    return {k: v for k, v in by_label.items() if len(v) >= 2}


def _epoch_batches(by_label: dict[str, list[int]], batch_size: int,
                   rng: np.random.Generator) -> list[list[int]]:
    # chunks of 2 (3 when a label has an odd count) so every anchor has a positive
    chunks: dict[str, list[list[int]]] = {}
    for lab in sorted(by_label):
        idx = [by_label[lab][j] for j in rng.permutation(len(by_label[lab]))]
        parts = [idx[j:j + 2] for j in range(0, len(idx) - len(idx) % 2, 2)]
        if len(idx) % 2:
            parts[-1].append(idx[-1])
        chunks[lab] = parts
    order = [sorted(by_label)[j] for j in rng.permutation(len(by_label))]
    interleaved: list[tuple[str, list[int]]] = []
    while any(chunks[lab] for lab in order):
        for lab in order:
            if chunks[lab]:
                interleaved.append((lab, chunks[lab].pop(0)))

    batches: list[list[int]] = []
    cur: list[int] = []
    cur_labels: set[str] = set()
    for lab, chunk in interleaved:
        if cur and len(cur) + len(chunk) > batch_size and len(cur_labels) >= 2:
            batches.append(cur)
            cur, cur_labels = [], set()
        cur = cur + chunk
        cur_labels.add(lab)
    if cur:
        if len(cur_labels) < 2 and batches:
            batches[-1] = batches[-1] + cur
        else:
            batches.append(cur)
    return batches


def build_pairs(corpus: list[StyleLabeledImage] | list[str], seed: int,
                batch_size: int = 32, epochs: int = 1):
    """Yield ``(epoch, indices)`` batches over ``corpus``.

    Every anchor in a batch has at least one same-label and one different-label
    partner. Labels with fewer than two images are left out. ``batch_size`` is
    a soft cap: a trailing single-label remainder is merged into the previous
    batch.
    """
    labels = [c.style_label if isinstance(c, StyleLabeledImage) else str(c) for c in corpus]
    by_label = _eligible(labels)
    if len(by_label) < 2:
        raise InsufficientLabels(
            f"need >= 2 style labels with >= 2 images each, found {len(by_label)}")
    rng = np.random.default_rng(seed)
    for epoch in range(epochs):
        for batch in _epoch_batches(by_label, batch_size, rng):
            yield epoch, batch


# -- loss -----------------------------------------------------------------------

def _as_matrix(embeddings) -> np.ndarray:
    if isinstance(embeddings, np.ndarray):
        return np.asarray(embeddings, dtype=np.float64)
    return np.stack([np.asarray(e.values if isinstance(e, EmbeddingVector) else e,
                                dtype=np.float64) for e in embeddings])


def supcon_loss_and_grad(emb: np.ndarray, labels, temperature: float):
    """Loss and its gradient with respect to ``emb`` (rows assumed unit-norm)."""
    emb = np.asarray(emb, dtype=np.float64)
    n = emb.shape[0]
    lab = np.asarray(labels)
    pos = (lab[:, None] == lab[None, :]) & ~np.eye(n, dtype=bool)
    n_pos = pos.sum(axis=1)
    valid = n_pos > 0
    if not valid.any():
        raise NoPositivePair("batch has no same-label pair")
    s = emb @ emb.T / temperature
    s_masked = np.where(np.eye(n, dtype=bool), -np.inf, s)
    mx = s_masked.max(axis=1, keepdims=True)
    ex = np.exp(s_masked - mx)
    denom = ex.sum(axis=1, keepdims=True)
    lse = (np.log(denom) + mx)[:, 0]
    prob = ex / denom

    per_anchor = np.zeros(n)
    per_anchor[valid] = -((pos * s).sum(axis=1)[valid] / n_pos[valid] - lse[valid])
    m = int(valid.sum())
    loss = float(per_anchor[valid].sum() / m)

    g = np.zeros((n, n))
    g[valid] = (prob[valid] - pos[valid] / n_pos[valid, None]) / m
    grad = (g + g.T) @ emb / temperature
    return loss, grad


def contrastive_loss(embeddings, labels, temperature: float = 0.07) -> float:
    return supcon_loss_and_grad(_as_matrix(embeddings), labels, temperature)[0]


# -- encoder / checkpoint -------------------------------------------------------------

class StyleEncoderCheckpoint:
    """Projection head + input standardizer over a frozen base embedder.

    ``head=None`` is the untrained baseline: plain normalized base embeddings.
    """

    def __init__(self, config: ContrastiveTrainConfig, head: MLP | None,
                 standardizer: Standardizer | None, train_metrics=None):
        self.config = config
        self.head = head
        self.standardizer = standardizer
        self.train_metrics = [(int(e), float(l)) for e, l in (train_metrics or [])]

    @classmethod
    def identity(cls, base_backend: str) -> "StyleEncoderCheckpoint":
        return cls(ContrastiveTrainConfig(base_backend=base_backend, epochs=0), None, None)

    def arrays(self) -> dict[str, np.ndarray]:
        if self.head is None:
            return {}
        st = self.head.state("head")
        st["norm.mean"] = self.standardizer.mean
        st["norm.scale"] = self.standardizer.scale
        return st

    @property
    def backend_id(self) -> str:
        if self.head is None:
            return f"{self.config.base_backend}:normalized"
        h = hashlib.sha256(json.dumps(asdict(self.config), sort_keys=True).encode())
        for name, arr in sorted(self.arrays().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return f"style-head[{self.config.base_backend}]:{h.hexdigest()[:12]}"

    def project(self, base: np.ndarray) -> np.ndarray:
        """Map base features (n, d) to unit style embeddings."""
        x = np.atleast_2d(np.asarray(base, dtype=np.float64))
        y = x if self.head is None else self.head(self.standardizer(x))
        norms = np.linalg.norm(y, axis=1, keepdims=True)
        return np.divide(y, norms, out=np.zeros_like(y), where=norms > 0)

    def save(self, path) -> str:
        meta = {"config": asdict(self.config), "train_metrics": self.train_metrics,
                "loss": LOSS_NAME, "trained": self.head is not None,
                "backend_id": self.backend_id}
        return save_container(path, CHECKPOINT_KIND, meta, self.arrays())

    @classmethod
    def load(cls, path) -> "StyleEncoderCheckpoint":
        meta, arrays = load_container(path, CHECKPOINT_KIND)
        try:
            cfg = ContrastiveTrainConfig(**meta["config"])
            if not meta["trained"]:
                ck = cls(cfg, None, None, meta["train_metrics"])
            else:
                base_dim = arrays["norm.mean"].shape[0]
                head = MLP.from_state([base_dim] + cfg.head_dims, arrays, "head")
                ck = cls(cfg, head, Standardizer(arrays["norm.mean"], arrays["norm.scale"]),
                         meta["train_metrics"])
        except (KeyError, TypeError, ConfigError) as exc:
            raise CheckpointCorrupt(f"{path}: bad style checkpoint ({exc})") from None
        if ck.backend_id != meta.get("backend_id"):
            raise CheckpointCorrupt(f"{path}: backend id does not match weights")
        return ck


def _base_features(service: EmbeddingService, backend_id: str, paths: list[str]) -> np.ndarray:
    return np.stack([service.image(backend_id, load_image(p)).values.astype(np.float64)
                     for p in paths])


def train_style_encoder(corpus: list[StyleLabeledImage], cfg: ContrastiveTrainConfig,
                        service: EmbeddingService | None = None) -> StyleEncoderCheckpoint:
    service = service or EmbeddingService()
    if cfg.finetune_base:
        raise ConfigError("full-encoder fine-tuning needs a trainable base backend; "
                          "the configured backends are frozen")
    labels = [c.style_label for c in corpus]
    batches = list(build_pairs(corpus, cfg.seed, cfg.batch_size, cfg.epochs))
    feats = _base_features(service, cfg.base_backend, [c.image_path for c in corpus])
    norm = Standardizer.fit(feats)
    head = MLP([feats.shape[1]] + cfg.head_dims, seed=cfg.seed)
    opt = Adam(head.params)
    x_all = norm(feats)
    lab = np.asarray(labels)

    epoch_losses: dict[int, list[float]] = {}
    for b_idx, (epoch, batch) in enumerate(batches):
        y, cache = head.forward(x_all[batch])
        r = np.linalg.norm(y, axis=1, keepdims=True)
        r = np.maximum(r, 1e-12)
        e = y / r
        loss, d_e = supcon_loss_and_grad(e, lab[batch], cfg.temperature)
        if not np.isfinite(loss) or not np.all(np.isfinite(d_e)):
            raise NonFiniteLoss(b_idx, "style")
        d_y = (d_e - e * (d_e * e).sum(axis=1, keepdims=True)) / r
        opt.step(head.params, head.backward(cache, d_y), cfg.learning_rate)
        epoch_losses.setdefault(epoch, []).append(loss)
    metrics = [(ep, float(np.mean(v))) for ep, v in sorted(epoch_losses.items())]
    for ep, l in metrics:
        log.debug("style epoch %d loss %.6f", ep, l)
    return StyleEncoderCheckpoint(cfg, head, norm, metrics)


class StyleScorer:
    def __init__(self, service: EmbeddingService, ckpt: StyleEncoderCheckpoint):
        self.service = service
        self.ckpt = ckpt

    @property
    def backend_id(self) -> str:
        return self.ckpt.backend_id

    def embed(self, image: np.ndarray) -> np.ndarray:
        base = self.service.image(self.ckpt.config.base_backend, image).values
        return self.ckpt.project(base)[0]

    def embed_paths(self, paths: list[str]) -> np.ndarray:
        feats = _base_features(self.service, self.ckpt.config.base_backend, paths)
        return self.ckpt.project(feats)

    def score(self, stylized: np.ndarray, style_ref: np.ndarray) -> float:
        return cosine_arrays(self.embed(stylized), self.embed(style_ref))


def style_score(stylized: np.ndarray, style_ref: np.ndarray, ckpt: StyleEncoderCheckpoint,
                service: EmbeddingService | None = None) -> float:
    return StyleScorer(service or EmbeddingService(), ckpt).score(stylized, style_ref)


# -- retrieval ------------------------------------------------------------------------

def rank_at_k(query_emb: np.ndarray, query_labels, key_emb: np.ndarray, key_labels,
              ks=(1, 5, 10), exclude=None) -> tuple[float, ...]:
    """Fraction of queries whose first same-label key lands in the top k.

    Keys are ordered by descending cosine; ties keep key order. ``exclude`` is
    an optional boolean (n_queries, n_keys) mask of keys a query may not match
    (e.g. itself).
    """
    q = np.asarray(query_emb, dtype=np.float64)
    k = np.asarray(key_emb, dtype=np.float64)
    qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-300)
    kn = k / np.maximum(np.linalg.norm(k, axis=1, keepdims=True), 1e-300)
    sims = qn @ kn.T
    key_labels = np.asarray(key_labels)
    hits = np.zeros(len(ks))
    for i, lab in enumerate(query_labels):
        allowed = np.ones(len(key_labels), dtype=bool) if exclude is None else ~np.asarray(exclude[i])
        cand = np.flatnonzero(allowed)
        if not np.any(key_labels[cand] == lab):
            raise LabelMissingInKeys(f"query {i} label {lab!r} has no key", label=str(lab))
        order = cand[np.argsort(-sims[i, cand], kind="stable")]
        pos = int(np.flatnonzero(key_labels[order] == lab)[0])
        hits += np.array([pos < kk for kk in ks], dtype=float)
    n = max(len(query_labels), 1)
    return tuple(float(h / n) for h in hits)


def retrieval_eval(queries: list[StyleLabeledImage], keys: list[StyleLabeledImage],
                   encoder: StyleEncoderCheckpoint, service: EmbeddingService | None = None,
                   ks=(1, 5, 10)) -> tuple[float, ...]:
    """Rank@k of ``queries`` against ``keys``; a key with the query's own path is skipped."""
    scorer = StyleScorer(service or EmbeddingService(), encoder)
    q = scorer.embed_paths([x.image_path for x in queries])
    k = scorer.embed_paths([x.image_path for x in keys])
    exclude = np.array([[qq.image_path == kk.image_path for kk in keys] for qq in queries])
    return rank_at_k(q, [x.style_label for x in queries], k, [x.style_label for x in keys],
                     ks=ks, exclude=exclude)
