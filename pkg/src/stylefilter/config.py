"""One structured config file for every stage, plus flag overrides.

Keys not listed in ``DEFAULTS`` are rejected. The config hash covers
everything that can change a primary output: checkpoint paths are replaced by
the SHA-256 of the file they point to, and runtime-only keys (``jobs``,
``log_level``, ``cache_dir``) are left out.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import yaml

from .aesthetic import AestheticCheckpoint, AestheticScorer, AestheticTrainConfig
from .backends import BackendRegistry
from .cache import EmbeddingCache, EmbeddingService
from .content import ContentScoreConfig, ContentScorer
from .errors import ConfigError
from .filtering import FilterConfig, Scorers
from .style import ContrastiveTrainConfig, StyleEncoderCheckpoint, StyleScorer

DEFAULTS = {
    "seed": 0,
    "jobs": 1,
    "log_level": "INFO",
    "cache_dir": None,
    "backends": {},
    "content": {"alpha": 0.5, "semantic_backend": "ref-joint", "structural_backend": "ref-stats"},
    "style": {"checkpoint": None, "base_backend": "ref-stats", "head_dims": [64, 32],
              "temperature": 0.07, "batch_size": 32, "epochs": 10, "learning_rate": 1e-3,
              "finetune_base": False},
    "aesthetic": {"checkpoint": None, "feature_backend": "ref-joint",
                  "captioner_backend": "ref-caption", "head_dims": [64, 32, 1],
                  "learning_rate": 1e-2, "learning_rate_stage2": None, "epochs_stage1": 200,
                  "epochs_stage2": 50, "batch_size": 64, "prompt_path": None},
    "filter": {"weights": [0.2, 0.6, 0.2], "normalize": False},
    "benchmark": {"style_loss_extractor": "ref-gram"},
}
RUNTIME_KEYS = ("jobs", "log_level", "cache_dir")
FREEFORM = ("backends",)


def _merge(base: dict, extra: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        key = f"{where}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(base[k], dict) and k not in FREEFORM:
            if not isinstance(v, dict):
                raise ConfigError(f"config key {key!r} must be a mapping")
            out[k] = _merge(base[k], v, key + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def set_dotted(cfg: dict, dotted: str, value) -> None:
    node = cfg
    parts = dotted.split(".")
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults <- config file <- ``overrides`` (dotted keys, ``None`` values skipped)."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must be a mapping")
        cfg = _merge(cfg, raw)
        for section in ("style", "aesthetic"):
            ck = cfg[section].get("checkpoint")
            if ck and not Path(ck).is_absolute():
                cfg[section]["checkpoint"] = str(path.resolve().parent / ck)
    for k, v in (overrides or {}).items():
        if v is not None:
            set_dotted(cfg, k, v)
    return cfg


def _file_digest(p) -> str:
    try:
        return "sha256:" + hashlib.sha256(Path(p).read_bytes()).hexdigest()
    except OSError:
        return f"missing:{p}"


def hashed_view(cfg: dict) -> dict:
    view = {k: copy.deepcopy(v) for k, v in cfg.items() if k not in RUNTIME_KEYS}
    for section in ("style", "aesthetic"):
        ck = view[section].get("checkpoint")
        if ck:
            view[section]["checkpoint"] = _file_digest(ck)
    return view


def config_hash(cfg: dict) -> str:
    blob = json.dumps(hashed_view(cfg), sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# -- builders ------------------------------------------------------------------

def build_service(cfg: dict) -> EmbeddingService:
    registry = BackendRegistry.from_config(cfg["backends"])
    cache = EmbeddingCache(cfg["cache_dir"]) if cfg.get("cache_dir") else None
    return EmbeddingService(registry, cache)


def content_config(cfg: dict) -> ContentScoreConfig:
    c = cfg["content"]
    return ContentScoreConfig(float(c["alpha"]), c["semantic_backend"], c["structural_backend"])


def filter_config(cfg: dict, resume: bool = False) -> FilterConfig:
    w = cfg["filter"]["weights"]
    if isinstance(w, str):
        w = parse_weights(w)
    if len(w) != 3:
        raise ConfigError(f"filter.weights needs three values, got {w}")
    return FilterConfig(float(w[0]), float(w[1]), float(w[2]), alpha=float(cfg["content"]["alpha"]),
                        resume=resume, normalize=bool(cfg["filter"]["normalize"]))


def parse_weights(text: str) -> list[float]:
    try:
        w = [float(x) for x in text.split(",")]
    except ValueError:
        raise ConfigError(f"--weights expects a,b,c; got {text!r}") from None
    if len(w) != 3:
        raise ConfigError(f"--weights expects three values; got {text!r}")
    return w


def contrastive_config(cfg: dict) -> ContrastiveTrainConfig:
    s = {k: v for k, v in cfg["style"].items() if k != "checkpoint"}
    try:
        return ContrastiveTrainConfig(seed=int(cfg["seed"]), **s)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def aesthetic_config(cfg: dict) -> AestheticTrainConfig:
    a = {k: v for k, v in cfg["aesthetic"].items() if k != "checkpoint"}
    try:
        return AestheticTrainConfig(seed=int(cfg["seed"]), **a)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def style_checkpoint(cfg: dict) -> StyleEncoderCheckpoint:
    path = cfg["style"]["checkpoint"]
    if not path:
        return StyleEncoderCheckpoint.identity(cfg["style"]["base_backend"])
    return StyleEncoderCheckpoint.load(path)


def aesthetic_checkpoint(cfg: dict) -> AestheticCheckpoint:
    path = cfg["aesthetic"]["checkpoint"]
    if not path:
        raise ConfigError("aesthetic.checkpoint is not set; train one with `train-aesthetic`")
    return AestheticCheckpoint.load(path)


def build_scorers(cfg: dict, service: EmbeddingService | None = None) -> Scorers:
    service = service or build_service(cfg)
    return Scorers(ContentScorer(service, content_config(cfg)),
                   StyleScorer(service, style_checkpoint(cfg)),
                   AestheticScorer(service, aesthetic_checkpoint(cfg)))
