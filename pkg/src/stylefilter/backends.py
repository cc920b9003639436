"""Embedding backends.

Every backend exposes the same three capabilities (``embed_image``,
``embed_text``, ``caption``) and declares which of them it supports through
its :class:`BackendDescriptor`. Three deterministic reference backends are
always available:

``ref-stats`` (image)
    Statistics vector of the RGB image scaled to [0, 1]: the three channel
    means, the three channel variances (population), then a 4x4 grid of
    per-channel patch means in row-major order with the channel index varying
    fastest. Patches come from ``numpy.array_split`` along height and width,
    so no resizing is involved. Dimension 6 + 3 * grid**2 (54 by default).

``ref-caption`` (captioner)
    Buckets simple pixel statistics into attribute tokens. With luminance
    ``L = 0.299 R + 0.587 G + 0.114 B``:

    ============  =========================================  =====================
    attribute     statistic                                  buckets
    ============  =========================================  =====================
    lighting      mean L                                     dark <1/3, midtone <2/3, bright
    contrast      std L                                      low <0.08, medium <0.2, high
    color         argmax channel mean; spread <0.08          red/green/blue, neutral
    saturation    mean per-pixel (max - min) over channels   muted <0.15, moderate <0.45, vivid
    texture       mean |dL| over horizontal+vertical steps   smooth <0.02, textured <0.1, busy
    balance       |mean L left half - mean L right half|     even <0.05, uneven
    ============  =========================================  =====================

    Only attributes named in the prompt are reported (``color`` matches
    "color"). The caption lists ``attr:bucket`` tokens followed by the bare
    bucket words, e.g. ``"lighting:bright contrast:high ... bright high ..."``.

``ref-joint`` (image+text)
    Hash-bag text embedder: lowercase, split on whitespace, strip surrounding
    punctuation, and add 1.0 to bucket ``u64_le(sha256(token)[:8]) % dim``.
    An image embeds as the hash-bag of its full reference caption, which puts
    images and text in one space.

Pretrained adapters (CLIP, DINOv2) load lazily through ``transformers`` and
raise :class:`BackendUnavailable` when the library or weights are missing.
"""

from __future__ import annotations

import hashlib
import importlib.resources
import string
import threading
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BackendUnavailable, ConfigError, DecodeError, DimensionMismatch

IMAGE = "image"
TEXT = "text"
IMAGE_TEXT = "image+text"
CAPTIONER = "captioner"
MODALITIES = (IMAGE, TEXT, IMAGE_TEXT, CAPTIONER)


class DegenerateVectorWarning(UserWarning):
    """Cosine requested with an all-zero vector; 0.0 was returned."""


@dataclass(frozen=True)
class BackendDescriptor:
    backend_id: str
    modality: str
    dimension: int
    preprocessing: str = ""

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ConfigError(f"unknown modality {self.modality!r}")
        if self.modality != CAPTIONER and self.dimension <= 0:
            raise ConfigError(f"backend {self.backend_id!r}: dimension must be > 0")

    @property
    def supports_image(self) -> bool:
        return self.modality in (IMAGE, IMAGE_TEXT)

    @property
    def supports_text(self) -> bool:
        return self.modality in (TEXT, IMAGE_TEXT)


@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    values: np.ndarray
    backend_id: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 1:
            raise ValueError("embedding must be a 1-d vector")
        if not np.all(np.isfinite(v)):
            raise ValueError(f"non-finite embedding from {self.backend_id!r}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def dimension(self) -> int:
        return int(self.values.shape[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingVector):
            return NotImplemented
        return (self.backend_id == other.backend_id
                and np.array_equal(self.values, other.values))

    def __hash__(self):
        return hash((self.backend_id, self.values.tobytes()))


def image_digest(image: np.ndarray) -> str:
    """SHA-256 over shape and raw pixel bytes of a decoded image."""
    arr = np.ascontiguousarray(image, dtype=np.uint8)
    h = hashlib.sha256()
    h.update(("%dx%dx%d;" % arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def text_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _as_rgb(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise DecodeError(f"expected an (H, W, 3) uint8 image, got {arr.dtype} {arr.shape}")
    return arr


def default_prompt() -> str:
    """The shipped 40-attribute captioning prompt."""
    ref = importlib.resources.files("stylefilter") / "resources" / "attribute_prompt.txt"
    return ref.read_text(encoding="utf-8").strip()


def load_prompt(path=None) -> str:
    if path is None:
        return default_prompt()
    try:
        return Path(path).read_text(encoding="utf-8").strip()
    except OSError as exc:
        raise ConfigError(f"cannot read prompt file {path}: {exc}") from exc


# -- backend base ---------------------------------------------------------------

class Backend:
    descriptor: BackendDescriptor

    @property
    def backend_id(self) -> str:
        return self.descriptor.backend_id

    def embed_image(self, image: np.ndarray) -> EmbeddingVector:
        raise BackendUnavailable(f"backend {self.backend_id!r} does not embed images")

    def embed_text(self, text: str) -> EmbeddingVector:
        raise BackendUnavailable(f"backend {self.backend_id!r} does not embed text")

    def caption(self, image: np.ndarray, prompt: str) -> str:
        raise BackendUnavailable(f"backend {self.backend_id!r} is not a captioner")


class ReferenceStatsEmbedder(Backend):
    def __init__(self, backend_id: str = "ref-stats", grid: int = 4):
        if grid < 1:
            raise ConfigError("grid must be >= 1")
        self.grid = grid
        self.descriptor = BackendDescriptor(
            backend_id, IMAGE, 6 + 3 * grid * grid,
            f"rgb8/255; no resize; channel mean+var; {grid}x{grid} patch means")

    def features(self, image) -> np.ndarray:
        x = _as_rgb(image).astype(np.float64) / 255.0
        h, w, _ = x.shape
        if h < self.grid or w < self.grid:
            raise DecodeError(f"image {h}x{w} smaller than the {self.grid}x{self.grid} grid")
        means = x.mean(axis=(0, 1))
        variances = x.var(axis=(0, 1))
        patches = []
        for rows in np.array_split(x, self.grid, axis=0):
            for block in np.array_split(rows, self.grid, axis=1):
                patches.append(block.mean(axis=(0, 1)))
        return np.concatenate([means, variances, np.concatenate(patches)])

    def embed_image(self, image) -> EmbeddingVector:
        return EmbeddingVector(self.features(image), self.backend_id)


# captioner thresholds; see module docstring
_LIGHTING = ((1 / 3, "dark"), (2 / 3, "midtone"), (np.inf, "bright"))
_CONTRAST = ((0.08, "low"), (0.2, "medium"), (np.inf, "high"))
_SATURATION = ((0.15, "muted"), (0.45, "moderate"), (np.inf, "vivid"))
_TEXTURE = ((0.02, "smooth"), (0.1, "textured"), (np.inf, "busy"))
_COLOR_SPREAD = 0.08
_BALANCE = 0.05
ATTRIBUTES = ("lighting", "contrast", "color", "saturation", "texture", "balance")


def _bucket(value: float, table) -> str:
    for upper, name in table:
        if value < upper:
            return name
    return table[-1][1]


def attribute_buckets(image) -> dict[str, str]:
    """Reference attribute classification of an image (ordered as ``ATTRIBUTES``)."""
    x = _as_rgb(image).astype(np.float64) / 255.0
    lum = 0.299 * x[..., 0] + 0.587 * x[..., 1] + 0.114 * x[..., 2]
    means = x.mean(axis=(0, 1))
    if means.max() - means.min() < _COLOR_SPREAD:
        color = "neutral"
    else:
        color = ("red", "green", "blue")[int(np.argmax(means))]
    sat = float((x.max(axis=2) - x.min(axis=2)).mean())
    dx = np.abs(np.diff(lum, axis=1))
    dy = np.abs(np.diff(lum, axis=0))
    steps = dx.size + dy.size
    grad = float((dx.sum() + dy.sum()) / steps) if steps else 0.0
    half = lum.shape[1] // 2
    if half == 0:
        imbalance = 0.0
    else:
        imbalance = abs(float(lum[:, :half].mean()) - float(lum[:, lum.shape[1] - half:].mean()))
    return {
        "lighting": _bucket(float(lum.mean()), _LIGHTING),
        "contrast": _bucket(float(lum.std()), _CONTRAST),
        "color": color,
        "saturation": _bucket(sat, _SATURATION),
        "texture": _bucket(grad, _TEXTURE),
        "balance": "even" if imbalance < _BALANCE else "uneven",
    }


def reference_caption(image, prompt: str | None = None) -> str:
    buckets = attribute_buckets(image)
    if prompt is None:
        wanted = list(ATTRIBUTES)
    else:
        low = prompt.lower()
        wanted = [a for a in ATTRIBUTES if a in low]
    if not wanted:
        return "no-attributes"
    return " ".join([f"{a}:{buckets[a]}" for a in wanted] + [buckets[a] for a in wanted])


class ReferenceCaptioner(Backend):
    def __init__(self, backend_id: str = "ref-caption"):
        self.descriptor = BackendDescriptor(backend_id, CAPTIONER, 0, "rgb8/255; bucketed statistics")

    def caption(self, image, prompt: str) -> str:
        return reference_caption(image, prompt)


_STRIP = string.punctuation.replace(":", "").replace("-", "")


def tokenize(text: str) -> list[str]:
    toks = (t.strip(_STRIP) for t in text.lower().split())
    return [t for t in toks if t]


def hash_bucket(token: str, dim: int) -> int:
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % dim


def hash_bag(text: str, dim: int) -> np.ndarray:
    v = np.zeros(dim, dtype=np.float64)
    for tok in tokenize(text):
        v[hash_bucket(tok, dim)] += 1.0
    return v


class ReferenceJointEmbedder(Backend):
    def __init__(self, backend_id: str = "ref-joint", dim: int = 64):
        self.descriptor = BackendDescriptor(
            backend_id, IMAGE_TEXT, dim, f"hash-bag(sha256, dim={dim}); image via reference caption")

    def embed_text(self, text: str) -> EmbeddingVector:
        return EmbeddingVector(hash_bag(text, self.descriptor.dimension), self.backend_id)

    def embed_image(self, image) -> EmbeddingVector:
        return self.embed_text(reference_caption(image))


# -- pretrained adapters ----------------------------------------------------------

class _HFAdapter(Backend):
    """Lazy ``transformers`` model wrapper; loading errors become BackendUnavailable."""

    def __init__(self, backend_id: str, model_name: str, modality: str, dim: int, prep: str):
        self.model_name = model_name
        self.descriptor = BackendDescriptor(backend_id, modality, dim, prep)
        self._lock = threading.Lock()
        self._loaded = None

    def _load_parts(self):  # pragma: no cover - needs weights
        raise NotImplementedError

    def _parts(self):
        with self._lock:
            if self._loaded is None:
                try:
                    self._loaded = self._load_parts()
                except Exception as exc:
                    raise BackendUnavailable(
                        f"cannot load {self.model_name!r} for {self.backend_id!r}: {exc}") from exc
            return self._loaded

    def _vector(self, tensor) -> EmbeddingVector:  # pragma: no cover - needs weights
        v = tensor.detach().float().cpu().numpy().reshape(-1)
        if v.shape[0] != self.descriptor.dimension:
            raise DimensionMismatch(
                f"{self.backend_id}: got dim {v.shape[0]}, declared {self.descriptor.dimension}")
        return EmbeddingVector(v, self.backend_id)


class CLIPAdapter(_HFAdapter):
    def __init__(self, backend_id: str = "clip-vit-large-patch14",
                 model_name: str = "openai/clip-vit-large-patch14", dim: int = 768):
        super().__init__(backend_id, model_name, IMAGE_TEXT, dim,
                         "CLIPProcessor defaults (resize 224, center crop, CLIP mean/std)")

    def _load_parts(self):  # pragma: no cover - needs weights
        import torch
        from transformers import CLIPModel, CLIPProcessor
        model = CLIPModel.from_pretrained(self.model_name).eval()
        return torch, model, CLIPProcessor.from_pretrained(self.model_name)

    def embed_image(self, image):  # pragma: no cover - needs weights
        torch, model, proc = self._parts()
        with torch.no_grad():
            inputs = proc(images=_as_rgb(image), return_tensors="pt")
            return self._vector(model.get_image_features(**inputs)[0])

    def embed_text(self, text):  # pragma: no cover - needs weights
        torch, model, proc = self._parts()
        with torch.no_grad():
            inputs = proc(text=[text], return_tensors="pt", padding=True, truncation=True)
            return self._vector(model.get_text_features(**inputs)[0])


class DINOv2Adapter(_HFAdapter):
    def __init__(self, backend_id: str = "dinov2-large:mean",
                 model_name: str = "facebook/dinov2-large", dim: int = 1024):
        super().__init__(backend_id, model_name, IMAGE, dim,
                         "AutoImageProcessor defaults; mean-pool over all output tokens")

    def _load_parts(self):  # pragma: no cover - needs weights
        import torch
        from transformers import AutoImageProcessor, AutoModel
        model = AutoModel.from_pretrained(self.model_name).eval()
        return torch, model, AutoImageProcessor.from_pretrained(self.model_name)

    def embed_image(self, image):  # pragma: no cover - needs weights
        torch, model, proc = self._parts()
        with torch.no_grad():
            out = model(**proc(images=_as_rgb(image), return_tensors="pt"))
            return self._vector(out.last_hidden_state[0].mean(dim=0))


# -- registry ---------------------------------------------------------------------

_KINDS = {
    "reference-stats": lambda bid, o: ReferenceStatsEmbedder(bid, grid=int(o.get("grid", 4))),
    "reference-joint": lambda bid, o: ReferenceJointEmbedder(bid, dim=int(o.get("dim", 64))),
    "reference-captioner": lambda bid, o: ReferenceCaptioner(bid),
    "clip": lambda bid, o: CLIPAdapter(bid, o.get("model", "openai/clip-vit-large-patch14"),
                                       int(o.get("dim", 768))),
    "dinov2": lambda bid, o: DINOv2Adapter(bid, o.get("model", "facebook/dinov2-large"),
                                           int(o.get("dim", 1024))),
}


class BackendRegistry:
    def __init__(self, backends=()):
        self._backends: dict[str, Backend] = {}
        for b in backends:
            self.add(b)

    def add(self, backend: Backend) -> None:
        bid = backend.backend_id
        if bid in self._backends:
            raise ConfigError(f"duplicate backend id {bid!r}")
        self._backends[bid] = backend

    def get(self, backend_id: str) -> Backend:
        try:
            return self._backends[backend_id]
        except KeyError:
            raise BackendUnavailable(f"no backend registered as {backend_id!r}") from None

    def __contains__(self, backend_id) -> bool:
        return backend_id in self._backends

    def ids(self) -> list[str]:
        return list(self._backends)

    @classmethod
    def from_config(cls, spec: dict | None) -> "BackendRegistry":
        """Reference backends plus any ``{backend_id: {kind: ..., ...}}`` entries."""
        reg = default_registry()
        for bid, opts in (spec or {}).items():
            opts = dict(opts or {})
            kind = opts.pop("kind", None)
            if kind not in _KINDS:
                raise ConfigError(f"backend {bid!r}: unknown kind {kind!r}")
            if bid in reg:
                reg._backends.pop(bid)
            reg.add(_KINDS[kind](bid, opts))
        return reg


def default_registry() -> BackendRegistry:
    return BackendRegistry([ReferenceStatsEmbedder(), ReferenceJointEmbedder(), ReferenceCaptioner()])


# -- operations -------------------------------------------------------------------

def embed_image(backend: Backend, image) -> EmbeddingVector:
    if not backend.descriptor.supports_image:
        raise BackendUnavailable(f"backend {backend.backend_id!r} has no image modality")
    v = backend.embed_image(image)
    _check_dim(backend, v)
    return v


def embed_text(backend: Backend, text: str) -> EmbeddingVector:
    if not backend.descriptor.supports_text:
        raise BackendUnavailable(f"backend {backend.backend_id!r} has no text modality")
    v = backend.embed_text(text)
    _check_dim(backend, v)
    return v


def caption_attributes(backend: Backend, image, prompt: str | None = None) -> str:
    if backend.descriptor.modality != CAPTIONER:
        raise BackendUnavailable(f"backend {backend.backend_id!r} is not a captioner")
    cap = backend.caption(image, default_prompt() if prompt is None else prompt)
    if not cap:
        raise BackendUnavailable(f"captioner {backend.backend_id!r} returned an empty caption")
    return cap


def _check_dim(backend: Backend, v: EmbeddingVector) -> None:
    if v.dimension != backend.descriptor.dimension:
        raise DimensionMismatch(
            f"{backend.backend_id}: produced dim {v.dimension}, declared {backend.descriptor.dimension}")


def cosine(u: EmbeddingVector, v: EmbeddingVector) -> float:
    """Cosine similarity, clipped to [-1, 1].

    An all-zero operand yields 0.0 and a :class:`DegenerateVectorWarning`
    instead of an error, so blank images do not abort batch jobs.
    """
    if u.backend_id != v.backend_id:
        raise DimensionMismatch(f"cannot compare {u.backend_id!r} with {v.backend_id!r}")
    if u.dimension != v.dimension:
        raise DimensionMismatch(f"dimension {u.dimension} != {v.dimension}")
    return cosine_arrays(u.values, v.values)


def cosine_arrays(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        warnings.warn("cosine of an all-zero vector", DegenerateVectorWarning, stacklevel=3)
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))
