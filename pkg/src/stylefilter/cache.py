"""Content-addressed on-disk cache for embeddings and captions.

Layout: ``<root>/<backend_id>/<hash[:2]>/<hash>.vec`` (or ``.cap`` for
captions). A ``.vec`` file is ``b"SFV1"``, uint32-LE dimension, the 32-byte
SHA-256 of the payload, then the little-endian float32 payload. ``.cap``
files use ``b"SFC1"`` and a UTF-8 payload. Entries are written to a temp file
and renamed into place, so concurrent writers of one key converge on a valid
entry.
"""

from __future__ import annotations

import hashlib
import logging
import os
import struct
import threading
import warnings
from collections import Counter
from pathlib import Path
from typing import Callable

import numpy as np

from .backends import (BackendRegistry, EmbeddingVector, caption_attributes,
                       default_prompt, embed_image, embed_text, image_digest,
                       text_digest)
from .errors import CacheCorrupt

log = logging.getLogger(__name__)

_VEC_MAGIC = b"SFV1"
_CAP_MAGIC = b"SFC1"
_HEAD = struct.Struct("<4sI32s")


class CacheRepairWarning(UserWarning):
    pass


def _safe(backend_id: str) -> str:
    return backend_id.replace("/", "_").replace(os.sep, "_")


def encode_vector(values: np.ndarray) -> bytes:
    payload = np.asarray(values, dtype="<f4").tobytes()
    return _HEAD.pack(_VEC_MAGIC, len(payload) // 4, hashlib.sha256(payload).digest()) + payload


def decode_vector(blob: bytes) -> np.ndarray:
    if len(blob) < _HEAD.size:
        raise CacheCorrupt("truncated header")
    magic, dim, digest = _HEAD.unpack_from(blob)
    payload = blob[_HEAD.size:]
    if magic != _VEC_MAGIC or len(payload) != 4 * dim:
        raise CacheCorrupt("bad header")
    if hashlib.sha256(payload).digest() != digest:
        raise CacheCorrupt("checksum mismatch")
    return np.frombuffer(payload, dtype="<f4").astype(np.float32)


def encode_text(text: str) -> bytes:
    payload = text.encode("utf-8")
    return _HEAD.pack(_CAP_MAGIC, len(payload), hashlib.sha256(payload).digest()) + payload


def decode_text(blob: bytes) -> str:
    if len(blob) < _HEAD.size:
        raise CacheCorrupt("truncated header")
    magic, n, digest = _HEAD.unpack_from(blob)
    payload = blob[_HEAD.size:]
    if magic != _CAP_MAGIC or len(payload) != n or hashlib.sha256(payload).digest() != digest:
        raise CacheCorrupt("bad caption entry")
    return payload.decode("utf-8")


class EmbeddingCache:
    def __init__(self, root):
        self.root = Path(root)
        self.stats = Counter()
        self._lock = threading.Lock()
        self._key_locks: dict[str, threading.Lock] = {}

    def path_for(self, backend_id: str, key: str, suffix: str = ".vec") -> Path:
        return self.root / _safe(backend_id) / key[:2] / f"{key}{suffix}"

    def _key_lock(self, path: Path) -> threading.Lock:
        with self._lock:
            return self._key_locks.setdefault(str(path), threading.Lock())

    def _bump(self, name: str) -> None:
        with self._lock:
            self.stats[name] += 1

    def _write(self, path: Path, blob: bytes) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(f".{path.name}.{os.getpid()}.{threading.get_ident()}.tmp")
        with open(tmp, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)

    def _get_or_compute(self, path: Path, compute, encode, decode):
        with self._key_lock(path):
            if path.exists():
                try:
                    value = decode(path.read_bytes())
                    self._bump("hits")
                    return value
                except CacheCorrupt as exc:
                    warnings.warn(f"cache entry {path} corrupt ({exc}); recomputing",
                                  CacheRepairWarning, stacklevel=4)
                    self._bump("repairs")
            self._bump("misses")
            value = compute()
            blob = encode(value)
            self._write(path, blob)
            return decode(blob)

    def get_or_compute(self, backend_id: str, key: str,
                       compute: Callable[[], EmbeddingVector]) -> EmbeddingVector:
        """Return the cached vector for ``(backend_id, key)``, computing it on a miss.

        The value handed back on a miss is decoded from the bytes just written,
        so cold and warm calls return bit-identical vectors.
        """
        path = self.path_for(backend_id, key)
        values = self._get_or_compute(path, lambda: compute().values, encode_vector, decode_vector)
        return EmbeddingVector(values, backend_id)

    def get_or_compute_text(self, backend_id: str, key: str, compute: Callable[[], str]) -> str:
        return self._get_or_compute(self.path_for(backend_id, key, ".cap"),
                                    compute, encode_text, decode_text)


class EmbeddingService:
    """Registry + optional cache; counts how often each backend actually runs."""

    def __init__(self, registry: BackendRegistry | None = None,
                 cache: EmbeddingCache | None = None):
        self.registry = registry or BackendRegistry.from_config(None)
        self.cache = cache
        self.computed = Counter()
        self._lock = threading.Lock()

    def _count(self, backend_id: str) -> None:
        with self._lock:
            self.computed[backend_id] += 1

    def image(self, backend_id: str, image: np.ndarray) -> EmbeddingVector:
        backend = self.registry.get(backend_id)

        def compute():
            self._count(backend_id)
            return embed_image(backend, image)

        if self.cache is None:
            return compute()
        return self.cache.get_or_compute(backend_id, image_digest(image), compute)

    def text(self, backend_id: str, text: str) -> EmbeddingVector:
        backend = self.registry.get(backend_id)

        def compute():
            self._count(backend_id)
            return embed_text(backend, text)

        if self.cache is None:
            return compute()
        return self.cache.get_or_compute(backend_id, "t" + text_digest(text), compute)

    def caption(self, backend_id: str, image: np.ndarray, prompt: str | None = None) -> str:
        backend = self.registry.get(backend_id)
        prompt = default_prompt() if prompt is None else prompt

        def compute():
            self._count(backend_id)
            return caption_attributes(backend, image, prompt)

        if self.cache is None:
            return compute()
        key = hashlib.sha256((image_digest(image) + text_digest(prompt)).encode()).hexdigest()
        return self.cache.get_or_compute_text(backend_id, key, compute)

    def descriptor(self, backend_id: str):
        return self.registry.get(backend_id).descriptor
