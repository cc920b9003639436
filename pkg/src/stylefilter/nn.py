"""Small numpy MLP, Adam, and the checkpoint container shared by the trainers.

Checkpoint container layout::

    b"SFCKPT1\\n" | uint64-LE header length | header JSON (UTF-8) | payload

The header holds ``kind``, free-form ``meta``, an array table
(name, dtype, shape, offset, nbytes) and the SHA-256 of the payload. Arrays
are stored as little-endian float64, so reloading is bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointCorrupt, ConfigError, IoError

MAGIC = b"SFCKPT1\n"
CONTAINER_VERSION = 1


class MLP:
    """Fully connected network; ReLU between layers, linear output."""

    def __init__(self, dims: list[int], seed: int = 0):
        if len(dims) < 2 or any(d <= 0 for d in dims):
            raise ConfigError(f"bad MLP dims {dims}")
        self.dims = list(dims)
        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            bound = math.sqrt(6.0 / (d_in + d_out))
            self.weights.append(rng.uniform(-bound, bound, size=(d_in, d_out)))
            self.biases.append(np.zeros(d_out))

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def forward(self, x: np.ndarray):
        acts = [x]
        pre = []
        h = x
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            pre.append(z)
            h = np.maximum(z, 0.0) if i < n - 1 else z
            acts.append(h)
        return h, (acts, pre)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache, grad_out: np.ndarray) -> list[np.ndarray]:
        """Gradients w.r.t. ``params`` (same order) given dLoss/dOutput."""
        acts, pre = cache
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.weights)
        g = grad_out
        for i in range(len(self.weights) - 1, -1, -1):
            if i < len(self.weights) - 1:
                g = g * (pre[i] > 0)
            grads_w[i] = acts[i].T @ g
            grads_b[i] = g.sum(axis=0)
            g = g @ self.weights[i].T
        out = []
        for gw, gb in zip(grads_w, grads_b):
            out += [gw, gb]
        return out

    def state(self, prefix: str = "mlp") -> dict[str, np.ndarray]:
        st = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            st[f"{prefix}.w{i}"] = w
            st[f"{prefix}.b{i}"] = b
        return st

    @classmethod
    def from_state(cls, dims: list[int], state: dict, prefix: str = "mlp") -> "MLP":
        net = cls.__new__(cls)
        net.dims = list(dims)
        n = len(dims) - 1
        try:
            net.weights = [np.array(state[f"{prefix}.w{i}"], dtype=np.float64) for i in range(n)]
            net.biases = [np.array(state[f"{prefix}.b{i}"], dtype=np.float64) for i in range(n)]
        except KeyError as exc:
            raise CheckpointCorrupt(f"missing array {exc}") from None
        for i, (w, b) in enumerate(zip(net.weights, net.biases)):
            if w.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
                raise CheckpointCorrupt(f"layer {i} shape does not match dims {dims}")
        return net


class Adam:
    def __init__(self, params: list[np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def cosine_lr(base: float, step: int, total: int) -> float:
    """Cosine decay from ``base`` toward zero over ``total`` steps."""
    if total <= 1:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * step / total))


class Standardizer:
    def __init__(self, mean: np.ndarray, scale: np.ndarray):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.scale = np.asarray(scale, dtype=np.float64)

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        mean = x.mean(axis=0)
        sd = x.std(axis=0)
        return cls(mean, np.where(sd < 1e-6, 1.0, sd))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.scale


def save_container(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> str:
    """Write a checkpoint container; returns the payload SHA-256."""
    table = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        raw = a.tobytes()
        table.append({"name": name, "dtype": "<f8", "shape": list(a.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    digest = hashlib.sha256(payload).hexdigest()
    header = json.dumps({"format": CONTAINER_VERSION, "kind": kind, "meta": meta,
                         "arrays": table, "payload_sha256": digest},
                        sort_keys=True, ensure_ascii=False).encode("utf-8")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(MAGIC + struct.pack("<Q", len(header)) + header + payload)
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc
    return digest


def load_container(path, kind: str):
    """Read a container written by :func:`save_container`; returns (meta, arrays)."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointCorrupt(f"cannot read checkpoint {path}: {exc}") from exc
    if not blob.startswith(MAGIC) or len(blob) < len(MAGIC) + 8:
        raise CheckpointCorrupt(f"{path}: not a checkpoint container")
    (hlen,) = struct.unpack_from("<Q", blob, len(MAGIC))
    start = len(MAGIC) + 8
    try:
        header = json.loads(blob[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointCorrupt(f"{path}: unreadable header") from None
    payload = blob[start + hlen:]
    if header.get("format") != CONTAINER_VERSION:
        raise CheckpointCorrupt(f"{path}: unsupported format {header.get('format')}")
    if header.get("kind") != kind:
        raise CheckpointCorrupt(f"{path}: expected a {kind!r} checkpoint, got {header.get('kind')!r}")
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointCorrupt(f"{path}: payload checksum mismatch")
    arrays = {}
    for entry in header["arrays"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"]).copy()
    return header["meta"], arrays
