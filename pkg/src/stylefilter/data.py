"""Triplet records, score records, manifests and corpus ingest.

Manifests are JSONL: an optional first line ``{"__manifest__": {...}}``
carrying the version and metadata, then one triplet object per line with the
fields of :class:`Triplet` in declaration order. Image paths are stored as
written; relative paths are resolved against the manifest's directory.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import threading
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (DataError, DecodeError, DuplicateId, InconsistentGroup,
                     IoError, MalformedLine, StyleFilterError)

MANIFEST_VERSION = 1
HEADER_KEY = "__manifest__"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass(frozen=True)
class Triplet:
    triplet_id: str
    content_path: str
    style_path: str
    stylized_path: str
    content_caption: str
    style_category: str
    generator_id: str
    group_id: str
    instruction: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Triplet":
        names = [f.name for f in fields(cls)]
        unknown = set(d) - set(names)
        if unknown:
            raise ValueError(f"unknown field(s) {sorted(unknown)}")
        required = [f.name for f in fields(cls) if f.name != "instruction"]
        missing = [n for n in required if n not in d]
        if missing:
            raise ValueError(f"missing field(s) {missing}")
        for k, v in d.items():
            if not isinstance(v, str):
                raise ValueError(f"field {k!r} must be a string")
        if not d["triplet_id"]:
            raise ValueError("empty triplet_id")
        return cls(**d)


@dataclass
class ScoreRecord:
    triplet_id: str
    c_score: float
    s_score: float
    a_score: float
    total: float
    weights: tuple[float, float, float]
    alpha: float
    backend_ids: dict[str, str] = field(default_factory=dict)
    group_id: str = ""
    config_hash: str = ""

    def recompute_total(self) -> float:
        a, b, c = self.weights
        return a * self.c_score + b * self.s_score + c * self.a_score

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = list(self.weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreRecord":
        d = dict(d)
        d["weights"] = tuple(float(w) for w in d["weights"])
        return cls(**d)


@dataclass
class Manifest:
    entries: list[Triplet] = field(default_factory=list)
    version: int = MANIFEST_VERSION
    metadata: dict[str, str] = field(default_factory=dict)
    base_dir: Path | None = field(default=None, compare=False, repr=False)

    def __len__(self) -> int:
        return len(self.entries)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        if not p.is_absolute() and self.base_dir is not None:
            p = self.base_dir / p
        return p


@dataclass(frozen=True)
class RatedImage:
    image_path: str
    score: float
    corpus_id: str


@dataclass(frozen=True)
class StyleLabeledImage:
    image_path: str
    style_label: str


# -- manifest I/O -------------------------------------------------------------

def _check_group(groups: dict, t: Triplet, line_no: int) -> None:
    key = (t.content_path, t.style_path)
    seen = groups.setdefault(t.group_id, key)
    if seen != key:
        raise InconsistentGroup(t.group_id, line_no)


def validate_entries(entries: list[Triplet]) -> None:
    ids: set[str] = set()
    groups: dict[str, tuple[str, str]] = {}
    for i, t in enumerate(entries):
        if t.triplet_id in ids:
            raise DuplicateId(t.triplet_id)
        ids.add(t.triplet_id)
        _check_group(groups, t, i + 1)


def load_manifest(path, check_images: bool = False) -> Manifest:
    """Read a JSONL manifest, validating ids and group consistency.

    With ``check_images`` every referenced image is also decoded once.
    """
    path = Path(path)
    version, metadata = MANIFEST_VERSION, {}
    entries: list[Triplet] = []
    ids: set[str] = set()
    groups: dict[str, tuple[str, str]] = {}
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open manifest {path}: {exc}") from exc
    with fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedLine(line_no, f"invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise MalformedLine(line_no, "record is not an object")
            if HEADER_KEY in obj:
                if entries or line_no != 1:
                    raise MalformedLine(line_no, "header must be the first line")
                head = obj[HEADER_KEY]
                try:
                    version = int(head.get("version", MANIFEST_VERSION))
                    metadata = {str(k): str(v) for k, v in head.get("metadata", {}).items()}
                except (AttributeError, TypeError, ValueError):
                    raise MalformedLine(line_no, "bad header") from None
                continue
            try:
                t = Triplet.from_dict(obj)
            except (TypeError, ValueError) as exc:
                raise MalformedLine(line_no, str(exc)) from None
            if t.triplet_id in ids:
                raise DuplicateId(t.triplet_id, line_no)
            ids.add(t.triplet_id)
            _check_group(groups, t, line_no)
            entries.append(t)

    m = Manifest(entries=entries, version=version, metadata=metadata,
                 base_dir=path.resolve().parent)
    if check_images:
        for t in entries:
            for p in (t.content_path, t.style_path, t.stylized_path):
                try:
                    load_image(m.resolve(p))
                except StyleFilterError as exc:
                    raise exc.tag(triplet_id=t.triplet_id)
    return m


def dumps_manifest(m: Manifest) -> str:
    buf = io.StringIO()
    head = {HEADER_KEY: {"version": m.version, "metadata": dict(m.metadata)}}
    buf.write(json.dumps(head, ensure_ascii=False) + "\n")
    for t in m.entries:
        buf.write(json.dumps(t.to_dict(), ensure_ascii=False) + "\n")
    return buf.getvalue()


def write_manifest(m: Manifest, path) -> None:
    validate_entries(m.entries)
    atomic_write_text(path, dumps_manifest(m))


def group_candidates(m: Manifest) -> list[tuple[str, list[Triplet]]]:
    groups: dict[str, list[Triplet]] = {}
    for t in m.entries:
        groups.setdefault(t.group_id, []).append(t)
    return list(groups.items())


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.{threading.get_ident()}.tmp")
    try:
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        try:
            tmp.unlink()
        except OSError:
            pass
        raise IoError(f"cannot write {path}: {exc}") from exc


def write_jsonl(path, rows) -> None:
    atomic_write_text(path, "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in rows))


def read_jsonl(path) -> list[dict]:
    rows = []
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    with fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise MalformedLine(line_no, f"invalid JSON ({exc.msg})") from None
    return rows


# -- images -------------------------------------------------------------------

def load_image(path) -> np.ndarray:
    """Decode an image file to an (H, W, 3) uint8 RGB array."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except FileNotFoundError:
        raise DecodeError(f"image not found: {path}", path=str(path)) from None
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}", path=str(path)) from None
    return arr


def save_image(arr: np.ndarray, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="RGB").save(path)


# -- corpora ------------------------------------------------------------------

def load_style_corpus(root) -> list[StyleLabeledImage]:
    """Scan ``<root>/<style_label>/*.{png,jpg}``; sorted by label, then file name."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"style corpus root is not a directory: {root}")
    out = []
    for label_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for img in sorted(label_dir.iterdir()):
            if img.suffix.lower() in IMAGE_SUFFIXES:
                out.append(StyleLabeledImage(str(img), label_dir.name))
    return out


def load_rated_corpus(csv_path) -> list[RatedImage]:
    """Read a ``image_path,score,corpus_id`` CSV; relative paths resolve against its folder."""
    csv_path = Path(csv_path)
    out = []
    try:
        fh = open(csv_path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open rated corpus {csv_path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        needed = {"image_path", "score", "corpus_id"}
        if reader.fieldnames is None or not needed <= set(reader.fieldnames):
            raise DataError(f"{csv_path}: expected columns {sorted(needed)}")
        for line_no, row in enumerate(reader, start=2):
            try:
                score = float(row["score"])
            except (TypeError, ValueError):
                raise MalformedLine(line_no, f"bad score {row['score']!r}") from None
            if not math.isfinite(score):
                raise MalformedLine(line_no, "score is not finite")
            p = Path(row["image_path"])
            if not p.is_absolute():
                p = csv_path.resolve().parent / p
            out.append(RatedImage(str(p), score, row["corpus_id"]))
    return out


def write_rated_corpus(rows: list[RatedImage], csv_path) -> None:
    """Inverse of :func:`load_rated_corpus`; paths are stored relative to the CSV when possible."""
    base = Path(csv_path).resolve().parent
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["image_path", "score", "corpus_id"])
    for r in rows:
        try:
            path = Path(r.image_path).resolve().relative_to(base).as_posix()
        except ValueError:
            path = str(Path(r.image_path).resolve())
        w.writerow([path, repr(float(r.score)), r.corpus_id])
    atomic_write_text(csv_path, buf.getvalue())
