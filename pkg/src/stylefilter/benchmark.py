"""Benchmark harness: per-pair metrics for a style-transfer method's outputs,
method-level means, report emission, the Gram-matrix style loss, and the
score-component ablation.

Style loss between images ``x`` and ``y`` over feature layers ``l`` with
``C_l`` channels and ``M_l`` spatial positions::

    G_l(x) = F_l(x) F_l(x)^T / M_l
    loss   = mean_l  ||G_l(x) - G_l(y)||_F^2 / C_l^2

The default extractor (``ref-gram``) is parameter-free apart from a seeded
filter bank: layer 0 is the RGB image in [0, 1], layer 1 a ReLU'd 3x3
convolution with 8 fixed filters, layer 2 a 2x2 average pool of layer 1
followed by another ReLU'd 3x3 convolution with 8 fixed filters.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .aesthetic import AestheticScorer
from .content import ContentScorer, content_score
from .data import (IMAGE_SUFFIXES, Manifest, ScoreRecord, atomic_write_text,
                   group_candidates, load_image)
from .errors import BackendUnavailable, ConfigError, DataError, DecodeError, MissingOutput
from .filtering import (COMPONENTS, FilterConfig, Scorers, argmax_lowest, group_totals,
                        score_manifest)
from .style import StyleScorer

log = logging.getLogger(__name__)

IMAGE_GUIDED = "image_guided"
INSTRUCTION_GUIDED = "instruction_guided"
METRICS = ("content_preservation", "style_consistency", "aesthetic_appeal", "style_loss")
HEADERS = {"content_preservation": "Content Preservation ↑",
           "style_consistency": "Style Consistency ↑",
           "aesthetic_appeal": "Aesthetic Appeal ↑",
           "style_loss": "Style Loss ↓"}


# -- style loss -----------------------------------------------------------------------

def _conv3x3(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(x, (3, 3), axis=(1, 2))
    return np.einsum("chwij,ocij->ohw", win, k, optimize=True)


def _avgpool2(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    return x[:, :2 * h2, :2 * w2].reshape(c, h2, 2, w2, 2).mean(axis=(2, 4))


class ReferenceGramExtractor:
    extractor_id = "ref-gram"

    def __init__(self, channels: int = 8, seed: int = 1234):
        rng = np.random.default_rng(seed)
        self.k1 = rng.normal(size=(channels, 3, 3, 3)) / math.sqrt(27.0)
        self.k2 = rng.normal(size=(channels, channels, 3, 3)) / math.sqrt(9.0 * channels)

    def extract(self, image: np.ndarray) -> list[np.ndarray]:
        x = np.asarray(image, dtype=np.float64).transpose(2, 0, 1) / 255.0
        if min(x.shape[1:]) < 8:
            raise DecodeError(f"image {x.shape[1]}x{x.shape[2]} too small for style loss (min 8x8)")
        f1 = np.maximum(_conv3x3(x, self.k1), 0.0)
        f2 = np.maximum(_conv3x3(_avgpool2(f1), self.k2), 0.0)
        return [x, f1, f2]


class VGGGramExtractor:  # pragma: no cover - needs torchvision weights
    """relu1_1, relu2_1, relu3_1, relu4_1 of an ImageNet VGG-19."""

    extractor_id = "vgg19"
    _taps = (1, 6, 11, 20)

    def __init__(self):
        try:
            import torch
            from torchvision.models import VGG19_Weights, vgg19
            self._torch = torch
            self._net = vgg19(weights=VGG19_Weights.IMAGENET1K_V1).features[:21].eval()
        except Exception as exc:
            raise BackendUnavailable(f"cannot load VGG-19: {exc}") from exc

    def extract(self, image):
        torch = self._torch
        mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
        std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)
        x = torch.from_numpy(np.asarray(image, dtype=np.float32) / 255.0).permute(2, 0, 1)[None]
        x = (x - mean) / std
        feats = []
        with torch.no_grad():
            for i, layer in enumerate(self._net):
                x = layer(x)
                if i in self._taps:
                    feats.append(x[0].double().numpy())
        return feats


def make_extractor(name: str = "ref-gram"):
    if name == "ref-gram":
        return ReferenceGramExtractor()
    if name == "vgg19":  # pragma: no cover - needs weights
        return VGGGramExtractor()
    raise ConfigError(f"unknown style-loss extractor {name!r}")


def gram(feat: np.ndarray) -> np.ndarray:
    f = feat.reshape(feat.shape[0], -1)
    return f @ f.T / f.shape[1]


_DEFAULT_EXTRACTOR = None


def style_loss(stylized: np.ndarray, style_ref: np.ndarray, extractor=None) -> float:
    global _DEFAULT_EXTRACTOR
    if extractor is None:
        if _DEFAULT_EXTRACTOR is None:
            _DEFAULT_EXTRACTOR = ReferenceGramExtractor()
        extractor = _DEFAULT_EXTRACTOR
    fa = extractor.extract(stylized)
    fb = extractor.extract(style_ref)
    per_layer = []
    for a, b in zip(fa, fb):
        d = gram(a) - gram(b)
        per_layer.append(float(np.sum(d * d)) / (a.shape[0] ** 2))
    return float(np.mean(per_layer))


# -- benchmark spec / outputs ----------------------------------------------------------

def _stem(path: str) -> str:
    return Path(path).stem


@dataclass
class BenchmarkSpec:
    content_images: list[str]
    style_images: list[str]
    mode: str = IMAGE_GUIDED
    instructions: dict[str, str] = field(default_factory=dict)
    captions: dict[str, str] = field(default_factory=dict)
    base_dir: Path | None = None

    def __post_init__(self):
        if self.mode not in (IMAGE_GUIDED, INSTRUCTION_GUIDED):
            raise ConfigError(f"unknown benchmark mode {self.mode!r}")
        for kind, paths in (("content", self.content_images), ("style", self.style_images)):
            ids = [_stem(p) for p in paths]
            if len(set(ids)) != len(ids):
                raise ConfigError(f"duplicate {kind} ids in benchmark spec")
            if any("__" in i for i in ids):
                raise ConfigError(f"{kind} ids may not contain '__'")
        if self.mode == INSTRUCTION_GUIDED:
            missing = [s for s in self.style_ids if not self.instructions.get(s)]
            if missing:
                raise ConfigError(f"instruction mode: no instruction for styles {missing}")
        missing = [c for c in self.content_ids if not self.captions.get(c)]
        if missing:
            raise ConfigError(f"benchmark spec lacks captions for contents {missing}")

    @property
    def content_ids(self) -> list[str]:
        return [_stem(p) for p in self.content_images]

    @property
    def style_ids(self) -> list[str]:
        return [_stem(p) for p in self.style_images]

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() or self.base_dir is None else self.base_dir / p

    def pairs(self) -> list[tuple[str, str]]:
        return [(c, s) for c in self.content_ids for s in self.style_ids]


def load_benchmark_spec(path) -> BenchmarkSpec:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read benchmark spec {path}: {exc}") from exc
    known = {"content_images", "style_images", "mode", "instructions", "captions"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"benchmark spec: unknown keys {sorted(unknown)}")
    try:
        return BenchmarkSpec(content_images=list(raw["content_images"]),
                             style_images=list(raw["style_images"]),
                             mode=raw.get("mode", IMAGE_GUIDED),
                             instructions=dict(raw.get("instructions") or {}),
                             captions=dict(raw.get("captions") or {}),
                             base_dir=path.resolve().parent)
    except KeyError as exc:
        raise ConfigError(f"benchmark spec: missing {exc}") from None


@dataclass
class MethodOutputs:
    method_id: str
    outputs: dict[tuple[str, str], str]
    partial: bool = False

    @classmethod
    def from_directory(cls, path, method_id: str | None = None) -> "MethodOutputs":
        """Collect ``<content_id>__<style_id>.<ext>`` files from a method folder."""
        path = Path(path)
        if not path.is_dir():
            raise DataError(f"method output folder not found: {path}")
        outputs = {}
        for f in sorted(path.iterdir()):
            if f.suffix.lower() in IMAGE_SUFFIXES and "__" in f.stem:
                cid, sid = f.stem.split("__", 1)
                outputs[(cid, sid)] = str(f)
        return cls(method_id or path.name, outputs)


@dataclass
class PairResult:
    method: str
    content_id: str
    style_id: str
    content_preservation: float
    style_consistency: float
    aesthetic_appeal: float
    style_loss: float
    semantic: float = math.nan
    structural: float = math.nan


@dataclass
class MethodRow:
    method: str
    content_preservation: float
    style_consistency: float
    aesthetic_appeal: float
    style_loss: float
    n_pairs: int = 0
    partial: bool = False
    missing: list[tuple[str, str]] = field(default_factory=list)

    def metrics(self) -> tuple[float, float, float, float]:
        return tuple(getattr(self, m) for m in METRICS)


@dataclass
class BenchmarkReport:
    rows: list[MethodRow] = field(default_factory=list)
    details: list[PairResult] = field(default_factory=list)
    metadata: dict[str, str] = field(default_factory=dict)

    def add(self, row: MethodRow, details: list[PairResult]) -> None:
        self.rows.append(row)
        self.details.extend(details)

    @classmethod
    def from_details(cls, details: list[PairResult], metadata=None,
                     missing: dict[str, list] | None = None) -> "BenchmarkReport":
        rep = cls(metadata=dict(metadata or {}))
        methods = list(dict.fromkeys(d.method for d in details))
        for m in methods:
            rows = [d for d in details if d.method == m]
            miss = list((missing or {}).get(m, []))
            rep.add(mean_row(m, rows, miss), rows)
        return rep


def mean_row(method: str, details: list[PairResult], missing=()) -> MethodRow:
    n = len(details)

    def avg(name):
        return math.fsum(getattr(d, name) for d in details) / n if n else math.nan

    return MethodRow(method, *(avg(m) for m in METRICS), n_pairs=n,
                     partial=bool(missing), missing=list(missing))


@dataclass
class BenchmarkScorers:
    content: ContentScorer
    style: StyleScorer
    aesthetic: AestheticScorer
    extractor: object = field(default_factory=ReferenceGramExtractor)

    def metadata(self) -> dict[str, str]:
        md = {f"backend.{k}": v for k, v in self.content.backend_ids.items()}
        md["backend.style"] = self.style.backend_id
        md.update({f"backend.{k}": v for k, v in self.aesthetic.backend_ids.items()})
        md["style_loss.extractor"] = getattr(self.extractor, "extractor_id", type(self.extractor).__name__)
        md["content.alpha"] = repr(self.content.cfg.alpha)
        return md


def evaluate_pair(method: str, cid: str, sid: str, stylized: np.ndarray, content: np.ndarray,
                  style_img: np.ndarray, caption: str, scorers: BenchmarkScorers) -> PairResult:
    sem = scorers.content.semantic_score(stylized, caption)
    struct = scorers.content.structural_score(stylized, content)
    return PairResult(
        method=method, content_id=cid, style_id=sid,
        content_preservation=content_score(sem, struct, scorers.content.cfg),
        style_consistency=scorers.style.score(stylized, style_img),
        aesthetic_appeal=scorers.aesthetic.score(stylized),
        style_loss=style_loss(stylized, style_img, scorers.extractor),
        semantic=sem, structural=struct)


def evaluate_method(spec: BenchmarkSpec, outputs: MethodOutputs, scorers: BenchmarkScorers,
                    jobs: int = 1) -> tuple[MethodRow, list[PairResult]]:
    """Score every (content, style) pair a method produced.

    Pairs without an output (or with an undecodable one) are listed in the
    row's ``missing`` field and the row is marked partial.
    """
    contents = dict(zip(spec.content_ids, spec.content_images))
    styles = dict(zip(spec.style_ids, spec.style_images))
    present, missing = [], []
    for pair in spec.pairs():
        (present if pair in outputs.outputs else missing).append(pair)

    def one(pair):
        cid, sid = pair
        try:
            stylized = load_image(outputs.outputs[pair])
        except DecodeError as exc:
            log.warning("%s %s__%s unreadable: %s", outputs.method_id, cid, sid, exc)
            return None
        return evaluate_pair(outputs.method_id, cid, sid, stylized,
                             load_image(spec.resolve(contents[cid])),
                             load_image(spec.resolve(styles[sid])), spec.captions[cid], scorers)

    if jobs <= 1:
        results = [one(p) for p in present]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, present))
    details = []
    for pair, r in zip(present, results):
        if r is None:
            missing.append(pair)
        else:
            details.append(r)
    missing.sort(key=spec.pairs().index)
    if missing:
        log.warning("%s: %d of %d pairs missing; report marked partial",
                    outputs.method_id, len(missing), len(spec.pairs()))
    return mean_row(outputs.method_id, details, missing), details


def run_benchmark(spec: BenchmarkSpec, methods: list[MethodOutputs], scorers: BenchmarkScorers,
                  jobs: int = 1) -> BenchmarkReport:
    report = BenchmarkReport(metadata=scorers.metadata())
    report.metadata["mode"] = spec.mode
    for m in methods:
        row, details = evaluate_method(spec, m, scorers, jobs)
        report.add(row, details)
    return report


def require_complete(row: MethodRow) -> None:
    if row.missing:
        raise MissingOutput(f"{row.method}: missing outputs for {row.missing}",
                            method=row.method)


# -- report emission -------------------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


def render_csv(report: BenchmarkReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", *METRICS])
    for r in report.rows:
        w.writerow([r.method, *(_fmt(v) for v in r.metrics())])
    return buf.getvalue()


def render_markdown(report: BenchmarkReport) -> str:
    lines = ["| Method | " + " | ".join(HEADERS[m] for m in METRICS) + " |",
             "|---|" + "---:|" * len(METRICS)]
    for r in report.rows:
        name = r.method + (" (partial)" if r.partial else "")
        lines.append(f"| {name} | " + " | ".join(_fmt(v) for v in r.metrics()) + " |")
    return "\n".join(lines) + "\n"


def emit_report(report: BenchmarkReport, fmt: str, path) -> Path:
    if fmt == "csv":
        text = render_csv(report)
    elif fmt == "markdown":
        text = render_markdown(report)
    else:
        raise ConfigError(f"unknown report format {fmt!r}")
    path = Path(path)
    atomic_write_text(path, text)
    return path


_ROW_RE = re.compile(r"^\|\s*(?P<name>[^|]+?)\s*\|(?P<rest>.*)\|\s*$")


def parse_markdown_report(text: str) -> list[tuple[str, tuple[float, ...]]]:
    """Inverse of :func:`render_markdown` for the numeric table body."""
    rows = []
    for line in text.splitlines()[2:]:
        m = _ROW_RE.match(line)
        if not m:
            continue
        name = m.group("name").removesuffix(" (partial)")
        vals = tuple(float(x.strip()) for x in m.group("rest").split("|"))
        rows.append((name, vals))
    return rows


DETAIL_FIELDS = ("method", "content_id", "style_id", *METRICS, "semantic", "structural")


def write_details(report: BenchmarkReport, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DETAIL_FIELDS)
    for d in report.details:
        row = asdict(d)
        w.writerow([row[k] if isinstance(row[k], str) else _fmt(row[k]) for k in DETAIL_FIELDS])
    atomic_write_text(path, buf.getvalue())


def read_details(path) -> list[PairResult]:
    out = []
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                out.append(PairResult(
                    method=row["method"], content_id=row["content_id"], style_id=row["style_id"],
                    **{k: float(row[k]) for k in DETAIL_FIELDS[3:]}))
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read details table {path}: {exc}") from exc
    return out


# -- ablation ---------------------------------------------------------------------------

@dataclass
class AblationRow:
    components: tuple[str, ...]
    weights: tuple[float, float, float]
    winners: dict[str, str]
    mean_style_loss: float

    @property
    def label(self) -> str:
        names = {"content": "Content Preservation", "style": "Style Consistency",
                 "aesthetic": "Aesthetic Appeal"}
        return "+".join(names[c] for c in self.components)


DEFAULT_ABLATION = (("content",), ("content", "style"), ("content", "style", "aesthetic"))


def ablation_weights(components, cfg: FilterConfig) -> tuple[float, float, float]:
    unknown = set(components) - set(COMPONENTS)
    if unknown or not components:
        raise ConfigError(f"bad component subset {components}")
    return tuple(w if name in components else 0.0 for name, w in zip(COMPONENTS, cfg.weights))


def ablation_report(m: Manifest, scorers: Scorers | None = None,
                    component_sets=DEFAULT_ABLATION, cfg: FilterConfig | None = None,
                    records: list[ScoreRecord] | None = None, extractor=None,
                    jobs: int = 1) -> list[AblationRow]:
    """Re-run best-of-N with only the chosen score components.

    Components outside a subset get weight 0; the rest keep their configured
    weight. Each row reports the mean style loss of the subset's winners
    against their groups' style images. Pass ``records`` to reuse existing
    scores instead of scoring the manifest with ``scorers``.
    """
    cfg = cfg or FilterConfig()
    if records is None:
        if scorers is None:
            raise ConfigError("ablation needs either scorers or precomputed records")
        records = score_manifest(m, scorers, cfg, jobs)
    by_id = {r.triplet_id: r for r in records}
    triplets = {t.triplet_id: t for t in m.entries}
    groups = group_candidates(m)
    for gid, members in groups:
        missing = [t.triplet_id for t in members if t.triplet_id not in by_id]
        if missing:
            raise DataError(f"group {gid}: no score records for {missing}", group_id=gid)
    loss_cache: dict[str, float] = {}

    def loss_of(tid):
        if tid not in loss_cache:
            t = triplets[tid]
            loss_cache[tid] = style_loss(load_image(m.resolve(t.stylized_path)),
                                         load_image(m.resolve(t.style_path)), extractor)
        return loss_cache[tid]

    rows = []
    for comps in component_sets:
        comps = tuple(comps)
        weights = ablation_weights(comps, cfg)
        winners = {}
        for gid, members in groups:
            recs = [by_id[t.triplet_id] for t in members]
            winners[gid] = recs[argmax_lowest(group_totals(recs, weights, cfg.normalize))].triplet_id
        losses = [loss_of(w) for w in winners.values()]
        rows.append(AblationRow(comps, weights, winners,
                                math.fsum(losses) / len(losses) if losses else math.nan))
    return rows


def render_ablation_markdown(rows: list[AblationRow]) -> str:
    lines = ["| Components | Style Loss ↓ |", "|---|---:|"]
    lines += [f"| {r.label} | {_fmt(r.mean_style_loss)} |" for r in rows]
    return "\n".join(lines) + "\n"
