"""Weighted combination of the three axis scores and best-of-N selection.

``total = a * C + b * S + c * A`` with defaults ``(a, b, c) = (0.2, 0.6, 0.2)``
and content blend ``alpha = 0.5``. Per group, the candidate with the highest
total wins; ties go to the earliest candidate in manifest order.

:func:`filter_dataset` journals each finished group to ``progress.jsonl`` so an
interrupted run can be resumed; final outputs are ordered by group id and do
not depend on completion order or worker count.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

from .aesthetic import AestheticScorer
from .content import ContentScorer, content_score
from .data import (Manifest, ScoreRecord, Triplet, group_candidates, load_image,
                   write_jsonl, write_manifest)
from .errors import ConfigError, EmptyGroup, MalformedLine, StyleFilterError
from .style import StyleScorer

log = logging.getLogger(__name__)

DEFAULT_WEIGHTS = (0.2, 0.6, 0.2)
COMPONENTS = ("content", "style", "aesthetic")

FILTERED_NAME = "filtered_manifest.jsonl"
SCORES_NAME = "scores.jsonl"
JOURNAL_NAME = "progress.jsonl"


@dataclass(frozen=True)
class FilterConfig:
    weight_a: float = DEFAULT_WEIGHTS[0]
    weight_b: float = DEFAULT_WEIGHTS[1]
    weight_c: float = DEFAULT_WEIGHTS[2]
    alpha: float = 0.5
    tie_break: str = "lowest_index"
    resume: bool = False
    normalize: bool = False

    def __post_init__(self):
        if not all(math.isfinite(w) for w in self.weights):
            raise ConfigError(f"weights must be finite, got {self.weights}")
        if self.tie_break != "lowest_index":
            raise ConfigError(f"unsupported tie_break {self.tie_break!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")

    @property
    def weights(self) -> tuple[float, float, float]:
        return (self.weight_a, self.weight_b, self.weight_c)

    def fingerprint(self) -> dict:
        d = asdict(self)
        d.pop("resume")
        return d


def combine(c_score: float, s_score: float, a_score: float, cfg: FilterConfig | None = None) -> float:
    a, b, c = (cfg or FilterConfig()).weights
    return a * c_score + b * s_score + c * a_score


@dataclass
class Scorers:
    content: ContentScorer
    style: StyleScorer
    aesthetic: AestheticScorer

    def backend_ids(self) -> dict[str, str]:
        ids = dict(self.content.backend_ids)
        ids["style"] = self.style.backend_id
        ids.update(self.aesthetic.backend_ids)
        return ids


def score_triplet(t: Triplet, scorers: Scorers, cfg: FilterConfig | None = None,
                  resolve: Callable[[str], Path] = Path, config_hash: str = "") -> ScoreRecord:
    cfg = cfg or FilterConfig()
    try:
        stylized = load_image(resolve(t.stylized_path))
        content = load_image(resolve(t.content_path))
        style = load_image(resolve(t.style_path))
        s_sem = scorers.content.semantic_score(stylized, t.content_caption)
        s_struct = scorers.content.structural_score(stylized, content)
        c = content_score(s_sem, s_struct, cfg.alpha)
        s = scorers.style.score(stylized, style)
        a = scorers.aesthetic.score(stylized)
    except StyleFilterError as exc:
        raise exc.tag(triplet_id=t.triplet_id, group_id=t.group_id)
    return ScoreRecord(triplet_id=t.triplet_id, c_score=c, s_score=s, a_score=a,
                       total=combine(c, s, a, cfg), weights=cfg.weights, alpha=cfg.alpha,
                       backend_ids=scorers.backend_ids(), group_id=t.group_id,
                       config_hash=config_hash)


def _minmax(vals: list[float]) -> list[float]:
    lo, hi = min(vals), max(vals)
    if hi == lo:
        return [0.0] * len(vals)
    return [(v - lo) / (hi - lo) for v in vals]


def group_totals(group: list[ScoreRecord], weights=None, normalize: bool = False) -> list[float]:
    """Totals used for selection; ``weights=None`` keeps each record's stored total."""
    if weights is None and not normalize:
        return [r.total for r in group]
    a, b, c = weights if weights is not None else group[0].weights
    cs = [r.c_score for r in group]
    ss = [r.s_score for r in group]
    as_ = [r.a_score for r in group]
    if normalize:
        cs, ss, as_ = _minmax(cs), _minmax(ss), _minmax(as_)
    return [a * x + b * y + c * z for x, y, z in zip(cs, ss, as_)]


def argmax_lowest(values: list[float]) -> int:
    best = 0
    for i in range(1, len(values)):
        if values[i] > values[best]:
            best = i
    return best


def select_best(group: list[ScoreRecord], cfg: FilterConfig | None = None, weights=None) -> str:
    if not group:
        raise EmptyGroup("cannot select from an empty group")
    cfg = cfg or FilterConfig()
    return group[argmax_lowest(group_totals(group, weights, cfg.normalize))].triplet_id


def run_hash(cfg: FilterConfig, backend_ids: dict) -> str:
    blob = json.dumps({"filter": cfg.fingerprint(), "backends": backend_ids}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def score_manifest(m: Manifest, scorers: Scorers, cfg: FilterConfig | None = None,
                   jobs: int = 1, config_hash: str = "") -> list[ScoreRecord]:
    """Score every triplet; records come back in manifest order."""
    cfg = cfg or FilterConfig()

    def one(t):
        return score_triplet(t, scorers, cfg, m.resolve, config_hash)

    if jobs <= 1:
        return [one(t) for t in m.entries]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, m.entries))


class Journal:
    """Append-only record of finished groups (one JSON object per line)."""

    def __init__(self, path: Path | None):
        self.path = path
        self._lock = threading.Lock()

    def reset(self) -> None:
        if self.path is not None:
            self.path.write_text("", encoding="utf-8")

    def load(self) -> dict[str, dict]:
        done: dict[str, dict] = {}
        if self.path is None or not self.path.exists():
            return done
        text = self.path.read_text(encoding="utf-8")
        lines = text.splitlines()
        for i, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                done[obj["group_id"]] = obj
            except (json.JSONDecodeError, KeyError, TypeError):
                # a torn final line is expected after a kill; anything earlier is not
                if i == len(lines) and not text.endswith("\n"):
                    log.warning("dropping torn journal line %d", i)
                    self.path.write_text("".join(l + "\n" for l in lines[:-1]), encoding="utf-8")
                    break
                raise MalformedLine(i, f"corrupt journal {self.path}") from None
        return done

    def append(self, entry: dict) -> None:
        if self.path is None:
            return
        with self._lock, open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, ensure_ascii=False) + "\n")
            fh.flush()


def filter_dataset(m: Manifest, scorers: Scorers, cfg: FilterConfig | None = None,
                   out_dir=None, jobs: int = 1, config_hash: str | None = None,
                   score_fn: Callable | None = None):
    """Best-of-N filtering over all groups of ``m``.

    Returns ``(filtered_manifest, score_records)``. With ``out_dir`` the
    filtered manifest, the ``scores.jsonl`` sidecar and the journal are
    written there. ``score_fn(triplet) -> ScoreRecord`` overrides scoring
    (used for injected scores in tests).
    """
    cfg = cfg or FilterConfig()
    if config_hash is None:
        config_hash = run_hash(cfg, scorers.backend_ids() if scorers is not None else {})
    if score_fn is None:
        def score_fn(t):
            return score_triplet(t, scorers, cfg, m.resolve, config_hash)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    journal = Journal(out / JOURNAL_NAME if out is not None else None)
    if cfg.resume:
        done = journal.load()
        stale = {r.get("config_hash") for e in done.values() for r in e["records"]} - {config_hash}
        if stale:
            raise ConfigError("journal was written under a different configuration; "
                              "rerun without resume")
    else:
        journal.reset()
        done = {}

    groups = group_candidates(m)
    todo = [(gid, members) for gid, members in groups if gid not in done]
    if done:
        log.info("resuming: %d of %d groups already finalized", len(done), len(groups))

    failed: list[str] = []

    def run_group(item):
        gid, members = item
        try:
            records = [score_fn(t) for t in members]
        except StyleFilterError as exc:
            if not cfg.resume:
                raise
            log.error("group %s skipped: %s", gid, exc)
            failed.append(gid)
            return
        entry = {"group_id": gid, "winner": select_best(records, cfg),
                 "records": [r.to_dict() for r in records]}
        journal.append(entry)
        done[gid] = entry

    if jobs <= 1:
        for item in todo:
            run_group(item)
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            for fut in [pool.submit(run_group, item) for item in todo]:
                fut.result()

    by_id = {t.triplet_id: t for t in m.entries}
    winners, records = [], []
    for gid in sorted(done):
        entry = done[gid]
        winners.append(by_id[entry["winner"]])
        records.extend(ScoreRecord.from_dict(r) for r in entry["records"])

    meta = dict(m.metadata)
    meta.update({"filter.weights": ",".join(repr(w) for w in cfg.weights),
                 "filter.alpha": repr(cfg.alpha), "filter.normalize": str(cfg.normalize),
                 "config_hash": config_hash})
    if failed:
        meta["filter.skipped_groups"] = ",".join(sorted(failed))
    filtered = Manifest(entries=winners, version=m.version, metadata=meta, base_dir=m.base_dir)
    if out is not None:
        write_manifest(_rebased(filtered, out), out / FILTERED_NAME)
        write_jsonl(out / SCORES_NAME, [r.to_dict() for r in records])
    return filtered, records


def _rebased(m: Manifest, out: Path) -> Manifest:
    """Rewrite relative image paths so they resolve from ``out``."""
    if m.base_dir is None:
        return m
    entries = []
    for t in m.entries:
        d = t.to_dict()
        for k in ("content_path", "style_path", "stylized_path"):
            p = Path(d[k])
            if not p.is_absolute():
                d[k] = os.path.relpath(m.base_dir / p, out.resolve())
        entries.append(Triplet(**d))
    return Manifest(entries=entries, version=m.version, metadata=m.metadata, base_dir=out)
