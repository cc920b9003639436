"""Procedural stand-in corpora for tests, demos and the acceptance suite.

Everything is generated from a seed, so the "shipped" corpora are reproduced
bit-for-bit on demand rather than stored as binary files.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import yaml

from .aesthetic import AestheticTrainConfig, fuse_features
from .cache import EmbeddingService
from .data import (Manifest, RatedImage, StyleLabeledImage, Triplet, load_image,
                   save_image, write_manifest, write_rated_corpus)

STYLES = ("ember_stripes", "moss_checker", "ocean_waves", "ash_speckle")


def _to_u8(x: np.ndarray) -> np.ndarray:
    return (np.clip(x, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def style_texture(style: str, rng: np.random.Generator, size: int = 64) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    jitter = rng.uniform(-0.08, 0.08, size=3)
    if style == "ember_stripes":
        period = rng.integers(4, 13)
        band = ((yy + rng.integers(0, period)) // (period / 2)) % 2
        hi = np.array([0.95, 0.25, 0.10]) + jitter
        lo = np.array([0.55, 0.08, 0.05]) + jitter
        img = band[..., None] * hi + (1 - band[..., None]) * lo
    elif style == "moss_checker":
        cell = rng.integers(4, 11)
        band = ((yy // cell + xx // cell) % 2)
        hi = np.array([0.35, 0.75, 0.25]) + jitter
        lo = np.array([0.10, 0.35, 0.10]) + jitter
        img = band[..., None] * hi + (1 - band[..., None]) * lo
    elif style == "ocean_waves":
        freq = rng.uniform(0.15, 0.4)
        phase = rng.uniform(0, 2 * np.pi)
        wave = 0.5 + 0.5 * np.sin(freq * xx + 0.3 * np.sin(0.2 * yy) + phase)
        base = np.array([0.10, 0.30, 0.80]) + jitter
        img = base * (0.6 + 0.4 * wave[..., None])
    elif style == "ash_speckle":
        level = rng.uniform(0.45, 0.6)
        noise = rng.normal(0.0, rng.uniform(0.12, 0.2), size=(size, size))
        img = np.repeat((level + noise)[..., None], 3, axis=2) + 0.3 * jitter
    else:
        raise ValueError(f"unknown style {style!r}")
    return _to_u8(img)


def make_style_corpus(root, n_per_style: int = 32, size: int = 64, seed: int = 0,
                      styles=STYLES) -> list[StyleLabeledImage]:
    """Write ``<root>/<style>/<style>_<i>.png`` textures and return them."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    out = []
    for style in styles:
        for i in range(n_per_style):
            p = root / style / f"{style}_{i:03d}.png"
            save_image(style_texture(style, rng, size), p)
            out.append(StyleLabeledImage(str(p), style))
    return out


def random_scene(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """Random image spanning the reference captioner's attribute buckets."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    base = rng.uniform(0.0, 1.0, size=3) * rng.uniform(0.3, 1.0)
    img = np.broadcast_to(base, (size, size, 3)).copy()
    kind = rng.integers(0, 3)
    amp = rng.choice([0.0, 0.1, 0.3, 0.5])
    if kind == 0:
        pattern = np.sin(2 * np.pi * rng.uniform(0.5, 2) * yy)
    elif kind == 1:
        cell = rng.integers(1, 9)
        pattern = ((np.arange(size)[:, None] // cell + np.arange(size)[None, :] // cell) % 2) * 2 - 1.0
    else:
        pattern = rng.normal(0, 1, size=(size, size))
    img += amp * pattern[..., None]
    img += rng.choice([0.0, 0.0, 0.3]) * (xx - 0.5)[..., None]
    return _to_u8(img)


def make_rated_corpus(root, n: int = 64, seed: int = 0, noise: float = 0.05,
                      cfg: AestheticTrainConfig | None = None,
                      service: EmbeddingService | None = None, corpus_id: str = "AVA-like"):
    """Images rated by a fixed linear map of their fused features plus noise.

    Returns ``(rows, weights, bias)``; ratings sit around 5 like a 1-10 scale.
    A ``rated.csv`` is written under ``root``.
    """
    root = Path(root)
    cfg = cfg or AestheticTrainConfig()
    service = service or EmbeddingService()
    rng = np.random.default_rng(seed)
    paths, feats = [], []
    for i in range(n):
        p = root / "images" / f"img_{i:03d}.png"
        save_image(random_scene(rng), p)
        img = load_image(p)
        cap = service.caption(cfg.captioner_backend, img)
        feats.append(fuse_features(img, cap, cfg, service).values.astype(np.float64))
        paths.append(p)
    x = np.stack(feats)
    w = np.random.default_rng(seed + 1).normal(0.0, 0.3, size=x.shape[1])
    bias = 5.0
    y = bias + x @ w + rng.normal(0.0, noise, size=n)
    rows = [RatedImage(str(p), float(s), corpus_id) for p, s in zip(paths, y)]
    write_rated_corpus(rows, root / "rated.csv")
    return rows, w, bias


_CONTENT_COLORS = {"red": (0.9, 0.15, 0.1), "green": (0.15, 0.8, 0.2), "blue": (0.1, 0.2, 0.9),
                   "white": (0.95, 0.95, 0.95)}


def content_scene(color: str, bg: str, rng: np.random.Generator, size: int = 64) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(0.35, 0.65, size=2) * size
    r = rng.uniform(0.18, 0.3) * size
    mask = ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r)[..., None]
    fg = np.array(_CONTENT_COLORS[color])
    back = np.array(_CONTENT_COLORS[bg]) * 0.4
    return _to_u8(mask * fg + (1 - mask) * back)


def make_toy_manifest(root, n_groups: int = 5, n_candidates: int = 6, seed: int = 0,
                      size: int = 64) -> Manifest:
    """Content/style/stylized images plus ``manifest.jsonl`` under ``root``.

    Candidates are blends of content and style at different strengths, with a
    little pixel noise, so the three scoring axes disagree across candidates.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    colors = list(_CONTENT_COLORS)
    entries = []
    for g in range(n_groups):
        color, bg = colors[g % len(colors)], colors[(g + 1) % len(colors)]
        style = STYLES[g % len(STYLES)]
        content = content_scene(color, bg, rng, size)
        style_img = style_texture(style, rng, size)
        c_rel = f"content/c{g:02d}.png"
        s_rel = f"style/s{g:02d}.png"
        save_image(content, root / c_rel)
        save_image(style_img, root / s_rel)
        strengths = rng.permutation(np.linspace(0.1, 0.9, n_candidates))
        for k, t in enumerate(strengths):
            mix = (1 - t) * content.astype(np.float64) + t * style_img.astype(np.float64)
            mix += rng.normal(0.0, 6.0, size=mix.shape)
            out_rel = f"stylized/g{g:02d}_m{k}.png"
            save_image(np.clip(mix, 0, 255).astype(np.uint8), root / out_rel)
            entries.append(Triplet(
                triplet_id=f"g{g:02d}-m{k}", content_path=c_rel, style_path=s_rel,
                stylized_path=out_rel, content_caption=f"a {color} circle on a {bg} background",
                style_category=style, generator_id=f"model{k}", group_id=f"g{g:02d}",
                instruction=f"render in the {style.replace('_', ' ')} style"))
    m = Manifest(entries=entries, metadata={"source": "synthetic", "seed": str(seed)},
                 base_dir=root.resolve())
    write_manifest(m, root / "manifest.jsonl")
    return m


def make_toy_benchmark(root, n_content: int = 2, n_style: int = 3, seed: int = 0,
                       size: int = 64) -> Path:
    """A small benchmark spec plus two method output folders.

    ``methods/copy_style`` returns each style image unchanged and
    ``methods/blend`` a 50/50 blend. Returns the spec file path.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    colors = list(_CONTENT_COLORS)
    contents, styles, captions = [], [], {}
    for i in range(n_content):
        cid = f"content{i}"
        color, bg = colors[i % len(colors)], colors[(i + 2) % len(colors)]
        save_image(content_scene(color, bg, rng, size), root / "content" / f"{cid}.png")
        contents.append(f"content/{cid}.png")
        captions[cid] = f"a {color} circle on a {bg} background"
    for j in range(n_style):
        sid = f"style{j}"
        save_image(style_texture(STYLES[j % len(STYLES)], rng, size), root / "style" / f"{sid}.png")
        styles.append(f"style/{sid}.png")
    for i in range(n_content):
        c = load_image(root / contents[i]).astype(np.float64)
        for j in range(n_style):
            s = load_image(root / styles[j])
            name = f"content{i}__style{j}.png"
            save_image(s, root / "methods" / "copy_style" / name)
            save_image(np.clip(0.5 * c + 0.5 * s, 0, 255).astype(np.uint8),
                       root / "methods" / "blend" / name)
    spec = {"mode": "image_guided", "content_images": contents, "style_images": styles,
            "captions": captions}
    path = root / "benchmark.yaml"
    path.write_text(yaml.safe_dump(spec, sort_keys=True), encoding="utf-8")
    return path
