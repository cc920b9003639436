import math

import numpy as np
import pytest

from stylefilter.benchmark import (HEADERS, METRICS, BenchmarkReport, BenchmarkScorers,
                                   BenchmarkSpec, MethodOutputs, PairResult, ReferenceGramExtractor,
                                   ablation_report, ablation_weights, emit_report, evaluate_method,
                                   gram, load_benchmark_spec, make_extractor,
                                   parse_markdown_report, read_details, render_ablation_markdown,
                                   render_csv, require_complete, run_benchmark, style_loss,
                                   write_details)
from stylefilter.data import Manifest, ScoreRecord, Triplet, load_image, load_manifest, save_image
from stylefilter.errors import ConfigError, DataError, DecodeError, MissingOutput
from stylefilter.filtering import FilterConfig, combine, filter_dataset
from stylefilter.synthetic import make_toy_benchmark

from conftest import make_scorers


def conv_loop(x, k):
    c_out, c_in = k.shape[:2]
    _, h, w = x.shape
    out = np.zeros((c_out, h - 2, w - 2))
    for o in range(c_out):
        for i in range(h - 2):
            for j in range(w - 2):
                out[o, i, j] = sum(x[c, i + a, j + b] * k[o, c, a, b]
                                   for c in range(c_in) for a in range(3) for b in range(3))
    return out


def gram_loop(f):
    c = f.shape[0]
    flat = f.reshape(c, -1)
    m = flat.shape[1]
    return np.array([[sum(flat[i, p] * flat[j, p] for p in range(m)) / m for j in range(c)]
                     for i in range(c)])


def style_loss_oracle(a, b, ex):
    total = 0.0
    layers = list(zip(ex.extract(a), ex.extract(b)))
    for fa, fb in layers:
        ga, gb = gram_loop(fa), gram_loop(fb)
        c = fa.shape[0]
        total += sum((ga[i, j] - gb[i, j]) ** 2 for i in range(c) for j in range(c)) / c ** 2
    return total / len(layers)


def test_reference_extractor_layers(rng):
    ex = ReferenceGramExtractor()
    img = rng.integers(0, 256, size=(10, 12, 3), dtype=np.uint8)
    x = img.astype(np.float64).transpose(2, 0, 1) / 255.0
    feats = ex.extract(img)
    assert [f.shape for f in feats] == [(3, 10, 12), (8, 8, 10), (8, 2, 3)]
    f1 = np.maximum(conv_loop(x, ex.k1), 0)
    assert np.allclose(feats[1], f1, atol=1e-12)
    pooled = np.array([[[f1[c, 2 * i:2 * i + 2, 2 * j:2 * j + 2].mean() for j in range(5)]
                        for i in range(4)] for c in range(8)])
    assert np.allclose(feats[2], np.maximum(conv_loop(pooled, ex.k2), 0), atol=1e-12)


def test_gram_matches_loop(rng):
    f = rng.normal(size=(4, 5, 6))
    assert np.allclose(gram(f), gram_loop(f), atol=1e-12)


def test_style_loss_matches_oracle(rng):
    ex = ReferenceGramExtractor()
    for _ in range(3):
        a = rng.integers(0, 256, size=(12, 12, 3), dtype=np.uint8)
        b = rng.integers(0, 256, size=(12, 12, 3), dtype=np.uint8)
        assert abs(style_loss(a, b, ex) - style_loss_oracle(a, b, ex)) < 1e-6


def test_style_loss_identity_and_symmetry(rng):
    a = rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
    b = rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
    assert style_loss(a, a.copy()) == 0.0
    assert style_loss(a, b) == style_loss(b, a) > 0


def test_style_loss_too_small():
    with pytest.raises(DecodeError):
        style_loss(np.zeros((4, 4, 3), np.uint8), np.zeros((4, 4, 3), np.uint8))
    with pytest.raises(ConfigError):
        make_extractor("alexnet")


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    spec = load_benchmark_spec(make_toy_benchmark(root, 2, 3, seed=0))
    return root, spec


@pytest.fixture
def bscorers(aesthetic_ckpt):
    s = make_scorers(aesthetic_ckpt[0])
    return BenchmarkScorers(s.content, s.style, s.aesthetic, ReferenceGramExtractor())


def test_outputs_equal_style_images(bench, bscorers):
    root, spec = bench
    row, details = evaluate_method(spec, MethodOutputs.from_directory(root / "methods" / "copy_style"),
                                   bscorers)
    assert len(details) == 6 and not row.partial
    for d in details:
        assert d.style_consistency == pytest.approx(1.0, abs=1e-12)
        assert d.style_loss == 0.0


def test_outputs_equal_content_images(bench, bscorers, tmp_path):
    root, spec = bench
    for cid, cpath in zip(spec.content_ids, spec.content_images):
        for sid in spec.style_ids:
            save_image(load_image(spec.resolve(cpath)), tmp_path / f"{cid}__{sid}.png")
    _, details = evaluate_method(spec, MethodOutputs.from_directory(tmp_path), bscorers)
    assert all(d.structural == pytest.approx(1.0, abs=1e-12) for d in details)


def test_two_methods_means_recompute(bench, bscorers):
    root, spec = bench
    methods = [MethodOutputs.from_directory(root / "methods" / m) for m in ("blend", "copy_style")]
    report = run_benchmark(spec, methods, bscorers)
    assert [r.method for r in report.rows] == ["blend", "copy_style"]
    for row in report.rows:
        mine = [d for d in report.details if d.method == row.method]
        for m in METRICS:
            assert abs(getattr(row, m) - sum(getattr(d, m) for d in mine) / len(mine)) < 1e-9
    assert report.metadata["style_loss.extractor"] == "ref-gram"


def test_pair_order_does_not_change_means(bench, bscorers):
    root, spec = bench
    outs = MethodOutputs.from_directory(root / "methods" / "blend")
    row, _ = evaluate_method(spec, outs, bscorers)
    flipped = BenchmarkSpec(spec.content_images[::-1], spec.style_images[::-1],
                            captions=spec.captions, base_dir=spec.base_dir)
    row2, _ = evaluate_method(flipped, outs, bscorers, jobs=3)
    assert row2.metrics() == pytest.approx(row.metrics(), abs=1e-12)


def test_missing_outputs_mark_partial(bench, bscorers, tmp_path):
    root, spec = bench
    src = root / "methods" / "blend"
    for f in sorted(src.iterdir())[:4]:
        (tmp_path / f.name).write_bytes(f.read_bytes())
    (tmp_path / sorted(src.iterdir())[1].name).write_bytes(b"broken")
    row, details = evaluate_method(spec, MethodOutputs.from_directory(tmp_path), bscorers)
    assert row.partial and len(details) == 3 and row.n_pairs == 3
    assert len(row.missing) == 3
    with pytest.raises(MissingOutput):
        require_complete(row)


def test_spec_validation(tmp_path):
    with pytest.raises(ConfigError):
        BenchmarkSpec(["c/a.png"], ["s/x.png"], mode="instruction_guided", captions={"a": "x"})
    with pytest.raises(ConfigError):
        BenchmarkSpec(["c/a.png"], ["s/x.png"])
    with pytest.raises(ConfigError):
        BenchmarkSpec(["c/a__b.png"], ["s/x.png"], captions={"a__b": "x"})
    (tmp_path / "s.yaml").write_text("content_images: [a.png]\nbogus: 1\n")
    with pytest.raises(ConfigError):
        load_benchmark_spec(tmp_path / "s.yaml")
    with pytest.raises(DataError):
        MethodOutputs.from_directory(tmp_path / "nope")


def fake_report():
    details = [PairResult("m1", "c0", "s0", 0.5, 0.25, 5.5, 0.125),
               PairResult("m1", "c0", "s1", 0.75, 0.5, 6.0, 1 / 3),
               PairResult("m2", "c0", "s0", 0.1, 0.2, 0.3, 0.4)]
    return BenchmarkReport.from_details(details)


def test_csv_report(tmp_path):
    path = emit_report(fake_report(), "csv", tmp_path / "r.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "method,content_preservation,style_consistency,aesthetic_appeal,style_loss"
    assert len(lines) == 3
    assert render_csv(BenchmarkReport()).splitlines() == [lines[0]]


def test_markdown_parses_back(tmp_path):
    rep = fake_report()
    text = emit_report(rep, "markdown", tmp_path / "r.md").read_text()
    assert all(HEADERS[m] in text for m in METRICS)
    assert "↑" in text and "↓" in text
    parsed = parse_markdown_report(text)
    assert parsed == [(r.method, r.metrics()) for r in rep.rows]
    assert parse_markdown_report(emit_report(BenchmarkReport(), "markdown", tmp_path / "e.md")
                                 .read_text()) == []
    with pytest.raises(ConfigError):
        emit_report(rep, "html", tmp_path / "x")


def test_details_round_trip(tmp_path):
    rep = fake_report()
    write_details(rep, tmp_path / "d.csv")
    back = read_details(tmp_path / "d.csv")
    assert [(d.method, d.style_loss) for d in back] == [(d.method, d.style_loss) for d in rep.details]
    rebuilt = BenchmarkReport.from_details(back)
    assert [r.metrics() for r in rebuilt.rows] == [r.metrics() for r in rep.rows]


# -- ablation ---------------------------------------------------------------------

def constructed_manifest(root, rng):
    """Three candidates per group: a content copy, a style copy, and a blend."""
    entries = []
    for g in range(3):
        c = rng.integers(0, 256, size=(24, 24, 3), dtype=np.uint8)
        s = rng.integers(0, 256, size=(24, 24, 3), dtype=np.uint8)
        save_image(c, root / f"c{g}.png")
        save_image(s, root / f"s{g}.png")
        save_image(c, root / f"o{g}_0.png")
        save_image(s, root / f"o{g}_1.png")
        save_image(((c.astype(int) + s) // 2).astype(np.uint8), root / f"o{g}_2.png")
        for k in range(3):
            entries.append(Triplet(f"g{g}-{k}", f"c{g}.png", f"s{g}.png", f"o{g}_{k}.png", "cap",
                                   "st", f"m{k}", f"g{g}"))
    m = Manifest(entries, base_dir=root)
    # content-best is candidate 0, style-best candidate 1, aesthetic-best candidate 2
    comps = {0: (0.9, 0.1, 4.0), 1: (0.2, 0.95, 4.5), 2: (0.5, 0.5, 9.0)}
    records = []
    for t in entries:
        c, s, a = comps[int(t.triplet_id[-1])]
        records.append(ScoreRecord(t.triplet_id, c, s, a, combine(c, s, a), (0.2, 0.6, 0.2), 0.5,
                                   {}, t.group_id, "h"))
    return m, records


def test_ablation_winners_follow_subsets(tmp_path, rng):
    m, records = constructed_manifest(tmp_path, rng)
    rows = ablation_report(m, records=records)
    assert [r.components for r in rows] == [("content",), ("content", "style"),
                                            ("content", "style", "aesthetic")]
    by_id = {r.triplet_id: r for r in records}
    for row in rows:
        a, b, c = row.weights
        for gid, winner in row.winners.items():
            cands = [t.triplet_id for t in m.entries if t.group_id == gid]
            vals = [a * by_id[x].c_score + b * by_id[x].s_score + c * by_id[x].a_score for x in cands]
            assert winner == cands[vals.index(max(vals))]
    assert set(rows[0].winners.values()) == {"g0-0", "g1-0", "g2-0"}
    assert set(rows[1].winners.values()) == {"g0-1", "g1-1", "g2-1"}
    assert set(rows[2].winners.values()) == {"g0-2", "g1-2", "g2-2"}
    assert rows[1].mean_style_loss == 0.0
    assert rows[0].mean_style_loss > 0
    md = render_ablation_markdown(rows)
    assert "Content Preservation+Style Consistency |" in md


def test_ablation_full_matches_filter(toy_root, aesthetic_ckpt):
    scorers = make_scorers(aesthetic_ckpt[0])
    m = load_manifest(toy_root / "manifest.jsonl")
    filtered, records = filter_dataset(m, scorers, config_hash="h")
    rows = ablation_report(m, scorers)
    assert list(rows[-1].winners.values()) == [t.triplet_id for t in filtered.entries]
    again = ablation_report(m, records=records)
    assert [r.winners for r in again] == [r.winners for r in rows]


def test_ablation_errors(tmp_path, rng):
    m, records = constructed_manifest(tmp_path, rng)
    with pytest.raises(ConfigError):
        ablation_report(m)
    with pytest.raises(ConfigError):
        ablation_weights(("colour",), FilterConfig())
    with pytest.raises(DataError):
        ablation_report(m, records=records[:-1])
    assert math.isclose(sum(ablation_weights(("style",), FilterConfig())), 0.6)
