import hashlib
import warnings

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stylefilter.backends import (BackendRegistry, CLIPAdapter, DegenerateVectorWarning,
                                  DINOv2Adapter, EmbeddingVector, ReferenceCaptioner,
                                  ReferenceJointEmbedder, ReferenceStatsEmbedder, caption_attributes,
                                  cosine, default_prompt, embed_image, embed_text)
from stylefilter.data import load_image
from stylefilter.errors import BackendUnavailable, ConfigError, DecodeError, DimensionMismatch


def solid(rgb, size=64):
    img = np.empty((size, size, 3), np.uint8)
    img[...] = rgb
    return img


def stats_oracle(img, grid=4):
    """Loop-based recomputation of the documented statistics layout."""
    x = img.astype(np.float64) / 255.0
    h, w, _ = x.shape
    out = []
    for c in range(3):
        out.append(sum(x[i, j, c] for i in range(h) for j in range(w)) / (h * w))
    for c in range(3):
        mu = out[c]
        out.append(sum((x[i, j, c] - mu) ** 2 for i in range(h) for j in range(w)) / (h * w))
    # array_split: the first (n % grid) chunks get one extra row/column
    def edges(n):
        base, extra = divmod(n, grid)
        e = [0]
        for k in range(grid):
            e.append(e[-1] + base + (1 if k < extra else 0))
        return e
    he, we = edges(h), edges(w)
    for r in range(grid):
        for q in range(grid):
            for c in range(3):
                block = [x[i, j, c] for i in range(he[r], he[r + 1]) for j in range(we[q], we[q + 1])]
                out.append(sum(block) / len(block))
    return np.array(out)


def test_solid_red_statistics_vector():
    v = embed_image(ReferenceStatsEmbedder(), solid((255, 0, 0)))
    expect = np.concatenate([[1, 0, 0], [0, 0, 0], np.tile([1.0, 0.0, 0.0], 16)])
    assert v.dimension == 54
    assert np.array_equal(v.values, expect.astype(np.float32))


@pytest.mark.parametrize("shape", [(64, 64), (13, 9), (4, 7)])
def test_stats_match_loop_oracle(rng, shape):
    img = rng.integers(0, 256, size=shape + (3,), dtype=np.uint8)
    feats = ReferenceStatsEmbedder().features(img)
    assert np.allclose(feats, stats_oracle(img), atol=1e-12)


def test_stats_rejects_tiny_image():
    with pytest.raises(DecodeError):
        ReferenceStatsEmbedder().features(np.zeros((3, 8, 3), np.uint8))


def test_pixel_permutation_keeps_means_changes_grid(rng):
    img = np.zeros((16, 16, 3), np.uint8)
    img[:8] = (200, 40, 10)
    flat = img.reshape(-1, 3)
    shuffled = flat[rng.permutation(len(flat))].reshape(img.shape)
    a = ReferenceStatsEmbedder().features(img)
    b = ReferenceStatsEmbedder().features(shuffled)
    assert np.allclose(a[:6], b[:6], atol=1e-12)
    assert not np.allclose(a[6:], b[6:])


def test_embedding_is_deterministic(rng):
    img = rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
    for backend in (ReferenceStatsEmbedder(), ReferenceJointEmbedder()):
        assert embed_image(backend, img) == embed_image(backend, img.copy())


def test_corrupt_file_is_decode_error(tmp_path):
    p = tmp_path / "bad.png"
    p.write_bytes(b"\x89PNG garbage")
    with pytest.raises(DecodeError):
        embed_image(ReferenceStatsEmbedder(), load_image(p))


def test_hash_bag_oracle():
    dim = 64
    expect = np.zeros(dim)
    for tok in ("a", "red", "square"):
        expect[int.from_bytes(hashlib.sha256(tok.encode()).digest()[:8], "little") % dim] += 1
    v = embed_text(ReferenceJointEmbedder(), "a red square")
    assert np.array_equal(v.values, expect.astype(np.float32))
    assert embed_text(ReferenceJointEmbedder(), "A red, square!") == v


def test_empty_text_is_zero_vector():
    v = embed_text(ReferenceJointEmbedder(), "")
    assert v.dimension == 64 and not v.values.any()


def test_modality_checks():
    with pytest.raises(BackendUnavailable):
        embed_text(ReferenceStatsEmbedder(), "x")
    with pytest.raises(BackendUnavailable):
        caption_attributes(ReferenceJointEmbedder(), solid((1, 2, 3)))


def test_cosine_examples():
    e = lambda *xs: EmbeddingVector(np.array(xs, float), "b")  # noqa: E731
    assert cosine(e(1, 0), e(0, 1)) == 0.0
    assert cosine(e(2, 0), e(1, 0)) == 1.0
    with pytest.raises(DimensionMismatch):
        cosine(e(1, 0), e(1, 0, 0))
    with pytest.raises(DimensionMismatch):
        cosine(e(1, 0), EmbeddingVector(np.array([1.0, 0.0]), "other"))


def test_cosine_matches_formula(rng):
    for _ in range(50):
        a, b = rng.normal(size=8), rng.normal(size=8)
        u, v = EmbeddingVector(a, "b"), EmbeddingVector(b, "b")
        ua, va = u.values.astype(np.float64), v.values.astype(np.float64)
        oracle = sum(x * y for x, y in zip(ua, va)) / (np.sqrt(sum(ua ** 2)) * np.sqrt(sum(va ** 2)))
        assert abs(cosine(u, v) - oracle) < 1e-9


def test_zero_vector_cosine_is_flagged():
    z = EmbeddingVector(np.zeros(4), "b")
    with pytest.warns(DegenerateVectorWarning):
        assert cosine(z, EmbeddingVector(np.ones(4), "b")) == 0.0


vecs = arrays(np.float64, 6, elements=st.floats(-100, 100, allow_nan=False, width=32))


@settings(max_examples=200)
@given(vecs, vecs, st.floats(1e-3, 1e3))
def test_cosine_properties(a, b, k):
    assume(np.linalg.norm(a) > 1e-3 and np.linalg.norm(b) > 1e-3)
    u, v = EmbeddingVector(a, "b"), EmbeddingVector(b, "b")
    c = cosine(u, v)
    assert -1.0 <= c <= 1.0
    assert c == cosine(v, u)
    assert abs(cosine(u, u) - 1.0) < 1e-12
    assert abs(cosine(EmbeddingVector(a * k, "b"), v) - c) < 1e-6


def test_caption_high_contrast_token():
    img = np.zeros((64, 64, 3), np.uint8)
    img[:, ::2] = 255
    cap = caption_attributes(ReferenceCaptioner(), img)
    assert "contrast:high" in cap.split()
    assert cap == caption_attributes(ReferenceCaptioner(), img.copy())


def test_caption_reports_only_prompted_attributes():
    cap = caption_attributes(ReferenceCaptioner(), solid((250, 250, 250)), "describe the lighting")
    assert cap == "lighting:bright bright"


def test_default_prompt_is_shipped_verbatim():
    p = default_prompt()
    assert p.startswith("Please provide a comprehensive description of the image based on the "
                        "following visual attributes")
    assert "composition, balance, color harmony, lighting" in p
    img = solid((10, 200, 30))
    assert caption_attributes(ReferenceCaptioner(), img) == \
        caption_attributes(ReferenceCaptioner(), img, p)


def test_registry_from_config():
    reg = BackendRegistry.from_config({"joint32": {"kind": "reference-joint", "dim": 32}})
    assert {"ref-stats", "ref-joint", "ref-caption", "joint32"} <= set(reg.ids())
    assert reg.get("joint32").descriptor.dimension == 32
    with pytest.raises(ConfigError):
        BackendRegistry.from_config({"x": {"kind": "nope"}})
    with pytest.raises(BackendUnavailable):
        reg.get("missing")


@pytest.mark.parametrize("cls", [CLIPAdapter, DINOv2Adapter])
def test_pretrained_adapters_fail_cleanly_offline(monkeypatch, cls):
    monkeypatch.setenv("HF_HUB_OFFLINE", "1")
    monkeypatch.setenv("TRANSFORMERS_OFFLINE", "1")
    adapter = cls(model_name="stylefilter-test/does-not-exist")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(BackendUnavailable):
            embed_image(adapter, solid((1, 2, 3)))
