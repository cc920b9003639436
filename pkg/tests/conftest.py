import numpy as np
import pytest

from stylefilter.aesthetic import AestheticScorer, AestheticTrainConfig, train_aesthetic
from stylefilter.cache import EmbeddingService
from stylefilter.content import ContentScorer
from stylefilter.filtering import Scorers
from stylefilter.style import StyleEncoderCheckpoint, StyleScorer
from stylefilter.synthetic import make_rated_corpus, make_toy_manifest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def rated_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("rated")
    rows, w, bias = make_rated_corpus(root, n=64, seed=0)
    return root, rows, w, bias


@pytest.fixture(scope="session")
def aesthetic_ckpt(rated_corpus, tmp_path_factory):
    _, rows, _, _ = rated_corpus
    cfg = AestheticTrainConfig(epochs_stage1=60, epochs_stage2=0)
    ckpt = train_aesthetic(rows, [], cfg, EmbeddingService())
    path = tmp_path_factory.mktemp("ckpt") / "aesthetic.ckpt"
    ckpt.save(path)
    return ckpt, path


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    make_toy_manifest(root, n_groups=5, n_candidates=6, seed=0)
    return root


def make_scorers(aesthetic_ckpt, service=None):
    service = service or EmbeddingService()
    return Scorers(ContentScorer(service), StyleScorer(service, StyleEncoderCheckpoint.identity("ref-stats")),
                   AestheticScorer(service, aesthetic_ckpt))


@pytest.fixture
def scorers(aesthetic_ckpt):
    return make_scorers(aesthetic_ckpt[0])


@pytest.fixture(scope="session")
def style_corpus(tmp_path_factory):
    from stylefilter.data import load_style_corpus
    from stylefilter.synthetic import make_style_corpus

    root = tmp_path_factory.mktemp("styles")
    make_style_corpus(root / "train", n_per_style=32, seed=0)
    make_style_corpus(root / "heldout", n_per_style=8, seed=1)
    return load_style_corpus(root / "train"), load_style_corpus(root / "heldout")


@pytest.fixture(scope="session")
def trained_style(style_corpus):
    from stylefilter.style import ContrastiveTrainConfig, train_style_encoder

    return train_style_encoder(style_corpus[0], ContrastiveTrainConfig(epochs=10, seed=0),
                               EmbeddingService())


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
