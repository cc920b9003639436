import pytest

from stylefilter import config as C
from stylefilter.errors import ConfigError


def test_defaults_match_published_values():
    cfg = C.load_config()
    assert cfg["content"]["alpha"] == 0.5
    assert cfg["filter"]["weights"] == [0.2, 0.6, 0.2]
    assert cfg["style"]["temperature"] == 0.07
    f = C.filter_config(cfg)
    assert f.weights == (0.2, 0.6, 0.2) and f.alpha == 0.5


def test_flags_override_file(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("seed: 3\ncontent:\n  alpha: 0.3\nfilter:\n  weights: [1, 0, 0]\n")
    cfg = C.load_config(p, {"content.alpha": 0.7, "seed": None})
    assert cfg["content"]["alpha"] == 0.7
    assert cfg["seed"] == 3
    assert C.filter_config(cfg).weights == (1.0, 0.0, 0.0)


@pytest.mark.parametrize("text", ["bogus: 1\n", "content:\n  beta: 2\n", "content: 5\n", "- 1\n",
                                  "content: [\n"])
def test_bad_config_files(tmp_path, text):
    p = tmp_path / "c.yaml"
    p.write_text(text)
    with pytest.raises(ConfigError):
        C.load_config(p)


def test_unknown_override():
    with pytest.raises(ConfigError):
        C.load_config(None, {"filter.nope": 1})


def test_parse_weights():
    assert C.parse_weights("0.2,0.6,0.2") == [0.2, 0.6, 0.2]
    for bad in ("1,2", "a,b,c"):
        with pytest.raises(ConfigError):
            C.parse_weights(bad)


def test_hash_ignores_runtime_keys_and_tracks_checkpoint_bytes(tmp_path):
    base = C.load_config()
    assert C.config_hash(base) == C.config_hash(C.load_config(None, {"jobs": 8, "cache_dir": "x"}))
    assert C.config_hash(base) != C.config_hash(C.load_config(None, {"seed": 1}))
    ck = tmp_path / "a.ckpt"
    ck.write_bytes(b"one")
    cfg = C.load_config(None, {"aesthetic.checkpoint": str(ck)})
    h1 = C.config_hash(cfg)
    ck.write_bytes(b"two")
    assert C.config_hash(cfg) != h1


def test_relative_checkpoint_resolves_from_config_dir(tmp_path):
    (tmp_path / "sub").mkdir()
    p = tmp_path / "sub" / "c.yaml"
    p.write_text("aesthetic:\n  checkpoint: a.ckpt\n")
    assert C.load_config(p)["aesthetic"]["checkpoint"] == str((tmp_path / "sub" / "a.ckpt").resolve())


def test_missing_aesthetic_checkpoint_is_config_error():
    with pytest.raises(ConfigError):
        C.build_scorers(C.load_config())


def test_custom_backends_reach_scorers(aesthetic_ckpt):
    cfg = C.load_config(None, {"aesthetic.checkpoint": str(aesthetic_ckpt[1])})
    cfg["backends"] = {"stats2": {"kind": "reference-stats", "grid": 2}}
    cfg["content"]["structural_backend"] = "stats2"
    scorers = C.build_scorers(cfg)
    assert scorers.backend_ids()["structural"] == "stats2"
    assert scorers.content.service.descriptor("stats2").dimension == 18
