"""Run-configuration parsing and defaults."""
import pytest

from mrclink.config import EncoderSettings, RunConfig
from mrclink.errors import InputFormatError


def test_defaults_match_documented_configuration():
    cfg = RunConfig()
    assert cfg.k == 5
    assert (cfg.alpha1, cfg.alpha2) == (0.75, 0.25)
    assert cfg.beta == 0.5
    assert cfg.nil_threshold == 0.5
    assert cfg.warmup == pytest.approx(0.1)
    assert (cfg.max_len_local, cfg.max_len_global) == (256, 512)
    assert cfg.encoder == EncoderSettings(d=64, n_layers=1, n_heads=2)


def test_file_round_trip_uses_uppercase_k(tmp_path):
    cfg = RunConfig(k=7, beta=0.25, no_rerank=True)
    path = tmp_path / "cfg.json"
    cfg.save(str(path))
    text = path.read_text(encoding="utf-8")
    assert '"K": 7' in text
    assert RunConfig.from_file(str(path)) == cfg


def test_lowercase_k_accepted():
    assert RunConfig.from_dict({"k": 3}).k == 3


def test_conflicting_k_keys_rejected():
    with pytest.raises(InputFormatError):
        RunConfig.from_dict({"K": 1, "k": 2})


def test_unknown_keys_rejected():
    with pytest.raises(InputFormatError):
        RunConfig.from_dict({"gamma": 1.0})
    with pytest.raises(InputFormatError):
        RunConfig.from_dict({"encoder": {"d": 8, "layers": 1}})


def test_invalid_values_rejected():
    with pytest.raises(InputFormatError):
        RunConfig(beta=1.5)
    with pytest.raises(InputFormatError):
        RunConfig(k=0)
    with pytest.raises(InputFormatError):
        RunConfig(alpha1=0.0, alpha2=0.0)
    with pytest.raises(InputFormatError):
        RunConfig(gate_mode="other")
