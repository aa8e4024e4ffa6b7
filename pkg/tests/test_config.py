import pytest

from stageflow.config import DEFAULTS, PRESETS, RunConfig, dump_toml, load_config
from stageflow.errors import ConfigurationError


def test_every_key_has_a_default():
    cfg = RunConfig()
    for key in DEFAULTS:
        assert cfg[key] == DEFAULTS[key]


def test_unknown_key_rejected():
    with pytest.raises(ConfigurationError):
        RunConfig({"nonsense.key": 1})
    with pytest.raises(ConfigurationError):
        RunConfig()["nonsense.key"]


def test_type_mismatch_rejected():
    with pytest.raises(ConfigurationError):
        RunConfig({"train.steps": "many"})
    with pytest.raises(ConfigurationError):
        RunConfig({"train.observer": 3})


def test_int_promotes_to_float_keys():
    cfg = RunConfig({"train.peak_lr": 1})
    assert cfg["train.peak_lr"] == 1.0 and isinstance(cfg["train.peak_lr"], float)


def test_fingerprint_changes_with_values():
    a = RunConfig()
    b = RunConfig({"train.steps": 17})
    assert a.fingerprint() != b.fingerprint()
    assert a.fingerprint() == RunConfig().fingerprint()
    assert len(a.fingerprint()) == 16


def test_arch_fingerprint_ignores_training_keys():
    a = RunConfig()
    b = RunConfig({"train.steps": 17, "bench.episodes": 3})
    c = RunConfig({"policy.d_model": 32})
    assert a.arch_fingerprint() == b.arch_fingerprint()
    assert a.arch_fingerprint() != c.arch_fingerprint()


def test_paper_scale_preset_values():
    cfg = load_config(preset="paper-scale")
    assert cfg["train.batch_size"] == 32
    assert cfg["train.steps"] == 60_000
    assert cfg["train.warmup"] == 3000
    assert cfg["train.peak_lr"] == 2.0e-5
    assert cfg["train.final_lr"] == 2.0e-6
    assert cfg["policy.chunk_len"] == 50
    assert cfg["policy.d_cue"] == 8192


def test_unknown_preset_rejected():
    with pytest.raises(ConfigurationError):
        load_config(preset="warehouse-scale")


def test_toml_load_and_overrides(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(
        'seed = 9\n[train]\nsteps = 11\nobserver = "oracle"\n[world]\nv_max = 0.1\n',
        encoding="utf-8",
    )
    cfg = load_config(path, overrides={"train.steps": 12})
    assert cfg["seed"] == 9
    assert cfg["train.steps"] == 12
    assert cfg["train.observer"] == "oracle"
    assert cfg["world.v_max"] == 0.1


def test_toml_unknown_key_rejected(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text("[world]\ngravity = 9.8\n", encoding="utf-8")
    with pytest.raises(ConfigurationError):
        load_config(path)


def test_dump_toml_round_trips(tmp_path):
    cfg = RunConfig({"seed": 3, "train.observer": "oracle", "world.v_max": 0.075})
    path = tmp_path / "out.toml"
    path.write_text(dump_toml(cfg), encoding="utf-8")
    again = load_config(path)
    assert again.as_dict() == cfg.as_dict()
    assert again.fingerprint() == cfg.fingerprint()


def test_presets_only_touch_known_keys():
    for name, overrides in PRESETS.items():
        for key in overrides:
            assert key in DEFAULTS, f"preset {name} sets unknown key {key}"
