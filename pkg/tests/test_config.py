import os

import pytest

from screwgait.config import (ConfigError, RunConfig, apply_overrides, config_hash,
                              copy_config, dump_config, global_seed, load_config,
                              preset)


def test_defaults_consistent():
    cfg = RunConfig()
    assert cfg.sim.dt_control * cfg.term.episode_len == pytest.approx(40.0)
    assert cfg.sim.dt_control / cfg.sim.substeps == pytest.approx(0.005)
    assert cfg.env.obs_window * 24 == 72


def test_preset_task_fields():
    nb = preset("nutbolt", "eval")
    assert nb.object.sides == 6 and nb.object.pitch == 0.002
    nbt = preset("nutbolt", "train")
    assert nbt.object.pitch == 0.0
    sd = preset("screwdriver", "eval")
    assert sd.object.sides == 24 and sd.object.pitch == 0.006
    with pytest.raises(ConfigError):
        preset("wrench")
    with pytest.raises(ConfigError):
        preset("nutbolt", "demo")


def test_override_round_trip(tmp_path):
    cfg = preset("nutbolt", "train")
    cfg.ppo.lr = 0.0012
    cfg.env.num_envs = 17
    text = dump_config(cfg)
    back = apply_overrides(RunConfig(), text)
    assert back.ppo.lr == 0.0012
    assert back.env.num_envs == 17
    assert dump_config(back) == text
    p = tmp_path / "run.cfg"
    p.write_text(text)
    again = load_config(str(p))
    assert dump_config(again) == text


def test_override_types_and_comments():
    cfg = apply_overrides(RunConfig(), """
# comment line
[ppo]
lr = 1e-4       # inline comment
value_norm = false
epochs = 7

[env]
task = screwdriver
""")
    assert cfg.ppo.lr == 1e-4
    assert cfg.ppo.value_norm is False
    assert cfg.ppo.epochs == 7
    assert cfg.env.task == "screwdriver"


def test_unknown_key_names_the_key():
    with pytest.raises(ConfigError) as e:
        apply_overrides(RunConfig(), "[ppo]\nlearning_rate = 1e-3\n")
    assert e.value.key == "ppo.learning_rate"
    with pytest.raises(ConfigError) as e:
        apply_overrides(RunConfig(), "[optimizer]\nlr = 1e-3\n")
    assert e.value.key == "optimizer"
    with pytest.raises(ConfigError) as e:
        apply_overrides(RunConfig(), "lr = 1e-3\n")
    assert e.value.key == "lr"
    with pytest.raises(ConfigError) as e:
        apply_overrides(RunConfig(), "[ppo]\nepochs = soon\n")
    assert e.value.key == "ppo.epochs"


def test_config_hash_tracks_content():
    a = preset("nutbolt", "train")
    b = preset("nutbolt", "train")
    assert config_hash(a) == config_hash(b)
    b.reward.lambda_rotate = 5.9
    assert config_hash(a) != config_hash(b)


def test_copy_is_deep_for_sections():
    a = preset("nutbolt", "train")
    b = copy_config(a)
    b.ppo.lr = 99.0
    assert a.ppo.lr != 99.0


def test_seed_env_var(monkeypatch):
    cfg = RunConfig()
    cfg.env.seed = 5
    monkeypatch.delenv("SCREWGAIT_SEED", raising=False)
    assert global_seed(cfg) == 5
    monkeypatch.setenv("SCREWGAIT_SEED", "42")
    assert global_seed(cfg) == 42
    monkeypatch.setenv("SCREWGAIT_SEED", "pi")
    with pytest.raises(ConfigError):
        global_seed(cfg)
