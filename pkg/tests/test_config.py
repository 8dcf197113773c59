from __future__ import annotations

import json
from pathlib import Path

import pytest

from src.config import (
    PRESETS,
    ExperimentConfig,
    apply_overrides,
    load_experiment,
    load_settings,
    read_config_file,
    to_dotted,
)
from src.errors import ConfigError

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def test_defaults():
    cfg = load_experiment()
    assert cfg.data.seed is None
    assert cfg.train.steps == 1200 and cfg.train.peak_lr == 1e-4
    assert cfg.train.eval_steps == (200, 400, 800, 1200)
    assert cfg.injection.lr == 2e-4 and cfg.injection.steps == 10
    assert cfg.bench.reps == 11 and cfg.bench.pin is True


def test_marathon_preset():
    cfg = load_experiment(presets=["marathon"])
    assert cfg.train.peak_lr == 8e-4 and cfg.train.warmup_steps == 120
    with pytest.raises(ConfigError, match="unknown preset"):
        load_experiment(presets=["turbo"])


def test_injection_presets_differ_in_energy():
    low = load_experiment(presets=["low-energy"]).injection
    high = load_experiment(presets=["high-energy"]).injection
    assert low.lr * low.steps < high.lr * high.steps
    assert set(PRESETS) >= {"ismr", "marathon", "deep", "wide"}


@pytest.mark.parametrize("key", ["train.nope", "nosection.steps", "train"])
def test_unknown_key(key):
    with pytest.raises(ConfigError, match="unknown config key"):
        apply_overrides(ExperimentConfig(), {key: "1"})


@pytest.mark.parametrize(
    "key, raw",
    [("train.steps", "many"), ("model.arch", "rnn"), ("bench.pin", "maybe"), ("train.seeds", "1,x")],
)
def test_bad_value_names_the_key(key, raw):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        apply_overrides(ExperimentConfig(), {key: raw})


def test_value_coercion():
    cfg = apply_overrides(
        ExperimentConfig(),
        {"train.seeds": "1, 2,3", "train.floor_lr": "none", "bench.fit_from": "512", "bench.pin": "no",
         "model.dropout": "0.1", "data.grammar": "block-reverse"},
    )
    assert cfg.train.seeds == (1, 2, 3)
    assert cfg.train.floor_lr is None
    assert cfg.bench.fit_from == 512 and cfg.bench.pin is False
    assert cfg.model.dropout == 0.1
    assert cfg.data.grammar == "block-reverse"


def test_precedence(tiny_env):
    assert load_experiment(tiny_env).train.steps == 2
    flagged = load_experiment(tiny_env, flags={"train.steps": "5"})
    assert flagged.train.steps == 5
    overridden = load_experiment(tiny_env, presets=["marathon"], flags={"train.steps": "5"},
                                 overrides={"train.steps": "9", "train.peak_lr": "3e-4"})
    assert overridden.train.steps == 9 and overridden.train.peak_lr == 3e-4
    assert overridden.train.warmup_steps == 120


@pytest.mark.parametrize("name", ["desk.env", "toy.env"])
def test_shipped_configs_load(name):
    cfg = load_experiment(CONFIGS / name)
    cfg.require("data.seed", "train.seeds")
    cfg.train.validate()


def test_dotted_form_round_trips(tiny_env):
    cfg = load_experiment(tiny_env, presets=["deep"])
    assert apply_overrides(ExperimentConfig(), to_dotted(cfg)) == cfg


def test_require_names_the_missing_field():
    with pytest.raises(ConfigError, match="missing config field: data.seed"):
        ExperimentConfig().require("data.seed")
    with pytest.raises(ConfigError, match="train.seeds"):
        ExperimentConfig().require("train.seeds")


def test_manifest_snapshot_as_config(tiny_env, tmp_path):
    snapshot = to_dotted(load_experiment(tiny_env))
    manifest = tmp_path / "manifest.json"
    manifest.write_text(json.dumps({"run_id": "r", "config": snapshot}), encoding="utf-8")
    assert read_config_file(manifest) == snapshot
    assert load_experiment(manifest) == load_experiment(tiny_env)

    broken = tmp_path / "other.json"
    broken.write_text("{}", encoding="utf-8")
    with pytest.raises(ConfigError, match="not a run manifest"):
        read_config_file(broken)
    with pytest.raises(ConfigError, match="not found"):
        read_config_file(tmp_path / "missing.env")


def test_settings_from_environment(monkeypatch, tmp_path):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("PRISM_LOG_LEVEL", "debug")
    monkeypatch.setenv("PRISM_OUT_DIR", str(tmp_path / "runs"))
    monkeypatch.delenv("PRISM_REGISTRY", raising=False)
    monkeypatch.setenv("PRISM_JOBS", "zero")
    settings = load_settings()
    assert settings.log_level == "DEBUG"
    assert settings.registry_path == tmp_path / "runs" / "registry.db"
    assert settings.jobs == 1

    monkeypatch.setenv("PRISM_JOBS", "3")
    monkeypatch.setenv("PRISM_REGISTRY", str(tmp_path / "reg.db"))
    settings = load_settings()
    assert settings.jobs == 3 and settings.registry_path == tmp_path / "reg.db"
