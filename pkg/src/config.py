from __future__ import annotations

import json
import os
import types
import typing
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Iterable, Mapping

from dotenv import dotenv_values, load_dotenv

from .errors import ConfigError
from .prism.datagen import DataConfig
from .prism.models import ModelConfig
from .prism.protocols import InjectionConfig
from .prism.training import TrainConfig


@dataclass(frozen=True)
class Settings:
    log_level: str
    out_dir: Path
    registry_path: Path
    jobs: int


def load_settings() -> Settings:
    load_dotenv()

    log_level = os.getenv("PRISM_LOG_LEVEL", "INFO").upper()
    out_dir = Path(os.getenv("PRISM_OUT_DIR", "./runs"))
    registry_raw = os.getenv("PRISM_REGISTRY")
    registry_path = Path(registry_raw) if registry_raw else out_dir / "registry.db"
    jobs_raw = os.getenv("PRISM_JOBS", "1").strip()
    jobs = int(jobs_raw) if jobs_raw.isdigit() and int(jobs_raw) > 0 else 1

    return Settings(
        log_level=log_level,
        out_dir=out_dir,
        registry_path=registry_path,
        jobs=jobs,
    )


@dataclass(frozen=True)
class IsmrConfig:
    map_table: str = "embedding"


@dataclass(frozen=True)
class BenchConfig:
    n: tuple[int, ...] = (128, 256, 512, 1024, 2048, 4096)
    d: int = 64
    heads: int = 4
    reps: int = 11
    seed: int = 0
    fit_from: int | None = None
    pin: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    injection: InjectionConfig = field(default_factory=InjectionConfig)
    ismr: IsmrConfig = field(default_factory=IsmrConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def require(self, *keys: str) -> "ExperimentConfig":
        """Падает с именем поля, если поле без значения по умолчанию не задано."""
        for key in keys:
            section, name = key.split(".", 1)
            value = getattr(getattr(self, section), name)
            if value is None or value == ():
                raise ConfigError(f"missing config field: {key}")
        return self


SECTIONS = tuple(f.name for f in fields(ExperimentConfig))

PRESETS: dict[str, dict[str, str]] = {
    "ismr": {"train.peak_lr": "1e-4", "train.warmup_steps": "120"},
    "marathon": {"train.peak_lr": "8e-4", "train.warmup_steps": "120"},
    "aggressive": {"train.peak_lr": "8e-4", "train.warmup_steps": "120"},
    "deep": {"model.enc_layers": "6", "model.dec_layers": "6"},
    "wide": {"model.enc_layers": "1", "model.dec_layers": "1"},
    "low-energy": {"injection.lr": "5e-5", "injection.steps": "10"},
    "high-energy": {"injection.lr": "2e-4", "injection.steps": "5"},
}


def _coerce(key: str, raw: str, hint: Any) -> Any:
    raw = raw.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    try:
        if origin in (typing.Union, types.UnionType):
            if raw.lower() in ("", "none", "null"):
                return None
            inner = next(a for a in args if a is not type(None))
            return _coerce(key, raw, inner)
        if origin is typing.Literal:
            if raw not in args:
                raise ValueError(f"expected one of {', '.join(map(str, args))}")
            return raw
        if origin is tuple:
            return tuple(_coerce(key, part, args[0]) for part in raw.split(",") if part.strip())
        if hint is bool:
            if raw.lower() not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError("expected a boolean")
            return raw.lower() in ("1", "true", "yes")
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is str:
            return raw
        if hint is Path:
            return Path(raw)
    except (ValueError, StopIteration) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None
    raise ConfigError(f"unsupported config type for {key}: {hint}")


def apply_overrides(cfg: ExperimentConfig, values: Mapping[str, str | None]) -> ExperimentConfig:
    """Накладывает строки ``section.field=value`` поверх ``cfg``."""
    updates: dict[str, dict[str, Any]] = {}
    for key, raw in values.items():
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"unknown config key: {key}")
        current = getattr(cfg, section)
        hints = typing.get_type_hints(type(current))
        if name not in {f.name for f in fields(current)}:
            raise ConfigError(f"unknown config key: {key}")
        updates.setdefault(section, {})[name] = _coerce(key, raw or "", hints[name])
    return replace(cfg, **{s: replace(getattr(cfg, s), **kv) for s, kv in updates.items()})


def read_config_file(path: Path) -> dict[str, str | None]:
    """Ключи из файла в формате dotenv или из снимка в манифесте прогона."""
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    if path.suffix == ".json":
        try:
            snapshot = json.loads(path.read_text(encoding="utf-8"))["config"]
        except (json.JSONDecodeError, KeyError) as exc:
            raise ConfigError(f"{path} is not a run manifest: {exc}") from None
        return {k: str(v) for k, v in snapshot.items()}
    return dict(dotenv_values(path))


def load_experiment(
    path: Path | None = None,
    presets: Iterable[str] = (),
    flags: Mapping[str, str] | None = None,
    overrides: Mapping[str, str] | None = None,
) -> ExperimentConfig:
    """Приоритет: умолчания < файл < пресеты < отдельные флаги < ``--set``."""
    cfg = ExperimentConfig()
    if path is not None:
        cfg = apply_overrides(cfg, read_config_file(path))
    for name in presets:
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r} (known: {', '.join(PRESETS)})")
        cfg = apply_overrides(cfg, PRESETS[name])
    cfg = apply_overrides(cfg, flags or {})
    return apply_overrides(cfg, overrides or {})


def to_dotted(cfg: ExperimentConfig) -> dict[str, str]:
    """Плоский словарь строк, который ``read_config_file`` принимает обратно."""
    out: dict[str, str] = {}
    for section in SECTIONS:
        sub = getattr(cfg, section)
        assert is_dataclass(sub)
        for f in fields(sub):
            value = getattr(sub, f.name)
            if value is None:
                text = "none"
            elif isinstance(value, tuple):
                text = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                text = "true" if value else "false"
            else:
                text = repr(value) if isinstance(value, float) else str(value)
            out[f"{section}.{f.name}"] = text
    return out
