from __future__ import annotations

import json
import logging
import shutil
import subprocess
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from ..errors import ConfigError

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
COMPLETE = "COMPLETE"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def build_revision() -> str:
    """Коммит рабочей копии git или ``unknown`` вне репозитория."""
    git = shutil.which("git")
    if git is None:
        return "unknown"
    try:
        out = subprocess.run([git, "rev-parse", "--short", "HEAD"], capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 else "unknown"


@dataclass(frozen=True)
class RunManifest:
    run_id: str
    experiment: str
    arch: str
    seeds: tuple[int, ...]
    out_dir: str
    config: dict[str, str]
    extra: dict[str, Any] = field(default_factory=dict)
    revision: str = field(default_factory=build_revision)
    started_at: str = field(default_factory=_now)


def prepare_run_dir(run_dir: Path, force: bool) -> None:
    """Не даёт занять каталог с манифестом без --force."""
    if (run_dir / MANIFEST).exists():
        if not force:
            raise ConfigError(f"{run_dir} already holds a run; pass --force to overwrite")
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)


def write_manifest(run_dir: Path, manifest: RunManifest) -> Path:
    path = run_dir / MANIFEST
    payload = asdict(manifest)
    payload["seeds"] = list(manifest.seeds)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_manifest(run_dir: Path) -> dict[str, Any]:
    return json.loads((run_dir / MANIFEST).read_text(encoding="utf-8"))


def mark_complete(run_dir: Path, **info: Any) -> Path:
    path = run_dir / COMPLETE
    path.write_text(json.dumps({"finished_at": _now(), **info}, sort_keys=True) + "\n", encoding="utf-8")
    return path


def is_complete(run_dir: Path) -> bool:
    return (run_dir / COMPLETE).exists()


def find_incomplete(root: Path) -> list[Path]:
    """Каталоги прогонов под ``root``, где есть манифест, но нет отметки о завершении."""
    if not root.exists():
        return []
    return sorted(p.parent for p in root.rglob(MANIFEST) if not is_complete(p.parent))
