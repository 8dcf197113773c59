from __future__ import annotations

import csv
import json
from dataclasses import asdict
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from ..prism.evaluation import MetricsRecord
from ..prism.protocols import AcquisitionResult, ConceptResult, InjectionRun


class MetricsWriter:
    """Поток метрик одного прогона, JSON по строке, только дозапись."""

    def __init__(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        self.path = path
        self._fh = open(path, "a", encoding="utf-8")

    def write(self, record: MetricsRecord) -> None:
        self._fh.write(json.dumps(record.as_dict(), sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_metrics(path: Path) -> list[MetricsRecord]:
    records = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            records.append(MetricsRecord(**json.loads(line)))
    return records


def write_table(path: Path, rows: Sequence[Sequence[Any]] | Sequence[Mapping[str, Any]]) -> Path:
    """CSV с заголовком; у строк-словарей заголовок берётся из ключей."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if rows and isinstance(rows[0], Mapping):
            header: list[str] = []
            for row in rows:
                header += [k for k in row if k not in header]
            writer = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)  # type: ignore[arg-type]
        else:
            csv.writer(fh, lineterminator="\n").writerows(rows)  # type: ignore[arg-type]
    return path


def write_lines(path: Path, lines: Iterable[str]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{line}\n" for line in lines), encoding="utf-8")
    return path


def injection_to_dict(run: InjectionRun) -> dict[str, Any]:
    def acq(result: AcquisitionResult) -> list[dict[str, int]]:
        return [asdict(c) for c in result.concepts]

    return {
        "label": run.label,
        "seed": run.seed,
        "lr": run.lr,
        "steps": run.steps,
        "updates": run.updates,
        "pre_bleu": run.pre_bleu,
        "post_bleu": run.post_bleu,
        "stability_delta": run.stability_delta,
        "pre": acq(run.pre),
        "post": acq(run.post),
        "interference": list(run.interference),
    }


def injection_from_dict(data: Mapping[str, Any]) -> InjectionRun:
    def acq(rows) -> AcquisitionResult:
        return AcquisitionResult(tuple(ConceptResult(**r) for r in rows))

    return InjectionRun(
        data["label"], data["seed"], data["lr"], data["steps"], data["updates"],
        data["pre_bleu"], data["post_bleu"], acq(data["pre"]), acq(data["post"]),
        interference=list(data.get("interference", [])),
    )
