from __future__ import annotations

import argparse
import csv
import json
import logging
from pathlib import Path
from typing import TYPE_CHECKING

from ..prism.bench import scaling_from_rows
from ..prism.protocols import STREAMS, final_score_table, injection_summary, ismr_table
from ..utils.manifest import find_incomplete, is_complete, read_manifest
from ..utils.plots import plot_ismr_curves, plot_scaling
from ..utils.records import injection_from_dict, read_metrics, write_table

if TYPE_CHECKING:
    from ..cli import PrismCli

log = logging.getLogger(__name__)


def rebuild_ismr(root: Path) -> list[Path]:
    written = []
    for arch_dir in sorted(p for p in (root / "ismr").glob("*") if p.is_dir()):
        runs = []
        for seed_dir in sorted(p for p in arch_dir.iterdir() if p.is_dir()):
            if not is_complete(seed_dir):
                continue
            runs.append({s: read_metrics(seed_dir / f"{s}.jsonl") for s in STREAMS})
        if not runs:
            continue
        rows = ismr_table(runs)
        written.append(write_table(arch_dir / "comparison.csv", rows))
        written.append(write_table(arch_dir / "final_scores.csv", final_score_table(runs)))
        written.append(plot_ismr_curves(rows, arch_dir / "curves.png", title=f"ISMR ({arch_dir.name}, {len(runs)} seeds)"))
    return written


def rebuild_injection(root: Path) -> list[Path]:
    """Общая сводка: столбец на каждый прогон внедрения (архитектура, настройка, сид)."""
    columns = {}
    for path in sorted((root / "inject").rglob("injection.json")):
        if not is_complete(path.parent):
            continue
        run = injection_from_dict(json.loads(path.read_text(encoding="utf-8")))
        columns[f"{run.label} lr={run.lr:g} steps={run.steps}"] = run
    if not columns:
        return []
    return [write_table(root / "inject" / "summary.csv", injection_summary(columns))]


def rebuild_bench(root: Path) -> list[Path]:
    bench = root / "bench"
    if not (bench / "scaling.csv").exists() or not is_complete(bench):
        return []
    with open(bench / "scaling.csv", newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    d = int(read_manifest(bench)["config"].get("bench.d", 64))
    return [plot_scaling(scaling_from_rows(rows, d), bench / "scaling.png")]


class Report:
    def __init__(self, cli: "PrismCli") -> None:
        self.cli = cli

    async def __call__(self, args: argparse.Namespace) -> int:
        root = self.cli.out_root(args)
        written = rebuild_ismr(root) + rebuild_injection(root) + rebuild_bench(root)
        for path in written:
            log.info("Wrote %s", path)

        rows = [["source", "run", "status", "error"]]
        for run_id, status, run_dir, error in await self.cli.registry.incomplete_runs():
            rows.append(["registry", run_id, status, error])
        for run_dir in find_incomplete(root):
            rows.append(["manifest", str(run_dir), "incomplete", ""])
        write_table(root / "incomplete.csv", rows)
        if len(rows) > 1:
            log.warning("%d incomplete run entries, see %s", len(rows) - 1, root / "incomplete.csv")
        return 0


async def setup(cli: "PrismCli") -> None:
    cli.add_command("report", Report(cli), "rebuild tables and figures, list incomplete runs")
