from __future__ import annotations

import argparse
import logging
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from ..errors import ConfigError, PrismError
from ..prism.protocols import final_score_table, ismr_table, run_ismr
from ..utils.plots import plot_ismr_curves
from ..utils.records import MetricsWriter, write_table

if TYPE_CHECKING:
    from ..cli import PrismCli

log = logging.getLogger(__name__)

MAP_TABLES = ("embedding", "decoder", "amplitudes")


class Ismr:
    def __init__(self, cli: "PrismCli") -> None:
        self.cli = cli

    async def __call__(self, args: argparse.Namespace) -> int:
        cfg = self.cli.experiment(args, **{"ismr.map_table": args.map_table, "train.peak_lr": args.lr})
        cfg = cfg.require("train.seeds")
        if cfg.ismr.map_table not in MAP_TABLES:
            raise ConfigError(f"ismr.map_table must be one of {', '.join(MAP_TABLES)}")
        corpus = self.cli.corpus(cfg, args)
        cfg = self.cli.bind_vocab(cfg, corpus)
        arch = cfg.model.arch

        def job(seed: int, run_dir: Path, run_id: str):
            writers = {s: MetricsWriter(run_dir / f"{s}.jsonl") for s in ("iter1", "iter2", "ablation")}
            try:
                run = run_ismr(
                    cfg.model, corpus, cfg.train, seed, cfg.ismr.map_table, run_dir,
                    sink=lambda stream, rec: writers[stream].write(rec),
                )
            finally:
                for w in writers.values():
                    w.close()
            e1 = run.semantic_map.matrix.data
            shuffled = run.ablation_map.matrix.data
            same_stats = np.array_equal(np.sort(e1, axis=0), np.sort(shuffled, axis=0))
            if not np.array_equal(run.iter2_initial, e1) or not same_stats:
                raise PrismError(f"{run_id}: transplanted or shuffled map does not match the extracted map")
            return {"iter2_starts_from_map": True, "ablation_is_permutation": same_stats}, run.streams

        outcomes = await self.cli.run_seeds("ismr", arch, cfg.train.seeds, cfg, args, job)
        runs = [o.result for o in outcomes if o.result is not None]
        if runs:
            base = self.cli.out_root(args) / "ismr" / arch
            rows = ismr_table(runs)
            write_table(base / "comparison.csv", rows)
            write_table(base / "final_scores.csv", final_score_table(runs))
            plot_ismr_curves(rows, base / "curves.png", title=f"ISMR ({arch}, {len(runs)} seeds)")
            first = rows[0] if rows else None
            if first:
                log.info("step %s: baseline %.2f, ismr %.2f, ablation %.2f",
                         first["step"], first["baseline"], first["ismr"], first["ablation"])
        return self.cli.exit_code(outcomes)


async def setup(cli: "PrismCli") -> None:
    sub = cli.add_command("ismr", Ismr(cli), "train, extract the semantic map, retrain on it and on a shuffled copy")
    sub.add_argument("--map-table", choices=MAP_TABLES, help="which table to transplant (ismr.map_table)")
    sub.add_argument("--lr", type=float, help="peak learning rate (train.peak_lr)")
