from __future__ import annotations

import argparse
import logging
from pathlib import Path
from typing import TYPE_CHECKING

from ..prism.bench import PRIMITIVES, run_bench
from ..utils.plots import plot_scaling
from ..utils.records import write_lines, write_table

if TYPE_CHECKING:
    from ..cli import PrismCli

log = logging.getLogger(__name__)


class Bench:
    def __init__(self, cli: "PrismCli") -> None:
        self.cli = cli

    async def __call__(self, args: argparse.Namespace) -> int:
        cfg = self.cli.experiment(args, **{"bench.n": args.n, "bench.reps": args.reps, "bench.d": args.d})
        b = cfg.bench
        out = self.cli.out_root(args) / "bench"

        def job(seed: int, run_dir: Path, run_id: str):
            report = run_bench(PRIMITIVES, b.n, b.d, b.reps, b.heads, b.seed, b.fit_from, b.pin)
            write_table(run_dir / "scaling.csv", report.rows())
            write_lines(run_dir / "summary.csv", report.summary_lines())
            write_table(run_dir / "machine.csv", [report.metadata])
            plot_scaling(report, run_dir / "scaling.png")
            for line in report.summary_lines():
                log.info("%s", line)
            return {"crossover_missing": report.crossover_missing}, report

        outcomes = await self.cli.run_seeds("bench", "mixers", [b.seed], cfg, args, job, run_dir_for=lambda _: out)
        # отсутствие выигрыша GHC отмечается в отчёте, но ошибкой не считается
        return self.cli.exit_code(outcomes)


async def setup(cli: "PrismCli") -> None:
    sub = cli.add_command("bench", Bench(cli), "time attention against GHC and fit log-log slopes")
    sub.add_argument("--n", help="comma-separated sequence lengths (bench.n)")
    sub.add_argument("--reps", type=int, help="timed repetitions per length (bench.reps)")
    sub.add_argument("--d", type=int, help="model width (bench.d)")
