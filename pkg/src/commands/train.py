from __future__ import annotations

import argparse
import logging
from pathlib import Path
from typing import TYPE_CHECKING

from ..prism.models import count_params, init_model
from ..prism.training import train
from ..utils.records import MetricsWriter, write_table

if TYPE_CHECKING:
    from ..cli import PrismCli

log = logging.getLogger(__name__)


class Train:
    def __init__(self, cli: "PrismCli") -> None:
        self.cli = cli

    async def __call__(self, args: argparse.Namespace) -> int:
        cfg = self.cli.experiment(args, **{"train.peak_lr": args.lr, "train.steps": args.steps})
        cfg = cfg.require("train.seeds")
        corpus = self.cli.corpus(cfg, args)
        cfg = self.cli.bind_vocab(cfg, corpus)

        def job(seed: int, run_dir: Path, run_id: str):
            model = init_model(cfg.model, seed)
            params = count_params(model)
            write_table(run_dir / "params.csv", [params.as_row()])
            last = None
            with MetricsWriter(run_dir / "metrics.jsonl") as writer:
                for record in train(model, corpus, cfg.train, seed, run_id, checkpoint_path=run_dir / "final.ckpt"):
                    writer.write(record)
                    last = record
            return {"test_bleu": last.bleu if last else None, "params": params.total}, last

        outcomes = await self.cli.run_seeds("train", cfg.model.arch, cfg.train.seeds, cfg, args, job)
        for o in outcomes:
            if o.result is not None:
                log.info("seed %d: test loss %.4f, BLEU %.2f", o.seed, o.result.loss, o.result.bleu)
        return self.cli.exit_code(outcomes)


async def setup(cli: "PrismCli") -> None:
    sub = cli.add_command("train", Train(cli), "train one architecture for every seed")
    sub.add_argument("--lr", type=float, help="peak learning rate (train.peak_lr)")
    sub.add_argument("--steps", type=int, help="step budget (train.steps)")
