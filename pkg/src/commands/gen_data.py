from __future__ import annotations

import argparse
import logging
from typing import TYPE_CHECKING

import humanize

from ..prism.datagen import corpus_from_config, write_corpus

if TYPE_CHECKING:
    from ..cli import PrismCli

log = logging.getLogger(__name__)


class GenData:
    def __init__(self, cli: "PrismCli") -> None:
        self.cli = cli

    async def __call__(self, args: argparse.Namespace) -> int:
        cfg = self.cli.experiment(args, seed_key="data.seed").require("data.seed")
        out = self.cli.out_root(args) / "data"

        def job(seed: int, run_dir, run_id: str):
            corpus = corpus_from_config(cfg.data)
            files = write_corpus(corpus, run_dir)
            log.info(
                "Wrote %s/%s/%s pairs, vocabulary of %s tokens, to %s",
                humanize.intcomma(len(corpus.train)), humanize.intcomma(len(corpus.valid)),
                humanize.intcomma(len(corpus.test)), humanize.intcomma(corpus.vocab.size), run_dir,
            )
            return {"files": [f.name for f in files], "vocab_hash": corpus.vocab.hash}, None

        outcomes = await self.cli.run_seeds("data", "corpus", [cfg.data.seed], cfg, args, job, run_dir_for=lambda _: out)
        return self.cli.exit_code(outcomes)


async def setup(cli: "PrismCli") -> None:
    cli.add_command("gen-data", GenData(cli), "generate the synthetic corpus and vocabulary files")
