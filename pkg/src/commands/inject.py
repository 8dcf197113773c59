from __future__ import annotations

import argparse
import json
import logging
from pathlib import Path
from typing import TYPE_CHECKING

from ..errors import ConfigError
from ..prism.checkpoint import load_checkpoint
from ..prism.datagen import make_injection_set
from ..prism.protocols import concept_breakdown, injection_summary, run_injection
from ..utils.records import injection_to_dict, write_table

if TYPE_CHECKING:
    from ..cli import PrismCli

log = logging.getLogger(__name__)


def setting_name(lr: float, steps: int, separate: bool) -> str:
    return f"lr{lr:g}-steps{steps}" + ("-separate" if separate else "")


class Inject:
    def __init__(self, cli: "PrismCli") -> None:
        self.cli = cli

    def checkpoints(self, args: argparse.Namespace, cfg) -> dict[int, Path]:
        """Сид -> чекпоинт, из --checkpoint или из результатов команды train."""
        if args.checkpoint:
            found = {}
            for i, path in enumerate(args.checkpoint):
                if not path.exists():
                    raise ConfigError(f"checkpoint not found: {path}")
                _, meta = load_checkpoint(path)
                found[int(meta.get("seed", i))] = path
            return found
        cfg.require("train.seeds")
        root = self.cli.out_root(args) / "train" / cfg.model.arch
        found = {seed: root / str(seed) / "final.ckpt" for seed in cfg.train.seeds}
        missing = [str(p) for p in found.values() if not p.exists()]
        if missing:
            raise ConfigError(f"no trained checkpoint at {', '.join(missing)}; run `train` first or pass --checkpoint")
        return found

    async def __call__(self, args: argparse.Namespace) -> int:
        flags = {
            "injection.lr": args.lr,
            "injection.steps": args.steps,
            "injection.separate_batches": "true" if args.separate_batches else None,
        }
        cfg = self.cli.experiment(args, **flags)
        corpus = self.cli.corpus(cfg, args)
        cfg = self.cli.bind_vocab(cfg, corpus)
        inj = cfg.injection.validate()
        injection_set = make_injection_set(
            corpus.lexicon, corpus.grammar, corpus.grammar.seed, inj.n_concepts, inj.per_concept, inj.eval_per_concept
        )
        paths = self.checkpoints(args, cfg)
        archs = {load_checkpoint(p)[0].arch for p in paths.values()}
        if len(archs) != 1:
            raise ConfigError(f"checkpoints mix architectures: {sorted(archs)}")
        arch = archs.pop()
        setting = setting_name(inj.lr, inj.steps, inj.separate_batches)
        root = self.cli.out_root(args) / "inject" / arch

        def job(seed: int, run_dir: Path, run_id: str):
            run = run_injection(paths[seed], injection_set, corpus, inj, seed, label=f"{arch}-{seed}", out_dir=run_dir)
            (run_dir / "injection.json").write_text(json.dumps(injection_to_dict(run), indent=2) + "\n", encoding="utf-8")
            write_table(run_dir / "concepts.csv", concept_breakdown(run))
            write_table(run_dir / "summary.csv", injection_summary({run.label: run}))
            return {"updates": run.updates, "stability_delta": run.stability_delta}, run

        outcomes = await self.cli.run_seeds(
            "inject", arch, sorted(paths), cfg, args, job,
            run_dir_for=lambda seed: root / str(seed) / setting,
            extra={"checkpoints": {str(s): str(p) for s, p in paths.items()}, "lr": inj.lr, "steps": inj.steps},
        )
        runs = {o.result.label: o.result for o in outcomes if o.result is not None}
        if runs:
            write_table(root / f"summary-{setting}.csv", injection_summary(runs))
            best = max(runs.values(), key=lambda r: (r.post.score, r.stability_delta))
            log.info("Best seed %d: acquisition %s, stability delta %+.2f", best.seed, best.post.label(), best.stability_delta)
        return self.cli.exit_code(outcomes)


async def setup(cli: "PrismCli") -> None:
    sub = cli.add_command("inject", Inject(cli), "few-shot novel concept injection into trained checkpoints")
    sub.add_argument("--checkpoint", type=Path, action="append", help="trained checkpoint, repeatable")
    sub.add_argument("--lr", type=float, help="constant injection learning rate (injection.lr)")
    sub.add_argument("--steps", type=int, help="gradient steps (injection.steps)")
    sub.add_argument("--separate-batches", action="store_true", help="one batch per concept; logs interference")
