from __future__ import annotations

import argparse
import asyncio
import importlib
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Awaitable, Callable, Sequence

import humanize

from .config import ExperimentConfig, Settings, load_experiment, load_settings, to_dotted
from .errors import ConfigError, PrismError, VocabMismatchError
from .prism.datagen import Corpus, corpus_from_config, load_corpus
from .utils.db import RunRegistry
from .utils.logging_setup import run_log, setup_logging
from .utils.manifest import RunManifest, mark_complete, prepare_run_dir, write_manifest

log = logging.getLogger(__name__)

EXTENSIONS = (
    "src.commands.gen_data",
    "src.commands.train",
    "src.commands.ismr",
    "src.commands.inject",
    "src.commands.bench",
    "src.commands.report",
)

USAGE_ERRORS = (ConfigError, VocabMismatchError)
Handler = Callable[[argparse.Namespace], Awaitable[int]]
Job = Callable[[int, Path, str], tuple[dict[str, Any], Any]]


@dataclass
class RunOutcome:
    seed: int
    run_dir: Path
    result: Any = None
    error: BaseException | None = None


def _seed_list(text: str) -> str:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts or not all(p.lstrip("-").isdigit() for p in parts):
        raise argparse.ArgumentTypeError(f"expected N[,N...], got {text!r}")
    return ",".join(parts)


def _key_value(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    return key.strip(), value


class PrismCli:
    def __init__(self, settings: Settings, registry: RunRegistry) -> None:
        self.settings = settings
        self.registry = registry
        self.common = argparse.ArgumentParser(add_help=False)
        self.common.add_argument("--config", type=Path, help="dotenv-style config file or a run manifest.json")
        self.common.add_argument("--seed", type=_seed_list, help="seed or comma-separated seeds")
        self.common.add_argument("--arch", choices=("baseline", "prism"))
        self.common.add_argument("--preset", action="append", default=[], help="named override set, repeatable")
        self.common.add_argument("--out", type=Path, help=f"output root (default {settings.out_dir})")
        self.common.add_argument("--data", type=Path, help="read the corpus from gen-data output instead of regenerating")
        self.common.add_argument("--force", action="store_true", help="overwrite existing run directories")
        self.common.add_argument("--set", dest="overrides", type=_key_value, action="append", default=[],
                                 metavar="KEY=VALUE", help="override any config field, repeatable")
        self.common.add_argument("--jobs", type=int, help="seeds run concurrently")
        self.common.add_argument("--log-level", help="override PRISM_LOG_LEVEL")
        self.parser = argparse.ArgumentParser(prog="prism", description="PRISM harmonic encoder experiments")
        self.subparsers = self.parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add_command(self, name: str, handler: Handler, help: str) -> argparse.ArgumentParser:
        sub = self.subparsers.add_parser(name, help=help, parents=[self.common])
        sub.set_defaults(handler=handler)
        return sub

    async def setup_hook(self) -> None:
        await self.registry.connect()
        await self.registry.init_schema()
        for ext in EXTENSIONS:
            try:
                module = importlib.import_module(ext)
                await module.setup(self)
            except Exception:
                logging.exception("Failed to load extension %s", ext)

    async def close(self) -> None:
        await self.registry.close()

    # -- общая обвязка команд ------------------------------------------

    def out_root(self, args: argparse.Namespace) -> Path:
        return args.out or self.settings.out_dir

    def experiment(self, args: argparse.Namespace, seed_key: str = "train.seeds", **flags: Any) -> ExperimentConfig:
        dedicated: dict[str, str] = {k: str(v) for k, v in flags.items() if v is not None}
        if args.seed:
            dedicated[seed_key] = args.seed.split(",")[0] if seed_key == "data.seed" else args.seed
        if args.arch:
            dedicated["model.arch"] = args.arch
        return load_experiment(args.config, args.preset, dedicated, dict(args.overrides))

    def corpus(self, cfg: ExperimentConfig, args: argparse.Namespace) -> Corpus:
        if args.data is not None:
            corpus = load_corpus(args.data)
            log.info("Loaded corpus from %s (%s train pairs)", args.data, humanize.intcomma(len(corpus.train)))
            return corpus
        cfg.require("data.seed")
        return corpus_from_config(cfg.data)

    @staticmethod
    def bind_vocab(cfg: ExperimentConfig, corpus: Corpus) -> ExperimentConfig:
        model = replace(cfg.model, vocab_size=corpus.vocab.size, vocab_hash=corpus.vocab.hash).validate()
        return replace(cfg, model=model)

    def jobs(self, args: argparse.Namespace) -> int:
        return max(1, args.jobs or self.settings.jobs)

    async def run_seeds(
        self,
        experiment: str,
        arch: str,
        seeds: Sequence[int],
        cfg: ExperimentConfig,
        args: argparse.Namespace,
        job: Job,
        run_dir_for: Callable[[int], Path] | None = None,
        extra: dict[str, Any] | None = None,
    ) -> list[RunOutcome]:
        """Сначала манифесты всех прогонов, потом сами задачи параллельно в потоках."""
        root = self.out_root(args)
        run_dir_for = run_dir_for or (lambda seed: root / experiment / arch / str(seed))
        snapshot = to_dotted(cfg)
        planned: list[tuple[int, Path, str]] = []
        for seed in seeds:
            run_dir = run_dir_for(seed)
            prepare_run_dir(run_dir, args.force)
            run_id = "-".join(run_dir.relative_to(root).parts) if run_dir.is_relative_to(root) else f"{experiment}-{arch}-{seed}"
            write_manifest(run_dir, RunManifest(run_id, experiment, arch, (seed,), str(run_dir), snapshot, extra or {}))
            await self.registry.start_run(run_id, experiment, arch, seed, str(run_dir))
            planned.append((seed, run_dir, run_id))

        gate = asyncio.Semaphore(self.jobs(args))

        def guarded(seed: int, run_dir: Path, run_id: str):
            with run_log(run_dir / "run.log"):
                return job(seed, run_dir, run_id)

        async def one(seed: int, run_dir: Path, run_id: str) -> RunOutcome:
            async with gate:
                try:
                    info, result = await asyncio.to_thread(guarded, seed, run_dir, run_id)
                except Exception as exc:
                    log.exception("Run %s failed", run_id)
                    await self.registry.fail_run(run_id, f"{type(exc).__name__}: {exc}")
                    return RunOutcome(seed, run_dir, error=exc)
            mark_complete(run_dir, run_id=run_id, **info)
            await self.registry.finish_run(run_id)
            return RunOutcome(seed, run_dir, result)

        return list(await asyncio.gather(*(one(*p) for p in planned)))

    @staticmethod
    def exit_code(outcomes: Sequence[RunOutcome]) -> int:
        errors = [o.error for o in outcomes if o.error is not None]
        if not errors:
            return 0
        return 2 if all(isinstance(e, USAGE_ERRORS) for e in errors) else 1

    async def dispatch(self, argv: Sequence[str] | None = None) -> int:
        args = self.parser.parse_args(argv)
        if args.log_level:
            logging.getLogger().setLevel(args.log_level.upper())
        try:
            return await args.handler(args)
        except USAGE_ERRORS as exc:
            log.error("%s", exc)
            return 2
        except PrismError:
            log.exception("Command %s failed", args.command)
            return 1
        except Exception:
            log.exception("Unexpected failure in %s", args.command)
            return 1


async def main(argv: Sequence[str] | None = None) -> int:
    settings = load_settings()
    setup_logging(settings.log_level)

    cli = PrismCli(settings, RunRegistry(str(settings.registry_path)))
    await cli.setup_hook()
    try:
        return await cli.dispatch(argv)
    finally:
        await cli.close()


if __name__ == "__main__":
    raise SystemExit(asyncio.run(main()))
