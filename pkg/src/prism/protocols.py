"""Два эксперимента: уточнение семантической карты (ISMR) и внедрение понятий.

ISMR обучает модель, вынимает её таблицу вложений, пересаживает в заново
инициализированную модель и обучает снова; контроль это та же таблица с
перемешанными строками. Внедрение дообучает готовую модель на 25 предложениях
с пятью новыми словами и меряет усвоение и забывание.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.stats

from ..errors import ConfigError, VocabMismatchError
from .autodiff import Tape
from .checkpoint import load_checkpoint, save_checkpoint, save_map
from .datagen import Corpus, InjectionExample, InjectionSet, collate
from .evaluation import MetricsRecord, bleu_corpus, decode_pairs, evaluate_split, stability_delta
from .models import (
    MapTable,
    ModelConfig,
    SemanticMap,
    Seq2SeqModel,
    extract_map,
    forward_loss,
    init_model,
    load_map,
    shuffle_map,
    strip_special,
)
from .training import OptimizerState, TrainConfig, adamw_step, clip_global_norm, train

log = logging.getLogger(__name__)

__all__ = [
    "AcquisitionResult",
    "ConceptResult",
    "InjectionConfig",
    "InjectionRun",
    "IsmrRun",
    "MetricsRecord",
    "acquisition_score",
    "bleu_corpus",
    "concept_breakdown",
    "final_score_table",
    "injection_summary",
    "ismr_table",
    "run_injection",
    "run_ismr",
    "stability_delta",
]

STREAMS = ("iter1", "iter2", "ablation")
Sink = Callable[[str, MetricsRecord], None]


# -- ISMR ------------------------------------------------------------------


@dataclass
class IsmrRun:
    arch: str
    seed: int
    train_config: TrainConfig
    iter1: list[MetricsRecord]
    semantic_map: SemanticMap
    iter2: list[MetricsRecord]
    ablation_map: SemanticMap
    ablation: list[MetricsRecord]
    iter2_initial: np.ndarray = field(repr=False, default_factory=lambda: np.zeros((0, 0)))

    @property
    def streams(self) -> dict[str, list[MetricsRecord]]:
        return {"iter1": self.iter1, "iter2": self.iter2, "ablation": self.ablation}


def run_ismr(
    model_config: ModelConfig,
    corpus: Corpus,
    train_config: TrainConfig,
    seed: int,
    map_table: MapTable | None = None,
    out_dir: Path | None = None,
    sink: Sink | None = None,
) -> IsmrRun:
    """Обучить, вынуть карту, обучить заново с ней и с её перемешанной копией."""
    arch = model_config.arch

    def run(stream: str, model: Seq2SeqModel) -> list[MetricsRecord]:
        ckpt = out_dir / f"{stream}.ckpt" if out_dir else None
        records = []
        for rec in train(model, corpus, train_config, seed, run_id=f"{arch}-{seed}-{stream}", checkpoint_path=ckpt):
            records.append(rec)
            if sink:
                sink(stream, rec)
        return records

    first = init_model(model_config, seed)
    iter1 = run("iter1", first)
    e1 = extract_map(first, train_config.steps, seed, map_table)

    second = load_map(init_model(model_config, seed), e1, reinit_reasoner=True, seed=seed, table=map_table)
    initial = second.map_parameter(map_table).value.copy()
    iter2 = run("iter2", second)

    shuffled = shuffle_map(e1, seed)
    third = load_map(init_model(model_config, seed), shuffled, reinit_reasoner=True, seed=seed, table=map_table)
    ablation = run("ablation", third)

    if out_dir:
        save_map(e1, out_dir / "semantic.map")
        save_map(shuffled, out_dir / "shuffled.map")
    return IsmrRun(arch, seed, train_config, iter1, e1, iter2, shuffled, ablation, initial)


def _band(values: Sequence[float]) -> dict[str, float]:
    arr = np.asarray(values, dtype=np.float64)
    out = {"mean": float(arr.mean()), "min": float(arr.min()), "max": float(arr.max())}
    if arr.size > 1:
        half = float(scipy.stats.sem(arr) * scipy.stats.t.ppf(0.975, arr.size - 1))
        out["ci_low"], out["ci_high"] = out["mean"] - half, out["mean"] + half
    return out


def ismr_table(runs: Sequence[Mapping[str, Sequence[MetricsRecord]]], metric: str = "bleu") -> list[dict[str, float | int | str]]:
    """Строка на каждую точку оценки со средним по сидам для каждого потока.

    Если сидов больше одного, к потоку добавляются min/max и 95% t-интервал
    среднего.
    """
    if not runs:
        return []
    labels = {"iter1": "baseline", "iter2": "ismr", "ablation": "ablation"}
    steps = [r.step for r in runs[0]["iter1"] if r.split == "valid"]
    rows: list[dict[str, float | int | str]] = []
    for i, step in enumerate(steps):
        row: dict[str, float | int | str] = {"step": step}
        for stream, label in labels.items():
            values = [getattr([r for r in run[stream] if r.split == "valid"][i], metric) for run in runs]
            band = _band(values)
            row[label] = round(band["mean"], 4)
            if len(runs) > 1:
                for key in ("min", "max", "ci_low", "ci_high"):
                    row[f"{label}_{key}"] = round(band[key], 4)
        rows.append(row)
    return rows


def final_score_table(runs: Sequence[Mapping[str, Sequence[MetricsRecord]]]) -> list[dict[str, float | int | str]]:
    """BLEU на test по потокам: среднее, выборочное std и число сидов."""
    labels = {"iter1": "Baseline", "iter2": "ISMR", "ablation": "Ablation"}
    rows = []
    for stream, label in labels.items():
        values = np.array([run[stream][-1].bleu for run in runs])
        std = float(values.std(ddof=1)) if values.size > 1 else 0.0
        rows.append({"group": label, "mean": round(float(values.mean()), 4), "std": round(std, 4), "count": int(values.size)})
    return rows


# -- внедрение -------------------------------------------------------------


@dataclass(frozen=True)
class InjectionConfig:
    lr: float = 2e-4
    steps: int = 10
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    separate_batches: bool = False
    n_concepts: int = 5
    per_concept: int = 5
    eval_per_concept: int = 5
    eval_limit: int = 200

    def validate(self) -> "InjectionConfig":
        if self.steps < 0 or self.lr < 0:
            raise ConfigError("injection.steps and injection.lr must be non-negative")
        if self.eval_per_concept < 5:
            raise ConfigError("injection.eval_per_concept must be at least 5")
        return self


@dataclass(frozen=True)
class ConceptResult:
    concept: int
    source_token: int
    target_token: int
    successes: int
    total: int
    exact: int

    @property
    def acquired(self) -> bool:
        return 2 * self.successes > self.total


@dataclass(frozen=True)
class AcquisitionResult:
    concepts: tuple[ConceptResult, ...]

    @property
    def successes(self) -> int:
        return sum(c.successes for c in self.concepts)

    @property
    def total(self) -> int:
        return sum(c.total for c in self.concepts)

    @property
    def exact(self) -> int:
        return sum(c.exact for c in self.concepts)

    @property
    def score(self) -> float:
        return self.successes / self.total if self.total else 0.0

    @property
    def concepts_acquired(self) -> int:
        return sum(c.acquired for c in self.concepts)

    def label(self) -> str:
        return f"{self.concepts_acquired}/{len(self.concepts)} ({self.successes}/{self.total})"


def _hit(example: InjectionExample, decoded: Sequence[int]) -> bool:
    pos = example.target_position
    return pos < len(decoded) and decoded[pos] == example.target_token


def acquisition_score(
    model: Seq2SeqModel, injection_set: InjectionSet, decoded: Sequence[Sequence[int]] | None = None
) -> AcquisitionResult:
    """Успех на предложении: нужный токен перевода стоит на позиции по грамматике."""
    examples = injection_set.eval
    if decoded is None:
        decoded = decode_pairs(model, [ex.pair for ex in examples])
    results = []
    for c, (src_tok, tgt_tok) in enumerate(injection_set.concepts):
        mine = [(ex, out) for ex, out in zip(examples, decoded) if ex.concept == c]
        hits = sum(_hit(ex, out) for ex, out in mine)
        exact = sum(strip_special(out) == strip_special(ex.pair.tgt) for ex, out in mine)
        results.append(ConceptResult(c, src_tok, tgt_tok, hits, len(mine), exact))
    return AcquisitionResult(tuple(results))


def _interference(injection_set: InjectionSet, decoded: Sequence[Sequence[int]], vocab) -> list[str]:
    targets = {tgt: c for c, (_, tgt) in enumerate(injection_set.concepts)}
    notes = []
    for ex, out in zip(injection_set.eval, decoded):
        if _hit(ex, out):
            continue
        foreign = sorted({targets[t] for t in out if t in targets and targets[t] != ex.concept})
        notes.append(
            f"concept {ex.concept}: decoded '{vocab.surface(strip_special(out))}'"
            + (f" carries concept {foreign} targets" if foreign else "")
        )
    return notes


@dataclass
class InjectionRun:
    label: str
    seed: int
    lr: float
    steps: int
    updates: int
    pre_bleu: float
    post_bleu: float
    pre: AcquisitionResult
    post: AcquisitionResult
    update_norms: dict[str, float] = field(default_factory=dict)
    interference: list[str] = field(default_factory=list)
    pre_checkpoint: Path | None = None
    post_checkpoint: Path | None = None

    @property
    def stability_delta(self) -> float:
        return stability_delta(self.pre_bleu, self.post_bleu)


def run_injection(
    checkpoint: Seq2SeqModel | Path,
    injection_set: InjectionSet,
    corpus: Corpus,
    cfg: InjectionConfig,
    seed: int,
    label: str = "",
    out_dir: Path | None = None,
) -> InjectionRun:
    """Дообучение всех параметров ровно ``cfg.steps`` шагов с постоянным lr.

    BLEU на valid и усвоение меряются до и после на одной и той же выборке
    одним и тем же декодером.
    """
    cfg.validate()
    pre_path = checkpoint if isinstance(checkpoint, Path) else None
    model = load_checkpoint(checkpoint)[0] if isinstance(checkpoint, Path) else checkpoint
    if model.config.vocab_hash and model.config.vocab_hash != corpus.vocab.hash:
        raise VocabMismatchError(f"checkpoint vocabulary {model.config.vocab_hash!r} != corpus {corpus.vocab.hash!r}")
    valid = corpus.valid[: cfg.eval_limit] if cfg.eval_limit else corpus.valid

    _, pre_bleu = evaluate_split(model, valid)
    pre = acquisition_score(model, injection_set)

    params = [p for p in model.parameters() if p.trainable]
    state = OptimizerState(weight_decay=cfg.weight_decay)
    if cfg.separate_batches:
        groups = [[ex.pair for ex in injection_set.train if ex.concept == c] for c in range(len(injection_set.concepts))]
    else:
        groups = [[ex.pair for ex in injection_set.train]]
    batches = [collate(g) for g in groups if g]
    if cfg.steps and not batches:
        raise ConfigError("injection set has no training sentences")
    touched: dict[str, float] = {p.name: 0.0 for p in params}
    for step in range(cfg.steps):
        # одно обновление на шаг; при раздельных батчах понятия идут по кругу
        batch = batches[step % len(batches)]
        tape = Tape()
        loss = forward_loss(model, batch, tape)
        model.zero_grad()
        tape.backward(loss)
        clip_global_norm(params, cfg.clip_norm)
        for name, norm in adamw_step(params, state, cfg.lr).items():
            touched[name] = max(touched[name], norm)

    _, post_bleu = evaluate_split(model, valid)
    decoded = decode_pairs(model, [ex.pair for ex in injection_set.eval])
    post = acquisition_score(model, injection_set, decoded)
    notes = _interference(injection_set, decoded, corpus.vocab) if cfg.separate_batches else []
    for note in notes:
        log.info("[%s] %s", label or "inject", note)

    post_path = None
    if out_dir is not None:
        post_path = save_checkpoint(model, out_dir / "post_injection.ckpt", seed=seed, injection_steps=cfg.steps)
    run = InjectionRun(
        label, seed, cfg.lr, cfg.steps, state.step, pre_bleu, post_bleu, pre, post, touched, notes, pre_path, post_path
    )
    log.info(
        "[%s] %d updates: acquisition %s -> %s, BLEU %.2f -> %.2f (%+.2f)",
        label or "inject", run.updates, pre.label(), post.label(), pre_bleu, post_bleu, run.stability_delta,
    )
    return run


SUMMARY_ROWS = ("Updates", "Acquisition", "Post-Inj BLEU", "Stability Delta")


def injection_summary(columns: Mapping[str, InjectionRun]) -> list[list[str]]:
    """Строки Updates, Acquisition, Post-Inj BLEU и Stability Delta; столбец на прогон."""
    header = ["metric", *columns]
    values = {
        "Updates": [str(r.updates) for r in columns.values()],
        "Acquisition": [r.post.label() for r in columns.values()],
        "Post-Inj BLEU": [f"{r.post_bleu:.2f}" for r in columns.values()],
        "Stability Delta": [f"{r.stability_delta:+.2f}" for r in columns.values()],
    }
    return [header, *([row, *values[row]] for row in SUMMARY_ROWS)]


def concept_breakdown(run: InjectionRun) -> list[list[str]]:
    rows = [["concept", "source_token", "target_token", "pre", "post", "exact", "acquired"]]
    for before, after in zip(run.pre.concepts, run.post.concepts):
        rows.append([
            str(after.concept),
            str(after.source_token),
            str(after.target_token),
            f"{before.successes}/{before.total}",
            f"{after.successes}/{after.total}",
            f"{after.exact}/{after.total}",
            "yes" if after.acquired else "no",
        ])
    return rows
