"""AdamW с отделённым затуханием весов, расписание lr, клиппинг и цикл обучения."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import humanize
import numpy as np

from ..errors import ConfigError, NonFiniteError
from .autodiff import Parameter, Tape, scalar
from .checkpoint import save_checkpoint
from .datagen import Bucket, Corpus, collate, make_buckets
from .evaluation import MetricsRecord, evaluate_split
from .models import Seq2SeqModel, forward_loss

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Schedule:
    peak_lr: float
    warmup_steps: int
    total_steps: int
    floor_lr: float | None = None

    @property
    def floor(self) -> float:
        return self.peak_lr / 100.0 if self.floor_lr is None else self.floor_lr


def lr_at(schedule: Schedule, step: int) -> float:
    """Линейный разгон до пика за warmup, затем косинус до пола к total_steps."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    peak, floor = schedule.peak_lr, schedule.floor
    warmup = schedule.warmup_steps
    if step < warmup:
        return peak * (step / warmup)
    if step >= schedule.total_steps:
        return floor if schedule.total_steps > warmup else peak
    progress = (step - warmup) / (schedule.total_steps - warmup)
    return peak - 0.5 * (peak - floor) * (1.0 - math.cos(math.pi * progress))


def global_norm(params: Sequence[Parameter]) -> float:
    return math.sqrt(sum(float(np.sum(np.abs(p.grad) ** 2)) for p in params))


def clip_global_norm(params: Sequence[Parameter], max_norm: float = 1.0) -> float:
    """Масштабирует градиенты на месте, чтобы общая L2-норма была не больше ``max_norm``.

    Возвращает норму до клиппинга.
    """
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError("non-finite gradient", where=p.name)
    norm = global_norm(params)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad *= scale
    return norm


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def _real_view(a: np.ndarray) -> np.ndarray:
    # комплексный элемент обновляется как независимая пара (re, im)
    return a.view(np.float64) if np.iscomplexobj(a) else a


def adamw_step(params: Sequence[Parameter], state: OptimizerState, lr: float) -> dict[str, float]:
    """Один шаг AdamW по всем обучаемым параметрам; возвращает нормы обновлений."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    norms: dict[str, float] = {}
    for p in params:
        if not p.trainable:
            continue
        value = _real_view(p.value)
        grad = _real_view(p.grad)
        m = state.m.setdefault(p.name, np.zeros_like(value))
        v = state.v.setdefault(p.name, np.zeros_like(value))
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        denom = np.sqrt(v) / math.sqrt(bc2) + state.eps
        update = -(lr / bc1) * m / denom
        if p.decay and state.weight_decay:
            update = update - lr * state.weight_decay * value
        if not np.all(np.isfinite(update)):
            raise NonFiniteError("non-finite AdamW update", where=p.name)
        value += update
        norms[p.name] = float(np.linalg.norm(update))
    return norms


@dataclass(frozen=True)
class TrainConfig:
    seeds: tuple[int, ...] = ()
    steps: int = 1200
    eval_steps: tuple[int, ...] = (200, 400, 800, 1200)
    token_budget: int = 2000
    bucket_width: int = 4
    clip_norm: float = 1.0
    peak_lr: float = 1e-4
    warmup_steps: int = 120
    floor_lr: float | None = None
    weight_decay: float = 0.01
    eval_limit: int = 200
    log_every: int = 100

    def validate(self) -> "TrainConfig":
        if list(self.eval_steps) != sorted(self.eval_steps):
            raise ConfigError("train.eval_steps must be sorted ascending")
        if any(s < 0 or s > self.steps for s in self.eval_steps):
            raise ConfigError(f"train.eval_steps must lie in [0, {self.steps}]")
        if self.steps < 0 or self.token_budget < 1 or self.clip_norm <= 0 or self.peak_lr < 0:
            raise ConfigError("train.steps, train.token_budget, train.clip_norm and train.peak_lr must be positive")
        return self

    @property
    def schedule(self) -> Schedule:
        return Schedule(self.peak_lr, self.warmup_steps, self.steps, self.floor_lr)


def batch_stream(buckets: Sequence[Bucket], seed: int) -> Iterator[Bucket]:
    """Бакеты в новом порядке от сида на каждой эпохе."""
    if not buckets:
        raise ConfigError("training split produced no batches")
    rng = np.random.default_rng([seed, 3])
    while True:
        for i in rng.permutation(len(buckets)):
            yield buckets[int(i)]


def train(
    model: Seq2SeqModel,
    corpus: Corpus,
    cfg: TrainConfig,
    seed: int,
    run_id: str = "",
    checkpoint_path: Path | None = None,
) -> Iterator[MetricsRecord]:
    """Обучает ``cfg.steps`` шагов и отдаёт запись по valid на каждом шаге оценки.

    После последнего шага идёт итоговая запись по test. Если задан
    ``checkpoint_path``, обученные параметры пишутся туда после неё.
    """
    cfg.validate()
    params = [p for p in model.parameters() if p.trainable]
    state = OptimizerState(weight_decay=cfg.weight_decay)
    batches = batch_stream(make_buckets(corpus.train, cfg.token_budget, cfg.bucket_width), seed)
    drop_rng = np.random.default_rng([seed, 4])
    valid = corpus.valid[: cfg.eval_limit] if cfg.eval_limit else corpus.valid
    evals = set(cfg.eval_steps)
    lr = grad_norm = 0.0
    started = time.perf_counter()

    def record(step: int, split: str, pairs) -> MetricsRecord:
        loss, bleu = evaluate_split(model, pairs)
        wall = (time.perf_counter() - started) * 1000.0
        log.info("[%s] step %s %s loss=%.4f bleu=%.2f", run_id or "train", humanize.intcomma(step), split, loss, bleu)
        return MetricsRecord(run_id, seed, step, split, loss, bleu, lr, grad_norm, wall)

    if 0 in evals:
        yield record(0, "valid", valid)
    for step in range(1, cfg.steps + 1):
        batch = collate(next(batches).pairs)
        tape = Tape()
        loss = forward_loss(model, batch, tape, drop_rng)
        value = scalar(loss)
        if not math.isfinite(value):
            raise NonFiniteError(f"loss became {value}", where=f"{run_id or 'train'} step {step}")
        model.zero_grad()
        tape.backward(loss)
        grad_norm = clip_global_norm(params, cfg.clip_norm)
        lr = lr_at(cfg.schedule, step)
        adamw_step(params, state, lr)
        if cfg.log_every and step % cfg.log_every == 0:
            log.debug("step %d loss %.4f lr %.2e |g| %.3f", step, value, lr, grad_norm)
        if step in evals:
            yield record(step, "valid", valid)
    yield record(cfg.steps, "test", corpus.test)
    elapsed = time.perf_counter() - started
    log.info("Finished %s in %s", run_id or "training", humanize.naturaldelta(elapsed))
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path, step=cfg.steps, seed=seed, run_id=run_id)
