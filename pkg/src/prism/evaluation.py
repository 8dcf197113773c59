"""BLEU по корпусу, запись метрик и оценка на части корпуса."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Any, Sequence

import numpy as np

from ..errors import ShapeError
from .datagen import SentencePair, collate, make_buckets
from .models import Seq2SeqModel, greedy_decode, loss_value, strip_special

BLEU_ORDER = 4
BLEU_SMOOTH = 0.1


@dataclass(frozen=True)
class MetricsRecord:
    run_id: str
    seed: int
    step: int
    split: str
    loss: float
    bleu: float
    lr: float = 0.0
    grad_norm: float = 0.0
    wall_ms: float = 0.0
    acquisition: float | None = None
    stability_delta: float | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.bleu <= 100.0:
            raise ValueError(f"bleu out of range: {self.bleu}")
        if self.acquisition is not None and not 0.0 <= self.acquisition <= 1.0:
            raise ValueError(f"acquisition out of range: {self.acquisition}")

    def as_dict(self) -> dict[str, Any]:
        return {k: v for k, v in asdict(self).items() if v is not None}


def _ngrams(tokens: Sequence[int], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_corpus(hypotheses: Sequence[Sequence[int]], references: Sequence[Sequence[int]]) -> float:
    """BLEU-4 по корпусу в [0, 100]; нулевые точности сглаживаются снизу."""
    if len(hypotheses) != len(references):
        raise ShapeError(f"{len(hypotheses)} hypotheses for {len(references)} references")
    if not hypotheses:
        raise ShapeError("BLEU over an empty corpus")
    matches = [0] * BLEU_ORDER
    totals = [0] * BLEU_ORDER
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, BLEU_ORDER + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0:
        return 0.0
    log_p = 0.0
    for m, t in zip(matches, totals):
        p = m / t if m > 0 else BLEU_SMOOTH / max(t, 1)
        log_p += math.log(p) / BLEU_ORDER
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return min(100.0, 100.0 * bp * math.exp(log_p))


def stability_delta(pre_bleu: float, post_bleu: float) -> float:
    return post_bleu - pre_bleu


def decode_pairs(model: Seq2SeqModel, pairs: Sequence[SentencePair], token_budget: int = 4000) -> list[tuple[int, ...]]:
    """Жадные выходы для ``pairs`` в исходном порядке, батчи по длине."""
    order = sorted(range(len(pairs)), key=lambda i: len(pairs[i].src))
    out: list[tuple[int, ...]] = [()] * len(pairs)
    chunk: list[int] = []
    used = 0

    def flush() -> None:
        sources = [pairs[i].src for i in chunk]
        max_len = max(len(s) for s in sources) + 2
        for i, hyp in zip(chunk, greedy_decode(model, sources, max_len)):
            out[i] = hyp

    for i in order:
        if chunk and used + pairs[i].tokens > token_budget:
            flush()
            chunk, used = [], 0
        chunk.append(i)
        used += pairs[i].tokens
    if chunk:
        flush()
    return out


def evaluate_split(model: Seq2SeqModel, pairs: Sequence[SentencePair], token_budget: int = 4000) -> tuple[float, float]:
    """(потеря с весом по токенам, BLEU по корпусу) на ``pairs``."""
    if not pairs:
        raise ShapeError("evaluation over an empty split")
    weighted = 0.0
    tokens = 0.0
    for bucket in make_buckets(pairs, token_budget, width=4):
        batch = collate(bucket.pairs)
        n = float(np.sum(batch.tgt_mask))
        weighted += loss_value(model, batch) * n
        tokens += n
    hyps = [strip_special(h) for h in decode_pairs(model, pairs, token_budget)]
    refs = [strip_special(p.tgt) for p in pairs]
    return weighted / tokens, bleu_corpus(hyps, refs)
