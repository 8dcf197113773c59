from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from src.prism.datagen import Corpus, DataConfig, corpus_from_config
from src.prism.models import ModelConfig

TINY_DATA = DataConfig(
    seed=3,
    content_vocab=12,
    novel_tokens=6,
    min_len=3,
    max_len=6,
    train_size=64,
    valid_size=16,
    test_size=16,
)

# Достаточно мал, чтобы полный прогон CLI занимал секунды.
TINY_ENV = """\
data.seed=3
data.content_vocab=12
data.novel_tokens=6
data.min_len=3
data.max_len=6
data.train_size=32
data.valid_size=8
data.test_size=8
model.d_model=8
model.heads=2
model.enc_layers=1
model.dec_layers=1
model.ff_mult=2
model.l_pad=8
train.seeds=1,2
train.steps=2
train.eval_steps=2
train.warmup_steps=1
train.token_budget=200
train.eval_limit=4
injection.eval_limit=4
bench.n=8,16,32
bench.d=4
bench.heads=2
bench.pin=false
"""


@pytest.fixture(scope="session")
def tiny_corpus() -> Corpus:
    return corpus_from_config(TINY_DATA)


@pytest.fixture
def tiny_config(tiny_corpus):
    def make(arch: str = "prism", **kw) -> ModelConfig:
        base = ModelConfig(
            arch=arch,
            vocab_size=tiny_corpus.vocab.size,
            d_model=8,
            heads=2,
            enc_layers=1,
            dec_layers=1,
            ff_mult=2,
            l_pad=8,
            vocab_hash=tiny_corpus.vocab.hash,
        )
        return replace(base, **kw)

    return make


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_env(tmp_path: Path) -> Path:
    path = tmp_path / "tiny.env"
    path.write_text(TINY_ENV, encoding="utf-8")
    return path
