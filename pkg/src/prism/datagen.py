"""Синтетический двуязычный корпус: словарь токенов, грамматика перестановок, бакеты.

Исходное предложение состоит из случайных токенов; перевод получается
словарной заменой и перестановкой позиций по грамматике, в обёртке BOS/EOS.
Словарь у обеих сторон общий, чтобы базовая модель могла связать таблицы.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np

from ..errors import ConfigError, PrismError

log = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
SPLITS = ("train", "valid", "test")

GrammarRule = Literal["identity", "adjacent-swap", "block-reverse"]


@dataclass(frozen=True)
class DataConfig:
    seed: int | None = None
    content_vocab: int = 200
    novel_tokens: int = 8
    grammar: GrammarRule = "adjacent-swap"
    block: int = 3
    min_len: int = 4
    max_len: int = 32
    train_size: int = 8000
    valid_size: int = 500
    test_size: int = 500


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()[:16]

    def surface(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)


@dataclass(frozen=True)
class SyntheticLexicon:
    vocab: Vocabulary
    source_ids: tuple[int, ...]
    target_ids: tuple[int, ...]
    pairs: dict[int, int]
    novel_ids: tuple[int, ...]
    _inverse: dict[int, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        inverse = {t: s for s, t in self.pairs.items()}
        if len(inverse) != len(self.pairs):
            raise PrismError("lexicon is not a bijection")
        object.__setattr__(self, "_inverse", inverse)

    def map(self, src: int) -> int:
        return self.pairs[src]

    def inverse(self, tgt: int) -> int:
        return self._inverse[tgt]


def build_lexicon(content_vocab: int, novel_tokens: int, seed: int) -> SyntheticLexicon:
    """Служебные id, затем слова источника, слова перевода и запас новых слов."""
    if content_vocab < 2:
        raise ConfigError("data.content_vocab must be at least 2")
    n_src = content_vocab
    src_ids = tuple(range(len(RESERVED), len(RESERVED) + n_src))
    tgt_ids = tuple(range(src_ids[-1] + 1, src_ids[-1] + 1 + n_src))
    novel = tuple(range(tgt_ids[-1] + 1, tgt_ids[-1] + 1 + novel_tokens))
    tokens = (
        list(RESERVED)
        + [f"s{i:03d}" for i in range(n_src)]
        + [f"t{i:03d}" for i in range(n_src)]
        + [f"n{i:02d}" for i in range(novel_tokens)]
    )
    perm = np.random.default_rng([seed, 0xA1]).permutation(n_src)
    pairs = {s: tgt_ids[int(p)] for s, p in zip(src_ids, perm)}
    return SyntheticLexicon(Vocabulary(tuple(tokens)), src_ids, tgt_ids, pairs, novel)


@dataclass(frozen=True)
class GrammarSpec:
    rule: GrammarRule = "adjacent-swap"
    min_len: int = 4
    max_len: int = 32
    seed: int = 0
    block: int = 3

    def __post_init__(self) -> None:
        if self.rule not in ("identity", "adjacent-swap", "block-reverse"):
            raise ConfigError(f"unknown grammar rule {self.rule!r}")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError(f"bad length range [{self.min_len}, {self.max_len}]")


def grammar_permutation(rule: GrammarRule, n: int, block: int = 3) -> np.ndarray:
    """Позиция i перевода берёт позицию perm[i] источника."""
    idx = np.arange(n)
    if rule == "identity":
        return idx
    if rule == "adjacent-swap":
        partner = idx ^ 1
        return np.where(partner < n, partner, idx)
    if rule == "block-reverse":
        start = (idx // block) * block
        end = np.minimum(start + block, n)
        return start + (end - 1 - idx)
    raise ConfigError(f"unknown grammar rule {rule!r}")


def inverse_permutation(perm: np.ndarray) -> np.ndarray:
    return np.argsort(perm, kind="stable")


@dataclass(frozen=True)
class SentencePair:
    src: tuple[int, ...]
    tgt: tuple[int, ...]

    @property
    def tokens(self) -> int:
        return len(self.src) + len(self.tgt)


@dataclass
class Corpus:
    lexicon: SyntheticLexicon
    grammar: GrammarSpec
    train: list[SentencePair]
    valid: list[SentencePair]
    test: list[SentencePair]

    @property
    def vocab(self) -> Vocabulary:
        return self.lexicon.vocab

    def split(self, name: str) -> list[SentencePair]:
        if name not in SPLITS:
            raise ConfigError(f"unknown split {name!r}")
        return getattr(self, name)


def translate(
    lexicon: SyntheticLexicon, grammar: GrammarSpec, src: Sequence[int], extra: dict[int, int] | None = None
) -> tuple[int, ...]:
    table = lexicon.pairs if not extra else {**lexicon.pairs, **extra}
    perm = grammar_permutation(grammar.rule, len(src), grammar.block)
    return (BOS, *(table[src[int(j)]] for j in perm), EOS)


def _sentence_space(n_content: int, min_len: int, max_len: int) -> float:
    return float(sum(float(n_content) ** k for k in range(min_len, max_len + 1)))


def gen_corpus(
    lexicon: SyntheticLexicon,
    grammar: GrammarSpec,
    sizes: dict[str, int],
    seed: int,
) -> Corpus:
    """Непересекающиеся train/valid/test, у каждой части свой поток сида."""
    total = sum(sizes.get(s, 0) for s in SPLITS)
    if any(sizes.get(s, 0) < 1 for s in SPLITS):
        raise ConfigError("every split needs at least one sentence pair")
    space = _sentence_space(len(lexicon.source_ids), grammar.min_len, grammar.max_len)
    if space < 2 * total:
        raise ConfigError(f"vocabulary too small: {space:.0f} distinct sentences for {total} requested")

    content = np.asarray(lexicon.source_ids)
    seen: set[tuple[int, ...]] = set()
    splits: dict[str, list[SentencePair]] = {}
    for k, name in enumerate(SPLITS):
        rng = np.random.default_rng([seed, k + 1])
        out: list[SentencePair] = []
        attempts = 0
        while len(out) < sizes[name]:
            attempts += 1
            if attempts > 50 * sizes[name] + 1000:
                raise ConfigError(f"vocabulary too small to draw {sizes[name]} distinct {name} sentences")
            length = int(rng.integers(grammar.min_len, grammar.max_len + 1))
            src = tuple(int(t) for t in rng.choice(content, size=length))
            if src in seen:
                continue
            seen.add(src)
            out.append(SentencePair(src, translate(lexicon, grammar, src)))
        splits[name] = out
    log.info("Generated corpus: %s", ", ".join(f"{s}={len(v)}" for s, v in splits.items()))
    return Corpus(lexicon, grammar, splits["train"], splits["valid"], splits["test"])


def corpus_from_config(cfg: DataConfig) -> Corpus:
    if cfg.seed is None:
        raise ConfigError("missing config field: data.seed")
    lexicon = build_lexicon(cfg.content_vocab, cfg.novel_tokens, cfg.seed)
    grammar = GrammarSpec(cfg.grammar, cfg.min_len, cfg.max_len, cfg.seed, cfg.block)
    sizes = {"train": cfg.train_size, "valid": cfg.valid_size, "test": cfg.test_size}
    return gen_corpus(lexicon, grammar, sizes, cfg.seed)


# -- бакеты ----------------------------------------------------------------


@dataclass(frozen=True)
class Bucket:
    band: tuple[int, int]
    pairs: tuple[SentencePair, ...]
    token_budget: int

    @property
    def tokens(self) -> int:
        return sum(p.tokens for p in self.pairs)


def length_band(length: int, width: int) -> tuple[int, int]:
    lo = 1 + ((length - 1) // width) * width
    return lo, lo + width


def make_buckets(pairs: Sequence[SentencePair], token_budget: int, width: int) -> list[Bucket]:
    """Группирует пары по полосам длины, затем режет полосу на батчи по бюджету токенов."""
    if width < 1:
        raise ConfigError("bucket width must be >= 1")
    bands: dict[tuple[int, int], list[SentencePair]] = {}
    for pair in pairs:
        bands.setdefault(length_band(len(pair.src), width), []).append(pair)
    buckets: list[Bucket] = []
    for band in sorted(bands):
        batch: list[SentencePair] = []
        used = 0
        for pair in bands[band]:
            if batch and used + pair.tokens > token_budget:
                buckets.append(Bucket(band, tuple(batch), token_budget))
                batch, used = [], 0
            batch.append(pair)
            used += pair.tokens
        if batch:
            buckets.append(Bucket(band, tuple(batch), token_budget))
    return buckets


@dataclass(frozen=True)
class Batch:
    src: np.ndarray
    src_len: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    tgt_mask: np.ndarray

    @property
    def size(self) -> int:
        return int(self.src.shape[0])


def pad_rows(rows: Sequence[Sequence[int]], fill: int = PAD) -> np.ndarray:
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), fill, dtype=np.intp)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def collate(pairs: Sequence[SentencePair]) -> Batch:
    if not pairs:
        raise ConfigError("cannot collate an empty batch")
    src = pad_rows([p.src for p in pairs])
    tgt = pad_rows([p.tgt for p in pairs])
    src_len = np.array([len(p.src) for p in pairs], dtype=np.intp)
    tgt_in, tgt_out = tgt[:, :-1], tgt[:, 1:]
    return Batch(src, src_len, tgt_in, tgt_out, (tgt_out != PAD).astype(np.float64))


# -- внедрение новых понятий -----------------------------------------------


@dataclass(frozen=True)
class InjectionExample:
    pair: SentencePair
    concept: int
    target_token: int
    target_position: int


@dataclass(frozen=True)
class InjectionSet:
    concepts: tuple[tuple[int, int], ...]
    train: tuple[InjectionExample, ...]
    eval: tuple[InjectionExample, ...]

    @property
    def mapping(self) -> dict[int, int]:
        return dict(self.concepts)


def make_injection_set(
    lexicon: SyntheticLexicon,
    grammar: GrammarSpec,
    seed: int,
    n_concepts: int = 5,
    per_concept: int = 5,
    eval_per_concept: int = 5,
) -> InjectionSet:
    """Новые слова источника, привязанные к готовым словам перевода, с контекстами для обучения и оценки."""
    if len(lexicon.novel_ids) < n_concepts:
        raise ConfigError(f"need {n_concepts} unused token ids, lexicon reserves {len(lexicon.novel_ids)}")
    rng = np.random.default_rng([seed, 0x1E])
    novel = [int(t) for t in rng.choice(np.asarray(lexicon.novel_ids), size=n_concepts, replace=False)]
    targets = [int(t) for t in rng.choice(np.asarray(lexicon.target_ids), size=n_concepts, replace=False)]
    concepts = tuple(zip(novel, targets))
    extra = dict(concepts)
    content = np.asarray(lexicon.source_ids)
    seen: set[tuple[int, ...]] = set()

    def draw(concept: int) -> InjectionExample:
        while True:
            length = int(rng.integers(grammar.min_len, grammar.max_len + 1))
            src = [int(t) for t in rng.choice(content, size=length)]
            pos = int(rng.integers(0, length))
            src[pos] = novel[concept]
            key = tuple(src)
            if key in seen:
                continue
            seen.add(key)
            tgt = translate(lexicon, grammar, key, extra)
            out_pos = int(inverse_permutation(grammar_permutation(grammar.rule, length, grammar.block))[pos])
            return InjectionExample(SentencePair(key, tgt), concept, targets[concept], out_pos)

    train = tuple(draw(c) for c in range(n_concepts) for _ in range(per_concept))
    evals = tuple(draw(c) for c in range(n_concepts) for _ in range(eval_per_concept))
    return InjectionSet(concepts, train, evals)


# -- файлы корпуса ---------------------------------------------------------


def _format_ids(ids: Iterable[int]) -> str:
    return " ".join(str(i) for i in ids)


def write_corpus(corpus: Corpus, out_dir: Path) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for name in SPLITS:
        path = out_dir / f"{name}.tsv"
        lines = (f"{_format_ids(p.src)}\t{_format_ids(p.tgt)}\n" for p in corpus.split(name))
        path.write_text("".join(lines), encoding="utf-8")
        written.append(path)
    vocab_path = out_dir / "vocab.tsv"
    vocab_path.write_text("".join(f"{i}\t{s}\n" for i, s in enumerate(corpus.vocab.tokens)), encoding="utf-8")
    lex = corpus.lexicon
    g = corpus.grammar
    lex_lines = [f"#grammar\t{g.rule}\t{g.min_len}\t{g.max_len}\t{g.seed}\t{g.block}\n"]
    lex_lines += [f"{s}\t{t}\n" for s, t in sorted(lex.pairs.items())]
    lex_lines += [f"{n}\t-\n" for n in lex.novel_ids]
    lex_path = out_dir / "lexicon.tsv"
    lex_path.write_text("".join(lex_lines), encoding="utf-8")
    return [*written, vocab_path, lex_path]


def _parse_ids(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split())


def load_corpus(data_dir: Path) -> Corpus:
    tokens = []
    for line in (data_dir / "vocab.tsv").read_text(encoding="utf-8").splitlines():
        _, surface = line.split("\t")
        tokens.append(surface)
    pairs: dict[int, int] = {}
    novel: list[int] = []
    grammar = GrammarSpec()
    for line in (data_dir / "lexicon.tsv").read_text(encoding="utf-8").splitlines():
        cols = line.split("\t")
        if cols[0] == "#grammar":
            grammar = GrammarSpec(cols[1], int(cols[2]), int(cols[3]), int(cols[4]), int(cols[5]))  # type: ignore[arg-type]
        elif cols[1] == "-":
            novel.append(int(cols[0]))
        else:
            pairs[int(cols[0])] = int(cols[1])
    src_ids = tuple(sorted(pairs))
    lexicon = SyntheticLexicon(Vocabulary(tuple(tokens)), src_ids, tuple(sorted(pairs.values())), pairs, tuple(novel))
    splits = {}
    for name in SPLITS:
        rows = (data_dir / f"{name}.tsv").read_text(encoding="utf-8").splitlines()
        splits[name] = [SentencePair(*(_parse_ids(c) for c in row.split("\t"))) for row in rows]
    return Corpus(lexicon, grammar, splits["train"], splits["valid"], splits["test"])
