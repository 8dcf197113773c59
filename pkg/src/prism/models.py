"""Модели PRISM и базовая, подсчёт параметров, семантические карты.

Декодер у обеих общий: вещественный Pre-LN. Отличаются только энкодеры.
У базовой это блоки внимания над связанной вещественной таблицей. У PRISM
это блоки гармонической свёртки над таблицей амплитуд и мост из комплексных
чисел в вещественные.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Literal, Sequence

import numpy as np

from ..errors import ConfigError, PrismError, ShapeError, VocabMismatchError
from . import autodiff as ad
from . import layers as L
from .autodiff import Node, Parameter, Tape
from .datagen import BOS, EOS, PAD, Batch, pad_rows
from .numerics import RealTensor, is_pow2

log = logging.getLogger(__name__)

Arch = Literal["baseline", "prism"]
MapTable = Literal["embedding", "decoder", "amplitudes"]
EMBED_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    arch: Arch = "baseline"
    vocab_size: int = 0
    d_model: int = 64
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    ff_mult: int = 4
    l_pad: int = 64
    dropout: float = 0.0
    vocab_hash: str = ""

    def validate(self) -> "ModelConfig":
        if self.arch not in ("baseline", "prism"):
            raise ConfigError(f"model.arch must be baseline or prism, got {self.arch!r}")
        if self.vocab_size < 5:
            raise ConfigError(f"model.vocab_size must cover the reserved ids, got {self.vocab_size}")
        if self.d_model < 1 or self.heads < 1 or self.d_model % self.heads:
            raise ConfigError(f"model.d_model={self.d_model} is not divisible by model.heads={self.heads}")
        if self.enc_layers < 0 or self.dec_layers < 1:
            raise ConfigError("model needs at least one decoder layer")
        if not is_pow2(self.l_pad):
            raise ConfigError(f"model.l_pad must be a power of two, got {self.l_pad}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"model.dropout must lie in [0, 1), got {self.dropout}")
        return self


# -- блоки -----------------------------------------------------------------


@dataclass
class EncoderBlock(L.ParamGroup):
    ln1: L.LayerNormParams
    attn: L.AttentionParams
    ln2: L.LayerNormParams
    ffn: L.FeedForwardParams

    @classmethod
    def create(cls, name: str, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.d_model
        return cls(
            L.LayerNormParams.create(f"{name}.ln1", d),
            L.AttentionParams.create(f"{name}.attn", d, cfg.heads, rng),
            L.LayerNormParams.create(f"{name}.ln2", d),
            L.FeedForwardParams.create(f"{name}.ffn", d, cfg.ff_mult * d, rng),
        )


@dataclass
class DecoderBlock(L.ParamGroup):
    ln1: L.LayerNormParams
    self_attn: L.AttentionParams
    ln2: L.LayerNormParams
    cross_attn: L.AttentionParams
    ln3: L.LayerNormParams
    ffn: L.FeedForwardParams

    @classmethod
    def create(cls, name: str, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.d_model
        return cls(
            L.LayerNormParams.create(f"{name}.ln1", d),
            L.AttentionParams.create(f"{name}.self_attn", d, cfg.heads, rng),
            L.LayerNormParams.create(f"{name}.ln2", d),
            L.AttentionParams.create(f"{name}.cross_attn", d, cfg.heads, rng),
            L.LayerNormParams.create(f"{name}.ln3", d),
            L.FeedForwardParams.create(f"{name}.ffn", d, cfg.ff_mult * d, rng),
        )


@dataclass
class GhcBlock(L.ParamGroup):
    """Нормировка, гейт, глобальная свёртка и ModReLU, затем комплексный FFN."""

    gate: L.SpectralGateParams
    kernel: L.GlobalKernel
    mix: L.ModReLUParams
    ffn: L.ComplexFeedForwardParams

    @classmethod
    def create(cls, name: str, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.d_model
        return cls(
            L.SpectralGateParams.create(f"{name}.gate", d, rng),
            L.GlobalKernel.create(f"{name}.kernel", d, cfg.l_pad, rng),
            L.ModReLUParams.create(f"{name}.mix", d),
            L.ComplexFeedForwardParams.create(f"{name}.ffn", d, cfg.ff_mult * d, rng),
        )


@dataclass
class Decoder(L.ParamGroup):
    blocks: list[DecoderBlock]
    final_ln: L.LayerNormParams


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    div = np.exp(np.arange(0, d, 2) * (-math.log(10000.0) / d))
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div)[:, : d // 2]
    return pe


# -- модели ----------------------------------------------------------------


class Seq2SeqModel:
    """Реестр параметров и общий для обеих архитектур декодер."""

    arch: Arch

    def __init__(self, config: ModelConfig, decoder: Decoder, target_table: Parameter) -> None:
        self.config = config
        self.decoder = decoder
        self.target_table = target_table
        self._components: dict[str, list[Parameter]] = {}
        self._by_name: dict[str, Parameter] = {}

    def _register(self, component: str, *items: Parameter | L.ParamGroup) -> None:
        bucket = self._components.setdefault(component, [])
        for item in items:
            params = [item] if isinstance(item, Parameter) else list(item.parameters())
            for p in params:
                seen = self._by_name.get(p.name)
                if seen is p:
                    continue
                if seen is not None:
                    raise PrismError(f"parameter name {p.name!r} registered twice")
                self._by_name[p.name] = p
                bucket.append(p)

    def parameters(self) -> list[Parameter]:
        return list(self._by_name.values())

    def named_parameters(self) -> dict[str, Parameter]:
        return dict(self._by_name)

    def components(self) -> dict[str, list[Parameter]]:
        return {k: list(v) for k, v in self._components.items()}

    def zero_grad(self) -> None:
        for p in self._by_name.values():
            p.zero_grad()

    def map_parameter(self, table: MapTable | None = None) -> Parameter:
        raise NotImplementedError

    def encode(self, src: np.ndarray, src_len: np.ndarray, tape: Tape, rng=None) -> Node:
        raise NotImplementedError

    def decode(self, memory: Node, src_len: np.ndarray, tgt_in: np.ndarray, rng=None) -> Node:
        """Логиты ``[B, T, V]`` для входа декодера ``tgt_in`` (teacher forcing)."""
        tape = memory.tape
        cfg = self.config
        key_mask = np.arange(memory.shape[-2])[None, :] < np.asarray(src_len)[:, None]
        x = _embed_real(tape, self.target_table, tgt_in, cfg, rng)
        for block in self.decoder.blocks:
            h = L.layer_norm(x, block.ln1)
            x = ad.add(x, ad.dropout(L.mhsa_forward(h, block.self_attn, mask="causal"), cfg.dropout, rng))
            h = L.layer_norm(x, block.ln2)
            x = ad.add(x, ad.dropout(L.cross_attention(h, memory, block.cross_attn, key_mask), cfg.dropout, rng))
            h = L.layer_norm(x, block.ln3)
            x = ad.add(x, ad.dropout(L.feed_forward(h, block.ffn, cfg.dropout, rng), cfg.dropout, rng))
        x = L.layer_norm(x, self.decoder.final_ln)
        return ad.matmul(x, ad.transpose(tape.param(self.target_table), (1, 0)))


def _embed_real(tape: Tape, table: Parameter, tokens: np.ndarray, cfg: ModelConfig, rng) -> Node:
    tokens = np.asarray(tokens, dtype=np.intp)
    x = ad.mul(ad.gather_rows(tape.param(table), tokens), math.sqrt(cfg.d_model))
    x = ad.add(x, sinusoidal_positions(tokens.shape[-1], cfg.d_model))
    return ad.dropout(x, cfg.dropout, rng)


class BaselineModel(Seq2SeqModel):
    arch: Arch = "baseline"

    def __init__(self, config: ModelConfig, embedding: Parameter, encoder: list[EncoderBlock],
                 encoder_ln: L.LayerNormParams, decoder: Decoder) -> None:
        super().__init__(config, decoder, embedding)
        self.embedding = embedding
        self.encoder = encoder
        self.encoder_ln = encoder_ln
        self._register("embeddings", embedding)
        self._register("encoder", *encoder, encoder_ln)
        self._register("decoder", decoder)
        self._register("bridge")

    def map_parameter(self, table: MapTable | None = None) -> Parameter:
        if table not in (None, "embedding", "decoder"):
            raise ConfigError(f"baseline has no {table!r} table")
        return self.embedding

    def encode(self, src: np.ndarray, src_len: np.ndarray, tape: Tape, rng=None) -> Node:
        cfg = self.config
        key_mask = np.arange(src.shape[-1])[None, :] < np.asarray(src_len)[:, None]
        x = _embed_real(tape, self.embedding, src, cfg, rng)
        for block in self.encoder:
            h = L.layer_norm(x, block.ln1)
            x = ad.add(x, ad.dropout(L.mhsa_forward(h, block.attn, key_mask=key_mask), cfg.dropout, rng))
            h = L.layer_norm(x, block.ln2)
            x = ad.add(x, ad.dropout(L.feed_forward(h, block.ffn, cfg.dropout, rng), cfg.dropout, rng))
        return L.layer_norm(x, self.encoder_ln)


class PrismModel(Seq2SeqModel):
    arch: Arch = "prism"

    def __init__(self, config: ModelConfig, embedding: L.HarmonicEmbeddingTable, encoder: list[GhcBlock],
                 bridge: L.BridgeParams, decoder_embedding: Parameter, decoder: Decoder) -> None:
        super().__init__(config, decoder, decoder_embedding)
        self.embedding = embedding
        self.encoder = encoder
        self.bridge = bridge
        self.decoder_embedding = decoder_embedding
        self._register("embeddings", embedding, decoder_embedding)
        self._register("encoder", *encoder)
        self._register("decoder", decoder)
        self._register("bridge", bridge)

    def map_parameter(self, table: MapTable | None = None) -> Parameter:
        if table in (None, "decoder", "embedding"):
            return self.decoder_embedding
        if table == "amplitudes":
            return self.embedding.amplitudes
        raise ConfigError(f"unknown map table {table!r}")

    def encode(self, src: np.ndarray, src_len: np.ndarray, tape: Tape, rng=None) -> Node:
        if src.shape[-1] > self.config.l_pad:
            raise ShapeError(f"source length {src.shape[-1]} exceeds model.l_pad={self.config.l_pad}")
        rate = self.config.dropout
        z = L.harmonic_embed(src, self.embedding, tape)
        for block in self.encoder:
            h = L.spectral_gate(ad.complex_rms_norm(z), block.gate)
            h = L.modrelu(L.ghc_forward(h, block.kernel, valid_len=src_len), block.mix)
            z = ad.add(z, ad.dropout(h, rate, rng))
            h = L.complex_feed_forward(ad.complex_rms_norm(z), block.ffn)
            z = ad.add(z, ad.dropout(h, rate, rng))
        return L.bridge(ad.complex_rms_norm(z), self.bridge)


def _decoder(cfg: ModelConfig, rng: np.random.Generator) -> Decoder:
    blocks = [DecoderBlock.create(f"decoder.{i}", cfg, rng) for i in range(cfg.dec_layers)]
    return Decoder(blocks, L.LayerNormParams.create("decoder.final_ln", cfg.d_model))


def _build_baseline(cfg: ModelConfig, rng: np.random.Generator) -> BaselineModel:
    table = Parameter("embed.table", rng.normal(0.0, EMBED_STD, size=(cfg.vocab_size, cfg.d_model)))
    encoder = [EncoderBlock.create(f"encoder.{i}", cfg, rng) for i in range(cfg.enc_layers)]
    encoder_ln = L.LayerNormParams.create("encoder.final_ln", cfg.d_model)
    return BaselineModel(cfg, table, encoder, encoder_ln, _decoder(cfg, rng))


def _build_prism(cfg: ModelConfig, rng: np.random.Generator) -> PrismModel:
    d = cfg.d_model
    embedding = L.HarmonicEmbeddingTable.create("encoder.embed", cfg.vocab_size, d, rng, EMBED_STD)
    encoder = [GhcBlock.create(f"encoder.{i}", cfg, rng) for i in range(cfg.enc_layers)]
    bridge = L.BridgeParams.create("bridge", d, rng)
    dec_table = Parameter("decoder.embed.table", rng.normal(0.0, EMBED_STD, size=(cfg.vocab_size, d)))
    return PrismModel(cfg, embedding, encoder, bridge, dec_table, _decoder(cfg, rng))


_BUILDERS: dict[str, Callable[[ModelConfig, np.random.Generator], Seq2SeqModel]] = {
    "baseline": _build_baseline,
    "prism": _build_prism,
}


def init_baseline(config: ModelConfig, seed: int) -> BaselineModel:
    return _build_baseline(replace(config, arch="baseline").validate(), np.random.default_rng([seed, 0]))


def init_prism(config: ModelConfig, seed: int) -> PrismModel:
    return _build_prism(replace(config, arch="prism").validate(), np.random.default_rng([seed, 0]))


def init_model(config: ModelConfig, seed: int) -> Seq2SeqModel:
    return init_prism(config, seed) if config.arch == "prism" else init_baseline(config, seed)


# -- потеря и декодирование ------------------------------------------------


def forward_loss(model: Seq2SeqModel, batch: Batch, tape: Tape | None = None, rng=None) -> Node:
    """Средняя кросс-энтропия (нат на токен) по непустым позициям перевода."""
    if batch.size == 0 or not batch.tgt_mask.any():
        raise ShapeError("forward_loss on an empty batch")
    tape = tape or Tape()
    memory = model.encode(batch.src, batch.src_len, tape, rng)
    logits = model.decode(memory, batch.src_len, batch.tgt_in, rng)
    return ad.cross_entropy(logits, batch.tgt_out, batch.tgt_mask)


def loss_value(model: Seq2SeqModel, batch: Batch) -> float:
    return ad.scalar(forward_loss(model, batch, Tape(grad_enabled=False)))


def greedy_decode(model: Seq2SeqModel, sources: Sequence[Sequence[int]], max_len: int) -> list[tuple[int, ...]]:
    """Жадное декодирование от BOS; выход обрывается после EOS или на ``max_len`` токенах."""
    if not sources:
        return []
    tape = Tape(grad_enabled=False)
    src = pad_rows(sources)
    src_len = np.array([len(s) for s in sources], dtype=np.intp)
    memory = model.encode(src, src_len, tape)
    out = np.full((len(sources), 1), BOS, dtype=np.intp)
    done = np.zeros(len(sources), dtype=bool)
    for _ in range(max_len):
        logits = model.decode(memory, src_len, out).value
        nxt = np.where(done, PAD, logits[:, -1, :].argmax(axis=-1))
        out = np.concatenate([out, nxt[:, None]], axis=1)
        done |= nxt == EOS
        if done.all():
            break
    results = []
    for row in out[:, 1:]:
        tokens = []
        for t in row:
            if t == PAD:
                break
            tokens.append(int(t))
            if t == EOS:
                break
        results.append(tuple(tokens))
    return results


def strip_special(tokens: Iterable[int]) -> tuple[int, ...]:
    out = []
    for t in tokens:
        if t == EOS:
            break
        if t not in (BOS, PAD):
            out.append(int(t))
    return tuple(out)


# -- учёт параметров -------------------------------------------------------


@dataclass(frozen=True)
class ParamReport:
    embeddings: int
    encoder: int
    decoder: int
    bridge: int
    total: int
    real_dof: int

    @property
    def map_fraction(self) -> float:
        """Доля параметров в таблицах вложений."""
        return self.embeddings / self.total if self.total else 0.0

    def as_row(self) -> dict[str, int | float]:
        return {
            "embeddings": self.embeddings,
            "encoder": self.encoder,
            "decoder": self.decoder,
            "bridge": self.bridge,
            "total": self.total,
            "real_dof": self.real_dof,
            "map_fraction": round(self.map_fraction, 6),
        }


def count_params(model: Seq2SeqModel) -> ParamReport:
    comps = model.components()

    def count(name: str) -> int:
        return sum(int(p.value.size) for p in comps.get(name, []))

    parts = {name: count(name) for name in ("embeddings", "encoder", "decoder", "bridge")}
    dof = sum(int(p.value.size) * (2 if p.is_complex else 1) for p in model.parameters())
    return ParamReport(**parts, total=sum(parts.values()), real_dof=dof)


# -- семантические карты ---------------------------------------------------


@dataclass(frozen=True)
class SemanticMap:
    matrix: RealTensor
    vocab_hash: str
    step: int
    seed: int
    source: str

    @property
    def shape(self) -> tuple[int, ...]:
        return self.matrix.shape


def extract_map(model: Seq2SeqModel, step: int, seed: int, table: MapTable | None = None) -> SemanticMap:
    p = model.map_parameter(table)
    return SemanticMap(RealTensor(p.value.copy()), model.config.vocab_hash, step, seed, p.name)


def load_map(
    model: Seq2SeqModel,
    semantic_map: SemanticMap,
    reinit_reasoner: bool,
    seed: int,
    table: MapTable | None = None,
) -> Seq2SeqModel:
    """Копирует карту в таблицу модели; по желанию заново инициализирует остальное."""
    target = model.map_parameter(table)
    if semantic_map.vocab_hash != model.config.vocab_hash:
        raise VocabMismatchError(
            f"map vocabulary {semantic_map.vocab_hash!r} does not match model {model.config.vocab_hash!r}"
        )
    if semantic_map.shape != target.shape:
        raise ShapeError(f"map shape {semantic_map.shape} does not match {target.name} {target.shape}")
    if reinit_reasoner:
        fresh = _BUILDERS[model.arch](model.config, np.random.default_rng([seed, 1])).named_parameters()
        for name, p in model.named_parameters().items():
            if p is not target:
                p.value = fresh[name].value.copy()
    target.value = np.array(semantic_map.matrix.data, dtype=np.float64, copy=True)
    model.zero_grad()
    log.debug("Loaded semantic map into %s (reinit_reasoner=%s)", target.name, reinit_reasoner)
    return model


def shuffle_map(semantic_map: SemanticMap, seed: int) -> SemanticMap:
    perm = np.random.default_rng([seed, 2]).permutation(semantic_map.shape[0])
    return replace(semantic_map, matrix=RealTensor(semantic_map.matrix.data[perm]), source=f"{semantic_map.source}:shuffled")
