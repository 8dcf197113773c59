"""Контейнер параметров в одном файле: текстовый заголовок и сырые данные.

    PRISM-CONTAINER v1
    tag: model
    meta: {"config": {...}, "step": 1200}
    param: decoder.0.ln1.gain <f8 64 0
    ...
    end
    <little-endian payload, offsets relative to its first byte>
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from ..errors import PrismError, ShapeError
from .autodiff import Parameter
from .models import ModelConfig, SemanticMap, Seq2SeqModel, init_model
from .numerics import RealTensor

log = logging.getLogger(__name__)

MAGIC = "PRISM-CONTAINER v1"
_DTYPES = {"<f8": np.dtype("<f8"), "<c16": np.dtype("<c16")}


class ContainerError(PrismError):
    pass


def write_container(path: Path, tag: str, meta: dict[str, Any], arrays: Iterable[tuple[str, np.ndarray]]) -> None:
    header = [MAGIC, f"tag: {tag}", f"meta: {json.dumps(meta, sort_keys=True)}"]
    chunks: list[bytes] = []
    offset = 0
    for name, value in arrays:
        dtype = "<c16" if np.iscomplexobj(value) else "<f8"
        raw = np.ascontiguousarray(value, dtype=_DTYPES[dtype]).tobytes()
        shape = ",".join(str(s) for s in value.shape) or "-"
        header.append(f"param: {name} {dtype} {shape} {offset}")
        chunks.append(raw)
        offset += len(raw)
    header.append("end")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("utf-8"))
        for raw in chunks:
            f.write(raw)
    tmp.replace(path)


def read_container(path: Path) -> tuple[str, dict[str, Any], dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    cut = blob.find(b"\nend\n")
    if not blob.startswith(MAGIC.encode()) or cut < 0:
        raise ContainerError(f"{path} is not a parameter container")
    lines = blob[:cut].decode("utf-8").split("\n")
    payload = memoryview(blob)[cut + len(b"\nend\n"):]
    tag, meta = "", {}
    arrays: dict[str, np.ndarray] = {}
    for line in lines[1:]:
        key, _, rest = line.partition(": ")
        if key == "tag":
            tag = rest
        elif key == "meta":
            meta = json.loads(rest)
        elif key == "param":
            name, dtype, shape_s, offset_s = rest.split(" ")
            shape = () if shape_s == "-" else tuple(int(s) for s in shape_s.split(","))
            dt = _DTYPES[dtype]
            count = int(np.prod(shape, dtype=np.int64))
            start = int(offset_s)
            arrays[name] = np.frombuffer(payload, dtype=dt, count=count, offset=start).reshape(shape).copy()
        else:
            raise ContainerError(f"{path}: unexpected header line {line!r}")
    return tag, meta, arrays


def save_checkpoint(model: Seq2SeqModel, path: Path, **meta: Any) -> Path:
    meta = {"config": asdict(model.config), **meta}
    write_container(path, "model", meta, ((p.name, p.value) for p in model.parameters()))
    log.debug("Saved checkpoint %s", path)
    return path


def load_checkpoint(path: Path) -> tuple[Seq2SeqModel, dict[str, Any]]:
    tag, meta, arrays = read_container(path)
    if tag != "model":
        raise ContainerError(f"{path} holds a {tag!r}, not a model")
    model = init_model(ModelConfig(**meta["config"]), seed=0)
    assign(model.parameters(), arrays)
    return model, meta


def assign(params: Iterable[Parameter], arrays: dict[str, np.ndarray]) -> None:
    params = list(params)
    missing = {p.name for p in params} ^ set(arrays)
    if missing:
        raise ContainerError(f"parameter set differs: {sorted(missing)[:5]}")
    for p in params:
        value = arrays[p.name]
        if value.shape != p.shape or value.dtype != p.value.dtype:
            raise ShapeError(f"{p.name}: stored {value.dtype}{value.shape}, model {p.value.dtype}{p.shape}")
        p.value = value
        p.zero_grad()


def save_map(semantic_map: SemanticMap, path: Path) -> Path:
    meta = {
        "vocab_hash": semantic_map.vocab_hash,
        "step": semantic_map.step,
        "seed": semantic_map.seed,
        "source": semantic_map.source,
    }
    write_container(path, "semantic_map", meta, [("matrix", semantic_map.matrix.data)])
    return path


def load_semantic_map(path: Path) -> SemanticMap:
    tag, meta, arrays = read_container(path)
    if tag != "semantic_map":
        raise ContainerError(f"{path} holds a {tag!r}, not a semantic map")
    return SemanticMap(RealTensor(arrays["matrix"]), meta["vocab_hash"], meta["step"], meta["seed"], meta["source"])
