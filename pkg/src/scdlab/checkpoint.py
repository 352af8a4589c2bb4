"""Named-tensor checkpoint container.

Layout: 4-byte magic, u32 header length, canonical-JSON header (tensor
names and shapes, model config, vocabulary, frozen-tensor names), then the
tensors' float32 little-endian payloads concatenated in header order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fileio
from .corpus import Vocabulary
from .encoder import ModelConfig

MAGIC = b"SCDC"
VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: ModelConfig
    vocab: Vocabulary | None = None
    frozen: tuple[str, ...] = ()
    extra: dict = field(default_factory=dict)


def save_checkpoint(
    path: str | Path,
    tensors: dict[str, np.ndarray],
    config: ModelConfig,
    vocab: Vocabulary | None = None,
    frozen: tuple[str, ...] = (),
    extra: dict | None = None,
) -> None:
    names = sorted(tensors)
    header = {
        "version": VERSION,
        "config": config.to_dict(),
        "vocab": vocab.to_dict() if vocab is not None else None,
        "frozen": sorted(frozen),
        "extra": extra or {},
        "tensors": [{"name": n, "shape": list(tensors[n].shape)} for n in names],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(tensors[n], dtype="<f4").tobytes() for n in names)
    fileio.atomic_write_bytes(path, MAGIC + struct.pack("<I", len(header_bytes)) + header_bytes + payload)


def _expected_model_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    from .encoder import init_parameters

    return {name: arr.shape for name, arr in init_parameters(config).items()}


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (header_len,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    if header["version"] != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header['version']}")
    config = ModelConfig.from_dict(header["config"])
    vocab = Vocabulary.from_dict(header["vocab"]) if header.get("vocab") else None

    tensors: dict[str, np.ndarray] = {}
    offset = 8 + header_len
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
        tensors[entry["name"]] = arr.astype(np.float64)
        offset += 4 * count
    if offset != len(raw):
        raise ValueError(f"{path}: payload size mismatch")

    expected = _expected_model_shapes(config)
    bad = [
        f"{name}: file {tensors[name].shape}, config {shape}"
        for name, shape in expected.items()
        if name in tensors and tensors[name].shape != shape
    ]
    if bad:
        raise ValueError(f"{path}: tensor shapes inconsistent with model config: " + "; ".join(bad))

    return Checkpoint(
        tensors=tensors,
        config=config,
        vocab=vocab,
        frozen=tuple(header.get("frozen", ())),
        extra=header.get("extra", {}),
    )
