"""Named weight archive.

Layout::

    b"SPANCKPT"                      8-byte magic
    uint32 little-endian             header length in bytes
    header                           UTF-8 JSON, keys sorted
    float32 little-endian buffers    one per parameter, in header order

The header records the format version, model kind and configuration, the
charset (blank is always the last class), normalization statistics,
each parameter's name/shape/dtype/byte offset, and free-form metadata
such as optimizer hyperparameters.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ctc import Charset
from .data import NormStats
from .model import ModelConfig, Recognizer, build_model

MAGIC = b"SPANCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    config: ModelConfig
    charset: Charset
    params: dict[str, np.ndarray]
    stats: NormStats = field(default_factory=NormStats)
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: Recognizer, charset: Charset, stats: NormStats | None = None,
                   metadata: dict | None = None) -> "Checkpoint":
        if model.config.charset_size != len(charset):
            raise CheckpointError(
                f"model predicts {model.config.charset_size} symbols, charset has {len(charset)}")
        params = {name: p.data.astype("<f4", copy=True) for name, p in model.named_parameters()}
        return cls(model.kind, model.config, charset, params, stats or NormStats(),
                   dict(metadata or {}))

    def build(self, dtype=np.float32) -> Recognizer:
        model = build_model(self.kind, self.config, dtype=dtype)
        model.load_state_dict(self.params)
        return model

    # -- serialization ---------------------------------------------------------
    def header(self) -> dict:
        entries = []
        offset = 0
        for name, arr in self.params.items():
            nbytes = int(np.prod(arr.shape, dtype=np.int64)) * 4
            entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32",
                            "offset": offset, "nbytes": nbytes})
            offset += nbytes
        return {
            "format": "spanhtr-checkpoint",
            "format_version": FORMAT_VERSION,
            "kind": self.kind,
            "model_config": self.config.to_dict(),
            "charset": list(self.charset.symbols),
            "blank_index": self.charset.blank_index,
            "normalization": self.stats.to_dict(),
            "metadata": self.metadata,
            "params": entries,
        }

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True, ensure_ascii=False,
                          separators=(",", ":")).encode("utf-8")
        chunks = [MAGIC, struct.pack("<I", len(head)), head]
        for arr in self.params.values():
            chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return b"".join(chunks)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if len(blob) < 12 or blob[:8] != MAGIC:
            raise CheckpointError("not a checkpoint: bad magic bytes")
        (hlen,) = struct.unpack("<I", blob[8:12])
        if 12 + hlen > len(blob):
            raise CheckpointError("truncated checkpoint header")
        try:
            header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
        required = ("format_version", "kind", "model_config", "charset", "params")
        missing = [k for k in required if k not in header]
        if missing:
            raise CheckpointError(f"checkpoint header lacks {missing}")
        if header["format_version"] != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {header['format_version']}")
        body = memoryview(blob)[12 + hlen :]
        expected = sum(e["nbytes"] for e in header["params"])
        if len(body) != expected:
            raise CheckpointError(
                f"checkpoint body has {len(body)} bytes, header declares {expected}")
        params = {}
        for e in header["params"]:
            if e.get("dtype") != "float32":
                raise CheckpointError(f"{e['name']}: unsupported dtype {e.get('dtype')}")
            count = int(np.prod(e["shape"], dtype=np.int64))
            if count * 4 != e["nbytes"]:
                raise CheckpointError(f"{e['name']}: shape and byte count disagree")
            raw = body[e["offset"] : e["offset"] + e["nbytes"]]
            params[e["name"]] = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).astype(np.float32)
        try:
            config = ModelConfig.from_dict(header["model_config"])
            charset = Charset(tuple(header["charset"]))
        except (TypeError, ValueError) as exc:
            raise CheckpointError(f"invalid checkpoint metadata: {exc}") from exc
        if header.get("blank_index", len(charset)) != len(charset):
            raise CheckpointError("blank index must be the last class")
        stats = NormStats.from_dict(header["normalization"]) if "normalization" in header else NormStats()
        return cls(header["kind"], config, charset, params, stats, header.get("metadata", {}))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
