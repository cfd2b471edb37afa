"""
Binary checkpoint codec.

    b"DHGC"                       magic
    u32                           format version
    u32 + bytes                   model config text (sorted key=value lines)
    u32 + bytes                   metadata JSON (sorted keys, includes config_hash)
    u32                           parameter count
    per parameter, sorted by name:
      u32 + bytes name, u32 rank, rank x u32 dims, little-endian float64 data

All integers are little-endian.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from core.autodiff import ParamStore
from core.config import ModelConfig, config_hash, config_text, model_config_from_text
from core.errors import CheckpointError, CheckpointVersionError, ConfigError
from core.model import param_shapes

MAGIC = b"DHGC"
VERSION = 1
PROBE_PARAMS = ("probe.W", "probe.b")


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)
    version: int = VERSION

    @property
    def has_probe(self) -> bool:
        return all(n in self.params for n in PROBE_PARAMS)

    @property
    def n_classes(self) -> int | None:
        return self.params["probe.W"].shape[1] if self.has_probe else None

    def param_store(self) -> ParamStore:
        return ParamStore.from_arrays(self.params, seed=self.config.seed)

    def backbone(self) -> dict[str, np.ndarray]:
        return {n: p for n, p in self.params.items() if n not in PROBE_PARAMS}


def _check_names(config: ModelConfig, params: dict[str, np.ndarray]):
    expected = param_shapes(config)
    for name, array in params.items():
        if name in PROBE_PARAMS:
            continue
        if name not in expected:
            raise CheckpointError(f"unknown parameter name {name!r}")
        if array.shape != expected[name][0]:
            raise CheckpointError(f"{name}: shape {array.shape} != expected {expected[name][0]}")
    missing = set(expected) - set(params)
    if missing:
        raise CheckpointError(f"missing parameters {sorted(missing)[:3]}")


def _pack_bytes(blob: bytes) -> bytes:
    return struct.pack("<I", len(blob)) + blob


def to_bytes(ckpt: Checkpoint) -> bytes:
    _check_names(ckpt.config, ckpt.params)
    meta = {**ckpt.metadata, "config_hash": config_hash(ckpt.config)}
    out = [MAGIC, struct.pack("<I", ckpt.version),
           _pack_bytes(config_text(ckpt.config).encode("utf-8")),
           _pack_bytes(json.dumps(meta, sort_keys=True).encode("utf-8")),
           struct.pack("<I", len(ckpt.params))]
    for name in sorted(ckpt.params):
        array = np.ascontiguousarray(ckpt.params[name], dtype="<f8")
        out.append(_pack_bytes(name.encode("utf-8")))
        out.append(struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape))
        out.append(array.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def blob(self) -> bytes:
        return self.take(self.u32())


def from_bytes(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointVersionError("not a checkpoint: bad magic bytes")
    version = r.u32()
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    try:
        config = model_config_from_text(r.blob().decode("utf-8"))
        meta = json.loads(r.blob().decode("utf-8"))
    except (ConfigError, UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    if meta.pop("config_hash", None) != config_hash(config):
        raise CheckpointError("config hash mismatch")
    params: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.blob().decode("utf-8", errors="replace")
        dims = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(dims, dtype=np.int64))
        params[name] = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(dims)
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after the last parameter")
    _check_names(config, params)
    return Checkpoint(config, params, meta, version)


def save_checkpoint(ckpt: Checkpoint, path):
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from None
    return from_bytes(data)
