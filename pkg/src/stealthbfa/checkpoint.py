"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"BVQ1"  u32 version
    str model name             (u32 byte length + UTF-8)
    u32 ndim, u32 dims...      input shape
    u32 layer count, then per layer: u8 kind, u32 field count, u32 fields...
    u32 parametrized layer count, then per layer:
        f64 scale, u32 ndim, u32 dims..., int8 codes, u32 bias length, f64 biases...
    str config hash, u32 epochs, str provenance JSON

Codes are stored verbatim, so save/load is bit-exact.
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import astuple, dataclass, field
from pathlib import Path
from typing import BinaryIO, Tuple

import numpy as np

from .models import AvgPool2, Conv, Dense, Flatten, Model, ReLU
from .quant import QuantizedTensor, QuantParams

MAGIC = b"BVQ1"
VERSION = 1
_KINDS = {Dense: 1, Conv: 2, ReLU: 3, AvgPool2: 4, Flatten: 5}
_BY_CODE = {v: k for k, v in _KINDS.items()}


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint file."""


@dataclass
class Provenance:
    config_hash: str = ""
    epochs: int = 0
    extra: dict = field(default_factory=dict)


def _write_u32(fh: BinaryIO, *values: int) -> None:
    fh.write(struct.pack(f"<{len(values)}I", *values))


def _write_str(fh: BinaryIO, text: str) -> None:
    raw = text.encode("utf-8")
    _write_u32(fh, len(raw))
    fh.write(raw)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {self.pos}, file has {len(self.raw)}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def dumps(model: Model, provenance: Provenance = None) -> bytes:
    provenance = provenance or Provenance()
    fh = io.BytesIO()
    fh.write(MAGIC)
    _write_u32(fh, VERSION)
    _write_str(fh, model.name)
    _write_u32(fh, len(model.input_shape), *model.input_shape)
    _write_u32(fh, len(model.layers))
    for layer in model.layers:
        fields = astuple(layer)
        fh.write(struct.pack("<B", _KINDS[type(layer)]))
        _write_u32(fh, len(fields), *fields)
    _write_u32(fh, model.num_param_layers)
    for q, b in zip(model.weights, model.biases):
        fh.write(struct.pack("<d", q.scale))
        _write_u32(fh, len(q.shape), *q.shape)
        fh.write(np.ascontiguousarray(q.codes, dtype=np.int8).tobytes())
        _write_u32(fh, b.size)
        fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    _write_str(fh, provenance.config_hash)
    _write_u32(fh, provenance.epochs)
    _write_str(fh, json.dumps(provenance.extra, sort_keys=True))
    return fh.getvalue()


def loads(raw: bytes) -> Tuple[Model, Provenance]:
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"not a checkpoint: magic {raw[:4]!r}, expected {MAGIC!r}")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    name = r.text()
    input_shape = tuple(int(v) for v in np.atleast_1d(r.u32(r.u32())))
    layers = []
    for _ in range(r.u32()):
        kind = r.take(1)[0]
        if kind not in _BY_CODE:
            raise CheckpointError(f"unknown layer kind {kind} at offset {r.pos - 1}")
        count = r.u32()
        fields = tuple(int(v) for v in np.atleast_1d(r.u32(count))) if count else ()
        layers.append(_BY_CODE[kind](*fields))
    weights, biases = [], []
    for _ in range(r.u32()):
        scale = struct.unpack("<d", r.take(8))[0]
        shape = tuple(int(v) for v in np.atleast_1d(r.u32(r.u32())))
        size = int(np.prod(shape))
        codes = np.frombuffer(r.take(size), dtype=np.int8).reshape(shape).copy()
        weights.append(QuantizedTensor(codes, QuantParams(scale)))
        blen = r.u32()
        biases.append(np.frombuffer(r.take(8 * blen), dtype="<f8").astype(np.float64))
    config_hash = r.text()
    epochs = r.u32()
    extra = json.loads(r.text())
    if r.pos != len(raw):
        raise CheckpointError(f"{len(raw) - r.pos} trailing bytes after checkpoint payload")
    shape = input_shape
    for layer in layers:
        shape = layer.out_shape(shape)
    model = Model(name, tuple(layers), input_shape, tuple(weights), tuple(biases), shape[0])
    return model, Provenance(config_hash, epochs, extra)


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(payload)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def save(path, model: Model, provenance: Provenance = None) -> None:
    atomic_write_bytes(path, dumps(model, provenance))


def load(path) -> Tuple[Model, Provenance]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return loads(path.read_bytes())
