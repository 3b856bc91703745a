"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic  b"DWMCKPT\\0"
    u32    format version
    u32    section count
    per section:
        u16 name length, name (utf-8)
        u8  kind: 0 = text, 1 = array
        text:  u64 byte length, utf-8 bytes
        array: u8 dtype code (4 = float32, 8 = float64), u8 ndim, u32 dims..., raw data
    8-byte BLAKE2b digest of everything before it
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensorcore import ConvLayer
from .networks import EmbedderParams, ExtractorParams
from .training import TrainConfig, TrainState
from .transforms import TransformSpec

MAGIC = b"DWMCKPT\0"
VERSION = 1
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: TrainConfig
    transform: TransformSpec
    embedder: EmbedderParams
    extractor: ExtractorParams
    buffers: list[np.ndarray]
    iteration: int
    rng_state: dict

    @classmethod
    def from_state(cls, state: TrainState) -> "Checkpoint":
        return cls(state.config, state.embedder.transform, state.embedder, state.extractor,
                   state.buffers, state.iteration, state.rng.bit_generator.state)

    def to_state(self) -> TrainState:
        rng = np.random.default_rng()
        rng.bit_generator.state = self.rng_state
        return TrainState(self.config, self.embedder, self.extractor,
                          [b.copy() for b in self.buffers], self.iteration, rng)


def _text(name: str, value: str) -> bytes:
    raw = value.encode()
    return _name(name) + b"\0" + struct.pack("<Q", len(raw)) + raw


def _array(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = arr.dtype.itemsize
    if arr.dtype.kind != "f" or code not in _DTYPES:
        raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
    head = struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return _name(name) + b"\1" + head + arr.astype(_DTYPES[code], copy=False).tobytes()


def _name(name: str) -> bytes:
    raw = name.encode()
    return struct.pack("<H", len(raw)) + raw


def _layer_sections(prefix: str, layers: list[ConvLayer]):
    meta = ";".join(f"{l.kind},{l.activation},{int(l.bias is not None)}" for l in layers)
    yield _text(f"{prefix}.layers", meta)
    for i, l in enumerate(layers):
        yield _array(f"{prefix}.{i}.weight", l.weight)
        if l.bias is not None:
            yield _array(f"{prefix}.{i}.bias", l.bias)


def dumps(ckpt: Checkpoint) -> bytes:
    sections = [
        _text("config", ckpt.config.to_text()),
        _text("transform.name", f"{ckpt.transform.name} {ckpt.transform.m} {ckpt.transform.n}"),
        _array("transform.forward", ckpt.transform.forward.astype(np.float64)),
        _array("transform.inverse", ckpt.transform.inverse.astype(np.float64)),
        *_layer_sections("embedder", ckpt.embedder.layers),
        *_layer_sections("extractor", ckpt.extractor.layers),
        *(_array(f"momentum.{i}", b) for i, b in enumerate(ckpt.buffers)),
        _text("iteration", str(ckpt.iteration)),
        _text("rng", json.dumps(ckpt.rng_state, sort_keys=True)),
    ]
    body = MAGIC + struct.pack("<II", VERSION, len(sections)) + b"".join(sections)
    return body + hashlib.blake2b(body, digest_size=8).digest()


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptCheckpointError("unexpected end of checkpoint data")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + 16 or data[:len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError("not a checkpoint file (bad magic or too short)")
    body, digest = data[:-8], data[-8:]
    version = struct.unpack_from("<I", data, len(MAGIC))[0]
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, this build reads {VERSION}")
    if hashlib.blake2b(body, digest_size=8).digest() != digest:
        raise CorruptCheckpointError("checksum mismatch; file is truncated or corrupted")

    r = _Reader(body)
    r.take(len(MAGIC) + 4)
    (count,) = r.unpack("<I")
    sections: dict[str, object] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (kind,) = r.unpack("<B")
        if kind == 0:
            (size,) = r.unpack("<Q")
            sections[name] = r.take(size).decode()
        elif kind == 1:
            code, ndim = r.unpack("<BB")
            if code not in _DTYPES:
                raise CorruptCheckpointError(f"{name}: unknown dtype code {code}")
            shape = r.unpack(f"<{ndim}I")
            dt = _DTYPES[code]
            n = int(np.prod(shape)) * dt.itemsize
            sections[name] = np.frombuffer(r.take(n), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        else:
            raise CorruptCheckpointError(f"{name}: unknown section kind {kind}")
    if r.pos != len(body):
        raise CorruptCheckpointError("trailing bytes after last section")

    try:
        config = TrainConfig.from_text(sections["config"])
        tname, m, n = sections["transform.name"].split()
        transform = TransformSpec(tname, int(m), int(n), sections["transform.forward"],
                                  sections["transform.inverse"])
        emb = EmbedderParams(transform, _layers("embedder", sections))
        ext = ExtractorParams(transform, _layers("extractor", sections))
        buffers = []
        while f"momentum.{len(buffers)}" in sections:
            buffers.append(sections[f"momentum.{len(buffers)}"])
        return Checkpoint(config, transform, emb, ext, buffers, int(sections["iteration"]),
                          json.loads(sections["rng"]))
    except KeyError as exc:
        raise CorruptCheckpointError(f"missing section {exc}") from None


def _layers(prefix: str, sections: dict) -> list[ConvLayer]:
    layers = []
    for i, meta in enumerate(sections[f"{prefix}.layers"].split(";")):
        kind, act, has_bias = meta.split(",")
        bias = sections[f"{prefix}.{i}.bias"] if has_bias == "1" else None
        layers.append(ConvLayer(kind, sections[f"{prefix}.{i}.weight"], bias, act))
    return layers


def save_checkpoint(ckpt: Checkpoint | TrainState, path: str | Path) -> None:
    if isinstance(ckpt, TrainState):
        ckpt = Checkpoint.from_state(ckpt)
    Path(path).write_bytes(dumps(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return loads(Path(path).read_bytes())
