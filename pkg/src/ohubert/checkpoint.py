"""OHUB checkpoint container.

Layout (little-endian)::

    b"OHUB" | u32 version | u32 n | n bytes of JSON header
    u32 tensor count, then per tensor:
    u16 name length | name | u8 dtype (0=f32, 1=f64) | u8 rank | rank x u32 dims | data
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"OHUB"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {torch.float32: 0, torch.float64: 1}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    header: dict
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)

    @property
    def step(self) -> int:
        return int(self.header.get("step", 0))

    @property
    def config(self) -> dict:
        return self.header["config"]

    def group(self, prefix: str) -> dict[str, torch.Tensor]:
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def encode(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    head = json.dumps(ckpt.header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(head)))
    buf.write(head)
    buf.write(struct.pack("<I", len(ckpt.tensors)))
    for name in sorted(ckpt.tensors):
        t = ckpt.tensors[name].detach().cpu()
        if t.dtype not in _CODES:
            raise CheckpointError(f"tensor {name}: unsupported dtype {t.dtype}")
        code = _CODES[t.dtype]
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", code, t.dim()))
        buf.write(struct.pack(f"<{t.dim()}I", *t.shape))
        buf.write(np.ascontiguousarray(t.numpy(), dtype=_DTYPES[code]).tobytes())
    return buf.getvalue()


def decode(data: bytes, source: str = "<bytes>") -> Checkpoint:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"{source}: truncated checkpoint")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise CheckpointError(f"{source}: bad magic bytes (not an OHUB checkpoint)")
    version, n_head = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: checkpoint format version {version}, "
                              f"this build reads version {FORMAT_VERSION}")
    try:
        header = json.loads(bytes(take(n_head)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: corrupt header ({exc})") from None
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (n_name,) = struct.unpack("<H", take(2))
        name = bytes(take(n_name)).decode("utf-8", errors="strict")
        code, rank = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise CheckpointError(f"{source}: tensor {name}: unknown dtype code {code}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        dt = _DTYPES[code]
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(bytes(take(n_bytes)), dtype=dt).reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(dt.newbyteorder("="), copy=True))
    if pos != len(view):
        raise CheckpointError(f"{source}: {len(view) - pos} trailing bytes")
    return Checkpoint(header, tensors)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    return decode(path.read_bytes(), str(path))


def validate_shapes(ckpt: Checkpoint, module: torch.nn.Module, prefix: str = "model/") -> None:
    expected = {k: tuple(v.shape) for k, v in module.state_dict().items()}
    found = {k: tuple(v.shape) for k, v in ckpt.group(prefix).items()}
    missing = sorted(set(expected) - set(found))
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {', '.join(missing[:5])}")
    for k, shape in expected.items():
        if found[k] != shape:
            raise CheckpointError(f"shape mismatch for {k}: checkpoint {found[k]}, config {shape}")
