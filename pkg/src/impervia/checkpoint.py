"""IDNP binary checkpoint format for denoiser parameters.

Little-endian layout:

    magic "IDNP" | version u16 (=1) | digest_len u16 | config digest (utf-8
    hex) | tensor_count u32 | tensors... | tensor_count u32 | EMA tensors...

Each tensor record is: name_len u16 | name utf-8 | rank u8 | dims u32 x rank
| float32 body. The EMA section mirrors the primary section name for name.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, SchemaError

IDNP_MAGIC = b"IDNP"
IDNP_VERSION = 1


@dataclass(frozen=True)
class Checkpoint:
    config_digest: str
    params: dict[str, np.ndarray]
    ema: dict[str, np.ndarray]


def _pack_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    chunks = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise OSError(f"{self.path}: truncated checkpoint body")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def _read_tensors(reader: _Reader) -> dict[str, np.ndarray]:
    (count,) = reader.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (rank,) = reader.unpack("<B")
        dims = reader.unpack(f"<{rank}I") if rank else ()
        size = int(np.prod(dims)) if dims else 1
        body = reader.take(4 * size)
        arr = np.frombuffer(body, dtype="<f4").reshape(dims).copy()
        if name in tensors:
            raise SchemaError(f"{reader.path}: duplicate tensor name {name!r}")
        tensors[name] = arr
    return tensors


def save_checkpoint(path: str | Path, config_digest: str,
                    params: dict[str, np.ndarray],
                    ema: dict[str, np.ndarray]) -> None:
    if set(params) != set(ema):
        raise SchemaError("primary and EMA tensor names differ")
    digest = config_digest.encode("utf-8")
    blob = (
        IDNP_MAGIC
        + struct.pack("<H", IDNP_VERSION)
        + struct.pack("<H", len(digest))
        + digest
        + _pack_tensors(params)
        + _pack_tensors(ema)
    )
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    reader = _Reader(data, str(path))
    magic = reader.take(4)
    if magic != IDNP_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    (version,) = reader.unpack("<H")
    if version != IDNP_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    (digest_len,) = reader.unpack("<H")
    digest = reader.take(digest_len).decode("utf-8")
    params = _read_tensors(reader)
    ema = _read_tensors(reader)
    if reader.pos != len(data):
        raise SchemaError(f"{path}: {len(data) - reader.pos} trailing bytes")
    return Checkpoint(config_digest=digest, params=params, ema=ema)


def save_loss_history(path: str | Path, history: list[float]) -> None:
    lines = ["step,loss"] + [f"{i},{v:.9g}" for i, v in enumerate(history)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
