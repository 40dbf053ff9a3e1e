"""Binary checkpoint format.

Layout (all integers little-endian):

    magic   4 bytes  b"LRSM"
    version u16
    digest  u16 length + UTF-8 model-spec digest
    count   u32 number of tensor records
    record  u16 name length + UTF-8 name
            u8 kind (0 dense, 1 factor_u, 2 factor_v, 3 bias, 4 norm)
            u8 ndim, then ndim x u32 dims
            payload: float64 little-endian, C order
    crc32   u32 over every preceding byte

Floats are stored in 64-bit regardless of the precision a model trained in,
so downstream analysis does not depend on training-time precision choices.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptCheckpointError, FormatError

__all__ = ["TENSOR_KINDS", "TensorRecord", "Checkpoint", "write_checkpoint", "read_checkpoint"]

MAGIC = b"LRSM"
VERSION = 1

TENSOR_KINDS = ("dense", "factor_u", "factor_v", "bias", "norm")
_KIND_CODE = {name: i for i, name in enumerate(TENSOR_KINDS)}


@dataclass
class TensorRecord:
    name: str
    kind: str
    data: np.ndarray

    def __post_init__(self):
        if self.kind not in _KIND_CODE:
            raise FormatError(f"unknown tensor kind {self.kind!r}")
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)


@dataclass
class Checkpoint:
    digest: str
    tensors: list[TensorRecord] = field(default_factory=list)
    version: int = VERSION

    def __post_init__(self):
        self.validate()

    def validate(self):
        names = [t.name for t in self.tensors]
        if len(names) != len(set(names)):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise FormatError(f"duplicate tensor names: {dupes}")
        by_name = {t.name: t for t in self.tensors}
        for t in self.tensors:
            if t.kind == "factor_u":
                mate_name = _factor_mate(t.name, "u", "v")
                mate = by_name.get(mate_name)
                if mate is None or mate.kind != "factor_v":
                    raise FormatError(f"factor_u tensor {t.name!r} has no factor_v mate")
                if t.data.ndim != 2 or mate.data.ndim != 2 or t.data.shape[1] != mate.data.shape[1]:
                    raise FormatError(
                        f"factor pair {t.name!r}/{mate_name!r} rank mismatch: "
                        f"{t.data.shape} vs {mate.data.shape}"
                    )
            elif t.kind == "factor_v":
                mate_name = _factor_mate(t.name, "v", "u")
                mate = by_name.get(mate_name)
                if mate is None or mate.kind != "factor_u":
                    raise FormatError(f"factor_v tensor {t.name!r} has no factor_u mate")

    def tensor(self, name: str) -> TensorRecord:
        for t in self.tensors:
            if t.name == name:
                return t
        raise KeyError(name)


def _factor_mate(name: str, suffix: str, mate_suffix: str) -> str:
    if not name.endswith("." + suffix):
        raise FormatError(f"factor tensor {name!r} must end in .{suffix}")
    return name[: -len(suffix)] + mate_suffix


def write_checkpoint(path, ckpt: Checkpoint) -> None:
    ckpt.validate()
    parts = [MAGIC, struct.pack("<H", ckpt.version)]
    digest = ckpt.digest.encode("utf-8")
    parts.append(struct.pack("<H", len(digest)))
    parts.append(digest)
    parts.append(struct.pack("<I", len(ckpt.tensors)))
    for t in ckpt.tensors:
        name = t.name.encode("utf-8")
        parts.append(struct.pack("<H", len(name)))
        parts.append(name)
        parts.append(struct.pack("<BB", _KIND_CODE[t.kind], t.data.ndim))
        parts.append(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        parts.append(t.data.astype("<f8", copy=False).tobytes(order="C"))
    blob = b"".join(parts)
    blob += struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)
    Path(path).write_bytes(blob)


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.path = str(path)
        self.offset = 0

    def take(self, nbytes: int, what: str) -> bytes:
        if self.offset + nbytes > len(self.blob):
            raise CorruptCheckpointError(
                f"{self.path}: truncated reading {what} at byte {self.offset}",
                path=self.path,
                offset=self.offset,
            )
        out = self.blob[self.offset : self.offset + nbytes]
        self.offset += nbytes
        return out

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < len(MAGIC) + 4:
        raise CorruptCheckpointError(
            f"{path}: file too short ({len(blob)} bytes)", path=str(path), offset=0
        )
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    actual_crc = zlib.crc32(blob[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise CorruptCheckpointError(
            f"{path}: checksum mismatch (stored {stored_crc:#010x}, "
            f"computed {actual_crc:#010x})",
            path=str(path),
            offset=len(blob) - 4,
        )
    r = _Reader(blob[:-4], path)
    if r.take(4, "magic") != MAGIC:
        raise CorruptCheckpointError(
            f"{path}: bad magic at byte 0", path=str(path), offset=0
        )
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise CorruptCheckpointError(
            f"{path}: unsupported format version {version}",
            path=str(path),
            offset=r.offset - 2,
        )
    (digest_len,) = r.unpack("<H", "digest length")
    digest = r.take(digest_len, "digest").decode("utf-8")
    (count,) = r.unpack("<I", "tensor count")
    tensors = []
    for i in range(count):
        (name_len,) = r.unpack("<H", f"tensor {i} name length")
        name = r.take(name_len, f"tensor {i} name").decode("utf-8")
        kind_code, ndim = r.unpack("<BB", f"tensor {name!r} kind/ndim")
        if kind_code >= len(TENSOR_KINDS):
            raise CorruptCheckpointError(
                f"{path}: tensor {name!r} has unknown kind code {kind_code} "
                f"at byte {r.offset - 2}",
                path=str(path),
                offset=r.offset - 2,
            )
        dims = r.unpack(f"<{ndim}I", f"tensor {name!r} dims")
        n_entries = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        payload = r.take(8 * n_entries, f"tensor {name!r} payload")
        data = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
        tensors.append(TensorRecord(name, TENSOR_KINDS[kind_code], data))
    if r.offset != len(r.blob):
        raise CorruptCheckpointError(
            f"{path}: {len(r.blob) - r.offset} trailing bytes at byte {r.offset}",
            path=str(path),
            offset=r.offset,
        )
    return Checkpoint(digest=digest, tensors=tensors, version=version)
