"""SLCK checkpoint format.

Layout (integers little-endian)::

    4 bytes   magic b"SLCK"
    u16       version (1)
    32 bytes  SHA-256 digest of the config (see ``config.config_hash``)
    u32       length of the UTF-8 config JSON, then the JSON bytes
    u32       number of sections
    per section:
        u16 name length, UTF-8 name
        u32 number of arrays
        per array:
            u16 name length, UTF-8 name
            u8  ndim, then ndim x u32 shape
            prod(shape) float32 values, C order

Section names are restricted to :data:`KNOWN_SECTIONS`.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"SLCK"
VERSION = 1
KNOWN_SECTIONS = ("global", "student", "teacher", "predictor", "heads", "optimizer")


class CheckpointError(ValueError):
    pass


@dataclass(eq=False)
class Checkpoint:
    config_hash: str
    config: dict = field(default_factory=dict)
    sections: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        for name in self.sections:
            _check_section(name)

    def section(self, name: str) -> dict[str, np.ndarray]:
        _check_section(name)
        if name not in self.sections:
            raise CheckpointError(f"checkpoint has no {name!r} section (present: {sorted(self.sections)})")
        return self.sections[name]


def _check_section(name: str):
    if name not in KNOWN_SECTIONS:
        raise CheckpointError(f"unknown section {name!r}; known sections: {', '.join(KNOWN_SECTIONS)}")


def _pack_str(text: str) -> bytes:
    raw = text.encode()
    return struct.pack("<H", len(raw)) + raw


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    try:
        digest = bytes.fromhex(ckpt.config_hash)
    except ValueError:
        digest = b""
    if len(digest) != 32:
        raise CheckpointError("config hash must be a 64-character SHA-256 hex digest")
    cfg = json.dumps(ckpt.config, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<H", VERSION), digest, struct.pack("<I", len(cfg)), cfg]
    parts.append(struct.pack("<I", len(ckpt.sections)))
    for sname, arrays in ckpt.sections.items():
        _check_section(sname)
        parts.append(_pack_str(sname))
        parts.append(struct.pack("<I", len(arrays)))
        for aname, arr in arrays.items():
            a = np.asarray(arr, dtype="<f4")
            parts.append(_pack_str(aname))
            parts.append(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
            parts.append(a.tobytes(order="C"))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode()


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    digest = r.take(32).hex()
    (n_cfg,) = r.unpack("<I")
    config = json.loads(r.take(n_cfg).decode())
    (n_sections,) = r.unpack("<I")
    sections: dict[str, dict[str, np.ndarray]] = {}
    for _ in range(n_sections):
        sname = r.string()
        _check_section(sname)
        (n_arrays,) = r.unpack("<I")
        arrays = {}
        for _ in range(n_arrays):
            aname = r.string()
            (ndim,) = r.unpack("<B")
            shape = r.unpack(f"<{ndim}I") if ndim else ()
            count = int(np.prod(shape)) if ndim else 1
            arrays[aname] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        sections[sname] = arrays
    if r.pos != len(r.buf):
        raise CheckpointError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    return Checkpoint(digest, config, sections)
