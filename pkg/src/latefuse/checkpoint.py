"""Binary checkpoint container.

Layout (all integers little-endian):

    magic     5 bytes  b"LAMI1"
    version   u16      currently 1
    tag       u8 len + ascii   component tag: "lm", "dual" or "fusion"
    meta      u32 len + utf-8 JSON (config, vocab, variant, ...)
    count     u32      number of tensors
    per tensor:
        name  u16 len + utf-8
        ndim  u8
        dims  u32 * ndim
        data  float64 raw little-endian, C order

Tensor payloads round-trip bit-exactly. Malformed input raises FormatError
naming the byte offset where parsing stopped.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"LAMI1"
VERSION = 1
COMPONENT_TAGS = ("lm", "dual", "fusion")


def write_container(path, tag: str, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    if tag not in COMPONENT_TAGS:
        raise FormatError(f"unknown component tag {tag!r}")
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<H", VERSION)
    tag_b = tag.encode("ascii")
    blob += struct.pack("<B", len(tag_b)) + tag_b
    meta_b = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob += struct.pack("<I", len(meta_b)) + meta_b
    blob += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        name_b = name.encode("utf-8")
        blob += struct.pack("<H", len(name_b)) + name_b
        blob += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            blob += struct.pack("<I", dim)
        blob += arr.astype("<f8", copy=False).tobytes(order="C")
    Path(path).write_bytes(bytes(blob))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.at = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.at + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated while reading {what} at byte {self.at}")
        out = self.buf[self.at : self.at + n]
        self.at += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))[0]


def read_container(path, expected_tag: str | None = None) -> tuple[str, dict, dict[str, np.ndarray]]:
    r = _Reader(Path(path).read_bytes(), path)
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0")
    version = r.unpack("<H", "version")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte {len(MAGIC)}")
    tag = r.take(r.unpack("<B", "tag length"), "tag").decode("ascii")
    if tag not in COMPONENT_TAGS:
        raise FormatError(f"{path}: unknown component tag {tag!r}")
    if expected_tag is not None and tag != expected_tag:
        raise FormatError(f"{path}: expected component {expected_tag!r}, found {tag!r}")
    meta_at = r.at
    try:
        meta = json.loads(r.take(r.unpack("<I", "meta length"), "meta").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: bad metadata block at byte {meta_at}: {e}") from None
    count = r.unpack("<I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.unpack("<H", "tensor name length"), "tensor name").decode("utf-8")
        ndim = r.unpack("<B", "ndim")
        shape = tuple(r.unpack("<I", "dim") for _ in range(ndim))
        n_items = 1
        for dim in shape:
            n_items *= dim
        raw = r.take(8 * n_items, f"tensor {name!r} payload")
        tensors[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    if r.at != len(r.buf):
        raise FormatError(f"{path}: {len(r.buf) - r.at} trailing bytes at byte {r.at}")
    return tag, meta, tensors
