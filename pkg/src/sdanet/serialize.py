"""Binary containers: SDT1 tensors, SDCK checkpoints, SDRC recordings.

Everything is little-endian and bit-exact on round-trip.

SDT1 tensor blob:
    magic "SDT1" | u8 dtype code (0 = float64) | u8 ndim | ndim x u64 extents
    | raw row-major little-endian payload

SDCK checkpoint:
    magic "SDCK" | u32 format version | u32 metadata length | UTF-8 JSON
    metadata | u32 entry count | entries, each:
    u32 name length | UTF-8 name | SDT1 blob
    Entries are written sorted by name so identical state gives identical bytes.

SDRC recording:
    magic "SDRC" | u32 format version | u32 metadata length | UTF-8 JSON
    metadata (subject_id, fs_eeg, fs_audio) | SDT1 eeg | SDT1 stimulus

Malformed input raises FormatError carrying the byte offset of the problem.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError

TENSOR_MAGIC = b"SDT1"
CHECKPOINT_MAGIC = b"SDCK"
RECORDING_MAGIC = b"SDRC"
CHECKPOINT_VERSION = 1
RECORDING_VERSION = 1
_DTYPE_F64 = 0


class _Reader:
    """Byte cursor that reports its offset in every failure."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated while reading {what}", offset=self.pos)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def expect_magic(self, magic: bytes, what: str):
        at = self.pos
        got = self.take(len(magic), f"{what} magic")
        if got != magic:
            raise FormatError(f"bad {what} magic {got!r}, expected {magic!r}", offset=at)

    def done(self, what: str):
        if self.pos != len(self.data):
            raise FormatError(f"{len(self.data) - self.pos} trailing bytes after {what}", offset=self.pos)


def pack_tensor(arr: np.ndarray) -> bytes:
    a = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
    head = TENSOR_MAGIC + struct.pack("<BB", _DTYPE_F64, a.ndim)
    dims = b"".join(struct.pack("<Q", n) for n in a.shape)
    payload = a.astype("<f8", copy=False).tobytes(order="C")
    return head + dims + payload


def unpack_tensor(r: _Reader) -> np.ndarray:
    r.expect_magic(TENSOR_MAGIC, "tensor")
    at = r.pos
    code = r.u8("tensor dtype code")
    if code != _DTYPE_F64:
        raise FormatError(f"unsupported tensor dtype code {code}", offset=at)
    ndim = r.u8("tensor ndim")
    shape = tuple(r.u64(f"tensor extent {i}") for i in range(ndim))
    count = 1
    for n in shape:
        count *= n
    payload = r.take(8 * count, "tensor payload")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    return pack_tensor(arr)


def tensor_from_bytes(data: bytes) -> np.ndarray:
    r = _Reader(data)
    arr = unpack_tensor(r)
    r.done("tensor")
    return arr


def _pack_meta(metadata: dict) -> bytes:
    blob = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<I", len(blob)) + blob


def _unpack_meta(r: _Reader, what: str) -> dict:
    n = r.u32(f"{what} metadata length")
    at = r.pos
    blob = r.take(n, f"{what} metadata")
    try:
        meta = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"invalid {what} metadata JSON: {e}", offset=at)
    if not isinstance(meta, dict):
        raise FormatError(f"{what} metadata is not an object", offset=at)
    return meta


def save_checkpoint(path, entries: dict[str, np.ndarray], metadata: dict):
    """Write named tensors plus JSON metadata; entry order is sorted-by-name."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), _pack_meta(metadata)]
    names = sorted(entries)
    chunks.append(struct.pack("<I", len(names)))
    for name in names:
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(pack_tensor(entries[name]))
    data = b"".join(chunks)
    with open(path, "wb") as f:
        f.write(data)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)
    r.expect_magic(CHECKPOINT_MAGIC, "checkpoint")
    at = r.pos
    version = r.u32("checkpoint version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=at)
    meta = _unpack_meta(r, "checkpoint")
    count = r.u32("checkpoint entry count")
    entries: dict[str, np.ndarray] = {}
    for i in range(count):
        nlen = r.u32(f"entry {i} name length")
        at = r.pos
        name = r.take(nlen, f"entry {i} name").decode("utf-8")
        if name in entries:
            raise FormatError(f"duplicate entry name {name!r}", offset=at)
        entries[name] = unpack_tensor(r)
    r.done("checkpoint")
    return meta, entries


def save_recording_container(path, metadata: dict, eeg: np.ndarray, stimulus: np.ndarray):
    data = b"".join([
        RECORDING_MAGIC,
        struct.pack("<I", RECORDING_VERSION),
        _pack_meta(metadata),
        pack_tensor(eeg),
        pack_tensor(stimulus),
    ])
    with open(path, "wb") as f:
        f.write(data)


def load_recording_container(path) -> tuple[dict, np.ndarray, np.ndarray]:
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)
    r.expect_magic(RECORDING_MAGIC, "recording")
    at = r.pos
    version = r.u32("recording version")
    if version != RECORDING_VERSION:
        raise FormatError(f"unsupported recording version {version}", offset=at)
    meta = _unpack_meta(r, "recording")
    eeg = unpack_tensor(r)
    stimulus = unpack_tensor(r)
    r.done("recording")
    return meta, eeg, stimulus
