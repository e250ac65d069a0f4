"""Versioned binary containers for parameters and extracted features.

Checkpoint layout (little-endian throughout):
    magic "DRLC" | u32 version | u32 kind | u32 json_len | config JSON
    | u32 blob_count | blobs

Each blob: u32 name_len | name utf8 | u32 rank | rank * u32 dims | f64 payload.
Blob names are written sorted so identical parameter sets serialize to
identical bytes. Feature archives ("DRLF") hold the embedding dim then one
record per bag: bag_id, integer label, row count, row-major f64 rows.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import CheckpointError

MAGIC_CKPT = b"DRLC"
MAGIC_FEAT = b"DRLF"
VERSION = 1
KIND_EXTRACTOR = 1
KIND_TRAIN_STATE = 2


def _pack_array(name: str, arr: np.ndarray) -> bytes:
    # asarray, not ascontiguousarray: the latter silently promotes 0-d to 1-d
    data = np.asarray(arr, dtype="<f8")
    nb = name.encode("utf-8")
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<I", data.ndim)
    dims = struct.pack(f"<{data.ndim}I", *data.shape) if data.ndim else b""
    return head + dims + data.tobytes(order="C")


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated file at byte {self.off}")
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def _read_array(r: _Reader) -> tuple[str, np.ndarray]:
    name = r.take(r.u32()).decode("utf-8")
    rank = r.u32()
    shape = tuple(r.u32() for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    payload = r.take(count * 8)
    arr = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    return name, arr


def save_checkpoint(path, kind: int, config: dict, arrays: dict[str, np.ndarray]) -> None:
    cfg_bytes = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [
        MAGIC_CKPT,
        struct.pack("<III", VERSION, kind, len(cfg_bytes)),
        cfg_bytes,
        struct.pack("<I", len(arrays)),
    ]
    for name in sorted(arrays):
        parts.append(_pack_array(name, arrays[name]))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path, expect_kind: int | None = None) -> tuple[int, dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    if r.take(4) != MAGIC_CKPT:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    kind = r.u32()
    if expect_kind is not None and kind != expect_kind:
        want = "extractor" if expect_kind == KIND_EXTRACTOR else "training-state"
        raise CheckpointError(f"{path}: wrong checkpoint kind {kind}, expected {want}")
    config = json.loads(r.take(r.u32()).decode("utf-8"))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name, arr = _read_array(r)
        arrays[name] = arr
    if r.off != len(r.buf):
        raise CheckpointError(f"{path}: {len(r.buf) - r.off} trailing bytes")
    return kind, config, arrays


def save_features(path, d: int, bags: list[tuple[str, int, np.ndarray]]) -> None:
    parts = [MAGIC_FEAT, struct.pack("<III", VERSION, d, len(bags))]
    for bag_id, label, rows in bags:
        rows = np.asarray(rows, dtype="<f8")
        if rows.ndim != 2 or rows.shape[1] != d:
            raise CheckpointError(
                f"bag {bag_id!r}: feature block {rows.shape} does not match d={d}"
            )
        ib = bag_id.encode("utf-8")
        parts.append(struct.pack("<I", len(ib)) + ib)
        parts.append(struct.pack("<II", label, rows.shape[0]))
        parts.append(rows.tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_features(path) -> tuple[int, list[tuple[str, int, np.ndarray]]]:
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    if r.take(4) != MAGIC_FEAT:
        raise CheckpointError(f"{path}: not a feature archive (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported archive version {version}")
    d = r.u32()
    bags = []
    for _ in range(r.u32()):
        bag_id = r.take(r.u32()).decode("utf-8")
        label = r.u32()
        n = r.u32()
        rows = np.frombuffer(r.take(n * d * 8), dtype="<f8").reshape(n, d).astype(np.float64)
        bags.append((bag_id, label, rows))
    if r.off != len(r.buf):
        raise CheckpointError(f"{path}: {len(r.buf) - r.off} trailing bytes")
    return d, bags
