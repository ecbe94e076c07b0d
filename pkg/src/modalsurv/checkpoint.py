"""Binary checkpoint container.

Layout::

    b"MSRV" | u32 version | u32 meta_len | meta (UTF-8 JSON) | blobs | u32 crc32

All integers are little-endian. ``meta["sections"]`` lists each named blob
with its shape and byte offset into the blob region; every blob is raw
little-endian float32. The CRC covers every byte before it.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MSRV"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sII")


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    epoch: int = 0
    history: list[dict] = field(default_factory=list)
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_step: int = 0
    extra: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for group in (self.params, self.optimizer, self.extra):
            for k, v in group.items():
                group[k] = np.asarray(v, dtype=np.float32)

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        scalars = (self.config, self.epoch, self.history, self.optimizer_step, self.meta)
        if scalars != (other.config, other.epoch, other.history, other.optimizer_step, other.meta):
            return False
        for a, b in ((self.params, other.params), (self.optimizer, other.optimizer), (self.extra, other.extra)):
            if a.keys() != b.keys():
                return False
            for k in a:
                if a[k].shape != b[k].shape or a[k].tobytes() != b[k].tobytes():
                    return False
        return True


_GROUPS = ("params", "optimizer", "extra")


def to_bytes(c: Checkpoint) -> bytes:
    sections = []
    blobs = []
    offset = 0
    for group in _GROUPS:
        for name, arr in getattr(c, group).items():
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            sections.append({"group": group, "name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
            blobs.append(data)
            offset += len(data)
    meta = {
        "config": c.config,
        "epoch": c.epoch,
        "history": c.history,
        "optimizer_step": c.optimizer_step,
        "meta": c.meta,
        "sections": sections,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    payload = _HEADER.pack(MAGIC, FORMAT_VERSION, len(meta_bytes)) + meta_bytes + b"".join(blobs)
    return payload + struct.pack("<I", zlib.crc32(payload))


def from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < _HEADER.size + 4:
        raise TruncatedError("file too short to be a checkpoint")
    magic, version, meta_len = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    payload, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(payload) != crc:
        raise ChecksumError("checksum mismatch; checkpoint is corrupted or truncated")
    if version > FORMAT_VERSION:
        raise VersionError(f"checkpoint format version {version} is newer than supported {FORMAT_VERSION}")
    start = _HEADER.size
    if start + meta_len > len(payload):
        raise TruncatedError("metadata block runs past end of file")
    meta = json.loads(payload[start : start + meta_len].decode("utf-8"))
    blob = payload[start + meta_len :]
    groups = {g: {} for g in _GROUPS}
    for sec in meta["sections"]:
        end = sec["offset"] + sec["nbytes"]
        if end > len(blob):
            raise TruncatedError(f"section {sec['name']!r} runs past end of file")
        arr = np.frombuffer(blob[sec["offset"] : end], dtype="<f4").reshape(sec["shape"])
        groups[sec["group"]][sec["name"]] = arr.astype(np.float32)
    return Checkpoint(
        params=groups["params"],
        config=meta["config"],
        epoch=meta["epoch"],
        history=meta["history"],
        optimizer=groups["optimizer"],
        optimizer_step=meta["optimizer_step"],
        extra=groups["extra"],
        meta=meta["meta"],
    )


def save_checkpoint(c: Checkpoint, path) -> None:
    Path(path).write_bytes(to_bytes(c))


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
