"""Append-only store of per-partition representations and knowledge texts.

Record layout (all integers little-endian)::

    u32 record_len                      bytes that follow
    u32 uid_len, uid bytes (UTF-8)
    u32 partition_index
    u8  stage                           0 = raw, 1 = reduced
    u32 dim, float64 x dim
    u32 summary_len, summary bytes
    u32 shift_len, shift bytes          shift_len = 0xFFFFFFFF when absent

Keys ``(user_id, partition_index, stage)`` are write-once.  The index is
rebuilt from the file on open; a torn trailing record (crash mid-append) is
cut off.
"""

from __future__ import annotations

import logging
import os
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Iterator, Optional, Union

import numpy as np

from .encoding import RAW, REDUCED
from .errors import ImmutableRecordError, PreconditionError

log = logging.getLogger(__name__)

_STAGE_CODE = {RAW: 0, REDUCED: 1}
_STAGE_NAME = {v: k for k, v in _STAGE_CODE.items()}
_ABSENT = 0xFFFFFFFF
_U32 = struct.Struct("<I")


@dataclass(frozen=True)
class StoredRecord:
    user_id: str
    partition_index: int
    stage: str
    vector: np.ndarray
    summary: str
    shift: Optional[str] = None

    @property
    def key(self) -> tuple[str, int, str]:
        return (self.user_id, self.partition_index, self.stage)


def _text(s: Optional[str]) -> bytes:
    if s is None:
        return _U32.pack(_ABSENT)
    raw = s.encode("utf-8")
    return _U32.pack(len(raw)) + raw


def encode_record(rec: StoredRecord) -> bytes:
    uid = rec.user_id.encode("utf-8")
    vec = np.ascontiguousarray(rec.vector, dtype="<f8")
    body = b"".join([
        _U32.pack(len(uid)), uid,
        _U32.pack(rec.partition_index),
        bytes([_STAGE_CODE[rec.stage]]),
        _U32.pack(vec.size), vec.tobytes(),
        _text(rec.summary), _text(rec.shift),
    ])
    return _U32.pack(len(body)) + body


def decode_record(body: bytes) -> StoredRecord:
    off = 0

    def u32() -> int:
        nonlocal off
        (v,) = _U32.unpack_from(body, off)
        off += 4
        return v

    def text() -> Optional[str]:
        nonlocal off
        n = u32()
        if n == _ABSENT:
            return None
        s = body[off : off + n].decode("utf-8")
        off += n
        return s

    n = u32()
    uid = body[off : off + n].decode("utf-8")
    off += n
    index = u32()
    stage = _STAGE_NAME[body[off]]
    off += 1
    dim = u32()
    vec = np.frombuffer(body, "<f8", dim, off).astype(np.float64)
    off += 8 * dim
    summary = text()
    shift = text()
    return StoredRecord(uid, index, stage, vec, summary or "", shift)


class RepresentationStore:
    """Write-once map ``(user, partition, stage) -> record``.

    ``path=None`` keeps everything in memory (handy for tests and dry runs).
    Writes are serialized by a lock so several user pipelines can share one
    store.
    """

    def __init__(self, path: Union[str, Path, None] = None, *, fsync: bool = False):
        self.path = Path(path) if path is not None else None
        self.fsync = fsync
        self._records: dict[tuple[str, int, str], StoredRecord] = {}
        self._lock = threading.Lock()
        self.writes = 0
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self) -> None:
        data = self.path.read_bytes()
        off = good = 0
        while off + 4 <= len(data):
            (n,) = _U32.unpack_from(data, off)
            if off + 4 + n > len(data):
                break
            try:
                rec = decode_record(data[off + 4 : off + 4 + n])
            except (struct.error, UnicodeDecodeError, KeyError, ValueError):
                break
            self._records[rec.key] = rec
            off += 4 + n
            good = off
        if good < len(data):
            log.warning("truncating %d bytes of torn data at the end of %s", len(data) - good, self.path)
            with open(self.path, "r+b") as fh:
                fh.truncate(good)

    @staticmethod
    def key(user_id: Hashable, partition_index: int, stage: str = REDUCED) -> tuple[str, int, str]:
        return (str(user_id), int(partition_index), stage)

    def __contains__(self, key: tuple) -> bool:
        return self.key(*key) in self._records

    def __len__(self) -> int:
        return len(self._records)

    def get(self, user_id: Hashable, partition_index: int, stage: str = REDUCED) -> Optional[StoredRecord]:
        """The stored record, or ``None`` when the key was never written."""
        return self._records.get(self.key(user_id, partition_index, stage))

    def put(self, rec: StoredRecord) -> None:
        if rec.stage not in _STAGE_CODE:
            raise PreconditionError(f"unknown stage {rec.stage!r}")
        if rec.partition_index < 1:
            raise PreconditionError("partition_index starts at 1")
        vec = np.asarray(rec.vector, dtype=np.float64)
        if not np.all(np.isfinite(vec)):
            raise PreconditionError("refusing to store a non-finite vector")
        rec = StoredRecord(str(rec.user_id), rec.partition_index, rec.stage, vec, rec.summary, rec.shift)
        with self._lock:
            if rec.key in self._records:
                raise ImmutableRecordError(f"record {rec.key} already stored")
            if self.path is not None:
                with open(self.path, "ab") as fh:
                    fh.write(encode_record(rec))
                    fh.flush()
                    if self.fsync:
                        os.fsync(fh.fileno())
            self._records[rec.key] = rec
            self.writes += 1

    def records(self, user_id: Hashable, stage: str = REDUCED) -> list[StoredRecord]:
        uid = str(user_id)
        recs = [r for k, r in self._records.items() if k[0] == uid and k[2] == stage]
        return sorted(recs, key=lambda r: r.partition_index)

    def users(self) -> list[str]:
        return sorted({k[0] for k in self._records})

    def __iter__(self) -> Iterator[StoredRecord]:
        return iter(list(self._records.values()))
