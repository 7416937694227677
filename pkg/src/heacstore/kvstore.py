"""Key-value storage backends behind one small interface.

Keys are ``str``, values ``bytes``.  ``scan`` returns entries in key order.
"""

from __future__ import annotations

import bisect
import os
import struct
import threading
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Iterator


class KvStore(ABC):
    @abstractmethod
    def get(self, key: str) -> bytes | None: ...

    @abstractmethod
    def put(self, key: str, value: bytes) -> None: ...

    @abstractmethod
    def delete(self, key: str) -> None: ...

    @abstractmethod
    def scan(self, prefix: str) -> list[tuple[str, bytes]]: ...

    def delete_prefix(self, prefix: str) -> int:
        keys = [k for k, _ in self.scan(prefix)]
        for k in keys:
            self.delete(k)
        return len(keys)

    def items(self) -> Iterator[tuple[str, bytes]]:
        return iter(self.scan(""))

    def close(self) -> None:
        pass


class MemoryKvStore(KvStore):
    def __init__(self):
        self._data: dict[str, bytes] = {}
        self._keys: list[str] = []
        self._lock = threading.RLock()

    def get(self, key):
        return self._data.get(key)

    def put(self, key, value):
        with self._lock:
            if key not in self._data:
                bisect.insort(self._keys, key)
            self._data[key] = bytes(value)

    def delete(self, key):
        with self._lock:
            if self._data.pop(key, None) is not None:
                del self._keys[bisect.bisect_left(self._keys, key)]

    def scan(self, prefix):
        with self._lock:
            lo = bisect.bisect_left(self._keys, prefix)
            out = []
            for k in self._keys[lo:]:
                if not k.startswith(prefix):
                    break
                out.append((k, self._data[k]))
            return out

    def __len__(self):
        return len(self._data)


_PUT, _DEL = 1, 2
_HDR = struct.Struct(">BII")


class FileKvStore(MemoryKvStore):
    """Append-only log on disk with the live map kept in memory.

    Each record is ``op u8 | key_len u32 | value_len u32 | key | value``.  The
    log is replayed on open; a torn trailing record is truncated away.
    ``compact`` rewrites the log with live entries only.
    """

    def __init__(self, path: str | os.PathLike, fsync: bool = False):
        super().__init__()
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.fsync = fsync
        self._replay()
        self._fh = open(self.path, "ab")

    def _replay(self):
        if not self.path.exists():
            return
        data = self.path.read_bytes()
        off = good = 0
        while off + _HDR.size <= len(data):
            op, klen, vlen = _HDR.unpack_from(data, off)
            end = off + _HDR.size + klen + vlen
            if end > len(data) or op not in (_PUT, _DEL):
                break
            key = data[off + _HDR.size:off + _HDR.size + klen].decode()
            if op == _PUT:
                MemoryKvStore.put(self, key, data[off + _HDR.size + klen:end])
            else:
                MemoryKvStore.delete(self, key)
            off = good = end
        if good != len(data):
            with open(self.path, "r+b") as fh:
                fh.truncate(good)

    def _append(self, op: int, key: str, value: bytes = b""):
        k = key.encode()
        self._fh.write(_HDR.pack(op, len(k), len(value)) + k + value)
        self._fh.flush()
        if self.fsync:
            os.fsync(self._fh.fileno())

    def put(self, key, value):
        with self._lock:
            self._append(_PUT, key, bytes(value))
            super().put(key, value)

    def delete(self, key):
        with self._lock:
            if key in self._data:
                self._append(_DEL, key)
                super().delete(key)

    def compact(self):
        with self._lock:
            tmp = self.path.with_suffix(".compact")
            with open(tmp, "wb") as fh:
                for k in self._keys:
                    kb, v = k.encode(), self._data[k]
                    fh.write(_HDR.pack(_PUT, len(kb), len(v)) + kb + v)
            self._fh.close()
            os.replace(tmp, self.path)
            self._fh = open(self.path, "ab")

    def close(self):
        with self._lock:
            self._fh.close()
