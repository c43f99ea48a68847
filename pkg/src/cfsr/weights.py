"""Weight-store serialization (.cfsrwt files).

Binary layout, little-endian throughout:

    magic "CFSRWT01" (8 bytes)
    u32 entry count
    per entry: u16 name length, UTF-8 name, u8 dtype tag (0 = f32),
               u8 rank, rank x u32 dims, payload f32
    trailing u8 mode flag (0 branched, 1 fused)
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ConfigError, DataError

MAGIC = b"CFSRWT01"
MODE_FLAGS = {"branched": 0, "fused": 1}
_FLAG_MODES = {v: k for k, v in MODE_FLAGS.items()}


class WeightStore:
    """Ordered map from hierarchical parameter names to float32 arrays."""

    def __init__(self, mode: str = "branched"):
        if mode not in MODE_FLAGS:
            raise ConfigError(f"weight-store mode must be 'branched' or 'fused', got {mode!r}")
        self.mode = mode
        self._entries: dict[str, np.ndarray] = {}

    def add(self, name: str, array: np.ndarray) -> None:
        if name in self._entries:
            raise ConfigError(f"duplicate weight name {name!r}")
        self._entries[name] = np.ascontiguousarray(array, dtype=np.float32)

    def get(self, name: str) -> np.ndarray:
        if name not in self._entries:
            raise ConfigError(f"weight store has no entry named {name!r}")
        return self._entries[name]

    def items(self):
        return self._entries.items()

    def names(self):
        return list(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def num_scalars(self) -> int:
        return sum(a.size for a in self._entries.values())

    def save(self, path) -> None:
        blob = bytearray()
        blob += MAGIC
        blob += struct.pack("<I", len(self._entries))
        for name, arr in self._entries.items():
            raw = name.encode("utf-8")
            blob += struct.pack("<H", len(raw))
            blob += raw
            blob += struct.pack("<BB", 0, arr.ndim)
            blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
            blob += arr.astype("<f4", copy=False).tobytes(order="C")
        blob += struct.pack("<B", MODE_FLAGS[self.mode])
        with open(path, "wb") as fh:
            fh.write(bytes(blob))

    @classmethod
    def load(cls, path) -> "WeightStore":
        try:
            with open(path, "rb") as fh:
                blob = fh.read()
        except FileNotFoundError as exc:
            raise DataError(f"weight file not found: {path}") from exc
        except OSError as exc:
            raise DataError(f"cannot read weight file {path}: {exc}") from exc

        cur = _Cursor(blob, path)
        magic = cur.take(len(MAGIC))
        if magic != MAGIC:
            raise DataError(f"{path}: not a CFSR weight file (magic/version mismatch)")
        (count,) = struct.unpack("<I", cur.take(4))
        entries: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", cur.take(2))
            name = cur.take(name_len).decode("utf-8")
            dtype_tag, rank = struct.unpack("<BB", cur.take(2))
            if dtype_tag != 0:
                raise DataError(f"{path}: unsupported dtype tag {dtype_tag} for {name!r}")
            dims = struct.unpack(f"<{rank}I", cur.take(4 * rank))
            numel = int(np.prod(dims, dtype=np.int64)) if rank else 1
            payload = cur.take(4 * numel)
            arr = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
            if name in entries:
                raise DataError(f"{path}: duplicate entry {name!r}")
            entries[name] = arr
        (flag,) = struct.unpack("<B", cur.take(1))
        if flag not in _FLAG_MODES:
            raise DataError(f"{path}: unknown mode flag {flag}")
        if cur.remaining() != 0:
            raise DataError(f"{path}: {cur.remaining()} trailing bytes after mode flag")
        store = cls(_FLAG_MODES[flag])
        store._entries = entries
        return store


class _Cursor:
    """Bounds-checked byte reader that reports truncation with the file path."""

    def __init__(self, blob: bytes, path):
        self._blob = blob
        self._pos = 0
        self._path = path

    def take(self, n: int) -> bytes:
        if self._pos + n > len(self._blob):
            raise DataError(f"{self._path}: truncated weight file")
        piece = self._blob[self._pos:self._pos + n]
        self._pos += n
        return piece

    def remaining(self) -> int:
        return len(self._blob) - self._pos
