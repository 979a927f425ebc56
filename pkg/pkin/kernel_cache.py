"""
Binary container for kernel matrices and field snapshots.

Layout (little-endian): magic b"PKIN-KMAT\\0", format version u32, gamma f64, v_max f64,
n_per_axis u32, m f64, budget u64, seed u64, tag u64, rows u64, cols u64, row-major f64 payload,
CRC32 of the payload as u32. The tag is zero for kernels; field snapshots carry a digest of the
wall and slab settings they were solved for.
"""

import json
import logging
import os
import struct
import zlib
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import termcolor as tc

from pkin.errors import CacheError


MAGIC = b"PKIN-KMAT\0"
FORMAT_VERSION = 2
_HEADER = struct.Struct("<10sIddIdQQQQQ")
_CRC = struct.Struct("<I")


@dataclass(frozen=True)
class CacheKey:
    gamma: float
    v_max: float
    n_per_axis: int
    m: float
    budget: int
    seed: int
    tag: int = 0

    def digest(self, *extra) -> str:
        text = repr((self.gamma, self.v_max, self.n_per_axis, self.m, self.budget, self.seed) + tuple(extra))
        return f"{zlib.crc32(text.encode('utf-8')):08x}"


def write_matrix(path: str, matrix: np.ndarray, key: CacheKey) -> None:
    matrix = np.ascontiguousarray(matrix, dtype="<f8")
    if matrix.ndim != 2:
        raise CacheError(f"only 2-d arrays can be stored, got shape {matrix.shape}")
    payload = matrix.tobytes(order="C")
    header = _HEADER.pack(
        MAGIC,
        FORMAT_VERSION,
        float(key.gamma),
        float(key.v_max),
        int(key.n_per_axis),
        float(key.m),
        int(key.budget),
        int(key.seed) & 0xFFFFFFFFFFFFFFFF,
        int(key.tag),
        matrix.shape[0],
        matrix.shape[1],
    )
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(payload)
        f.write(_CRC.pack(zlib.crc32(payload)))
    os.replace(tmp, path)


def read_matrix(path: str) -> tuple[np.ndarray, CacheKey]:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size + _CRC.size:
        raise CacheError(f"{path} is truncated")
    magic, version, gamma, v_max, n, m, budget, seed, tag, rows, cols = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CacheError(f"{path} is not a kernel cache file")
    if version != FORMAT_VERSION:
        raise CacheError(f"{path} has format version {version}, expected {FORMAT_VERSION}")
    size = rows * cols * 8
    payload = blob[_HEADER.size : _HEADER.size + size]
    if len(payload) != size or len(blob) != _HEADER.size + size + _CRC.size:
        raise CacheError(f"{path} has an inconsistent payload size")
    (crc,) = _CRC.unpack_from(blob, _HEADER.size + size)
    if crc != zlib.crc32(payload):
        raise CacheError(f"{path} failed its CRC32 check")
    matrix = np.frombuffer(payload, dtype="<f8").reshape(rows, cols).astype(float)
    return matrix, CacheKey(gamma, v_max, n, m, budget, seed, tag)


class KernelCache:
    """Directory of kernel matrices keyed by (gamma, v_max, n_per_axis, m, budget, seed)."""

    def __init__(self, directory: Optional[str]):
        self._directory = directory

    @property
    def enabled(self) -> bool:
        return self._directory is not None

    def _stem(self, kind: str, key: CacheKey, angular: str) -> str:
        return os.path.join(self._directory, f"{kind}-{key.digest(angular)}")

    def load(self, kind: str, key: CacheKey, angular: str) -> Optional[tuple[np.ndarray, dict]]:
        if not self.enabled:
            return None
        stem = self._stem(kind, key, angular)
        if not os.path.exists(f"{stem}.bin"):
            return None
        try:
            matrix, stored = read_matrix(f"{stem}.bin")
        except CacheError as e:
            logging.warning(f"Ignoring unreadable kernel cache entry: {e}")
            return None
        if stored != key:
            logging.warning(f"Kernel cache entry {stem}.bin has a mismatched header; rebuilding")
            return None
        meta = {}
        if os.path.exists(f"{stem}.json"):
            with open(f"{stem}.json", "r") as f:
                meta = json.load(f)
        logging.info(f"Kernel cache hit for {kind} at {tc.colored(stem + '.bin', 'blue')}")
        return matrix, meta

    def store(self, kind: str, key: CacheKey, angular: str, matrix: np.ndarray, meta: dict) -> None:
        if not self.enabled:
            return
        stem = self._stem(kind, key, angular)
        write_matrix(f"{stem}.bin", matrix, key)
        with open(f"{stem}.json", "w") as f:
            json.dump({"key": asdict(key), "angular": angular, **meta}, f, indent=2, sort_keys=True)
        logging.info(f"Stored {kind} kernel in cache at {tc.colored(stem + '.bin', 'blue')}")
