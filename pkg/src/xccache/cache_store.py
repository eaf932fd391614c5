"""On-disk container for cache blobs and weights, plus the load-time benchmark.

File layout (all integers little-endian)::

    magic        4 bytes   b"XCC1"
    version      u16
    strategy     u8        0=KV 1=JITKV 2=XC 3=weights
    dtype        u8        0=f32 1=f16
    rank         u8
    dims         rank x u64
    digest       8 bytes   geometry digest (FNV-1a 64)
    payload_len  u64       product(dims) * dtype size
    payload      payload_len bytes, row-major
    checksum     8 bytes   BLAKE2b-64 of the payload

The trailing checksum is what turns a flipped payload byte into a load error;
the geometry digest alone cannot see it.
"""

from __future__ import annotations

import enum
import hashlib
import math
import os
import struct
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

MAGIC = b"XCC1"
VERSION = 1
_FIXED = struct.Struct("<4sHBBB")
_U64 = struct.Struct("<Q")
CHECKSUM_BYTES = 8


class FormatError(ValueError):
    pass


class CorruptionError(FormatError):
    pass


class StrategyCode(enum.IntEnum):
    KV = 0
    JITKV = 1
    XC = 2
    WEIGHTS = 3


class DType(enum.IntEnum):
    F32 = 0
    F16 = 1

    @property
    def itemsize(self) -> int:
        return 4 if self is DType.F32 else 2

    @classmethod
    def parse(cls, value) -> "DType":
        if isinstance(value, DType):
            return value
        if isinstance(value, str):
            return {"f32": cls.F32, "float32": cls.F32, "f16": cls.F16, "float16": cls.F16}[value.lower()]
        return cls(int(value))


# ---------------------------------------------------------------------------
# IEEE-754 binary16


def f16_encode(x) -> np.ndarray:
    """float32 -> binary16 bit patterns (uint16), round-to-nearest-even; overflow gives +-inf."""
    with np.errstate(over="ignore"):
        return np.asarray(x, dtype=np.float32).astype("<f2").view("<u2")


def f16_decode(bits) -> np.ndarray:
    """binary16 bit patterns -> float32 (exact)."""
    return np.asarray(bits, dtype="<u2").view("<f2").astype(np.float32)


def f16_roundtrip(x) -> np.ndarray:
    return f16_decode(f16_encode(x))


# ---------------------------------------------------------------------------
# geometry digest


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def geometry_digest(**fields) -> bytes:
    """8-byte digest of ``key=value`` pairs in sorted key order."""
    canon = ";".join(f"{k}={fields[k]}" for k in sorted(fields)).encode()
    return fnv1a64(canon).to_bytes(8, "little")


# ---------------------------------------------------------------------------
# container


@dataclass
class StoredTensor:
    strategy: StrategyCode
    dtype: DType
    array: np.ndarray  # float32, decoded
    digest: bytes

    @property
    def dims(self) -> tuple[int, ...]:
        return self.array.shape


def header_bytes(strategy: StrategyCode, dtype: DType, dims: tuple[int, ...], digest: bytes) -> bytes:
    if len(digest) != 8:
        raise FormatError("digest must be 8 bytes")
    if not 1 <= len(dims) <= 255:
        raise FormatError(f"rank {len(dims)} not representable")
    payload = math.prod(dims) * dtype.itemsize
    return (_FIXED.pack(MAGIC, VERSION, int(strategy), int(dtype), len(dims))
            + b"".join(_U64.pack(d) for d in dims) + digest + _U64.pack(payload))


def encode_payload(array: np.ndarray, dtype: DType) -> bytes:
    if dtype is DType.F32:
        return np.ascontiguousarray(array, dtype="<f4").tobytes()
    return np.ascontiguousarray(f16_encode(array), dtype="<u2").tobytes()


def write_tensor(path, strategy: StrategyCode, array: np.ndarray, digest: bytes, dtype=DType.F32) -> int:
    """Write one container atomically; returns the number of bytes written."""
    dtype = DType.parse(dtype)
    array = np.asarray(array, dtype=np.float32)
    if array.ndim == 0:
        array = array.reshape(1)
    payload = encode_payload(array, dtype)
    blob = header_bytes(StrategyCode(strategy), dtype, array.shape, digest) + payload
    blob += hashlib.blake2b(payload, digest_size=CHECKSUM_BYTES).digest()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return len(blob)


@dataclass
class Header:
    version: int
    strategy: StrategyCode
    dtype: DType
    dims: tuple[int, ...]
    digest: bytes
    payload_len: int
    header_len: int


def parse_header(buf: bytes) -> Header:
    if len(buf) < _FIXED.size:
        raise CorruptionError("file shorter than the fixed header")
    magic, version, strategy, dtype, rank = _FIXED.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}")
    try:
        strategy = StrategyCode(strategy)
        dtype = DType(dtype)
    except ValueError as e:
        raise FormatError(str(e)) from e
    need = _FIXED.size + 8 * rank + 8 + 8
    if len(buf) < need:
        raise CorruptionError("truncated header")
    off = _FIXED.size
    dims = tuple(_U64.unpack_from(buf, off + 8 * i)[0] for i in range(rank))
    off += 8 * rank
    digest = bytes(buf[off:off + 8])
    payload_len = _U64.unpack_from(buf, off + 8)[0]
    if payload_len != math.prod(dims) * dtype.itemsize:
        raise FormatError(f"payload length {payload_len} disagrees with dims {dims}")
    return Header(version, strategy, dtype, dims, digest, payload_len, need)


def read_header(path) -> Header:
    with open(path, "rb") as fh:
        head = fh.read(_FIXED.size)
        if len(head) == _FIXED.size and head[:4] == MAGIC:
            head += fh.read(8 * head[-1] + 16)
    return parse_header(head)


def read_tensor(path, expect_digest: bytes | None = None) -> StoredTensor:
    buf = Path(path).read_bytes()
    hdr = parse_header(buf)
    end = hdr.header_len + hdr.payload_len
    if len(buf) < end + CHECKSUM_BYTES:
        raise CorruptionError(f"truncated payload: {len(buf)} bytes, expected {end + CHECKSUM_BYTES}")
    payload = memoryview(buf)[hdr.header_len:end]
    check = buf[end:end + CHECKSUM_BYTES]
    if hashlib.blake2b(payload, digest_size=CHECKSUM_BYTES).digest() != check:
        raise CorruptionError("payload checksum mismatch")
    if expect_digest is not None and hdr.digest != expect_digest:
        raise FormatError("geometry digest mismatch")
    if hdr.dtype is DType.F32:
        arr = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    else:
        arr = f16_decode(np.frombuffer(payload, dtype="<u2"))
    return StoredTensor(hdr.strategy, hdr.dtype, arr.reshape(hdr.dims), hdr.digest)


def save(blob, path, dtype="f32") -> int:
    """Serialise a cache blob (anything with ``strategy``, ``array``, ``digest``)."""
    return write_tensor(path, StrategyCode(int(blob.strategy.code)), blob.array, blob.digest, dtype)


def load(path):
    """Read a container back into the matching cache-blob type."""
    from .cache import blob_from_stored

    return blob_from_stored(read_tensor(path))


def payload_bytes(path) -> int:
    return read_header(path).payload_len


# ---------------------------------------------------------------------------
# load benchmark


@dataclass
class LoadStats:
    samples: int
    discarded: int
    mean_s: float
    ci95_s: float
    bytes_loaded: int

    def __post_init__(self):
        if self.ci95_s < 0:
            raise ValueError("confidence half-width must be non-negative")


def mean_ci95(samples) -> tuple[float, float]:
    """Mean and Student-t 95% half-width."""
    from scipy import stats

    x = np.asarray(samples, dtype=np.float64)
    n = x.size
    if n < 2:
        return float(x.mean()), 0.0
    half = stats.t.ppf(0.975, n - 1) * x.std(ddof=1) / math.sqrt(n)
    return float(x.mean()), float(half)


def drop_page_cache(path) -> None:
    """Best-effort eviction of ``path`` from the OS page cache."""
    advise = getattr(os, "posix_fadvise", None)
    if advise is None:
        return
    fd = os.open(path, os.O_RDONLY)
    try:
        advise(fd, 0, 0, os.POSIX_FADV_DONTNEED)
    finally:
        os.close(fd)


def time_load(path, reps: int = 100, discard: int = 10, cold: bool = False, loader=read_tensor) -> LoadStats:
    if reps <= discard:
        raise ValueError(f"reps={reps} must exceed discard={discard}")
    times = []
    for _ in range(reps):
        if cold:
            drop_page_cache(path)
        t0 = time.perf_counter()
        loader(path)
        times.append(time.perf_counter() - t0)
    kept = times[discard:]
    mean, half = mean_ci95(kept)
    return LoadStats(len(kept), discard, mean, half, os.path.getsize(path))


def bench_load(paths: Iterable, reps: int = 100, discard: int = 10, cold: bool = False) -> dict[str, LoadStats]:
    """Time full read + decode of each file; first ``discard`` timings dropped.

    By default the OS page cache is left alone and the warm-up discard is the
    only control; ``cold=True`` asks the kernel to evict each file before
    every read (best effort, POSIX only).
    """
    return {str(p): time_load(p, reps, discard, cold) for p in paths}
