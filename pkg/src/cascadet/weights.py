"""Bit-exact storage of named parameter tensors.

File format (".cwts", all integers unsigned 32-bit little-endian):

    magic "CWTS" | version (=1) | entry count
    per entry: name length | name bytes (ASCII) | rank | extents... | payload
    trailer: CRC32 of every preceding byte

Tensor payloads are raw float32 little-endian values, row major. The
reserved entry name ``__meta__`` carries archive metadata instead of a
tensor: its payload is UTF-8 ``key=value`` lines, one per line, with rank 1
and a single extent equal to the byte length.

Fixture initialization uses a fixed 64-bit linear congruential generator so
identical archives can be reproduced anywhere:

    state starts at seed; per draw: state = (state * 6364136223846793005
                                             + 1442695040888963407) mod 2^64
    value = ((state >> 11) / 2^53) * 0.2 - 0.1, stored as float32
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"CWTS"
VERSION = 1
META_ENTRY = "__meta__"

LCG_MULTIPLIER = 6364136223846793005
LCG_INCREMENT = 1442695040888963407
_U64 = (1 << 64) - 1


class ArchiveError(Exception):
    """Base class for weight-archive failures."""


class BadMagicError(ArchiveError):
    pass


class UnsupportedVersionError(ArchiveError):
    pass


class ChecksumError(ArchiveError):
    pass


class TruncatedArchiveError(ArchiveError):
    pass


def _check_name(name: str):
    if not name:
        raise ArchiveError("tensor names must be non-empty")
    if not name.isascii():
        raise ArchiveError(f"tensor name {name!r} is not ASCII")


class WeightArchive:
    """Ordered map of parameter name -> float32 tensor, plus metadata."""

    def __init__(self, tensors: dict[str, np.ndarray] | None = None,
                 metadata: dict[str, str] | None = None):
        self._tensors: dict[str, np.ndarray] = {}
        self.metadata: dict[str, str] = dict(metadata or {})
        for name, tensor in (tensors or {}).items():
            self.put(name, tensor)

    def put(self, name: str, tensor: np.ndarray):
        _check_name(name)
        if name == META_ENTRY:
            raise ArchiveError(f"{META_ENTRY!r} is reserved for metadata")
        if name in self._tensors:
            raise ArchiveError(f"duplicate tensor name {name!r}")
        arr = np.ascontiguousarray(tensor, dtype=np.float32)
        if arr.size == 0:
            raise ArchiveError(f"tensor {name!r} is empty")
        self._tensors[name] = arr

    def get(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def names(self) -> list[str]:
        return list(self._tensors)

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def __eq__(self, other) -> bool:
        if not isinstance(other, WeightArchive):
            return NotImplemented
        if self.metadata != other.metadata:
            return False
        if self.names() != other.names():
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self._tensors.values(), other._tensors.values()))


def _pack_entry(name: str, rank: int, extents: tuple[int, ...],
                payload: bytes) -> bytes:
    encoded = name.encode("ascii")
    head = struct.pack("<I", len(encoded)) + encoded
    head += struct.pack("<I", rank) + struct.pack(f"<{rank}I", *extents)
    return head + payload


def save(archive: WeightArchive, path: str | Path) -> None:
    """Write the archive; the trailing CRC32 covers every preceding byte."""
    entries = []
    if archive.metadata:
        lines = "".join(f"{k}={v}\n" for k, v in archive.metadata.items())
        payload = lines.encode("utf-8")
        entries.append(_pack_entry(META_ENTRY, 1, (len(payload),), payload))
    for name in archive.names():
        tensor = archive.get(name)
        entries.append(_pack_entry(name, tensor.ndim, tensor.shape,
                                   tensor.astype("<f4").tobytes()))
    body = MAGIC + struct.pack("<II", VERSION, len(entries)) + b"".join(entries)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedArchiveError(
                f"archive ends at byte {len(self.data)}, needed {self.pos + n}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load(path: str | Path) -> WeightArchive:
    """Read an archive, validating magic, version and checksum first."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC):
        raise TruncatedArchiveError(f"file is only {len(data)} bytes")
    if data[:len(MAGIC)] != MAGIC:
        raise BadMagicError(f"bad magic {data[:len(MAGIC)]!r}")
    if len(data) < 12:
        raise TruncatedArchiveError(f"file is only {len(data)} bytes")
    version = struct.unpack_from("<I", data, 4)[0]
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    stored = struct.unpack_from("<I", data, len(data) - 4)[0]
    actual = zlib.crc32(data[:-4])
    if stored != actual:
        raise ChecksumError(
            f"checksum mismatch: stored {stored:#010x}, computed {actual:#010x}")

    reader = _Reader(data[:-4])
    reader.pos = 8
    count = reader.u32()
    tensors: dict[str, np.ndarray] = {}
    metadata: dict[str, str] = {}
    for _ in range(count):
        name = reader.take(reader.u32()).decode("ascii")
        rank = reader.u32()
        extents = tuple(reader.u32() for _ in range(rank))
        if name == META_ENTRY:
            text = reader.take(extents[0]).decode("utf-8")
            for line in text.splitlines():
                key, _, value = line.partition("=")
                metadata[key] = value
            continue
        size = 1
        for extent in extents:
            size *= extent
        payload = reader.take(size * 4)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(extents).copy()
    if reader.pos != len(reader.data):
        raise TruncatedArchiveError(
            f"{len(reader.data) - reader.pos} trailing bytes after last entry")
    return WeightArchive(tensors, metadata)


def _lcg_block(start_state: int, count: int) -> tuple[np.ndarray, int]:
    """`count` successive LCG states starting after ``start_state``."""
    states = np.empty(count, dtype=np.uint64)
    state = start_state
    for i in range(count):
        state = (state * LCG_MULTIPLIER + LCG_INCREMENT) & _U64
        states[i] = state
    return states, state


def _lcg_uniform(seed: int, count: int) -> np.ndarray:
    """`count` draws in [-0.1, 0.1) as float32, vectorized in blocks.

    Blocks after the first advance the whole previous block by B steps at
    once: state[i+B] = A^B * state[i] + C_B (mod 2^64), with (A^B, C_B)
    accumulated exactly in Python integers. Identical to the scalar
    recurrence, draw for draw.
    """
    block = min(count, 4096)
    if block == 0:
        return np.zeros(0, dtype=np.float32)
    states, _ = _lcg_block(seed & _U64, block)
    chunks = [states]
    produced = block
    if produced < count:
        mult_b, inc_b = 1, 0
        for _ in range(block):
            mult_b = (mult_b * LCG_MULTIPLIER) & _U64
            inc_b = (inc_b * LCG_MULTIPLIER + LCG_INCREMENT) & _U64
        mult_arr = np.uint64(mult_b)
        inc_arr = np.uint64(inc_b)
        prev = states
        while produced < count:
            prev = prev * mult_arr + inc_arr
            chunks.append(prev)
            produced += block
    states = np.concatenate(chunks)[:count]
    uniform = (states >> np.uint64(11)).astype(np.float64) / float(1 << 53)
    return (uniform * 0.2 - 0.1).astype(np.float32)


def random_init(spec: list[tuple[str, tuple[int, ...]]], seed: int,
                metadata: dict[str, str] | None = None) -> WeightArchive:
    """Archive of uniform [-0.1, 0.1) tensors from the documented generator.

    Values are drawn in spec order, filling each tensor row-major, so the
    result is a pure function of (spec, seed).
    """
    total = sum(int(np.prod(shape)) for _, shape in spec)
    draws = _lcg_uniform(seed, total)
    meta = {"initializer": "lcg64", "seed": str(seed)}
    meta.update(metadata or {})
    archive = WeightArchive(metadata=meta)
    offset = 0
    for name, shape in spec:
        size = int(np.prod(shape))
        archive.put(name, draws[offset:offset + size].reshape(shape))
        offset += size
    return archive
