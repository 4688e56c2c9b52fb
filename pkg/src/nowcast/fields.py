"""Raster and field types, the TPNN sequence format, and elementary field algebra.

Array convention: axis 0 is rows (y, north-south), axis 1 is columns (x,
east-west). A motion field ``(u, v)`` is a displacement in pixels per step
with ``u`` along columns and ``v`` along rows.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"TPNN"
VERSION = 1
HEADER = struct.Struct("<4sIIIII")


class FormatError(ValueError):
    """A TPNN file failed to parse. ``offset`` is the byte where it went wrong."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class TimestampError(FormatError):
    def __init__(self, message: str, offset: int, frame_index: int):
        super().__init__(message, offset)
        self.frame_index = frame_index


class NonFiniteError(FormatError):
    pass


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _frozen(a: np.ndarray, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PrecipField:
    """One n x n rain-rate raster (mm/h, float32) at a Unix timestamp."""

    values: np.ndarray
    timestamp: int = 0

    def __post_init__(self):
        v = _frozen(self.values, np.float32)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError(f"PrecipField must be square, got shape {v.shape}")
        n = v.shape[0]
        if n < 8 or not _is_pow2(n):
            raise ValueError(f"grid side must be a power of two >= 8, got {n}")
        if not np.all(np.isfinite(v)):
            raise ValueError("PrecipField values must be finite")
        if np.any(v < 0):
            raise ValueError("PrecipField values must be >= 0")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "timestamp", int(self.timestamp))

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class MotionField:
    """Per-pixel displacement (pixels per step)."""

    u: np.ndarray
    v: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        u = _frozen(self.u, np.float64)
        v = _frozen(self.v, np.float64)
        if u.shape != v.shape or u.ndim != 2:
            raise ValueError(f"u/v shape mismatch: {u.shape} vs {v.shape}")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise ValueError("MotionField components must be finite")
        n = u.shape[0]
        if np.max(np.hypot(u, v), initial=0.0) > n / 2:
            raise ValueError("displacement exceeds n/2; flow rejected as degenerate")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @classmethod
    def zeros(cls, n: int, degenerate: bool = False) -> "MotionField":
        return cls(np.zeros((n, n)), np.zeros((n, n)), degenerate)

    @classmethod
    def constant(cls, n: int, u: float, v: float) -> "MotionField":
        return cls(np.full((n, n), float(u)), np.full((n, n), float(v)))

    @property
    def n(self) -> int:
        return self.u.shape[0]

    def stack(self) -> np.ndarray:
        return np.stack([self.u, self.v])


@dataclass(frozen=True)
class IntensityField:
    """Per-pixel additive correction (mm/h per step); may be negative."""

    values: np.ndarray

    def __post_init__(self):
        v = _frozen(self.values, np.float64)
        if v.ndim != 2:
            raise ValueError(f"IntensityField must be 2-D, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("IntensityField values must be finite")
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, n: int) -> "IntensityField":
        return cls(np.zeros((n, n)))


@dataclass(frozen=True)
class FieldSequence:
    frames: tuple[PrecipField, ...]
    step_seconds: int = 600

    def __post_init__(self):
        frames = tuple(self.frames)
        object.__setattr__(self, "frames", frames)
        if len(frames) < 2:
            raise ValueError("a FieldSequence needs at least 2 frames")
        if self.step_seconds <= 0:
            raise ValueError("step_seconds must be positive")
        n = frames[0].n
        for i, f in enumerate(frames):
            if f.n != n:
                raise ValueError(f"frame {i} has side {f.n}, expected {n}")
            if i and f.timestamp - frames[i - 1].timestamp != self.step_seconds:
                raise ValueError(
                    f"frame {i}: timestamps must increase by exactly {self.step_seconds} s"
                )

    @classmethod
    def from_array(cls, data: np.ndarray, start: int = 0, step_seconds: int = 600) -> "FieldSequence":
        return cls(
            tuple(PrecipField(a, start + i * step_seconds) for i, a in enumerate(data)),
            step_seconds,
        )

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return FieldSequence(self.frames[idx], self.step_seconds)
        return self.frames[idx]

    @property
    def n(self) -> int:
        return self.frames[0].n

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([f.timestamp for f in self.frames], dtype=np.int64)

    def to_array(self) -> np.ndarray:
        return np.stack([f.values for f in self.frames])


# --- TPNN byte format -------------------------------------------------------


def encode_tpnn(timestamps: Sequence[int], step_seconds: int, data: np.ndarray) -> bytes:
    """Serialize raw frames. ``data`` is (T, H, W); no rain-rate invariants checked."""
    data = np.asarray(data)
    if data.ndim != 3:
        raise ValueError(f"expected (T, H, W) payload, got shape {data.shape}")
    t, h, w = data.shape
    if len(timestamps) != t:
        raise ValueError("one timestamp per frame required")
    head = HEADER.pack(MAGIC, VERSION, t, h, w, int(step_seconds))
    ts = np.asarray(timestamps, dtype="<i8").tobytes()
    return head + ts + np.ascontiguousarray(data, dtype="<f4").tobytes()


def decode_tpnn(buf: bytes, check_monotone: bool = True):
    """Parse TPNN bytes into (timestamps, step_seconds, data[T, H, W] float32)."""
    if len(buf) < 4:
        raise TruncatedError("file shorter than magic", len(buf))
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}", 0)
    if len(buf) < HEADER.size:
        raise TruncatedError("truncated header", len(buf))
    _, version, t, h, w, step = HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise VersionError(f"unsupported version {version}", 4)
    ts_end = HEADER.size + 8 * t
    end = ts_end + 4 * t * h * w
    if len(buf) < ts_end:
        raise TruncatedError(f"timestamp block needs {8 * t} bytes", len(buf))
    if len(buf) < end:
        raise TruncatedError(f"payload needs {4 * t * h * w} bytes", len(buf))
    if len(buf) > end:
        raise FormatError(f"{len(buf) - end} trailing bytes after payload", end)
    timestamps = np.frombuffer(buf, dtype="<i8", count=t, offset=HEADER.size).astype(np.int64)
    if check_monotone:
        for i in range(1, t):
            if timestamps[i] <= timestamps[i - 1]:
                raise TimestampError(
                    f"non-monotone timestamp at frame index {i}", HEADER.size + 8 * i, i
                )
    data = np.frombuffer(buf, dtype="<f4", count=t * h * w, offset=ts_end)
    bad = np.flatnonzero(~np.isfinite(data))
    if bad.size:
        raise NonFiniteError("non-finite value in payload", ts_end + 4 * int(bad[0]))
    return timestamps, int(step), data.reshape(t, h, w).astype(np.float32)


def read_sequence(path) -> FieldSequence:
    buf = Path(path).read_bytes()
    timestamps, step, data = decode_tpnn(buf)
    ts_end = HEADER.size + 8 * len(timestamps)
    for i in range(1, len(timestamps)):
        if timestamps[i] - timestamps[i - 1] != step:
            raise TimestampError(
                f"frame index {i}: spacing {timestamps[i] - timestamps[i - 1]} != step {step}",
                HEADER.size + 8 * i,
                i,
            )
    neg = np.flatnonzero(data.reshape(-1) < 0)
    if neg.size:
        raise FormatError("negative rain rate in payload", ts_end + 4 * int(neg[0]))
    try:
        return FieldSequence(
            tuple(PrecipField(d, int(ts)) for d, ts in zip(data, timestamps)), step
        )
    except ValueError as exc:
        raise FormatError(str(exc), 0) from exc


def write_sequence(seq: FieldSequence, path) -> None:
    if not isinstance(seq, FieldSequence):
        seq = FieldSequence(tuple(seq))
    Path(path).write_bytes(encode_tpnn(seq.timestamps, seq.step_seconds, seq.to_array()))


# --- field algebra ----------------------------------------------------------


def threshold_mask(field, t: float) -> np.ndarray:
    """Rain/no-rain mask; a pixel exactly at ``t`` counts as rain."""
    if t <= 0:
        raise ValueError("threshold must be positive")
    values = field.values if isinstance(field, PrecipField) else np.asarray(field)
    return values >= t


def max_pool(mask: np.ndarray, block: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if block not in (1, 4):
        raise ValueError(f"pool block must be 1 or 4, got {block}")
    h, w = mask.shape
    if h % block or w % block:
        raise ValueError(f"block {block} does not divide grid {mask.shape}")
    if block == 1:
        return mask.copy()
    return mask.reshape(h // block, block, w // block, block).any(axis=(1, 3))
