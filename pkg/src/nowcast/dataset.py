"""Rain-event extraction, event-level splits, training windows, and a
synthetic advecting-storm generator used as a ground-truth oracle."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

import numpy as np

from .fields import FieldSequence, IntensityField, MotionField, PrecipField

log = logging.getLogger(__name__)

HOUR = 3600
HALF_WINDOW_FRAMES = 3  # t-30 min .. t+30 min inclusive at 10-min cadence
EVENT_HALF_SPAN = 4 * HOUR
SPLITS = ("train", "validation", "test")


@dataclass(frozen=True)
class RainEvent:
    start: int
    end: int
    source: str
    accumulation_peak: float

    @property
    def event_id(self) -> str:
        return f"{self.source}:{self.start}"


@dataclass(frozen=True)
class SplitManifest:
    train: tuple[RainEvent, ...]
    validation: tuple[RainEvent, ...]
    test: tuple[RainEvent, ...]
    fractions: tuple[float, float, float] = (0.70, 0.15, 0.15)
    seed: int = 0

    def split_of(self, event: RainEvent) -> str:
        for name in SPLITS:
            if event in getattr(self, name):
                return name
        raise KeyError(event.event_id)

    def events(self, split: str) -> tuple[RainEvent, ...]:
        return getattr(self, split)


# --- event extraction -------------------------------------------------------


def windowed_accumulation(seq: FieldSequence) -> np.ndarray:
    """Sum over all pixels of the 7 frames centred on each timestamp (edges truncated)."""
    totals = seq.to_array().sum(axis=(1, 2), dtype=np.float64)
    k = HALF_WINDOW_FRAMES
    padded = np.concatenate([np.zeros(k), totals, np.zeros(k)])
    return np.convolve(padded, np.ones(2 * k + 1), mode="valid")


def extract_events(seq: FieldSequence, tau: float, source: str = "seq") -> list[RainEvent]:
    """Rainy windows: every t whose +-30 min accumulation exceeds ``tau``
    marks [t - 4 h, t + 4 h]; intersecting marks are merged and clipped to
    the sequence."""
    if seq.step_seconds != 600:
        raise ValueError(f"event extraction needs 10-min cadence, got {seq.step_seconds} s")
    acc = windowed_accumulation(seq)
    ts = seq.timestamps
    lo, hi = int(ts[0]), int(ts[-1])
    events: list[list] = []
    for t, a in zip(ts, acc):
        if not a > tau:
            continue
        start, end = int(t) - EVENT_HALF_SPAN, int(t) + EVENT_HALF_SPAN
        if events and start <= events[-1][1]:
            events[-1][1] = max(events[-1][1], end)
            events[-1][2] = max(events[-1][2], float(a))
        else:
            events.append([start, end, float(a)])
    return [RainEvent(max(s, lo), min(e, hi), source, p) for s, e, p in events]


# --- splits -----------------------------------------------------------------


def largest_remainder(total: int, fractions: Sequence[float]) -> list[int]:
    quotas = np.asarray(fractions, dtype=np.float64) * total
    counts = np.floor(quotas + 1e-9).astype(int)
    order = np.argsort(-(quotas - counts), kind="stable")
    for i in order[: total - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def split_events(events: Sequence[RainEvent], fractions=(0.70, 0.15, 0.15), seed: int = 0) -> SplitManifest:
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    if len(events) < len(SPLITS):
        raise ValueError(f"need at least {len(SPLITS)} events to split, got {len(events)}")
    counts = largest_remainder(len(events), fractions)
    order = np.random.default_rng(seed).permutation(len(events))
    parts, pos = [], 0
    for c in counts:
        chosen = sorted((events[i] for i in order[pos:pos + c]), key=lambda e: (e.source, e.start))
        parts.append(tuple(chosen))
        pos += c
    return SplitManifest(*parts, fractions=fractions, seed=seed)


MANIFEST_COLUMNS = ["event_id", "start_unix", "end_unix", "peak_accum", "split"]


def write_events_csv(events: Sequence[RainEvent], path, manifest: SplitManifest | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_COLUMNS)
        for e in events:
            split = manifest.split_of(e) if manifest is not None else ""
            w.writerow([e.event_id, e.start, e.end, repr(e.accumulation_peak), split])


def write_manifest(manifest: SplitManifest, path) -> None:
    events = [e for name in SPLITS for e in manifest.events(name)]
    write_events_csv(sorted(events, key=lambda e: (e.source, e.start)), path, manifest)


def read_manifest(path, fractions=(0.70, 0.15, 0.15), seed: int = 0) -> SplitManifest:
    parts: dict[str, list[RainEvent]] = {name: [] for name in SPLITS}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            source = row["event_id"].rsplit(":", 1)[0]
            e = RainEvent(int(row["start_unix"]), int(row["end_unix"]), source, float(row["peak_accum"]))
            parts[row["split"]].append(e)
    return SplitManifest(*(tuple(parts[s]) for s in SPLITS), fractions=tuple(fractions), seed=seed)


# --- training windows -------------------------------------------------------


@dataclass(frozen=True)
class Window:
    context: FieldSequence
    future: tuple[PrecipField, ...]  # may hold a single frame
    event_id: str
    split: str


def event_frames(event: RainEvent, seq: FieldSequence) -> FieldSequence | None:
    ts = seq.timestamps
    idx = np.flatnonzero((ts >= event.start) & (ts <= event.end))
    if idx.size < 2:
        return None
    return seq[int(idx[0]): int(idx[-1]) + 1]


def sample_windows(manifest: SplitManifest, sequences: Mapping[str, FieldSequence],
                   context: int, horizon: int, split: str = "train", stride: int = 1) -> Iterator[Window]:
    """All (context, future) windows lying inside single events of one split."""
    need = context + horizon
    for event in manifest.events(split):
        frames = event_frames(event, sequences[event.source])
        length = 0 if frames is None else len(frames)
        if length < need:
            log.info("event %s: %d frames < %d needed, skipped", event.event_id, length, need)
            continue
        for s in range(0, length - need + 1, stride):
            yield Window(frames[s:s + context], frames.frames[s + context:s + need], event.event_id, split)


# --- synthetic storms -------------------------------------------------------


@dataclass(frozen=True)
class StormSpec:
    """Generator parameters. Ranges are (low, high) drawn uniformly per blob."""

    n: int = 64
    frames: int = 12
    blobs: int = 1
    amplitude: tuple[float, float] = (20.0, 40.0)
    sigma: tuple[float, float] = (5.0, 8.0)
    flow: tuple[float, float] = (1.0, 0.0)
    rotation: float = 0.0
    growth: tuple[float, float] = (0.0, 0.0)
    step_seconds: int = 600
    start: int = 0
    margin: float = 12.0
    centers: tuple[tuple[float, float], ...] | None = None


@dataclass(frozen=True)
class SyntheticStorm:
    sequence: FieldSequence
    flows: tuple[MotionField, ...]
    intensities: tuple[IntensityField, ...]
    centers: np.ndarray  # (frames, blobs, 2) as (x, y)
    amplitudes: np.ndarray  # (frames, blobs)


def _gaussian(n, cx, cy, sigma):
    y, x = np.mgrid[0:n, 0:n].astype(np.float64)
    return np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * sigma * sigma))


def _rotation_flow(n: int, omega: float) -> MotionField:
    c = (n - 1) / 2
    y, x = np.mgrid[0:n, 0:n].astype(np.float64)
    dx, dy = x - c, y - c
    cos, sin = np.cos(-omega), np.sin(-omega)
    # pixel p is fed from R(-omega)(p - c) + c
    return MotionField(dx - (cos * dx - sin * dy), dy - (sin * dx + cos * dy))


def synthesize_storms(spec: StormSpec, seed: int = 0) -> SyntheticStorm:
    rng = np.random.default_rng(seed)
    n, t_count = spec.n, spec.frames
    amp = rng.uniform(*spec.amplitude, size=spec.blobs)
    sig = rng.uniform(*spec.sigma, size=spec.blobs)
    growth = rng.uniform(*spec.growth, size=spec.blobs)
    c = (n - 1) / 2
    steps = np.arange(t_count, dtype=np.float64)
    if spec.rotation:
        if spec.centers is not None:
            start = np.asarray(spec.centers, dtype=np.float64)
        else:
            r = rng.uniform(spec.margin / 2, c - spec.margin, size=spec.blobs)
            a = rng.uniform(0, 2 * np.pi, size=spec.blobs)
            start = np.stack([c + r * np.cos(a), c + r * np.sin(a)], axis=1)
        ang = spec.rotation * steps[:, None]
        dx, dy = start[None, :, 0] - c, start[None, :, 1] - c
        centers = np.stack(
            [c + np.cos(ang) * dx - np.sin(ang) * dy, c + np.sin(ang) * dx + np.cos(ang) * dy], axis=-1
        )
        flow = _rotation_flow(n, spec.rotation)
    else:
        vel = np.asarray(spec.flow, dtype=np.float64)
        if spec.centers is not None:
            start = np.asarray(spec.centers, dtype=np.float64)
        else:
            # place the mid-event centre uniformly so the track stays inside the margins
            mid = rng.uniform(spec.margin, n - 1 - spec.margin, size=(spec.blobs, 2))
            start = mid - vel * (t_count - 1) / 2
        centers = start[None] + steps[:, None, None] * vel
        flow = MotionField.constant(n, *vel)
    amps = amp[None] * (1.0 + growth[None]) ** steps[:, None]

    frames, shapes = [], []
    for t in range(t_count):
        g = [_gaussian(n, centers[t, b, 0], centers[t, b, 1], sig[b]) for b in range(spec.blobs)]
        shapes.append(g)
        frames.append(PrecipField(sum(a * gb for a, gb in zip(amps[t], g)), spec.start + t * spec.step_seconds))
    intensities = tuple(
        IntensityField(sum((amps[t + 1, b] - amps[t, b]) * shapes[t + 1][b] for b in range(spec.blobs)))
        for t in range(t_count - 1)
    )
    return SyntheticStorm(
        FieldSequence(tuple(frames), spec.step_seconds),
        tuple(flow for _ in range(t_count - 1)),
        intensities,
        centers,
        amps,
    )
