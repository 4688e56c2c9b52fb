"""Categorical verification: contingency counts, CSI and HSS at several
thresholds and pooling levels, micro-averaged over events."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .fields import PrecipField, max_pool, threshold_mask

THRESHOLDS = (4.0, 8.0, 16.0, 32.0, 64.0)
POOLS = (1, 4)
CSV_COLUMNS = ["lead_min", "threshold", "pool", "tp", "tn", "fp", "fn", "csi", "hss", "flag"]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn,
                               self.fp + other.fp, self.fn + other.fn)

    @property
    def cells(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


class Score(NamedTuple):
    value: float
    degenerate: bool

    def __float__(self):
        return self.value


def _values(f):
    return f.values if isinstance(f, PrecipField) else np.asarray(f)


def confusion(forecast, observed, t: float, pool: int = 1) -> ConfusionCounts:
    fc, ob = _values(forecast), _values(observed)
    if fc.shape != ob.shape:
        raise ValueError(f"forecast/observed shape mismatch: {fc.shape} vs {ob.shape}")
    f = max_pool(threshold_mask(fc, t), pool)
    o = max_pool(threshold_mask(ob, t), pool)
    tp = int(np.count_nonzero(f & o))
    fp = int(np.count_nonzero(f & ~o))
    fn = int(np.count_nonzero(~f & o))
    return ConfusionCounts(tp, f.size - tp - fp - fn, fp, fn)


def csi(c: ConfusionCounts) -> Score:
    den = c.tp + c.fn + c.fp
    if den == 0:
        return Score(0.0, True)
    return Score(c.tp / den, False)


def hss(c: ConfusionCounts) -> Score:
    # the standard Heidke denominator; exact integer arithmetic before the division
    num = 2 * (c.tp * c.tn - c.fn * c.fp)
    den = (c.tp + c.fn) * (c.tn + c.fn) + (c.tp + c.fp) * (c.tn + c.fp)
    if den == 0:
        return Score(0.0, True)
    return Score(num / den, False)


@dataclass
class SkillTable:
    lead_times: tuple[float, ...]
    thresholds: tuple[float, ...] = THRESHOLDS
    pools: tuple[int, ...] = POOLS
    counts: dict = field(default_factory=dict)

    def add(self, lead, threshold, pool, c: ConfusionCounts):
        key = (lead, threshold, pool)
        self.counts[key] = self.counts.get(key, ConfusionCounts()) + c

    def csi(self, lead, threshold, pool) -> float:
        return csi(self.counts[(lead, threshold, pool)]).value

    def hss(self, lead, threshold, pool) -> float:
        return hss(self.counts[(lead, threshold, pool)]).value

    def csi_m(self, lead, pool) -> float:
        return float(np.mean([self.csi(lead, t, pool) for t in self.thresholds]))

    def hss_m(self, lead, pool) -> float:
        return float(np.mean([self.hss(lead, t, pool) for t in self.thresholds]))

    def rows(self):
        for lead in self.lead_times:
            for t in self.thresholds:
                for p in self.pools:
                    c = self.counts[(lead, t, p)]
                    s_csi, s_hss = csi(c), hss(c)
                    flag = ("csi" if s_csi.degenerate else "") + ("+hss" if s_hss.degenerate else "")
                    yield [_fmt(lead), _fmt(t), p, c.tp, c.tn, c.fp, c.fn,
                           repr(s_csi.value), repr(s_hss.value), flag.lstrip("+")]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            w.writerows(self.rows())

    def write_curves_csv(self, path) -> None:
        """Per-lead CSI-M / HSS-M for each pool (plot-ready)."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["lead_min", "pool", "csi_m", "hss_m"])
            for lead in self.lead_times:
                for p in self.pools:
                    w.writerow([_fmt(lead), p, repr(self.csi_m(lead, p)), repr(self.hss_m(lead, p))])


def _fmt(x) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


class AlignmentError(ValueError):
    pass


def evaluate_run(forecast_set: Sequence[Sequence], observed_set: Sequence[Sequence],
                 lead_times: Sequence[float], thresholds=THRESHOLDS, pools=POOLS,
                 event_ids: Sequence[str] | None = None) -> SkillTable:
    """Micro-averaged skill: counts are summed over events before ratios."""
    if len(forecast_set) != len(observed_set):
        raise AlignmentError(f"{len(forecast_set)} forecast events vs {len(observed_set)} observed")
    ids = list(event_ids) if event_ids is not None else [str(i) for i in range(len(forecast_set))]
    table = SkillTable(tuple(lead_times), tuple(thresholds), tuple(pools))
    for lead in table.lead_times:
        for t in table.thresholds:
            for p in table.pools:
                table.counts[(lead, t, p)] = ConfusionCounts()
    for eid, fc_event, ob_event in zip(ids, forecast_set, observed_set):
        if len(fc_event) != len(lead_times) or len(ob_event) != len(lead_times):
            raise AlignmentError(
                f"event {eid}: expected {len(lead_times)} leads, got "
                f"{len(fc_event)} forecast / {len(ob_event)} observed"
            )
        for lead, fc, ob in zip(lead_times, fc_event, ob_event):
            if isinstance(fc, PrecipField) and isinstance(ob, PrecipField) and fc.timestamp != ob.timestamp:
                raise AlignmentError(
                    f"event {eid} lead {lead}: forecast time {fc.timestamp} != observed {ob.timestamp}"
                )
            if _values(fc).shape != _values(ob).shape:
                raise AlignmentError(f"event {eid} lead {lead}: grid mismatch")
            for t in table.thresholds:
                for p in table.pools:
                    table.add(lead, t, p, confusion(fc, ob, t, p))
    return table
