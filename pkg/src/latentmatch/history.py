"""Leakage-safe multi-scale history summaries.

For an outcome at day ``t`` only observations with ``time <= t`` are read.
Each (concept, window) cell carries mean / sample std / min / max / count over
the closed interval ``[t - scale, t]``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .domain import Dataset

STATS = ("mean", "std", "min", "max", "count")
VALUE_STATS = STATS[:4]
DEFAULT_SCALES = (7, 30, 90, 180)


@dataclass(frozen=True)
class ConceptSet:
    name: str
    prefixes: tuple[str, ...]
    excluded: tuple[str, ...] = ()

    def matches(self, concept: str) -> bool:
        if any(concept.startswith(p) for p in self.excluded):
            return False
        return any(concept.startswith(p) for p in self.prefixes)


CONCEPT_SETS = {
    "ALL": ConceptSet("ALL", ("",)),
    "HEART": ConceptSet("HEART", ("heart",)),
    "BREATHING": ConceptSet("BREATHING", ("breathing",)),
    "ACTIVITY": ConceptSet("ACTIVITY", ("activity",)),
    "RECORDS": ConceptSet("RECORDS", ("records",)),
}


def concept_set(name: str) -> ConceptSet:
    """Look up a named set; ``BASE-prefix`` drops concepts starting with ``prefix``."""
    base, _, drop = name.partition("-")
    try:
        found = CONCEPT_SETS[base]
    except KeyError:
        raise KeyError(f"undefined concept set {name!r}; known: {', '.join(CONCEPT_SETS)}") from None
    if not drop:
        return found
    return ConceptSet(name, found.prefixes, found.excluded + (drop,))


@dataclass(frozen=True)
class HistoryConfig:
    lookback_days: int = 180
    scales: tuple[int, ...] = DEFAULT_SCALES
    concepts: ConceptSet = CONCEPT_SETS["ALL"]

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(int(s) for s in self.scales))
        if self.lookback_days < 1:
            raise ValueError("history.lookback_days: must be >= 1")
        if not self.scales:
            raise ValueError("history.scales: need at least one window")
        if any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise ValueError(f"history.scales: must be strictly increasing, got {self.scales}")
        if self.scales[0] < 1 or self.scales[-1] > self.lookback_days:
            raise ValueError(f"history.scales: every window must lie in [1, lookback_days={self.lookback_days}]")

    @classmethod
    def for_lookback(cls, lookback_days: int, concepts: ConceptSet | None = None) -> "HistoryConfig":
        """Default windows truncated at the lookback, which is always one of them."""
        scales = tuple(s for s in DEFAULT_SCALES if s < lookback_days) + (lookback_days,)
        return cls(lookback_days, scales, concepts or CONCEPT_SETS["ALL"])


@dataclass
class HistorySummary:
    unit: int
    time: int
    concepts: tuple[str, ...]
    scales: tuple[int, ...]
    # (concept, scale, stat); NaN marks a missing stat, count is never missing
    stats: np.ndarray
    prior_action: int = 0
    prior_outcome: float | None = None
    # latest observation day that fed any window (None when nothing did)
    source_max_time: int | None = None

    def get(self, concept: str, scale: int, stat: str) -> float:
        c = self.concepts.index(concept)
        s = self.scales.index(scale)
        return float(self.stats[c, s, STATS.index(stat)])


@dataclass(frozen=True)
class FeatureLayout:
    concepts: tuple[str, ...]
    scales: tuple[int, ...]
    slots: tuple[tuple[str, str, str], ...] = field(init=False)

    def __post_init__(self):
        slots = []
        for c in self.concepts:
            for s in self.scales:
                for st in STATS:
                    slots.append((c, str(s), st))
        for c in self.concepts:
            for s in self.scales:
                for st in VALUE_STATS:
                    slots.append((c, str(s), f"{st}_missing"))
        slots += [("", "", "prior_action"), ("", "", "prior_outcome"), ("", "", "prior_outcome_missing")]
        object.__setattr__(self, "slots", tuple(slots))

    def __len__(self) -> int:
        return len(self.slots)

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["slot_index", "concept", "scale", "stat"])
            for i, (c, s, st) in enumerate(self.slots):
                w.writerow([i, c, s, st])


def layout_for(dataset: Dataset, config: HistoryConfig) -> FeatureLayout:
    kept = tuple(c for c in dataset.concepts if config.concepts.matches(c))
    return FeatureLayout(kept, config.scales)


class _UnitView:
    """Per-unit arrays for repeated window queries."""

    def __init__(self, dataset: Dataset, unit: int, keep_codes: np.ndarray):
        sl = dataset.unit_observation_slice(unit)
        codes = dataset.obs_concept[sl]
        slot = keep_codes[codes]
        m = slot >= 0
        self.time = dataset.obs_time[sl][m]
        self.slot = slot[m]
        self.value = dataset.obs_value[sl][m]
        osl = dataset.unit_outcome_slice(unit)
        self.out_time = dataset.out_time[osl]
        self.out_action = dataset.out_action[osl]
        self.out_outcome = dataset.out_outcome[osl]


def _window_stats(slot: np.ndarray, value: np.ndarray, n_concepts: int) -> np.ndarray:
    out = np.full((n_concepts, 5), np.nan)
    count = np.bincount(slot, minlength=n_concepts).astype(np.float64)
    out[:, 4] = count
    if slot.size == 0:
        return out
    has = count > 0
    total = np.bincount(slot, weights=value, minlength=n_concepts)
    mean = np.divide(total, count, out=np.zeros(n_concepts), where=has)
    dev = np.bincount(slot, weights=(value - mean[slot]) ** 2, minlength=n_concepts)
    lo = np.full(n_concepts, np.inf)
    hi = np.full(n_concepts, -np.inf)
    np.minimum.at(lo, slot, value)
    np.maximum.at(hi, slot, value)
    out[has, 0] = mean[has]
    two = count >= 2
    out[two, 1] = np.sqrt(dev[two] / (count[two] - 1))
    out[has, 2] = lo[has]
    out[has, 3] = hi[has]
    return out


def _summarize(view: _UnitView, unit: int, t: int, concepts: tuple[str, ...],
               config: HistoryConfig) -> HistorySummary:
    n_c = len(concepts)
    stats = np.empty((n_c, len(config.scales), 5))
    hi = int(np.searchsorted(view.time, t, side="right"))
    for k, scale in enumerate(config.scales):
        lo = int(np.searchsorted(view.time, t - scale, side="left"))
        stats[:, k, :] = _window_stats(view.slot[lo:hi], view.value[lo:hi], n_c)
    lo = int(np.searchsorted(view.time, t - config.lookback_days, side="left"))
    source = int(view.time[hi - 1]) if hi > lo else None

    prev = int(np.searchsorted(view.out_time, t, side="left")) - 1
    prior_action = int(view.out_action[prev]) if prev >= 0 else 0
    prior_outcome = float(view.out_outcome[prev]) if prev >= 0 else None
    return HistorySummary(unit, int(t), concepts, config.scales, stats, prior_action, prior_outcome, source)


def _keep_codes(dataset: Dataset, concepts: tuple[str, ...]) -> np.ndarray:
    pos = {c: i for i, c in enumerate(concepts)}
    return np.array([pos.get(c, -1) for c in dataset.concepts], dtype=np.int64)


def build_history(dataset: Dataset, unit: int, time: int, config: HistoryConfig) -> HistorySummary:
    """Summarize the history of one outcome record (KeyError if it does not exist)."""
    dataset.outcome_index(unit, time)
    concepts = layout_for(dataset, config).concepts
    view = _UnitView(dataset, unit, _keep_codes(dataset, concepts))
    return _summarize(view, unit, time, concepts, config)


def iter_histories(dataset: Dataset, config: HistoryConfig,
                   units: Sequence[int] | None = None) -> Iterator[HistorySummary]:
    """Summaries for every outcome record of ``units`` in (unit, time) order."""
    concepts = layout_for(dataset, config).concepts
    keep = _keep_codes(dataset, concepts)
    for unit in range(dataset.unit_count) if units is None else units:
        view = _UnitView(dataset, int(unit), keep)
        for t in view.out_time:
            yield _summarize(view, int(unit), int(t), concepts, config)


def feature_vector(summary: HistorySummary, layout: FeatureLayout) -> np.ndarray:
    if summary.concepts != layout.concepts or summary.scales != layout.scales:
        raise ValueError("feature layout does not match the summary's concepts/scales")
    stats = summary.stats
    values = np.nan_to_num(stats, nan=0.0).ravel()
    missing = np.isnan(stats[:, :, :4]).astype(np.float64).ravel()
    prior_missing = summary.prior_outcome is None
    tail = np.array([
        float(summary.prior_action),
        0.0 if prior_missing else summary.prior_outcome,
        1.0 if prior_missing else 0.0,
    ])
    return np.concatenate([values, missing, tail])


_NA = 1 << 62
_HUNDREDTHS: dict[int, str] = {_NA: "na"}


def _hundredths(k: int) -> str:
    # two-decimal rendering from an integer count of hundredths
    try:
        return _HUNDREDTHS[k]
    except KeyError:
        sign = "-" if k < 0 else ""
        whole, frac = divmod(abs(k), 100)
        text = _HUNDREDTHS[k] = f"{sign}{whole}.{frac:02d}"
        return text


def _quantize(values: np.ndarray) -> np.ndarray:
    q = np.full(values.shape, _NA, dtype=np.int64)
    ok = ~np.isnan(values)
    q[ok] = np.rint(values[ok] * 100.0).astype(np.int64)
    return q


def format_value(v: float | None) -> str:
    if v is None or v != v:
        return "na"
    return _hundredths(int(np.rint(v * 100.0)))


def serialize_history_text(summary: HistorySummary) -> str:
    prior = format_value(summary.prior_outcome)
    lines = [f"UNIT {summary.unit} | DAY {summary.time} | PRIOR_DOSES {summary.prior_action} "
             f"| LAST_OUTCOME {prior}"]
    order = sorted(range(len(summary.concepts)), key=summary.concepts.__getitem__)
    names = [summary.concepts[c] for c in order]
    q = _quantize(summary.stats[order, :, :4]).tolist()
    n = summary.stats[order, :, 4].astype(np.int64).tolist()
    h = _hundredths
    for k, scale in enumerate(summary.scales):
        head = f"WINDOW {scale}d | "
        for name, qc, nc in zip(names, q, n):
            m, s, lo, hi = qc[k]
            lines.append(f"{head}{name} | mean={h(m)} std={h(s)} min={h(lo)} max={h(hi)} n={nc[k]}")
    return "\n".join(lines) + "\n"


def dump_history_corpus(summaries, directory: str | Path) -> int:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n = 0
    for s in summaries:
        (directory / f"u{s.unit:06d}_t{s.time:05d}.hist.txt").write_text(serialize_history_text(s))
        n += 1
    return n
