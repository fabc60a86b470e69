"""Core data model: longitudinal observations, dosing outcomes, splits.

A :class:`Dataset` is stored column-wise (numpy arrays) because synthetic
cohorts run to millions of observation rows. Record-level views
(:class:`Observation`, :class:`OutcomeRecord`) are available for
construction and iteration.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

DEFAULT_ACTION_COUNT = 7
ROLES = ("train", "validation", "test")


@dataclass(frozen=True)
class Observation:
    unit: int
    time: int
    concept: str
    value: float


@dataclass(frozen=True)
class OutcomeRecord:
    unit: int
    time: int
    action: int
    outcome: float


@dataclass(frozen=True)
class Violation:
    rule: str
    unit: int
    time: int | None
    detail: str = ""

    def __str__(self) -> str:
        at = "" if self.time is None else f" t={self.time}"
        return f"[{self.rule}] unit={self.unit}{at} {self.detail}".rstrip()


class Dataset:
    """Immutable longitudinal dataset.

    Observations are kept sorted by (unit, time, concept code); outcomes by
    (unit, time). ``unit_starts`` / ``outcome_starts`` index the first row of
    each unit so per-unit slices are O(1).
    """

    def __init__(
        self,
        concepts: Sequence[str],
        obs_unit: np.ndarray,
        obs_time: np.ndarray,
        obs_concept: np.ndarray,
        obs_value: np.ndarray,
        out_unit: np.ndarray,
        out_time: np.ndarray,
        out_action: np.ndarray,
        out_outcome: np.ndarray,
        unit_count: int | None = None,
        action_count: int = DEFAULT_ACTION_COUNT,
    ):
        self.concepts = tuple(concepts)
        obs_unit = np.asarray(obs_unit, dtype=np.int64)
        obs_time = np.asarray(obs_time, dtype=np.int64)
        obs_concept = np.asarray(obs_concept, dtype=np.int64)
        obs_value = np.asarray(obs_value, dtype=np.float64)
        order = np.lexsort((obs_concept, obs_time, obs_unit))
        self.obs_unit = obs_unit[order]
        self.obs_time = obs_time[order]
        self.obs_concept = obs_concept[order]
        self.obs_value = obs_value[order]

        out_unit = np.asarray(out_unit, dtype=np.int64)
        out_time = np.asarray(out_time, dtype=np.int64)
        order = np.lexsort((out_time, out_unit))
        self.out_unit = out_unit[order]
        self.out_time = out_time[order]
        self.out_action = np.asarray(out_action, dtype=np.int64)[order]
        self.out_outcome = np.asarray(out_outcome, dtype=np.float64)[order]

        if unit_count is None:
            top = [-1]
            if self.out_unit.size:
                top.append(int(self.out_unit.max()))
            if self.obs_unit.size:
                top.append(int(self.obs_unit.max()))
            unit_count = max(top) + 1
        self.unit_count = int(unit_count)
        self.action_count = int(action_count)

        units = np.arange(self.unit_count + 1)
        self.unit_starts = np.searchsorted(self.obs_unit, units)
        self.outcome_starts = np.searchsorted(self.out_unit, units)
        for arr in (self.obs_unit, self.obs_time, self.obs_concept, self.obs_value,
                    self.out_unit, self.out_time, self.out_action, self.out_outcome):
            arr.flags.writeable = False

    @classmethod
    def from_records(
        cls,
        observations: Iterable[Observation],
        outcomes: Iterable[OutcomeRecord],
        unit_count: int | None = None,
        action_count: int = DEFAULT_ACTION_COUNT,
        concepts: Sequence[str] | None = None,
    ) -> "Dataset":
        observations = list(observations)
        outcomes = list(outcomes)
        if concepts is None:
            concepts = sorted({o.concept for o in observations})
        code = {c: i for i, c in enumerate(concepts)}
        return cls(
            concepts,
            [o.unit for o in observations],
            [o.time for o in observations],
            [code[o.concept] for o in observations],
            [o.value for o in observations],
            [r.unit for r in outcomes],
            [r.time for r in outcomes],
            [r.action for r in outcomes],
            [r.outcome for r in outcomes],
            unit_count=unit_count,
            action_count=action_count,
        )

    @property
    def n_observations(self) -> int:
        return int(self.obs_unit.size)

    @property
    def n_outcomes(self) -> int:
        return int(self.out_unit.size)

    def observations(self) -> Iterator[Observation]:
        for u, t, c, v in zip(self.obs_unit, self.obs_time, self.obs_concept, self.obs_value):
            yield Observation(int(u), int(t), self.concepts[c], float(v))

    def outcomes(self) -> Iterator[OutcomeRecord]:
        for u, t, a, y in zip(self.out_unit, self.out_time, self.out_action, self.out_outcome):
            yield OutcomeRecord(int(u), int(t), int(a), float(y))

    def unit_observation_slice(self, unit: int) -> slice:
        return slice(int(self.unit_starts[unit]), int(self.unit_starts[unit + 1]))

    def unit_outcome_slice(self, unit: int) -> slice:
        return slice(int(self.outcome_starts[unit]), int(self.outcome_starts[unit + 1]))

    def outcome_index(self, unit: int, time: int) -> int:
        """Row index of the outcome record at (unit, time); KeyError if absent."""
        if not 0 <= unit < self.unit_count:
            raise KeyError(f"unknown unit {unit}")
        sl = self.unit_outcome_slice(unit)
        times = self.out_time[sl]
        pos = int(np.searchsorted(times, time))
        if pos >= times.size or times[pos] != time:
            raise KeyError(f"no outcome record at unit={unit} time={time}")
        return sl.start + pos

    def max_time(self) -> int:
        hi = [0]
        if self.obs_time.size:
            hi.append(int(self.obs_time.max()))
        if self.out_time.size:
            hi.append(int(self.out_time.max()))
        return max(hi)


def validate_dataset(dataset: Dataset) -> list[Violation]:
    """Check every dataset invariant and report violations (never raises)."""
    report: list[Violation] = []
    n, a_max = dataset.unit_count, dataset.action_count

    bad = (dataset.obs_unit < 0) | (dataset.obs_unit >= n)
    for i in np.flatnonzero(bad):
        report.append(Violation("unknown unit", int(dataset.obs_unit[i]), int(dataset.obs_time[i]),
                                "observation references a unit outside [0, N)"))
    bad = ~np.isfinite(dataset.obs_value)
    for i in np.flatnonzero(bad):
        report.append(Violation("non-finite value", int(dataset.obs_unit[i]), int(dataset.obs_time[i]),
                                f"concept={dataset.concepts[dataset.obs_concept[i]]}"))
    bad = dataset.obs_time < 0
    for i in np.flatnonzero(bad):
        report.append(Violation("negative time", int(dataset.obs_unit[i]), int(dataset.obs_time[i])))

    bad = (dataset.out_unit < 0) | (dataset.out_unit >= n)
    for i in np.flatnonzero(bad):
        report.append(Violation("unknown unit", int(dataset.out_unit[i]), int(dataset.out_time[i]),
                                "outcome references a unit outside [0, N)"))
    bad = (dataset.out_action < 0) | (dataset.out_action >= a_max)
    for i in np.flatnonzero(bad):
        report.append(Violation("action out of range", int(dataset.out_unit[i]), int(dataset.out_time[i]),
                                f"action={int(dataset.out_action[i])} not in [0, {a_max - 1}]"))
    bad = ~np.isfinite(dataset.out_outcome)
    for i in np.flatnonzero(bad):
        report.append(Violation("non-finite outcome", int(dataset.out_unit[i]), int(dataset.out_time[i])))

    same_unit = dataset.out_unit[1:] == dataset.out_unit[:-1]
    dup = same_unit & (dataset.out_time[1:] == dataset.out_time[:-1])
    for i in np.flatnonzero(dup):
        report.append(Violation("duplicate outcome", int(dataset.out_unit[i + 1]), int(dataset.out_time[i + 1]),
                                "more than one outcome record at this (unit, time)"))
    drop = same_unit & (dataset.out_action[1:] < dataset.out_action[:-1])
    for i in np.flatnonzero(drop):
        report.append(Violation("non-monotone action", int(dataset.out_unit[i + 1]), int(dataset.out_time[i + 1]),
                                f"cumulative dose fell from {int(dataset.out_action[i])} "
                                f"to {int(dataset.out_action[i + 1])}"))
    return report


@dataclass(frozen=True)
class SplitAssignment:
    roles: tuple[str, ...]

    def role(self, unit: int) -> str:
        return self.roles[unit]

    def units(self, role: str) -> np.ndarray:
        return np.array([u for u, r in enumerate(self.roles) if r == role], dtype=np.int64)

    def counts(self) -> dict[str, int]:
        return {r: sum(1 for x in self.roles if x == r) for r in ROLES}

    def mask(self, units: np.ndarray, role: str) -> np.ndarray:
        lookup = np.array([r == role for r in self.roles], dtype=bool)
        return lookup[np.asarray(units, dtype=np.int64)]


def split_units(dataset: Dataset | int, fractions: Sequence[float] = (0.7, 0.1, 0.2),
                seed: int = 0) -> SplitAssignment:
    """Assign whole units to train/validation/test.

    Counts use largest-remainder rounding so they sum to N and each is
    within one of ``fraction * N``.
    """
    n = dataset if isinstance(dataset, int) else dataset.unit_count
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,):
        raise ValueError("split.fractions: expected three values (train, validation, test)")
    if np.any(~np.isfinite(fr)) or np.any(fr <= 0):
        raise ValueError(f"split.fractions: every fraction must be positive, got {tuple(fractions)}")
    if abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError(f"split.fractions: must sum to 1, got {fr.sum():.12g}")

    raw = fr * n
    counts = np.floor(raw).astype(np.int64)
    rest = n - int(counts.sum())
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rest]] += 1

    perm = np.random.default_rng(seed).permutation(n)
    roles = [""] * n
    start = 0
    for role, c in zip(ROLES, counts):
        for u in perm[start:start + c]:
            roles[int(u)] = role
        start += c
    return SplitAssignment(tuple(roles))


@dataclass
class LatentTable:
    """One row per outcome record: latent vector plus action/outcome/key."""

    z: np.ndarray
    action: np.ndarray
    outcome: np.ndarray
    unit: np.ndarray
    time: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.z = np.atleast_2d(np.asarray(self.z, dtype=np.float64))
        self.action = np.asarray(self.action, dtype=np.int64)
        self.outcome = np.asarray(self.outcome, dtype=np.float64)
        self.unit = np.asarray(self.unit, dtype=np.int64)
        self.time = np.asarray(self.time, dtype=np.int64)
        n = self.z.shape[0]
        for name in ("action", "outcome", "unit", "time"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"LatentTable.{name} must have length {n}")

    def __len__(self) -> int:
        return self.z.shape[0]

    @property
    def dim(self) -> int:
        return self.z.shape[1]

    def subset(self, mask_or_index) -> "LatentTable":
        idx = np.asarray(mask_or_index)
        return LatentTable(self.z[idx], self.action[idx], self.outcome[idx],
                           self.unit[idx], self.time[idx], dict(self.meta))


# --- persistence -------------------------------------------------------------

def write_jsonl(dataset: Dataset, path: str | Path) -> None:
    """Write observation and outcome lines; observations first, both sorted."""
    path = Path(path)
    names = [json.dumps(c) for c in dataset.concepts]
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        buf = []
        for u, t, c, v in zip(dataset.obs_unit.tolist(), dataset.obs_time.tolist(),
                              dataset.obs_concept.tolist(), dataset.obs_value.tolist()):
            buf.append(f'{{"unit":{u},"time":{t},"concept":{names[c]},"value":{v!r}}}\n')
            if len(buf) >= 65536:
                fh.writelines(buf)
                buf.clear()
        for u, t, a, y in zip(dataset.out_unit.tolist(), dataset.out_time.tolist(),
                              dataset.out_action.tolist(), dataset.out_outcome.tolist()):
            buf.append(f'{{"unit":{u},"time":{t},"action":{a},"outcome":{y!r}}}\n')
        fh.writelines(buf)


def read_jsonl(path: str | Path, action_count: int = DEFAULT_ACTION_COUNT,
               unit_count: int | None = None) -> Dataset:
    obs_u, obs_t, obs_c, obs_v = [], [], [], []
    out_u, out_t, out_a, out_y = [], [], [], []
    codes: dict[str, int] = {}
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if "concept" in rec:
                obs_u.append(int(rec["unit"]))
                obs_t.append(int(rec["time"]))
                obs_c.append(codes.setdefault(rec["concept"], len(codes)))
                obs_v.append(float(rec["value"]))
            elif "action" in rec:
                out_u.append(int(rec["unit"]))
                out_t.append(int(rec["time"]))
                out_a.append(int(rec["action"]))
                out_y.append(float(rec["outcome"]))
            else:
                raise ValueError(f"{path}:{lineno}: neither an observation nor an outcome line")
    # canonical concept order is lexicographic so reloads match the writer
    names = sorted(codes)
    remap = np.empty(len(names), dtype=np.int64)
    for new, name in enumerate(names):
        remap[codes[name]] = new
    obs_c = remap[np.asarray(obs_c, dtype=np.int64)] if obs_c else np.zeros(0, dtype=np.int64)
    return Dataset(names, obs_u, obs_t, obs_c, obs_v, out_u, out_t, out_a, out_y,
                   unit_count=unit_count, action_count=action_count)


def write_split(split: SplitAssignment, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["unit", "role"])
        for u, r in enumerate(split.roles):
            w.writerow([u, r])


def read_split(path: str | Path) -> SplitAssignment:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    roles = [""] * len(rows)
    for row in rows:
        role = row["role"]
        if role not in ROLES:
            raise ValueError(f"unknown split role {role!r}")
        roles[int(row["unit"])] = role
    return SplitAssignment(tuple(roles))
