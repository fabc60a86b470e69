"""Synthetic longitudinal cohort with confounded dosing and a known oracle.

Each unit lives on a calendar of fixed-length segments. Every segment has a
true latent state Z*; weekly observations are a noisy linear lift of it into
``ambient_dim`` concepts, and each outcome segment ends in one outcome record.
Treatment probabilities depend on Z* only, so the potential outcome
``theta(Z*, a) + noise`` is ignorable given Z*.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .domain import Dataset

AR_COEF = 0.8
CONCEPT_GROUPS = ("heart", "breathing", "activity", "records")
DEAD_PREFIX = "noise"


@dataclass(frozen=True)
class DgpConfig:
    n_units: int = 2000
    steps_min: int = 4
    steps_max: int = 8
    latent_dim: int = 4
    ambient_dim: int = 100
    action_count: int = 7
    confound_strength: float = 2.0
    lipschitz_scale: float = 3.0
    outcome_noise_sd: float = 1.0
    positivity_floor: float = 0.05
    seed: int = 0
    # fixes theta, the lift and the assignment weights independently of the
    # sampling seed, so runs at different N share one data-generating process
    structure_seed: int = 0
    heterogeneity: float = 1.0
    obs_prob: float = 0.4
    obs_noise_sd: float = 0.5
    cross_loading: float = 0.2
    dead_concepts: int = 0
    segment_days: int = 30
    burn_in_segments: int = 2
    outcome_memory_days: int = 0

    def validate(self) -> None:
        def bad(field: str, msg: str):
            raise ValueError(f"dgp.{field}: {msg}")

        for name in ("n_units", "latent_dim", "ambient_dim", "action_count", "steps_min", "segment_days"):
            if getattr(self, name) < 1:
                bad(name, "must be >= 1")
        if self.steps_max < self.steps_min:
            bad("steps_max", "must be >= steps_min")
        if self.action_count < 2:
            bad("action_count", "need at least two actions")
        if self.confound_strength < 0:
            bad("confound_strength", "must be >= 0")
        if self.lipschitz_scale < 0:
            bad("lipschitz_scale", "must be >= 0")
        if self.outcome_noise_sd < 0:
            bad("outcome_noise_sd", "must be >= 0")
        if self.obs_noise_sd < 0:
            bad("obs_noise_sd", "must be >= 0")
        if not 0 < self.positivity_floor:
            bad("positivity_floor", "must be > 0")
        if self.positivity_floor * self.action_count > 1 + 1e-12:
            bad("positivity_floor", f"floor * action_count must be <= 1 (got {self.positivity_floor * self.action_count:.4g})")
        if not 0 <= self.heterogeneity <= 1:
            bad("heterogeneity", "must lie in [0, 1] to keep the Lipschitz bound")
        if not 0 < self.obs_prob <= 1:
            bad("obs_prob", "must lie in (0, 1]")
        if not 0 <= self.dead_concepts < self.ambient_dim:
            bad("dead_concepts", "must be in [0, ambient_dim)")
        if self.burn_in_segments < 0:
            bad("burn_in_segments", "must be >= 0")
        if self.outcome_memory_days < 0:
            bad("outcome_memory_days", "must be >= 0")
        if self.segment_days < 8:
            bad("segment_days", "must be >= 8 to hold a weekly observation")

    def horizon_days(self) -> int:
        """Days of history before the last outcome of the longest unit."""
        return (self.burn_in_segments + self.steps_max) * self.segment_days

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Structure:
    """Fixed functional pieces of the data-generating process."""

    concepts: tuple[str, ...]
    lift: np.ndarray  # (D, d*)
    outcome_dir: np.ndarray  # (A, d*) unit rows
    outcome_base: np.ndarray  # (A,)
    outcome_slope: np.ndarray  # (A,)
    assign_weights: np.ndarray  # (A, d*)

    def theta(self, z: np.ndarray) -> np.ndarray:
        """theta(z, a) for every action; shape (n, A)."""
        z = np.atleast_2d(z)
        return self.outcome_base + self.outcome_slope * np.tanh(z @ self.outcome_dir.T)

    def propensity(self, z: np.ndarray, confound_strength: float, floor: float) -> np.ndarray:
        z = np.atleast_2d(z)
        logits = confound_strength * (z @ self.assign_weights.T)
        logits -= logits.max(axis=1, keepdims=True)
        soft = np.exp(logits)
        soft /= soft.sum(axis=1, keepdims=True)
        a = soft.shape[1]
        return floor + (1.0 - floor * a) * soft


def build_structure(cfg: DgpConfig) -> Structure:
    rng = np.random.default_rng(np.random.SeedSequence(cfg.structure_seed, spawn_key=(7,)))
    d, A = cfg.latent_dim, cfg.action_count
    live = cfg.ambient_dim - cfg.dead_concepts

    names, rows = [], []
    for j in range(live):
        g = j % len(CONCEPT_GROUPS)
        row = cfg.cross_loading * rng.standard_normal(d)
        row[g % d] = rng.choice((-1.0, 1.0)) * (1.0 + 0.25 * rng.random())
        names.append(f"{CONCEPT_GROUPS[g]}_{j // len(CONCEPT_GROUPS):02d}")
        rows.append(row)
    for j in range(cfg.dead_concepts):
        names.append(f"{DEAD_PREFIX}_{j:02d}")
        rows.append(np.zeros(d))
    order = np.argsort(names)
    concepts = tuple(names[i] for i in order)
    lift = np.asarray(rows)[order]

    # latent dim 0 carries most of the outcome signal and drives dosing
    lead = np.zeros(d)
    lead[0] = 1.0
    u = lead + 0.5 * rng.standard_normal((A, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    actions = np.arange(A)
    base = 4.0 + 6.0 * np.exp(-((actions - 1.0) ** 2) / 2.0)
    slope = cfg.lipschitz_scale * cfg.heterogeneity * (0.6 + 0.4 * rng.random(A))
    centred = (actions - (A - 1) / 2) / ((A - 1) / 2)
    weights = centred[:, None] * lead[None, :] + 0.3 * rng.standard_normal((A, d))
    return Structure(concepts, lift, u, base, slope, weights)


@dataclass
class OracleTable:
    """Ground truth per outcome record, aligned with ``Dataset`` outcome order."""

    unit: np.ndarray
    time: np.ndarray
    z_true: np.ndarray  # (n, d*)
    propensity: np.ndarray  # (n, A)
    theta: np.ndarray  # (n, A)
    lipschitz: float

    def __post_init__(self):
        self._index = {(int(u), int(t)): i for i, (u, t) in enumerate(zip(self.unit, self.time))}

    def __len__(self) -> int:
        return self.unit.size

    @property
    def action_count(self) -> int:
        return self.theta.shape[1]

    def row(self, unit: int, time: int) -> int:
        try:
            return self._index[(int(unit), int(time))]
        except KeyError:
            raise KeyError(f"oracle has no record at unit={unit} time={time}") from None

    def rows(self, units: np.ndarray, times: np.ndarray) -> np.ndarray:
        return np.array([self.row(u, t) for u, t in zip(units, times)], dtype=np.int64)


def oracle_theta(oracle: OracleTable, unit: int, time: int, action: int) -> float:
    if not 0 <= action < oracle.action_count:
        raise KeyError(f"action {action} outside [0, {oracle.action_count})")
    return float(oracle.theta[oracle.row(unit, time), action])


def check_positivity(oracle: OracleTable, delta: float) -> tuple[bool, float]:
    worst = float(oracle.propensity.min()) if oracle.propensity.size else 1.0
    return worst >= delta, worst


def _weekly_offsets(segment_days: int) -> np.ndarray:
    return np.arange(3, segment_days - 1, 7)


def generate(cfg: DgpConfig) -> tuple[Dataset, OracleTable]:
    cfg.validate()
    st = build_structure(cfg)
    d, A, D = cfg.latent_dim, cfg.action_count, cfg.ambient_dim
    S = cfg.segment_days
    shift = cfg.outcome_memory_days // S
    offsets = _weekly_offsets(S)
    innov_sd = np.sqrt(1.0 - AR_COEF ** 2)

    obs_parts: list[tuple[np.ndarray, ...]] = []
    out_unit, out_time, out_action, out_y = [], [], [], []
    z_true, props, thetas = [], [], []

    for unit in range(cfg.n_units):
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1, unit)))
        T = int(rng.integers(cfg.steps_min, cfg.steps_max + 1))
        n_seg = cfg.burn_in_segments + T
        z = np.empty((n_seg + shift, d))
        z[0] = rng.standard_normal(d)
        for j in range(1, n_seg + shift):
            z[j] = AR_COEF * z[j - 1] + innov_sd * rng.standard_normal(d)

        rec = slice(cfg.burn_in_segments, n_seg)
        zr = z[rec]
        e = st.propensity(zr, cfg.confound_strength, cfg.positivity_floor)
        draws = (rng.random(T)[:, None] > np.cumsum(e, axis=1)).sum(axis=1)
        draws = np.minimum(draws, A - 1)
        # cumulative doses: lay the outcome segments out in dose order
        order = np.argsort(draws, kind="stable")
        z[rec] = zr[order]
        draws, e = draws[order], e[order]
        zr = z[rec]
        th = st.theta(zr)
        noise = cfg.outcome_noise_sd * rng.standard_normal(T)
        y = th[np.arange(T), draws] + noise

        seg_idx = np.arange(n_seg)
        times = seg_idx[:, None] * S + offsets[None, :]
        times = times + rng.integers(-1, 2, size=times.shape)
        signal = z[seg_idx + shift] @ st.lift.T  # (n_seg, D)
        seen = rng.random((n_seg, offsets.size, D)) < cfg.obs_prob
        vals = signal[:, None, :] + cfg.obs_noise_sd * rng.standard_normal((n_seg, offsets.size, D))
        s_i, w_i, c_i = np.nonzero(seen)
        obs_parts.append((np.full(s_i.size, unit), times[s_i, w_i], c_i, vals[s_i, w_i, c_i]))

        t_out = (seg_idx[rec] + 1) * S - 1
        out_unit.append(np.full(T, unit))
        out_time.append(t_out)
        out_action.append(draws)
        out_y.append(y)
        z_true.append(zr)
        props.append(e)
        thetas.append(th)

    def cat(k):
        return np.concatenate([p[k] for p in obs_parts])

    dataset = Dataset(
        st.concepts,
        cat(0), cat(1), cat(2), cat(3),
        np.concatenate(out_unit), np.concatenate(out_time),
        np.concatenate(out_action), np.concatenate(out_y),
        unit_count=cfg.n_units, action_count=A,
    )
    oracle = OracleTable(
        dataset.out_unit.copy(), dataset.out_time.copy(),
        np.concatenate(z_true), np.concatenate(props), np.concatenate(thetas),
        lipschitz=cfg.lipschitz_scale,
    )
    return dataset, oracle


def with_overrides(cfg: DgpConfig, **kw) -> DgpConfig:
    return replace(cfg, **kw)


def write_oracle_csv(oracle: OracleTable, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["unit", "time", "action", "theta", "propensity"])
        for i in range(len(oracle)):
            u, t = int(oracle.unit[i]), int(oracle.time[i])
            for a in range(oracle.action_count):
                w.writerow([u, t, a, repr(float(oracle.theta[i, a])), repr(float(oracle.propensity[i, a]))])


def read_oracle_csv(path: str | Path, lipschitz: float = float("nan")) -> OracleTable:
    rows: dict[tuple[int, int], dict[int, tuple[float, float]]] = {}
    with Path(path).open(newline="") as fh:
        for r in csv.DictReader(fh):
            key = (int(r["unit"]), int(r["time"]))
            rows.setdefault(key, {})[int(r["action"])] = (float(r["theta"]), float(r["propensity"]))
    keys = sorted(rows)
    A = max(len(v) for v in rows.values()) if rows else 0
    theta = np.array([[rows[k][a][0] for a in range(A)] for k in keys])
    prop = np.array([[rows[k][a][1] for a in range(A)] for k in keys])
    return OracleTable(np.array([k[0] for k in keys]), np.array([k[1] for k in keys]),
                       np.zeros((len(keys), 0)), prop, theta, lipschitz)
