"""Scoring against the oracle, phenotype grouping, effect curves and ablations."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np

from .domain import LatentTable
from .estimator import ThetaTable
from .synthgen import OracleTable

if TYPE_CHECKING:
    from .config import RunConfig

log = logging.getLogger(__name__)


@dataclass
class MetricsReport:
    method: str
    n_records: int
    rmse: float
    rmse_per_action: np.ndarray
    bias_per_action: np.ndarray
    pehe: float
    policy_gap: float

    def to_dict(self) -> dict:
        return {
            "method": self.method, "n_records": self.n_records, "rmse": self.rmse,
            "rmse_per_action": [float(v) for v in self.rmse_per_action],
            "bias_per_action": [float(v) for v in self.bias_per_action],
            "pehe": self.pehe, "policy_gap": self.policy_gap,
        }


def _aligned(theta: ThetaTable, oracle: OracleTable) -> tuple[np.ndarray, np.ndarray]:
    A = oracle.action_count
    units, times, est = theta.matrix(A)
    missing = [(int(u), int(t)) for u, t in zip(units, times) if (int(u), int(t)) not in oracle._index]
    if missing:
        head = ", ".join(f"(unit={u}, time={t})" for u, t in missing[:5])
        raise KeyError(f"oracle does not cover {len(missing)} theta records: {head}")
    rows = oracle.rows(units, times)
    order = np.lexsort((times, units))
    est, truth = est[order], oracle.theta[rows][order]
    holes = np.argwhere(np.isnan(est))
    if holes.size:
        raise KeyError(f"theta table is incomplete: {holes.shape[0]} (record, action) cells missing")
    return est, truth


def score(theta: ThetaTable, oracle: OracleTable) -> MetricsReport:
    est, truth = _aligned(theta, oracle)
    err = est - truth
    n, A = err.shape
    rmse_a = np.sqrt(np.mean(err ** 2, axis=0))
    bias = err.mean(axis=0)
    # pairwise contrasts over a < a'
    ia, ib = np.triu_indices(A, k=1)
    pehe = math.sqrt(float(np.mean((err[:, ia] - err[:, ib]) ** 2))) if ia.size else 0.0
    best = np.argmin(truth, axis=1)
    rows = np.arange(n)
    gap = abs(float(est[rows, best].mean() - truth[rows, best].mean()))
    return MetricsReport(theta.method, n, math.sqrt(float(np.mean(err ** 2))), rmse_a, bias, pehe, gap)


# --- phenotypes ----------------------------------------------------------------

@dataclass
class PhenotypeAssignment:
    units: np.ndarray
    labels: np.ndarray
    centers: np.ndarray
    objective: list[float] = field(default_factory=list)

    def mapping(self) -> dict[int, int]:
        return {int(u): int(g) for u, g in zip(self.units, self.labels)}


def unit_summaries(latents: LatentTable) -> tuple[np.ndarray, np.ndarray]:
    """Per-unit mean latent vector, units ascending."""
    units, inv = np.unique(latents.unit, return_inverse=True)
    sums = np.zeros((units.size, latents.dim))
    np.add.at(sums, inv, latents.z)
    return units, sums / np.bincount(inv)[:, None]


def _sq_dist(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return np.maximum((x ** 2).sum(1)[:, None] - 2 * x @ c.T + (c ** 2).sum(1)[None, :], 0.0)


def kmeans(x: np.ndarray, n_clusters: int, seed: int = 0, iterations: int = 100):
    """Lloyd's algorithm from a seeded k-means++ start.

    Returns (labels, centers, objective trace). The trace records the
    within-cluster sum of squares after every assignment step.
    """
    n = x.shape[0]
    if n < n_clusters:
        raise ValueError(f"need at least {n_clusters} units for {n_clusters} phenotypes, got {n}")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(31,)))
    centers = [x[rng.integers(n)]]
    for _ in range(1, n_clusters):
        d2 = _sq_dist(x, np.asarray(centers)).min(axis=1)
        total = d2.sum()
        pick = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers.append(x[pick])
    centers = np.asarray(centers, dtype=np.float64)
    labels = np.full(n, -1)
    trace: list[float] = []
    for _ in range(iterations):
        d2 = _sq_dist(x, centers)
        new = np.argmin(d2, axis=1)
        trace.append(float(d2[np.arange(n), new].sum()))
        if np.array_equal(new, labels):
            break
        labels = new
        for g in range(n_clusters):
            members = labels == g
            if members.any():
                centers[g] = x[members].mean(axis=0)
    return labels, centers, trace


def assign_phenotypes(latents: LatentTable, n_clusters: int = 3, seed: int = 0) -> PhenotypeAssignment:
    units, summ = unit_summaries(latents)
    labels, centers, trace = kmeans(summ, n_clusters, seed)
    return PhenotypeAssignment(units, labels, centers, trace)


# --- curves ---------------------------------------------------------------------

@dataclass
class EffectCurve:
    group: str
    mean: np.ndarray
    sd: np.ndarray
    n: int

    @property
    def peak(self) -> int:
        return int(np.argmax(self.mean))


def effect_curves(theta: ThetaTable, groups: Mapping[int, object] | None = None,
                  label: str = "all", action_count: int = 7,
                  group_names: Sequence[object] | None = None) -> list[EffectCurve]:
    """Mean and SD of theta_hat across test records, per group and action.

    ``groups`` maps unit -> group id; without it every record is one group.
    """
    units, _, est = theta.matrix(action_count)
    if groups is None:
        keys = np.array([label] * units.size, dtype=object)
        names = [label]
    else:
        keys = np.array([groups.get(int(u)) for u in units], dtype=object)
        names = list(group_names) if group_names is not None else sorted({k for k in keys if k is not None})
    out = []
    for g in names:
        rows = np.array([k == g for k in keys], dtype=bool)
        if not rows.any():
            log.warning("group %s has no records; curve omitted", g)
            continue
        sub = est[rows]
        sd = sub.std(axis=0, ddof=1) if sub.shape[0] > 1 else np.zeros(action_count)
        out.append(EffectCurve(str(g), sub.mean(axis=0), sd, int(sub.shape[0])))
    return out


def write_curves_csv(curves: Sequence[EffectCurve], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "action", "mean_theta", "sd_theta", "n"])
        for c in curves:
            for a in range(c.mean.size):
                w.writerow([c.group, a, repr(float(c.mean[a])), repr(float(c.sd[a])), c.n])


def read_curves_csv(path: str | Path) -> list[EffectCurve]:
    groups: dict[str, list] = {}
    with Path(path).open(newline="") as fh:
        for r in csv.DictReader(fh):
            groups.setdefault(r["group"], []).append((int(r["action"]), float(r["mean_theta"]),
                                                      float(r["sd_theta"]), int(r["n"])))
    out = []
    for g, rows in groups.items():
        rows.sort()
        out.append(EffectCurve(g, np.array([r[1] for r in rows]), np.array([r[2] for r in rows]), rows[0][3]))
    return out


def write_differences_csv(group: str, delta: np.ndarray, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "action", "delta_vs_all"])
        for a, d in enumerate(delta):
            w.writerow([group, a, repr(float(d))])


_PALETTE = ("#1b6ca8", "#d1495b", "#3c8d2f", "#edae49", "#6b4e9b", "#00798c", "#8c564b")


def write_svg(curves: Sequence[EffectCurve], path: str | Path, title: str = "",
              width: int = 480, height: int = 300) -> None:
    """Self-contained line chart, one polyline per group."""
    pad = 40
    if not curves:
        Path(path).write_text(f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}"/>\n')
        return
    A = curves[0].mean.size
    lo = min(float(c.mean.min()) for c in curves)
    hi = max(float(c.mean.max()) for c in curves)
    if hi - lo < 1e-12:
        lo, hi = lo - 1.0, hi + 1.0

    def px(a: int) -> float:
        return pad + (width - 2 * pad) * (a / max(A - 1, 1))

    def py(v: float) -> float:
        return height - pad - (height - 2 * pad) * (v - lo) / (hi - lo)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{pad}" y="20" font-size="12" font-family="sans-serif">{title}</text>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>']
    for a in range(A):
        parts.append(f'<text x="{px(a):.1f}" y="{height - pad + 14}" font-size="10" '
                     f'text-anchor="middle" font-family="sans-serif">{a}</text>')
    for v in (lo, hi):
        parts.append(f'<text x="{pad - 4}" y="{py(v):.1f}" font-size="10" text-anchor="end" '
                     f'font-family="sans-serif">{v:.2f}</text>')
    for i, c in enumerate(curves):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{px(a):.1f},{py(float(c.mean[a])):.1f}" for a in range(A))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        parts.append(f'<text x="{width - pad + 2}" y="{pad + 14 * i}" font-size="10" fill="{color}" '
                     f'font-family="sans-serif">{c.group}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


# --- ablations -------------------------------------------------------------------

@dataclass
class AblationResult:
    concept_set: str
    lookback: int
    curve: EffectCurve
    delta: np.ndarray  # curve.mean - ALL curve mean


def _lmn_curve(cfg: "RunConfig", label: str, cache: dict | None) -> EffectCurve:
    from .pipeline import run_pipeline

    key = cfg.config_hash()
    if cache is not None and key in cache:
        return cache[key]
    res = run_pipeline(cfg, methods=("lmn",), write=False, shared=cache)
    curve = effect_curves(res.tables["lmn"], label=label, action_count=res.action_count)[0]
    if cache is not None:
        cache[key] = curve
    return curve


def concept_ablation(cfg: "RunConfig", concepts: str, lookback: int | None = None,
                     cache: dict | None = None) -> AblationResult:
    """Rerun the pipeline with a concept whitelist and diff against ALL."""
    from .history import concept_set

    concept_set(concepts)  # raises for undefined sets
    lb = cfg["history.lookback_days"] if lookback is None else lookback
    base = _lmn_curve(cfg.copy(history__concepts="ALL", history__lookback_days=lb, history__scales="auto"),
                      "ALL", cache)
    if concepts == "ALL":
        curve = base
    else:
        curve = _lmn_curve(cfg.copy(history__concepts=concepts, history__lookback_days=lb,
                                    history__scales="auto"), concepts, cache)
    curve = EffectCurve(concepts, curve.mean, curve.sd, curve.n)
    return AblationResult(concepts, lb, curve, curve.mean - base.mean)


def lookback_sensitivity(cfg: "RunConfig", lookbacks: Sequence[int] = (30, 180),
                         cache: dict | None = None) -> dict:
    horizon = cfg.dgp().horizon_days()
    for lb in lookbacks:
        if lb > horizon:
            raise ValueError(f"lookback {lb} exceeds the generated horizon of {horizon} days")
    curves = [_lmn_curve(cfg.copy(history__lookback_days=lb, history__scales="auto"), f"L{lb}", cache)
              for lb in lookbacks]
    curves = [EffectCurve(f"L{lb}", c.mean, c.sd, c.n) for lb, c in zip(lookbacks, curves)]
    dev = np.max(np.abs(np.stack([c.mean for c in curves]) - curves[0].mean), axis=0)
    return {"lookbacks": list(lookbacks), "curves": curves, "max_abs_deviation": dev}


def seed_replicate_spread(cfg: "RunConfig", seeds: Sequence[int] = (0, 1, 2, 3, 4),
                          cache: dict | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(per-action SD, replicate means) of the LMN curve across pipeline seeds on fixed data."""
    means = np.stack([_lmn_curve(cfg.copy(run__seed=s), f"seed{s}", cache).mean for s in seeds])
    return means.std(axis=0, ddof=1), means
