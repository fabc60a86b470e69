"""Local doubly-robust counterfactual estimation and the three baselines.

For a query latent ``z`` and action ``a`` the estimate averages, over the
retrieved neighbourhood N_k,

    Q(z_j, a) + 1[A_j = a] / e(a | z_j) * (Y_j - Q(z_j, a))

with ``Q`` a ridge model fitted on N_k and ``e`` a propensity model fitted on
the training split. The two averages are kept apart as ``q_term`` and
``correction_term``; ``theta_hat`` is their sum.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .domain import LatentTable
from .lsh import LshIndex, Neighbors, QueryConfig, brute_force_knn, query_knn

THETA_COLUMNS = ("unit", "time", "action", "theta_hat", "q_term", "correction_term", "k_used", "fell_back")


class EstimationError(RuntimeError):
    pass


class Propensity(Protocol):
    action_count: int

    def predict_proba(self, z: np.ndarray) -> np.ndarray: ...


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=1, keepdims=True)


# --- propensity ------------------------------------------------------------------

@dataclass
class PropensityModel:
    weights: np.ndarray  # (dim + 1, A); last row is the bias
    center: np.ndarray
    scale: np.ndarray
    delta_clip: float = 0.01
    meta: dict = field(default_factory=dict)

    @property
    def action_count(self) -> int:
        return self.weights.shape[1]

    def _design(self, z: np.ndarray) -> np.ndarray:
        x = (np.atleast_2d(z) - self.center) / self.scale
        return np.hstack([x, np.ones((x.shape[0], 1))])

    def predict_proba(self, z: np.ndarray) -> np.ndarray:
        """Unclipped class probabilities; rows sum to one."""
        return _softmax(self._design(z) @ self.weights)

    def predict_clipped(self, z: np.ndarray) -> np.ndarray:
        return np.clip(self.predict_proba(z), self.delta_clip, 1.0 - self.delta_clip)


@dataclass
class FixedPropensity:
    """Propensities supplied row-by-row (e.g. the generator's true ones) or as one vector."""

    probs: np.ndarray

    @property
    def action_count(self) -> int:
        return self.probs.shape[-1]

    def predict_proba(self, z: np.ndarray) -> np.ndarray:
        n = np.atleast_2d(z).shape[0]
        if self.probs.ndim == 1:
            return np.tile(self.probs, (n, 1))
        if self.probs.shape[0] != n:
            raise ValueError("row-wise propensities need one row per query")
        return self.probs


def _ce_loss(x: np.ndarray, onehot: np.ndarray, w: np.ndarray, l2: float) -> tuple[float, np.ndarray]:
    p = _softmax(x @ w)
    n = x.shape[0]
    loss = -float(np.sum(onehot * np.log(np.maximum(p, 1e-300)))) / n + 0.5 * l2 * float(np.sum(w[:-1] ** 2))
    grad = x.T @ (p - onehot) / n
    grad[:-1] += l2 * w[:-1]
    return loss, grad


def fit_propensity(train: LatentTable, action_count: int = 7, delta_clip: float = 0.01,
                   iterations: int = 300, rate: float = 1.0, seed: int = 0, l2: float = 0.0,
                   require_all: bool = True) -> PropensityModel:
    """Multinomial logistic regression by full-batch gradient descent.

    The step is halved whenever it would raise the loss, so the recorded
    loss trace is non-increasing.
    """
    if not 0.0 <= delta_clip < 0.5:
        raise ValueError("estimator.delta_clip: must lie in [0, 0.5)")
    if len(train) == 0:
        raise ValueError("cannot fit a propensity model on zero rows")
    counts = np.bincount(train.action, minlength=action_count)
    if require_all and np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise EstimationError(f"positivity violated: actions {missing} never occur in the training rows")
    center = train.z.mean(axis=0)
    scale = train.z.std(axis=0)
    scale[scale < 1e-12] = 1.0
    model = PropensityModel(np.zeros((train.dim + 1, action_count)), center, scale, delta_clip)
    x = model._design(train.z)
    onehot = np.eye(action_count)[train.action]
    w = model.weights
    loss, grad = _ce_loss(x, onehot, w, l2)
    trace = [loss]
    step = rate
    for _ in range(iterations):
        while True:
            cand = w - step * grad
            new_loss, new_grad = _ce_loss(x, onehot, cand, l2)
            if not math.isfinite(new_loss):
                raise EstimationError("propensity fit diverged (non-finite loss)")
            if new_loss <= loss or step < 1e-10:
                break
            step *= 0.5
        if new_loss > loss:
            break
        w, loss, grad = cand, new_loss, new_grad
        trace.append(loss)
    model.weights = w
    model.meta = {"iterations": len(trace) - 1, "final_loss": loss, "loss_trace": trace, "seed": seed}
    return model


def permuted(table: LatentTable, column: str, seed: int) -> LatentTable:
    """Copy of ``table`` with one label column shuffled (the corrupted-nuisance protocol)."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(29,)))
    out = table.subset(np.arange(len(table)))
    setattr(out, column, getattr(table, column)[rng.permutation(len(table))])
    return out


# --- outcome model ---------------------------------------------------------------

@dataclass
class OutcomeModel:
    coef: np.ndarray  # (dim + A + 1,)
    ridge: float
    action_count: int
    scope: str = "local"

    def design(self, z: np.ndarray, action) -> np.ndarray:
        z = np.atleast_2d(z)
        n = z.shape[0]
        act = np.broadcast_to(np.asarray(action, dtype=np.int64), (n,))
        return np.hstack([z, np.eye(self.action_count)[act], np.ones((n, 1))])

    def predict(self, z: np.ndarray, action) -> np.ndarray:
        return self.design(z, action) @ self.coef


def fit_ridge(x: np.ndarray, y: np.ndarray, ridge: float) -> np.ndarray:
    if not ridge > 0:
        raise ValueError("estimator.ridge: must be > 0")
    gram = x.T @ x
    gram[np.diag_indices_from(gram)] += ridge
    return np.linalg.solve(gram, x.T @ y)


def fit_local_outcome(rows: LatentTable, ridge: float = 1e-3, action_count: int = 7,
                      scope: str = "local") -> OutcomeModel:
    """Ridge of outcome on (z, action one-hot, bias) via the normal equations."""
    if len(rows) == 0:
        raise ValueError("outcome model needs a non-empty neighbourhood")
    model = OutcomeModel(np.zeros(rows.dim + action_count + 1), ridge, action_count, scope)
    model.coef = fit_ridge(model.design(rows.z, rows.action), rows.outcome, ridge)
    return model


# --- doubly robust combination ------------------------------------------------------

@dataclass(frozen=True)
class EstimatorConfig:
    k: int = 10
    mode: str = "unrestricted"
    delta_clip: float = 0.01
    ridge: float = 1e-3
    candidate_cap: int | None = None
    fallback: bool = True
    outcome_model: str = "local"  # local | zero
    local_propensity: bool = False

    def __post_init__(self):
        if not 0.0 <= self.delta_clip < 0.5:
            raise ValueError("estimator.delta_clip: must lie in [0, 0.5)")
        if not self.ridge > 0:
            raise ValueError("estimator.ridge: must be > 0")
        if self.outcome_model not in ("local", "zero"):
            raise ValueError("estimator.outcome_model: must be 'local' or 'zero'")
        self.query()  # validates k / mode / cap

    def query(self) -> QueryConfig:
        return QueryConfig(self.k, self.mode, self.candidate_cap, self.fallback)


@dataclass(frozen=True)
class Estimate:
    unit: int
    time: int
    action: int
    theta_hat: float
    q_term: float
    correction_term: float
    k_used: int
    fell_back: bool


def dr_combine(outcome: np.ndarray, actions: np.ndarray, a: int, q_pred: np.ndarray,
               e_pred: np.ndarray, delta_clip: float = 0.0) -> tuple[float, float, float]:
    """(theta_hat, q_term, correction_term) for one neighbourhood.

    ``e_pred`` holds e(a | z_j) per neighbour; it is clipped before use.
    """
    e = np.clip(np.asarray(e_pred, dtype=np.float64), delta_clip, 1.0 - delta_clip)
    treated = np.asarray(actions) == a
    resid = np.asarray(outcome, dtype=np.float64) - q_pred
    corr = np.zeros_like(resid)
    corr[treated] = resid[treated] / e[treated]
    q_term = float(np.mean(q_pred))
    c_term = float(np.mean(corr))
    return q_term + c_term, q_term, c_term


def _neighbourhood_terms(rows: LatentTable, nb: Neighbors, actions: Sequence[int], prop: Propensity,
                         cfg: EstimatorConfig, q_outcome: np.ndarray | None,
                         unit: int, time: int) -> list[Estimate]:
    ids = nb.ids
    z = rows.z[ids]
    act = rows.action[ids]
    y = rows.outcome[ids]
    A = prop.action_count
    if cfg.outcome_model == "local":
        fit_y = y if q_outcome is None else q_outcome[ids]
        model = OutcomeModel(np.zeros(rows.dim + A + 1), cfg.ridge, A)
        model.coef = fit_ridge(model.design(z, act), fit_y, cfg.ridge)
    else:
        model = None
    if cfg.local_propensity:
        local = fit_propensity(rows.subset(ids), A, cfg.delta_clip, iterations=100, require_all=False)
        probs = local.predict_proba(z)
    elif isinstance(prop, FixedPropensity) and prop.probs.ndim == 2:
        probs = prop.probs[ids]
    else:
        probs = prop.predict_proba(z)
    out = []
    for a in actions:
        q = model.predict(z, a) if model is not None else np.zeros(ids.size)
        th, qt, ct = dr_combine(y, act, a, q, probs[:, a], cfg.delta_clip)
        out.append(Estimate(unit, time, int(a), th, qt, ct, int(ids.size), nb.fell_back))
    return out


def dr_estimate(z, a: int, index: LshIndex, prop: Propensity, cfg: EstimatorConfig,
                unit: int = -1, time: int = -1, q_outcome: np.ndarray | None = None) -> Estimate:
    """Single local DR estimate; ``q_outcome`` replaces the labels Q is fitted on."""
    try:
        nb = query_knn(index, np.asarray(z, dtype=np.float64), a, cfg.query())
    except LookupError as exc:
        raise EstimationError(f"neighbourhood starvation for action {a}: {exc}") from None
    return _neighbourhood_terms(index.rows, nb, [a], prop, cfg, q_outcome, unit, time)[0]


@dataclass
class ThetaTable:
    estimates: list[Estimate]
    method: str = "lmn"

    def __len__(self) -> int:
        return len(self.estimates)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(e, name) for e in self.estimates])

    def matrix(self, action_count: int = 7) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(units, times, theta[n_records, A]) in first-seen record order."""
        keys: dict[tuple[int, int], int] = {}
        for e in self.estimates:
            keys.setdefault((e.unit, e.time), len(keys))
        theta = np.full((len(keys), action_count), np.nan)
        for e in self.estimates:
            theta[keys[(e.unit, e.time)], e.action] = e.theta_hat
        ut = np.array(list(keys), dtype=np.int64).reshape(-1, 2)
        return ut[:, 0], ut[:, 1], theta

    def action_means(self, action_count: int = 7) -> np.ndarray:
        return np.nanmean(self.matrix(action_count)[2], axis=0)

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(THETA_COLUMNS)
            for e in self.estimates:
                w.writerow([e.unit, e.time, e.action, repr(e.theta_hat), repr(e.q_term),
                            repr(e.correction_term), e.k_used, int(e.fell_back)])

    @classmethod
    def read_csv(cls, path: str | Path, method: str = "lmn") -> "ThetaTable":
        rows = []
        with Path(path).open(newline="") as fh:
            for r in csv.DictReader(fh):
                rows.append(Estimate(int(r["unit"]), int(r["time"]), int(r["action"]), float(r["theta_hat"]),
                                     float(r["q_term"]), float(r["correction_term"]), int(r["k_used"]),
                                     bool(int(r["fell_back"]))))
        return cls(rows, method)


def estimate_all(test: LatentTable, index: LshIndex, prop: Propensity, cfg: EstimatorConfig,
                 actions: Sequence[int] | None = None, q_outcome: np.ndarray | None = None) -> ThetaTable:
    """One estimate per (test record, action).

    In unrestricted mode the neighbourhood does not depend on the action, so
    it is retrieved and Q is fitted once per record.
    """
    actions = list(range(prop.action_count)) if actions is None else list(actions)
    qc = cfg.query()
    out: list[Estimate] = []
    for i in range(len(test)):
        z = test.z[i]
        u, t = int(test.unit[i]), int(test.time[i])
        try:
            if cfg.mode == "unrestricted":
                nb = query_knn(index, z, None, qc)
                out.extend(_neighbourhood_terms(index.rows, nb, actions, prop, cfg, q_outcome, u, t))
            else:
                for a in actions:
                    nb = query_knn(index, z, a, qc)
                    out.extend(_neighbourhood_terms(index.rows, nb, [a], prop, cfg, q_outcome, u, t))
        except LookupError as exc:
            raise EstimationError(f"neighbourhood starvation at unit {u} day {t}: {exc}") from None
    return ThetaTable(out, "lmn")


# --- baselines ----------------------------------------------------------------------

def baseline_or(train_x: np.ndarray, train: LatentTable, test_x: np.ndarray, test: LatentTable,
                ridge: float = 1e-3, action_count: int = 7) -> ThetaTable:
    """Global ridge of Y on (text features, action one-hot), evaluated at every action."""
    model = OutcomeModel(np.zeros(train_x.shape[1] + action_count + 1), ridge, action_count, "global")
    model.coef = fit_ridge(model.design(train_x, train.action), train.outcome, ridge)
    out = []
    for a in range(action_count):
        pred = model.predict(test_x, a)
        for i in range(len(test)):
            out.append(Estimate(int(test.unit[i]), int(test.time[i]), a, float(pred[i]), float(pred[i]), 0.0,
                                len(train), False))
    return ThetaTable(_record_order(out), "or")


def _record_order(ests: list[Estimate]) -> list[Estimate]:
    return sorted(ests, key=lambda e: (e.unit, e.time, e.action))


@dataclass(frozen=True)
class IpwResult:
    value: np.ndarray  # per action
    se: np.ndarray
    n_treated: np.ndarray


def ipw_values(train: LatentTable, prop: Propensity, action_count: int = 7,
               delta_clip: float = 0.01) -> IpwResult:
    """Hájek IPW per action with a linearization standard error."""
    probs = np.clip(prop.predict_proba(train.z), delta_clip, 1.0 - delta_clip)
    y = train.outcome
    value = np.empty(action_count)
    se = np.empty(action_count)
    n_treated = np.bincount(train.action, minlength=action_count)
    for a in range(action_count):
        if n_treated[a] == 0:
            raise EstimationError(f"positivity violated: no training rows received action {a}")
        w = np.where(train.action == a, 1.0 / probs[:, a], 0.0)
        mu = float(np.sum(w * y) / np.sum(w))
        value[a] = mu
        n = y.size
        infl = w * (y - mu) / (np.sum(w) / n)
        se[a] = float(np.sqrt(np.sum(infl ** 2)) / n)
    return IpwResult(value, se, n_treated)


def baseline_ipw(train: LatentTable, test: LatentTable, prop: Propensity, action_count: int = 7,
                 delta_clip: float = 0.01) -> ThetaTable:
    res = ipw_values(train, prop, action_count, delta_clip)
    out = [Estimate(int(test.unit[i]), int(test.time[i]), a, float(res.value[a]), float(res.value[a]), 0.0,
                    int(res.n_treated[a]), False)
           for i in range(len(test)) for a in range(action_count)]
    return ThetaTable(out, "ipw")


def baseline_local_aipw(train_x: np.ndarray, train: LatentTable, test_x: np.ndarray, test: LatentTable,
                        prop: Propensity, cfg: EstimatorConfig) -> ThetaTable:
    """Same DR arithmetic, neighbourhoods by exact kNN in the raw feature space.

    Q and e still see the training latents, only the neighbourhood geometry
    changes.
    """
    raw_rows = LatentTable(train_x, train.action, train.outcome, train.unit, train.time)
    A = prop.action_count
    out: list[Estimate] = []
    for i in range(len(test)):
        u, t = int(test.unit[i]), int(test.time[i])
        if cfg.mode == "unrestricted":
            nb = brute_force_knn(raw_rows, test_x[i], None, cfg.k, "unrestricted")
            out.extend(_neighbourhood_terms(train, nb, range(A), prop, cfg, None, u, t))
        else:
            for a in range(A):
                nb = brute_force_knn(raw_rows, test_x[i], a, cfg.k, "action_stratified")
                out.extend(_neighbourhood_terms(train, nb, [a], prop, cfg, None, u, t))
    return ThetaTable(out, "laipw")
