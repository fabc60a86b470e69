"""End-to-end orchestration: data -> histories -> encoder -> index -> estimates -> eval.

Every stage runs inside ``_stage`` so a failure surfaces with the stage name.
Outcome reads go through ``OutcomeAudit``; stages marked as fitting must never
touch test-split rows.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import encoder as enc
from . import estimator as est
from . import evaluation as ev
from . import lsh
from .config import RunConfig, write_config
from .domain import Dataset, LatentTable, SplitAssignment, split_units, write_split
from .history import dump_history_corpus, feature_vector, iter_histories, layout_for, serialize_history_text
from .synthgen import OracleTable, generate, write_oracle_csv

log = logging.getLogger(__name__)

METHODS = ("lmn", "or", "ipw", "laipw")
FIT_STAGES = ("history:fit", "encoder:fit", "propensity:fit", "index:build", "baseline:fit")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


# --- outcome access audit ------------------------------------------------------------

class OutcomeAudit:
    """Counts outcome-row reads per (stage, split role)."""

    def __init__(self, roles: np.ndarray):
        self.roles = roles  # role per outcome row
        self.stage = "setup"
        self.reads: dict[tuple[str, str], int] = {}

    def record(self, rows: np.ndarray) -> None:
        if rows.size == 0:
            return
        for role, n in zip(*np.unique(self.roles[rows], return_counts=True)):
            key = (self.stage, str(role))
            self.reads[key] = self.reads.get(key, 0) + int(n)

    def violations(self) -> int:
        return sum(n for (stage, role), n in self.reads.items() if stage in FIT_STAGES and role == "test")

    def to_dict(self) -> dict:
        return {"violations": self.violations(),
                "reads": [{"stage": s, "role": r, "rows": n} for (s, r), n in sorted(self.reads.items())]}


class _AuditedArray:
    def __init__(self, data: np.ndarray, audit: OutcomeAudit):
        self._data = data
        self._audit = audit

    def __getitem__(self, item):
        rows = np.arange(self._data.size)[item]
        self._audit.record(np.atleast_1d(rows))
        return self._data[item]

    def __array__(self, dtype=None, copy=None):
        self._audit.record(np.arange(self._data.size))
        return self._data if dtype is None else self._data.astype(dtype)

    def __len__(self) -> int:
        return self._data.size

    @property
    def size(self) -> int:
        return self._data.size


class AuditedDataset:
    """Read-only proxy whose ``out_outcome`` logs every row it hands out."""

    def __init__(self, dataset: Dataset, audit: OutcomeAudit):
        self._dataset = dataset
        self.out_outcome = _AuditedArray(dataset.out_outcome, audit)

    def __getattr__(self, name):
        return getattr(self._dataset, name)


# --- stages ------------------------------------------------------------------------------

@dataclass
class PipelineResult:
    config: RunConfig
    action_count: int
    tables: dict[str, est.ThetaTable]
    metrics: dict[str, ev.MetricsReport]
    latents: LatentTable  # every record, z = posterior mean
    roles: np.ndarray  # per outcome record
    oracle: OracleTable
    audit: OutcomeAudit
    extras: dict = field(default_factory=dict)
    files: dict[str, str] = field(default_factory=dict)


@contextmanager
def _stage(name: str, audit: OutcomeAudit | None = None, timings: dict | None = None) -> Iterator[None]:
    if audit is not None:
        audit.stage = name
    t0 = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage tag
        raise StageError(name, exc) from exc
    finally:
        if timings is not None:
            timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0
        log.debug("stage %s done in %.2fs", name, time.perf_counter() - t0)


def _data(cfg: RunConfig, shared: dict | None) -> tuple[Dataset, OracleTable]:
    dgp = cfg.dgp()
    key = ("data", json.dumps(dgp.to_dict(), sort_keys=True))
    if shared is not None and key in shared:
        return shared[key]
    out = generate(dgp)
    if shared is not None:
        shared[key] = out
    return out


def _embeddings(cfg: RunConfig, dataset, split: SplitAssignment, roles: np.ndarray, audit: OutcomeAudit,
                shared: dict | None, text_dir: Path | None, timings: dict) -> np.ndarray:
    hcfg = cfg.history()
    spec = enc.StubEmbedding(cfg["encoder.embed_dim"], seed=0)
    # embeddings do not depend on the split; cached reuse skips the history audit
    key = ("embed", json.dumps(cfg.dgp().to_dict(), sort_keys=True), repr(hcfg), spec.dim)
    if shared is not None and key in shared and text_dir is None:
        return shared[key]
    layout = layout_for(dataset, hcfg)
    E = np.zeros((len(roles), spec.dim))
    starts = dataset.outcome_starts
    for role, stage in (("train", "history:fit"), ("validation", "history:validate"), ("test", "history:estimate")):
        units = split.units(role)
        with _stage(stage, audit, timings):
            summaries = iter_histories(dataset, hcfg, units)
            rows = np.concatenate([np.arange(starts[u], starts[u + 1]) for u in units]) if len(units) else []
            for row, s in zip(rows, summaries):
                text = serialize_history_text(s)
                E[row] = enc.stub_embed(text, feature_vector(s, layout), spec)
                if text_dir is not None:
                    dump_history_corpus([s], text_dir)
    if shared is not None:
        shared[key] = E
    return E


def run_pipeline(cfg: RunConfig, methods: Sequence[str] = METHODS, write: bool = True,
                 shared: dict | None = None, timings: dict | None = None) -> PipelineResult:
    """Run Algorithm-1 style estimation plus baselines on one configuration.

    ``shared`` caches generated data and embeddings across calls (ablations,
    seed replicates); ``write`` controls artifact output under the run dir.
    """
    timings = {} if timings is None else timings
    with _stage("config", None, timings):
        cfg.validate()
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; known: {METHODS}")
    seed = cfg["run.seed"]
    run_dir = cfg.run_dir() if write else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)

    with _stage("generate", None, timings):
        dataset, oracle = _data(cfg, shared)
        split = split_units(dataset, cfg.fractions(), seed)
        roles = np.asarray(split.roles, dtype=object)[dataset.out_unit].astype(str)
    audit = OutcomeAudit(roles)
    ds = AuditedDataset(dataset, audit)
    A = dataset.action_count

    text_dir = run_dir / "histories" if (run_dir is not None and cfg["history.dump_text"]) else None
    E = _embeddings(cfg, ds, split, roles, audit, shared, text_dir, timings)
    train_rows = np.flatnonzero(roles == "train")
    val_rows = np.flatnonzero(roles == "validation")
    test_rows = np.flatnonzero(roles == "test")

    with _stage("encoder:fit", audit, timings):
        y_train = ds.out_outcome[train_rows]
        params, trace = enc.train(E[train_rows], dataset.out_action[train_rows], y_train, cfg.train(),
                                  cfg.loss_weights(), cfg["encoder.hidden"], cfg["encoder.latent_dim"], A)
    with _stage("encoder:validate", audit, timings):
        if val_rows.size:
            ys = (ds.out_outcome[val_rows] - params.meta["y_mean"]) / params.meta["y_scale"]
            batch = enc.Batch(E[val_rows], dataset.out_action[val_rows], ys,
                              np.zeros((val_rows.size, params.latent_dim)))
            params.meta["validation_loss"] = enc.loss(params, batch, cfg.loss_weights())[0]

    with _stage("embed", audit, timings):
        mu, _, _ = enc.encode(params, E)
        # test outcomes stay hidden from every fitted component
        outcome = np.full(len(roles), np.nan)
        outcome[train_rows] = y_train
        latents = LatentTable(mu, dataset.out_action, outcome, dataset.out_unit, dataset.out_time,
                              {"latent": "posterior_mean"})
        train_tab = latents.subset(train_rows)
        test_tab = latents.subset(test_rows)

    k = cfg.k_for(dataset.unit_count)
    ecfg = est.EstimatorConfig(k=k, mode=cfg["lsh.mode"], delta_clip=cfg["estimator.delta_clip"],
                               ridge=cfg["estimator.ridge"], candidate_cap=cfg["lsh.candidate_cap"],
                               fallback=cfg["lsh.fallback"], local_propensity=cfg["estimator.local_propensity"])
    with _stage("index:build", audit, timings):
        index = lsh.build_index(train_tab, cfg["lsh.tables"], cfg["lsh.hashes"], cfg["lsh.width"], seed)
    with _stage("propensity:fit", audit, timings):
        prop = est.fit_propensity(train_tab, A, cfg["estimator.delta_clip"],
                                  iterations=cfg["estimator.propensity_iterations"], seed=seed)

    tables: dict[str, est.ThetaTable] = {}
    if "lmn" in methods:
        with _stage("estimate", audit, timings):
            tables["lmn"] = est.estimate_all(test_tab, index, prop, ecfg)
    if "or" in methods:
        with _stage("baseline:fit", audit, timings):
            tables["or"] = est.baseline_or(E[train_rows], train_tab, E[test_rows], test_tab,
                                           cfg["estimator.ridge"], A)
    if "ipw" in methods:
        with _stage("baseline:fit", audit, timings):
            tables["ipw"] = est.baseline_ipw(train_tab, test_tab, prop, A, cfg["estimator.delta_clip"])
    if "laipw" in methods:
        with _stage("baseline:fit", audit, timings):
            tables["laipw"] = est.baseline_local_aipw(E[train_rows], train_tab, E[test_rows], test_tab, prop, ecfg)

    with _stage("evaluate", audit, timings):
        metrics = {m: ev.score(t, oracle) for m, t in tables.items()}

    result = PipelineResult(cfg, A, tables, metrics, latents, roles, oracle, audit,
                            {"params": params, "trace": trace, "index": index, "propensity": prop,
                             "k": k, "estimator_config": ecfg, "split": split, "test_rows": test_rows,
                             "fallback_rate": float(np.mean(tables["lmn"].column("fell_back")))
                             if "lmn" in tables else None})
    if run_dir is not None:
        with _stage("write", audit, timings):
            _write_artifacts(result, run_dir, ds, dataset)
    return result


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_latents_csv(latents: LatentTable, path: Path) -> None:
    with path.open("w") as fh:
        fh.write("unit,time,action," + ",".join(f"z{j}" for j in range(latents.dim)) + "\n")
        for i in range(len(latents)):
            fh.write(f"{latents.unit[i]},{latents.time[i]},{latents.action[i]},"
                     + ",".join(repr(float(v)) for v in latents.z[i]) + "\n")


def _write_artifacts(res: PipelineResult, run_dir: Path, ds: AuditedDataset, dataset: Dataset) -> None:
    cfg = res.config
    files: list[str] = []

    def out(name: str) -> Path:
        files.append(name)
        return run_dir / name

    write_config(cfg, out("config.txt"))
    write_split(res.extras["split"], out("split.csv"))
    write_oracle_csv(res.oracle, out("oracle.csv"))
    layout_for(dataset, cfg.history()).write_csv(out("feature_layout.csv"))
    enc.save_checkpoint(res.extras["params"], out("encoder.ckpt"))
    enc.write_trace(res.extras["trace"], out("encoder_trace.csv"))
    write_latents_csv(res.latents, out("latents.csv"))
    lsh.save_index(res.extras["index"], out("index.lsh"))
    for m, t in res.tables.items():
        t.write_csv(out(f"theta_{m}.csv"))

    test_rows = res.extras["test_rows"]
    test_lat = res.latents.subset(test_rows)
    summary = {m: r.to_dict() for m, r in res.metrics.items()}
    if "lmn" in res.tables:
        lmn = res.tables["lmn"]
        units, _, theta = lmn.matrix(res.action_count)
        factual = theta[np.arange(len(test_rows)), dataset.out_action[test_rows]]
        y = ds.out_outcome[test_rows]
        summary["factual_check"] = {
            "mean_theta_factual": float(factual.mean()), "mean_observed": float(y.mean()),
            "se_observed": float(y.std(ddof=1) / np.sqrt(y.size)),
        }
        summary["lsh"] = {"k": res.extras["k"], "width": res.extras["index"].r,
                          "fallback_rate": res.extras["fallback_rate"]}
        ph = ev.assign_phenotypes(test_lat, cfg["eval.phenotypes"], cfg["run.seed"])
        with out("phenotypes.csv").open("w") as fh:
            fh.write("unit,phenotype\n")
            fh.writelines(f"{u},{g}\n" for u, g in zip(ph.units, ph.labels))
        curves = ev.effect_curves(lmn, label="ALL", action_count=res.action_count)
        curves += ev.effect_curves(lmn, {u: f"phenotype_{g}" for u, g in ph.mapping().items()},
                                   action_count=res.action_count,
                                   group_names=[f"phenotype_{g}" for g in range(cfg["eval.phenotypes"])])
        ev.write_curves_csv(curves, out("curves.csv"))
        if cfg["eval.svg"]:
            ev.write_svg(curves, out("curves.svg"), "LMN theta_hat by action (k-means phenotypes)")
    (run_dir / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    files.append("metrics.json")
    (run_dir / "audit.json").write_text(json.dumps(res.audit.to_dict(), indent=2, sort_keys=True) + "\n")
    files.append("audit.json")

    manifest = {
        "config_hash": cfg.config_hash(),
        "methods": sorted(res.tables),
        "files": {name: _sha256(run_dir / name) for name in sorted(files)},
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    res.files = manifest["files"]
