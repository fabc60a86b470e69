import numpy as np
import pytest

from latentmatch.config import RunConfig
from latentmatch.domain import split_units
from latentmatch.evaluation import concept_ablation, lookback_sensitivity
from latentmatch.pipeline import FIT_STAGES, AuditedDataset, OutcomeAudit, StageError, run_pipeline
from latentmatch.synthgen import generate

FAST = dict(encoder__epochs=3, encoder__hidden=16, encoder__latent_dim=4, encoder__embed_dim=64)


@pytest.fixture(scope="module")
def result():
    return run_pipeline(RunConfig().copy(dgp__n_units=600), write=False)


def test_tables_complete_for_all_methods(result):
    n_test = len(result.extras["test_rows"])
    assert set(result.tables) == {"lmn", "or", "ipw", "laipw"}
    for t in result.tables.values():
        assert len(t) == n_test * 7
        assert np.all(np.isfinite(t.matrix(7)[2]))


def test_only_training_rows_build_the_index(result):
    idx = result.extras["index"]
    assert np.all(np.isfinite(idx.rows.outcome))
    assert len(idx.rows) == int(np.sum(result.roles == "train"))


def test_test_outcomes_hidden_from_latents(result):
    assert np.all(np.isnan(result.latents.outcome[result.extras["test_rows"]]))


def test_audit_reports_no_fitting_reads_of_test_outcomes(result):
    assert result.audit.violations() == 0
    stages = {s for (s, _) in result.audit.reads}
    assert "encoder:fit" in stages  # instrumentation was live
    for (stage, role), n in result.audit.reads.items():
        if stage in FIT_STAGES:
            assert role != "test"


def test_audit_negative_control(small_data):
    ds, _ = small_data
    roles = np.array(split_units(ds, seed=0).roles)[ds.out_unit]
    audit = OutcomeAudit(roles)
    proxy = AuditedDataset(ds, audit)
    audit.stage = "encoder:fit"
    _ = proxy.out_outcome[np.flatnonzero(roles == "test")[:3]]
    assert audit.violations() == 3
    audit.stage = "report"
    _ = np.asarray(proxy.out_outcome)
    assert audit.violations() == 3


def test_learned_latents_linearly_predict_true_state(result):
    rows = result.extras["test_rows"]
    z = result.latents.z[rows]
    x = np.hstack([z, np.ones((z.shape[0], 1))])
    y = result.oracle.z_true[rows]
    coef = np.linalg.lstsq(x, y, rcond=None)[0]
    r2 = 1 - np.sum((y - x @ coef) ** 2) / np.sum((y - y.mean(axis=0)) ** 2)
    assert r2 >= 0.5


def test_factual_estimates_track_observed_outcomes():
    cfg = RunConfig()  # default synthetic configuration
    res = run_pipeline(cfg, methods=("lmn",), write=False)
    ds, _ = generate(cfg.dgp())
    rows = res.extras["test_rows"]
    theta = res.tables["lmn"].matrix(7)[2]
    factual = theta[np.arange(rows.size), ds.out_action[rows]]
    y = ds.out_outcome[rows]
    se = y.std(ddof=1) / np.sqrt(y.size)
    assert abs(factual.mean() - y.mean()) < 3 * se


def test_pipeline_is_deterministic():
    cfg = RunConfig().copy(dgp__n_units=80, **FAST)
    a = run_pipeline(cfg, methods=("lmn", "ipw"), write=False)
    b = run_pipeline(cfg, methods=("lmn", "ipw"), write=False)
    for m in ("lmn", "ipw"):
        assert a.tables[m].estimates == b.tables[m].estimates
    assert a.latents.z.tobytes() == b.latents.z.tobytes()


def test_stage_failure_names_the_stage():
    cfg = RunConfig().copy(dgp__n_units=40, lsh__k=100_000, **FAST)
    with pytest.raises(StageError) as info:
        run_pipeline(cfg, methods=("lmn",), write=False)
    assert info.value.stage.startswith("estimate")


def test_all_ablation_is_a_fixed_point():
    cfg = RunConfig().copy(dgp__n_units=80, **FAST)
    cache: dict = {}
    assert np.all(concept_ablation(cfg, "ALL", cache=cache).delta == 0.0)
    sens = lookback_sensitivity(cfg, (30, 30), cache)
    assert np.all(sens["max_abs_deviation"] == 0.0)
    with pytest.raises(KeyError):
        concept_ablation(cfg, "LUNGS", cache=cache)
    with pytest.raises(ValueError):
        lookback_sensitivity(cfg, (30, 10_000), cache)


def test_write_produces_manifest(tmp_path):
    cfg = RunConfig().copy(dgp__n_units=60, run__outdir=str(tmp_path), **FAST)
    res = run_pipeline(cfg)
    for name in ("manifest.json", "metrics.json", "audit.json", "latents.csv", "index.lsh", "encoder.ckpt",
                 "curves.csv", "curves.svg", "phenotypes.csv"):
        assert (cfg.run_dir() / name).exists(), name
    assert set(res.files) >= {"theta_lmn.csv", "theta_or.csv", "theta_ipw.csv", "theta_laipw.csv"}
