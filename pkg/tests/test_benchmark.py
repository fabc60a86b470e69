import numpy as np
import pytest

from latentmatch.benchmark import _table, clustered_points, measure, recall_latency_sweep, sublinearity, write_rows
from latentmatch.cli import main


def test_clustered_centres_fixed_by_seed():
    a = clustered_points(500, seed=1, sample=0)
    b = clustered_points(500, seed=1, sample=1)
    assert not np.array_equal(a, b)
    # both draws sit near the same 64 centres
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)).min(axis=1)
    assert np.median(d) < 0.5


def test_measure_reports_fields():
    z = clustered_points(2000, seed=0)
    row = measure(_table(z), clustered_points(20, seed=0, sample=1), tables=8, m=4, r=0.4, k=10)
    assert set(row) >= {"tables", "hashes", "width", "k", "n", "recall", "fallback_rate", "fraction_examined",
                        "latency_ms"}
    assert 0 <= row["recall"] <= 1 and 0 <= row["fraction_examined"] <= 1


def test_sweep_recall_non_decreasing_in_tables():
    rows = recall_latency_sweep(n=3000, tables=(1, 4, 16), m=4, r=1.5, queries=25, fallback=False)
    rec = [r["recall"] for r in rows]
    assert rec == sorted(rec)


@pytest.mark.slow
def test_fraction_examined_shrinks_with_n():
    res = sublinearity((1_000, 100_000), queries=40)
    assert all(r["recall"] >= 0.9 for r in res)
    assert res[-1]["fraction_examined"] < res[0]["fraction_examined"]


def test_bench_cli_writes_tables(tmp_path):
    code = main(["bench-lsh", "--outdir", str(tmp_path), "--run-id", "b", "--sizes", "500,2000",
                 "--sweep-tables", "1,4", "--queries", "10"])
    assert code == 0
    assert (tmp_path / "b" / "bench" / "recall_latency.csv").exists()
    assert (tmp_path / "b" / "bench" / "sublinearity.csv").read_text().startswith("tables,")


def test_write_rows_empty(tmp_path):
    write_rows([], tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text() == ""
