"""LSH recall / latency sweeps against a brute-force oracle."""

from __future__ import annotations

import csv
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from .domain import LatentTable
from .lsh import QueryConfig, brute_force_knn, build_index, default_width, query_knn


def _table(z: np.ndarray) -> LatentTable:
    n = z.shape[0]
    return LatentTable(z, np.zeros(n, np.int64), np.zeros(n), np.arange(n), np.zeros(n, np.int64))


def gaussian_points(n: int, dim: int = 16, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(41,))).standard_normal((n, dim))


def clustered_points(n: int, dim: int = 16, clusters: int = 64, spread: float = 0.05,
                     seed: int = 0, sample: int = 0) -> np.ndarray:
    """Isotropic blobs around centres fixed by ``seed``; ``sample`` varies the draws only."""
    centres = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(43,))).standard_normal((clusters, dim))
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(47, n, sample)))
    label = rng.integers(clusters, size=n)
    return centres[label] + spread * rng.standard_normal((n, dim))


def measure(rows: LatentTable, queries: np.ndarray, tables: int, m: int, r: float, k: int,
            seed: int = 0, fallback: bool = True) -> dict:
    """Recall@k vs brute force, fallback rate, rows examined and per-query latency."""
    index = build_index(rows, tables, m, r, seed)
    cfg = QueryConfig(k=k, fallback=fallback)
    recall, examined, fell = [], [], 0
    t0 = time.perf_counter()
    found = []
    for q in queries:
        try:
            nb = query_knn(index, q, None, cfg)
        except LookupError:
            found.append(None)
            examined.append(0)
            continue
        found.append(nb.ids)
        examined.append(nb.examined)
        fell += nb.fell_back
    latency = (time.perf_counter() - t0) / len(queries)
    for q, ids in zip(queries, found):
        truth = set(brute_force_knn(rows, q, None, k).ids.tolist())
        recall.append(0.0 if ids is None else len(truth & set(ids.tolist())) / k)
    return {"tables": tables, "hashes": m, "width": r, "k": k, "n": len(rows),
            "recall": float(np.mean(recall)), "fallback_rate": fell / len(queries),
            "fraction_examined": float(np.mean(examined)) / len(rows), "latency_ms": 1000 * latency}


def recall_latency_sweep(n: int = 10_000, dim: int = 16, tables: Sequence[int] = (1, 2, 4, 8, 12, 16),
                         m: int = 8, r: float | None = None, k: int = 10, queries: int = 100,
                         seed: int = 0, fallback: bool = True) -> list[dict]:
    z = gaussian_points(n, dim, seed)
    rows = _table(z)
    q = gaussian_points(queries, dim, seed + 1)
    width = default_width(z, seed=seed) if r is None else r
    return [measure(rows, q, t, m, width, k, seed, fallback) for t in tables]


def sublinearity(sizes: Sequence[int] = (1_000, 10_000, 100_000), dim: int = 16, tables: int = 12, m: int = 8,
                 k: int = 10, queries: int = 100, target: float = 0.9, seed: int = 0,
                 widths: Sequence[float] = (0.05, 0.1, 0.2, 0.3, 0.4, 0.6, 0.8, 1.2, 1.6, 2.4, 3.2)) -> list[dict]:
    """Smallest fraction of rows examined (no fallback) reaching ``target`` recall, per N.

    Queries are fresh draws from the same clustered distribution.
    """
    out = []
    for n in sizes:
        z = clustered_points(n, dim, seed=seed)
        rows = _table(z)
        q = clustered_points(queries, dim, seed=seed, sample=1)
        best = None
        for w in widths:
            res = measure(rows, q, tables, m, w, k, seed, fallback=False)
            if res["recall"] >= target:
                best = res
                break
        out.append(best if best is not None else res)  # widest width tried, recall below target
    return out


def write_rows(rows: list[dict], path: str | Path) -> None:
    if not rows:
        Path(path).write_text("")
        return
    keys = list(rows[0])
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
