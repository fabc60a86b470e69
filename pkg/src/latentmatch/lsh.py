"""p-stable (Gaussian) LSH index over latent vectors with exact re-ranking.

Each table concatenates ``m`` hashes ``floor((w . z + c) / r)`` into a
composite key, mixed down to 64 bits for bucket addressing. Buckets are held
in CSR form (sorted keys, offsets, row ids) so lookups are a binary search.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .domain import LatentTable

MODES = ("unrestricted", "action_stratified")
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


@dataclass(frozen=True)
class HashFunction:
    w: np.ndarray
    c: float
    r: float

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError("bucket width r must be > 0")
        if not 0 <= self.c < self.r:
            raise ValueError("offset c must lie in [0, r)")


def hash_value(h: HashFunction, z) -> int:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != h.w.shape:
        raise ValueError(f"vector has shape {z.shape}, hash expects {h.w.shape}")
    return int(math.floor((float(h.w @ z) + h.c) / h.r))


def _splitmix(x: np.ndarray) -> np.ndarray:
    x = (x + _GOLDEN)
    x = (x ^ (x >> np.uint64(30))) * _M1
    x = (x ^ (x >> np.uint64(27))) * _M2
    return x ^ (x >> np.uint64(31))


def mix_keys(codes: np.ndarray) -> np.ndarray:
    """Fold (n, m) integer hash tuples into one uint64 per row."""
    codes = np.atleast_2d(np.asarray(codes, dtype=np.int64)).view(np.uint64)
    with np.errstate(over="ignore"):
        acc = np.zeros(codes.shape[0], dtype=np.uint64)
        for j in range(codes.shape[1]):
            acc = _splitmix(acc ^ _splitmix(codes[:, j] + np.uint64(j)))
    return acc


@dataclass(frozen=True)
class QueryConfig:
    k: int = 10
    mode: str = "unrestricted"
    candidate_cap: int | None = None
    fallback: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("lsh.k: must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"lsh.mode: must be one of {MODES}, got {self.mode!r}")
        if self.candidate_cap is not None and self.candidate_cap < self.k:
            raise ValueError("lsh.candidate_cap: must be >= k")

    def cap(self, tables: int) -> int:
        return self.candidate_cap if self.candidate_cap is not None else 10 * self.k * tables


@dataclass
class _Table:
    W: np.ndarray  # (d, m)
    c: np.ndarray  # (m,)
    keys: np.ndarray  # sorted unique uint64 bucket keys
    offsets: np.ndarray  # (n_buckets + 1,)
    members: np.ndarray  # row ids grouped by bucket, ascending within bucket

    def codes(self, z: np.ndarray, r: float) -> np.ndarray:
        return np.floor((np.atleast_2d(z) @ self.W + self.c) / r).astype(np.int64)

    def bucket(self, key: np.uint64) -> np.ndarray:
        pos = int(np.searchsorted(self.keys, key))
        if pos < self.keys.size and self.keys[pos] == key:
            return self.members[self.offsets[pos]:self.offsets[pos + 1]]
        return self.members[:0]


@dataclass
class LshIndex:
    rows: LatentTable
    tables: list[_Table]
    m: int
    r: float
    seed: int
    meta: dict = field(default_factory=dict)

    @property
    def n_tables(self) -> int:
        return len(self.tables)

    def hash_functions(self, table: int) -> list[HashFunction]:
        t = self.tables[table]
        return [HashFunction(t.W[:, j].copy(), float(t.c[j]), self.r) for j in range(self.m)]

    def keys_for(self, z: np.ndarray) -> np.ndarray:
        """(n, T) uint64 composite keys of ``z`` in every table."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        return np.stack([mix_keys(t.codes(z, self.r)) for t in self.tables], axis=1)

    def stored_entries(self) -> int:
        return int(sum(t.members.size for t in self.tables))


def _csr(keys: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    order = np.argsort(keys, kind="stable")
    sk = keys[order]
    uniq, starts = np.unique(sk, return_index=True)
    offsets = np.append(starts, sk.size).astype(np.int64)
    return uniq, offsets, order.astype(np.int64)


def build_index(rows: LatentTable, tables: int = 12, m: int = 8, r: float | None = None,
                seed: int = 0) -> LshIndex:
    if len(rows) == 0:
        raise ValueError("cannot index an empty latent table")
    if tables < 1 or m < 1:
        raise ValueError("lsh.tables and lsh.hashes must be >= 1")
    if r is None:
        r = default_width(rows.z, seed=seed)
    if not r > 0:
        raise ValueError("lsh.width: must be > 0")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(17,)))
    d = rows.dim
    built = []
    for _ in range(tables):
        W = rng.standard_normal((d, m))
        c = rng.uniform(0.0, r, size=m)
        t = _Table(W, c, np.zeros(0, np.uint64), np.zeros(1, np.int64), np.zeros(0, np.int64))
        t.keys, t.offsets, t.members = _csr(mix_keys(t.codes(rows.z, r)))
        built.append(t)
    return LshIndex(rows, built, m, float(r), seed)


def default_width(z: np.ndarray, sample: int = 2000, seed: int = 0) -> float:
    """Median pairwise distance of a row sample, divided by four."""
    z = np.atleast_2d(z)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(19,)))
    idx = rng.choice(z.shape[0], size=min(sample, z.shape[0]), replace=False)
    s = z[idx]
    sq = (s ** 2).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * s @ s.T, 0.0)
    iu = np.triu_indices(s.shape[0], k=1)
    med = float(np.median(np.sqrt(d2[iu]))) if iu[0].size else 1.0
    return med / 4.0 if med > 0 else 1.0


@dataclass
class Neighbors:
    ids: np.ndarray
    distances: np.ndarray
    fell_back: bool = False
    examined: int = 0

    def __len__(self) -> int:
        return self.ids.size


def _eligible(actions: np.ndarray, action: int | None, mode: str) -> np.ndarray | None:
    if mode == "unrestricted":
        return None
    return actions == action


def _rank(z_rows: np.ndarray, ids: np.ndarray, query: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    diff = z_rows[ids] - query
    dist = np.sqrt((diff * diff).sum(axis=1))
    order = np.lexsort((ids, dist))[:k]
    return ids[order], dist[order]


def brute_force_knn(rows: LatentTable, z, action: int | None, k: int,
                    mode: str = "unrestricted") -> Neighbors:
    """Exact k nearest eligible rows; ties broken by row id."""
    q = np.asarray(z, dtype=np.float64)
    mask = _eligible(rows.action, action, mode)
    ids = np.arange(len(rows)) if mask is None else np.flatnonzero(mask)
    if k > ids.size:
        raise ValueError(f"k={k} exceeds the {ids.size} eligible rows in stratum "
                         f"{'all actions' if mask is None else f'action={action}'}")
    out_ids, dist = _rank(rows.z, ids, q, k)
    return Neighbors(out_ids, dist, False, int(ids.size))


def query_knn(index: LshIndex, z, action: int | None, cfg: QueryConfig) -> Neighbors:
    q = np.asarray(z, dtype=np.float64)
    if q.shape != (index.rows.dim,):
        raise ValueError(f"query has shape {q.shape}, index rows have dim {index.rows.dim}")
    mask = _eligible(index.rows.action, action, cfg.mode)
    n_eligible = len(index.rows) if mask is None else int(mask.sum())
    if cfg.k > n_eligible:
        raise ValueError(f"k={cfg.k} exceeds the {n_eligible} eligible rows in stratum "
                         f"{'all actions' if mask is None else f'action={action}'}")

    keys = index.keys_for(q)[0]
    parts = [t.bucket(key) for t, key in zip(index.tables, keys)]
    cand = np.concatenate(parts) if parts else np.zeros(0, np.int64)
    if mask is not None and cand.size:
        cand = cand[mask[cand]]
    if cand.size:
        _, first = np.unique(cand, return_index=True)
        cand = cand[np.sort(first)][:cfg.cap(index.n_tables)]
    if cand.size >= cfg.k:
        ids, dist = _rank(index.rows.z, cand, q, cfg.k)
        return Neighbors(ids, dist, False, int(cand.size))
    if not cfg.fallback:
        raise LookupError(f"only {cand.size} candidates for k={cfg.k} and fallback is off")
    full = np.arange(len(index.rows)) if mask is None else np.flatnonzero(mask)
    ids, dist = _rank(index.rows.z, full, q, cfg.k)
    return Neighbors(ids, dist, True, int(full.size))


# --- collision law -------------------------------------------------------------

def collision_probability(r: float, d: float) -> float:
    """Closed-form P[h(x) = h(y)] for Gaussian projections at distance d."""
    if d <= 0:
        return 1.0
    s = r / d
    return float(1.0 - 2.0 * ndtr(-s) - 2.0 / (math.sqrt(2.0 * math.pi) * s) * (1.0 - math.exp(-s * s / 2.0)))


def collision_rate(r: float, distance: float, trials: int, seed: int = 0, dim: int = 2) -> float:
    """Monte Carlo collision frequency with a fresh (w, c) per trial."""
    if distance < 0:
        raise ValueError("distance must be >= 0")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(23,)))
    x = np.zeros(dim)
    y = np.zeros(dim)
    y[0] = distance
    hits = 0
    chunk = 1 << 18
    done = 0
    while done < trials:
        n = min(chunk, trials - done)
        w = rng.standard_normal((n, dim))
        c = rng.uniform(0.0, r, size=n)
        hx = np.floor((w @ x + c) / r)
        hy = np.floor((w @ y + c) / r)
        hits += int((hx == hy).sum())
        done += n
    return hits / trials


# --- persistence -----------------------------------------------------------------

def save_index(index: LshIndex, path: str | Path) -> None:
    header = {
        "format": "latentmatch-lsh/1", "tables": index.n_tables, "hashes": index.m,
        "width": index.r, "seed": index.seed, "rows": len(index.rows), "dim": index.rows.dim,
        "buckets": [int(t.keys.size) for t in index.tables],
    }
    with Path(path).open("wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        for t in index.tables:
            fh.write(t.W.astype("<f8").tobytes())
            fh.write(t.c.astype("<f8").tobytes())
            fh.write(t.keys.astype("<u8").tobytes())
            fh.write(t.offsets.astype("<i8").tobytes())
            fh.write(t.members.astype("<i8").tobytes())


def load_index(path: str | Path, rows: LatentTable) -> LshIndex:
    raw = Path(path).read_bytes()
    cut = raw.index(b"\n")
    h = json.loads(raw[:cut])
    if h["rows"] != len(rows) or h["dim"] != rows.dim:
        raise ValueError("index file does not match the supplied latent table")
    pos = cut + 1

    def take(dtype: str, count: int) -> np.ndarray:
        nonlocal pos
        size = np.dtype(dtype).itemsize * count
        arr = np.frombuffer(raw[pos:pos + size], dtype=dtype).copy()
        pos += size
        return arr

    d, m, n = h["dim"], h["hashes"], h["rows"]
    tables = []
    for nb in h["buckets"]:
        W = take("<f8", d * m).reshape(d, m)
        c = take("<f8", m)
        keys = take("<u8", nb).astype(np.uint64)
        offsets = take("<i8", nb + 1).astype(np.int64)
        members = take("<i8", n).astype(np.int64)
        tables.append(_Table(W, c, keys, offsets, members))
    return LshIndex(rows, tables, m, float(h["width"]), int(h["seed"]))
