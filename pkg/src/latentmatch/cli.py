"""Command-line entry point: generate, pipeline, ablate, bench-lsh, check."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config, write_config

log = logging.getLogger("latentmatch")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

# dedicated flags and the config keys they set
FLAG_KEYS = {
    "tables": "lsh.tables", "hashes": "lsh.hashes", "width": "lsh.width", "k": "lsh.k",
    "mode": "lsh.mode", "threads": "run.threads", "seed": "run.seed", "outdir": "run.outdir",
    "run_id": "run.id", "n_units": "dgp.n_units",
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("--tables", help="LSH tables (lsh.tables)")
    p.add_argument("--hashes", help="hashes per table (lsh.hashes)")
    p.add_argument("--width", help="bucket width r, or 'auto' (lsh.width)")
    p.add_argument("--k", help="neighbourhood size, or 'auto' for ceil(N^0.6) (lsh.k)")
    p.add_argument("--mode", help="unrestricted | action_stratified (lsh.mode)")
    p.add_argument("--threads", help="worker cap (run.threads)")
    p.add_argument("--seed", help="pipeline seed (run.seed)")
    p.add_argument("--outdir", help="output root (run.outdir)")
    p.add_argument("--run-id", dest="run_id", help="run directory name (run.id)")
    p.add_argument("--n-units", dest="n_units", help="synthetic units (dgp.n_units)")
    p.add_argument("-v", "--verbose", action="store_true")


def _config(args) -> RunConfig:
    overrides: dict[str, str] = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    cfg = load_config(args.config, overrides)
    cfg.validate()
    return cfg


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _manifest(run_dir: Path, cfg: RunConfig, names: list[str], extra: dict | None = None) -> None:
    body = {"config_hash": cfg.config_hash(), "files": {n: _sha(run_dir / n) for n in sorted(names)}}
    body.update(extra or {})
    (run_dir / "manifest.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def cmd_generate(cfg: RunConfig) -> Path:
    from .domain import split_units, validate_dataset, write_jsonl, write_split
    from .synthgen import generate, write_oracle_csv

    run_dir = cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    dataset, oracle = generate(cfg.dgp())
    problems = validate_dataset(dataset)
    if problems:
        raise RuntimeError(f"generated dataset failed validation: {problems[0]}")
    write_jsonl(dataset, run_dir / "dataset.jsonl")
    write_oracle_csv(oracle, run_dir / "oracle.csv")
    write_split(split_units(dataset, cfg.fractions(), cfg["run.seed"]), run_dir / "split.csv")
    write_config(cfg, run_dir / "config.txt")
    _manifest(run_dir, cfg, ["dataset.jsonl", "oracle.csv", "split.csv", "config.txt"])
    return run_dir


def cmd_pipeline(cfg: RunConfig) -> Path:
    from .pipeline import run_pipeline

    timings: dict[str, float] = {}
    res = run_pipeline(cfg, timings=timings)
    for stage, sec in timings.items():
        log.info("%-18s %7.2fs", stage, sec)
    for m, r in res.metrics.items():
        print(f"{m:6s} rmse={r.rmse:.4f} pehe={r.pehe:.4f} policy_gap={r.policy_gap:.4f}")
    return cfg.run_dir()


def cmd_ablate(cfg: RunConfig, sets: list[str], lookbacks: list[int]) -> Path:
    from . import evaluation as ev
    from .history import concept_set

    horizon = cfg.dgp().horizon_days()
    for name in sets:
        try:
            concept_set(name)
        except KeyError as exc:
            raise ConfigError(f"ablate.sets: {exc.args[0]}") from None
    for lb in lookbacks:
        if lb < 1 or lb > horizon:
            raise ConfigError(f"ablate.lookbacks: {lb} outside [1, horizon={horizon}] days")
    out = cfg.run_dir() / "ablation"
    out.mkdir(parents=True, exist_ok=True)
    cache: dict = {}
    names = []
    for lb in lookbacks:
        for name in sets:
            res = ev.concept_ablation(cfg, name, lb, cache)
            stem = f"{name}_L{lb}"
            ev.write_curves_csv([res.curve], out / f"curve_{stem}.csv")
            ev.write_differences_csv(name, res.delta, out / f"diff_{stem}.csv")
            names += [f"curve_{stem}.csv", f"diff_{stem}.csv"]
            print(f"{stem:24s} max|delta|={np.max(np.abs(res.delta)):.4f}")
    if len(lookbacks) > 1:
        sens = ev.lookback_sensitivity(cfg, lookbacks, cache)
        with (out / "lookback_deviation.csv").open("w") as fh:
            fh.write("action,max_abs_deviation\n")
            fh.writelines(f"{a},{float(d)!r}\n" for a, d in enumerate(sens["max_abs_deviation"]))
        names.append("lookback_deviation.csv")
    _manifest(out, cfg, names, {"sets": sets, "lookbacks": lookbacks})
    return out


def cmd_bench_lsh(cfg: RunConfig, sizes: list[int], tables: list[int], queries: int) -> Path:
    from .benchmark import recall_latency_sweep, sublinearity, write_rows

    out = cfg.run_dir() / "bench"
    out.mkdir(parents=True, exist_ok=True)
    rows = recall_latency_sweep(n=sizes[-1], tables=tables, m=cfg["lsh.hashes"], k=cfg["lsh.k"] or 10,
                                queries=queries, seed=cfg["run.seed"])
    write_rows(rows, out / "recall_latency.csv")
    for r in rows:
        print(f"T={r['tables']:3d} recall={r['recall']:.3f} fallback={r['fallback_rate']:.2f} "
              f"latency_ms={r['latency_ms']:.3f}")
    sub = sublinearity(sizes, queries=queries, seed=cfg["run.seed"])
    write_rows(sub, out / "sublinearity.csv")
    for r in sub:
        print(f"N={r['n']:7d} width={r['width']:.4f} recall={r['recall']:.3f} fraction={r['fraction_examined']:.4f}")
    return out


def cmd_check(run_dir: Path) -> list[str]:
    """Invariant suite over pipeline artifacts; returns failure messages."""
    from .estimator import ThetaTable

    failures = []
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        return [f"{manifest_path} missing"]
    manifest = json.loads(manifest_path.read_text())
    for name, digest in manifest["files"].items():
        p = run_dir / name
        if not p.exists():
            failures.append(f"{name}: listed in manifest but missing")
        elif _sha(p) != digest:
            failures.append(f"{name}: content hash differs from manifest")
    sizes = set()
    for name in manifest["files"]:
        if name.startswith("theta_"):
            try:
                t = ThetaTable.read_csv(run_dir / name)
            except (KeyError, ValueError) as exc:
                failures.append(f"{name}: unreadable ({exc})")
                continue
            if len(t) == 0:
                failures.append(f"{name}: empty")
                continue
            units, _, theta = t.matrix(int(max(t.column("action"))) + 1)
            if np.isnan(theta).any():
                failures.append(f"{name}: incomplete over records x actions")
            gap = np.abs(t.column("theta_hat") - t.column("q_term") - t.column("correction_term"))
            if gap.size and gap.max() > 1e-9:
                failures.append(f"{name}: theta_hat != q_term + correction_term (max gap {gap.max():.3g})")
            sizes.add(len(t))
    if len(sizes) > 1:
        failures.append(f"theta tables differ in size: {sorted(sizes)}")
    audit = run_dir / "audit.json"
    if audit.exists() and json.loads(audit.read_text())["violations"] != 0:
        failures.append("audit.json: test-split outcomes were read during fitting")
    return failures


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="latentmatch", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("generate", "pipeline"):
        _common(sub.add_parser(name))
    p = sub.add_parser("ablate")
    _common(p)
    p.add_argument("--sets", default="ALL,HEART,BREATHING,ACTIVITY,RECORDS")
    p.add_argument("--lookbacks", default=None, help="comma list of days (default: history.lookback_days)")
    p = sub.add_parser("bench-lsh")
    _common(p)
    p.add_argument("--sizes", default="1000,10000,100000")
    p.add_argument("--sweep-tables", dest="sweep_tables", default="1,2,4,8,12,16")
    p.add_argument("--queries", type=int, default=100)
    p = sub.add_parser("check")
    p.add_argument("run_dir")
    p.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    from .pipeline import StageError

    t0 = time.perf_counter()
    try:
        if args.command == "check":
            failures = cmd_check(Path(args.run_dir))
            for f in failures:
                print(f"FAIL {f}")
            print("check: ok" if not failures else f"check: {len(failures)} failure(s)")
            return EXIT_OK if not failures else EXIT_FAIL
        cfg = _config(args)
        if args.command == "generate":
            out = cmd_generate(cfg)
        elif args.command == "pipeline":
            out = cmd_pipeline(cfg)
        elif args.command == "ablate":
            sets = [s.strip() for s in args.sets.split(",") if s.strip()]
            try:
                lbs = ([int(x) for x in args.lookbacks.split(",")] if args.lookbacks
                       else [cfg["history.lookback_days"]])
            except ValueError:
                raise ConfigError(f"ablate.lookbacks: expected integers, got {args.lookbacks!r}") from None
            out = cmd_ablate(cfg, sets, lbs)
        else:
            try:
                sizes = [int(x) for x in args.sizes.split(",")]
                tables = [int(x) for x in args.sweep_tables.split(",")]
            except ValueError:
                raise ConfigError("bench-lsh: --sizes and --sweep-tables take comma-separated integers") from None
            out = cmd_bench_lsh(cfg, sizes, tables, args.queries)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(f"{args.command}: wrote {out} in {time.perf_counter() - t0:.1f}s")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
