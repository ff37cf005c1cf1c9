"""``sheaf-sim`` command line: run, sweep, verify."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import config as cfgmod
from . import trainer
from .errors import ConfigError, SheafSimError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("sheaf_sim")


def _load(args, extra=()) -> cfgmod.ExperimentConfig:
    overrides = list(args.set or ()) + list(extra)
    if args.config:
        return cfgmod.load(args.config, overrides)
    return cfgmod.from_dict({}, overrides)


def _write_json(path: str, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    raise TypeError(f"cannot serialise {type(v).__name__}")


def _write_runlog(out_dir: str, runlog) -> None:
    with open(os.path.join(out_dir, "runlog.csv"), "w", newline="") as fh:
        fh.write(runlog.to_csv())


def execute(cfg: cfgmod.ExperimentConfig, out_dir: str, resume: str | None = None) -> int:
    """Run one experiment into ``out_dir``; returns an exit code."""
    os.makedirs(out_dir, exist_ok=True)
    ckpt_dir = None
    if cfg.train.checkpoint_every:
        ckpt_dir = os.path.join(out_dir, "checkpoints")
        os.makedirs(ckpt_dir, exist_ok=True)
    _write_json(os.path.join(out_dir, "config.json"), {"config_hash": cfg.hash, "config": cfg.raw})
    try:
        runlog = trainer.run(cfg, checkpoint_dir=ckpt_dir, resume=resume)
    except ConfigError:
        raise
    except SheafSimError as exc:
        partial = getattr(exc, "partial_log", None)
        if partial is not None:
            _write_runlog(out_dir, partial)
        _write_json(os.path.join(out_dir, "summary.json"),
                    {"config_hash": cfg.hash, "error": f"{type(exc).__name__}: {exc}",
                     "rounds_completed": 0 if partial is None else len(partial.rows)})
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    _write_runlog(out_dir, runlog)
    _write_json(os.path.join(out_dir, "summary.json"), runlog.summary)
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load(args)
    out = args.out or cfg.output_dir
    print(f"config {cfg.hash} -> {out}")
    return execute(cfg, out, resume=args.resume)


def _seed_overrides(seed: int) -> list[str]:
    return ["data.seed=null", "model.init_seed=null", f"train.seeds.data={seed}",
            f"train.seeds.model={seed}", f"train.seeds.shuffle={seed}"]


def parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"--seeds must be a comma-separated list of integers, got {text!r}") from exc
    if not seeds:
        raise ConfigError("--seeds must not be empty")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("--seeds contains duplicates")
    return seeds


def aggregate(results: dict[str, dict[int, dict[str, float]]]) -> list[dict]:
    """Mean and sample standard deviation of final test accuracy per algorithm and group."""
    rows = []
    for alg in sorted(results):
        per_seed = results[alg]
        groups = sorted({g for acc in per_seed.values() for g in acc})
        for g in groups:
            vals = np.array([per_seed[s][g] for s in sorted(per_seed)], dtype=float)
            sd = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
            rows.append({"algorithm": alg, "group": g, "mean": float(vals.mean()), "sd": sd,
                         "n_seeds": int(vals.size)})
    return rows


def cmd_sweep(args) -> int:
    seeds = parse_seeds(args.seeds)
    base = _load(args)
    algorithms = args.algorithms.split(",") if args.algorithms else [base.train.algorithm]
    out = args.out or base.output_dir
    os.makedirs(out, exist_ok=True)
    results: dict[str, dict[int, dict[str, float]]] = {}
    failures = []
    hashes = {}
    for alg in algorithms:
        results[alg] = {}
        for s in seeds:
            cfg = _load(args, [f"train.algorithm={json.dumps(alg)}", *_seed_overrides(s)])
            run_dir = os.path.join(out, alg, f"seed_{s}")
            print(f"{alg} seed {s}: config {cfg.hash} -> {run_dir}")
            hashes[f"{alg}/seed_{s}"] = cfg.hash
            code = execute(cfg, run_dir)
            if code != EXIT_OK:
                failures.append({"algorithm": alg, "seed": s, "exit_code": code})
                continue
            with open(os.path.join(run_dir, "summary.json")) as fh:
                results[alg][s] = json.load(fh)["final_test_acc"]
    rows = aggregate({a: r for a, r in results.items() if r})
    with open(os.path.join(out, "aggregate.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["algorithm", "group", "mean", "sd", "n_seeds"],
                           lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "mean": repr(r["mean"]), "sd": repr(r["sd"])})
    _write_json(os.path.join(out, "aggregate.json"),
                {"seeds": seeds, "algorithms": algorithms, "config_hashes": hashes,
                 "rows": rows, "failures": failures})
    for r in rows:
        print(f"{r['algorithm']:>15} {r['group']:>7}  {r['mean']:.4f} +- {r['sd']:.4f}")
    return EXIT_FAIL if failures else EXIT_OK


def cmd_verify(args) -> int:
    from . import checks

    results = checks.run_suite(args.level, report=lambda line: print(line, flush=True))
    n_bad = sum(not r.passed for r in results)
    print(f"{len(results) - n_bad}/{len(results)} checks passed")
    return EXIT_FAIL if n_bad else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sheaf-sim", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON experiment config (defaults when omitted)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="dotted override, value parsed as JSON when possible; repeatable")
        sp.add_argument("--out", help="output directory (overrides output.dir)")

    r = sub.add_parser("run", help="run one experiment")
    common(r)
    r.add_argument("--resume", metavar="CHECKPOINT", help="continue from a checkpoint file")
    r.set_defaults(fn=cmd_run)

    s = sub.add_parser("sweep", help="run several seeds (and algorithms) and aggregate")
    common(s)
    s.add_argument("--seeds", required=True, help="comma-separated seed list, e.g. 0,1,2")
    s.add_argument("--algorithms", help="comma-separated algorithms (default: the config's)")
    s.set_defaults(fn=cmd_sweep)

    v = sub.add_parser("verify", help="run the numerical property and acceptance checks")
    v.add_argument("--level", choices=("fast", "full"), default="fast")
    v.set_defaults(fn=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SheafSimError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
