"""Command-line entry point: ``fmeac <command> --config FILE [--seed N] [--out DIR] [--dry-run]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import defaults_for, load_config, serialize_config
from .errors import ConfigError, FmeacError, NumericError
from .harness import Pipeline, bench_inference, plot_data, stage_plan

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_STAGE = 0, 2, 3, 4

COMMANDS = {
    "gen-maps": ["gen-maps"],
    "pretrain-pan": ["gen-maps", "pretrain-pan"],
    "pretrain-bpn": ["gen-maps", "pretrain-bpn"],
    "train": None,   # plan up to and including training
    "eval": None,
    "run": None,
    "bench-inference": [],
    "plot-data": [],
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fmeac", description="Feature-model enhanced actor-critic experiments.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--preset", help="start from a shipped preset instead of a file (toy-agri, toy-urban, paper-scale)")
    p.add_argument("--seed", type=int, help="experiment seed (overrides the config)")
    p.add_argument("--out", default="runs/default", help="artifact directory")
    p.add_argument("--dry-run", action="store_true", help="print the resolved config and stage plan only")
    p.add_argument("--parallel-seeds", type=int, default=1, metavar="N",
                   help="run N independent pipelines (seeds seed..seed+N-1) in <out>/seed_<s>")
    p.add_argument("--nodes", default="1,10,50,100,200,400", help="node counts for bench-inference")
    p.add_argument("--repeats", type=int, default=1000, help="forward passes per timing in bench-inference")
    p.add_argument("--window", type=int, default=20, help="smoothing window for plot-data")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _resolve_config(args):
    if args.config and args.preset:
        raise ConfigError("give either --config or --preset, not both")
    cfg = load_config(args.config) if args.config else defaults_for(preset=args.preset or "")
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _plan(cfg, command):
    full = stage_plan(cfg)
    if command == "train":
        return full[:full.index("train") + 1]
    if command in ("eval", "run"):
        return full
    return COMMANDS[command]


def _run_one(cfg, out, plan):
    return Pipeline(cfg, out).run(plan)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _resolve_config(args)
        out = Path(args.out)
        if args.command == "plot-data":
            if args.dry_run:
                print(f"plot-data from {out} (window {args.window})")
                return EXIT_OK
            for path in plot_data(out, args.window):
                print(path)
            return EXIT_OK
        if args.command == "bench-inference":
            nodes = [int(n) for n in args.nodes.split(",") if n.strip()]
            if args.dry_run:
                print(f"bench-inference nodes={nodes} repeats={args.repeats}")
                return EXIT_OK
            print("n,gnn_ms,pan_ms")
            for r in bench_inference(cfg, nodes, args.repeats, cfg.seed):
                print(f"{r['n']},{r['gnn_ms']:.6f},{r['pan_ms']:.6f}")
            return EXIT_OK
        plan = _plan(cfg, args.command)
        if args.command == "pretrain-pan" and cfg.feature_model != "pan":
            cfg = cfg.replace(feature_model="pan")
        seeds = [cfg.seed + k for k in range(max(args.parallel_seeds, 1))]
        jobs = [(cfg.replace(seed=s), out / f"seed_{s}" if len(seeds) > 1 else out) for s in seeds]
        if args.dry_run:
            for c, o in jobs:
                sys.stdout.write(serialize_config(c))
                print(f"# out = {o}")
                print("# stages = " + " -> ".join(plan))
            return EXIT_OK
        if len(jobs) == 1:
            results = [_run_one(jobs[0][0], jobs[0][1], plan)]
        else:
            with ProcessPoolExecutor(max_workers=len(jobs)) as pool:
                results = list(pool.map(_run_one, [c for c, _ in jobs], [o for _, o in jobs],
                                        [plan] * len(jobs)))
        for (c, o), res in zip(jobs, results):
            if res:
                print(json.dumps({"seed": c.seed, "out": str(o), **res}, sort_keys=True))
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FmeacError, OSError, ValueError) as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
