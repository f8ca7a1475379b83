"""Command-line entry points: search, random, report, gen-data."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import data as data_mod
from .config import RunConfig, load_config
from .search import run_random_baseline, run_search, report


def _load_cfg(path) -> RunConfig:
    return load_config(path) if path else RunConfig()


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="evonas")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="run the full evolutionary search")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--resume", action="store_true",
                   help="continue from the newest complete checkpoint")
    p.add_argument("--stop-after-gen", type=int, default=None,
                   help="checkpoint and exit after this generation")

    p = sub.add_parser("random", help="budget-matched random-search baseline")
    p.add_argument("--config", help="config file (defaults to the matched run's)")
    p.add_argument("--budget-from", required=True,
                   help="search run directory to match the training budget of")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None,
                   help="defaults to the matched run's seed")
    p.add_argument("--jobs", type=int, default=None)

    p = sub.add_parser("report", help="emit CSV summaries for run directories")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset file")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    args = ap.parse_args(argv)

    if args.command == "search":
        final = run_search(_load_cfg(args.config), args.seed, args.out,
                           jobs=args.jobs, resume=args.resume,
                           stop_after_gen=args.stop_after_gen)
        if "best" in final:
            print(f"best candidate: id={final['best']['id']} "
                  f"accuracy={final['best']['accuracy']} "
                  f"params={final['best']['params']}")
        else:
            print(f"stopped after generation {final['stopped_after_gen']}")
        return 0

    if args.command == "random":
        src = Path(args.budget_from)
        events_path = src / "run.jsonl"
        finals = [json.loads(l) for l in events_path.read_text().splitlines()
                  if l.strip() and json.loads(l).get("type") == "final"]
        if not finals:
            print(f"error: {src} has no final event (run incomplete?)",
                  file=sys.stderr)
            return 2
        budget = finals[-1]["budget_epochs"]
        meta = json.loads((src / "meta.json").read_text())
        seed = meta["seed"] if args.seed is None else args.seed
        cfg = load_config(args.config) if args.config \
            else load_config(src / "config.txt")
        final = run_random_baseline(cfg, seed, budget, args.out, jobs=args.jobs)
        print(f"random baseline best: accuracy={final['best']['accuracy']} "
              f"params={final['best']['params']} (budget {budget} epochs)")
        return 0

    if args.command == "report":
        try:
            summary = report(args.run_dirs, args.out)
        except ValueError as e:
            print(f"error: {e}", file=sys.stderr)
            return 2
        print(f"wrote reports for {len(summary['runs'])} runs to {args.out}"
              + (f" ({summary['corrupt_lines']} corrupt log lines skipped)"
                 if summary["corrupt_lines"] else ""))
        return 0

    if args.command == "gen-data":
        ds = data_mod.generate_synthetic(args.classes, args.per_class,
                                         args.size, args.seed)
        data_mod.save_dataset(ds, args.out)
        print(f"wrote {len(ds)} samples ({args.classes} classes, "
              f"{args.size}x{args.size}) to {args.out}")
        return 0

    return 1


if __name__ == "__main__":
    sys.exit(main())
