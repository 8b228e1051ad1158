"""Command-line entry point.

One binary, eight subcommands; every flag is documented via --help.
Exit codes: 0 success, 1 config error, 2 data error, 3 runtime
invariant violation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .config import TrainingConfig, apply_overrides, load_config
from .datagen import WorldConfig
from .errors import ConfigError, DataError, InputError, InvariantError
from .evalkit import report_columns, usage_report
from . import harness


def _add_config_flags(p):
    p.add_argument("--config", metavar="FILE",
                   help="training config file (key = value lines)")
    p.add_argument("--set", metavar="KEY=VALUE", action="append",
                   dest="overrides", default=[],
                   help="override one config key; repeatable")


def _resolve_config(args) -> TrainingConfig:
    cfg = load_config(args.config) if args.config else TrainingConfig()
    return apply_overrides(cfg, args.overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sidrec",
        description="Co-trained semantic-ID recommender: synthetic worlds, "
                    "two-phase training, evaluation, and run inspection.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic world")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--users", type=int, default=500)
    p.add_argument("--items", type=int, default=200)
    p.add_argument("--clusters", type=int, default=8)
    p.add_argument("--dim", type=int, default=16,
                   help="content feature dimension")
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--zipf", type=float, default=1.2,
                   help="popularity skew exponent")
    p.add_argument("--events", type=int, default=40000)

    for name, blurb in (("warmup", "phase 1 only: train against fixed SIDs"),
                        ("coevolve", "full two-phase run")):
        p = sub.add_parser(name, help=blurb)
        p.add_argument("--data", required=True,
                       help="directory holding events.tsv and catalog.tsv")
        p.add_argument("--out", required=True, help="run directory")
        _add_config_flags(p)

    p = sub.add_parser("eval",
                       help="recompute final metrics from run artifacts")
    p.add_argument("--run", required=True, help="completed run directory")

    p = sub.add_parser("inspect-index",
                       help="dump index links and churn statistics")
    p.add_argument("--run", required=True)

    p = sub.add_parser("entropy-report",
                       help="per-level codebook entropy and density")
    p.add_argument("--run", required=True)
    p.add_argument("--all-aliases", action="store_true",
                   help="count every stored alias, not just each item's "
                        "top-weight SID")

    p = sub.add_parser("gradcheck",
                       help="finite-difference audit of every primitive "
                            "and composed loss")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=harness.GRADCHECK_TOL)

    p = sub.add_parser("report",
                       help="aggregate a run's metrics log into summaries "
                            "and series files")
    p.add_argument("--run", required=True)
    return parser


def _events_catalog(data_dir):
    return (os.path.join(data_dir, harness.EVENTS_FILE),
            os.path.join(data_dir, harness.CATALOG_FILE))


def cmd_synth(args) -> int:
    wc = WorldConfig(n_users=args.users, n_items=args.items,
                     n_clusters=args.clusters, content_dim=args.dim,
                     noise=args.noise, zipf_exponent=args.zipf)
    n = harness.synth_run(args.out, wc, args.events, args.seed)
    print(f"wrote {n} events for {args.users} users over {args.items} items "
          f"to {args.out}")
    return 0


def cmd_train(args, warmup_only: bool) -> int:
    events, catalog = _events_catalog(args.data)
    manifest = harness.train_run(events, catalog, args.out,
                                 _resolve_config(args),
                                 warmup_only=warmup_only)
    steps = manifest.phase_steps
    print(f"{manifest.version}: {steps['warmup']} warm-up + "
          f"{steps['dynamic']} dynamic steps")
    print(f"baseline recall@10 {manifest.baseline['recall@10']!r}")
    for k in ("recall@5", "recall@10", "ndcg@5", "ndcg@10"):
        print(f"{k} {manifest.final[k]!r}")
    print(f"run directory: {args.out}")
    return 0


def cmd_eval(args) -> int:
    row = harness.eval_run(args.run)
    cols = report_columns(len([c for c in row if c.startswith("entropy_")]))
    print(",".join(cols))
    print(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c])
                   for c in cols))
    return 0


def cmd_inspect_index(args) -> int:
    index = harness.load_run_index(args.run)
    index.check_invariants()
    for line in harness.index_dump_lines(index):
        print(line)
    print(f"# items={len(index.items())} links={index.n_links()} "
          f"clock={index.clock}")
    for phase, agg in sorted(harness.churn_stats(args.run).items()):
        print(f"# {phase}: steps={agg['steps']} added={agg['index_added']} "
              f"removed={agg['index_removed']} stolen={agg['index_stolen']}")
    return 0


def cmd_entropy_report(args) -> int:
    index = harness.load_run_index(args.run)
    print("level,entropy_bits,density")
    for i, (h, d) in enumerate(usage_report(index,
                                            all_aliases=args.all_aliases)):
        print(f"{i + 1},{h!r},{d!r}")
    return 0


def cmd_gradcheck(args) -> int:
    results = harness.gradcheck_suite(seeds=args.seeds, eps=args.eps)
    failed = []
    for name, err in results:
        status = "ok" if err < args.tol else "FAIL"
        print(f"{name:<28} {err:.3e} {status}")
        if err >= args.tol:
            failed.append(name)
    print(f"{len(results) - len(failed)}/{len(results)} checks under "
          f"{args.tol:g} over {args.seeds} seeds")
    if failed:
        raise InvariantError(f"gradient check failed for {failed}")
    return 0


def cmd_report(args) -> int:
    summary = harness.report_run(args.run)
    print(json.dumps(summary, sort_keys=True, indent=2))
    if summary["warnings"]:
        print(f"{len(summary['warnings'])} warning(s)", file=sys.stderr)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "synth": cmd_synth,
        "warmup": lambda a: cmd_train(a, warmup_only=True),
        "coevolve": lambda a: cmd_train(a, warmup_only=False),
        "eval": cmd_eval,
        "inspect-index": cmd_inspect_index,
        "entropy-report": cmd_entropy_report,
        "gradcheck": cmd_gradcheck,
        "report": cmd_report,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, InputError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except InvariantError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
