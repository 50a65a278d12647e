"""
Command-line front door.

    simulate   one run from a YAML experiment file
    ablate     every requested variant over a range of seeds
    stats      binomial, wilson, bonferroni, wilcoxon, pearson, concordance, curve
    trace      index or event-type histogram of an agent trace corpus
    show       diagnostic reports and audits of a saved record
    serve      the stdio MCP server

Exit status: 0 on success, 2 on usage or configuration errors, 1 on internal errors.
"""
import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from .config import DEFAULT_WORKERS, LOG_LEVEL, configure_logging
from .ddf import CompletenessAudit, DiagnosticMode, DiagnosticReport, format_audit_table, format_report_table
from .errors import (
    ConfigurationError,
    DegenerateSampleError,
    IncompatibleVersionError,
    PipelineAborted,
    ResearchLoopError,
    TraceParseError,
)
from .pipeline import ExperimentConfig, ExperimentRecord, Variant, load_experiment, run_ablation_suite, simulate
from .remote import build_generators
from .stats import (
    PairedSamples,
    ablation_summary,
    binomial_test_one_sided,
    bonferroni_threshold,
    cross_run_concordance,
    cumulative_win_curve,
    paired_fsp_test,
    pearson_r,
    union_win_curve,
    wilcoxon_signed_rank,
    wilson_ci,
)
from .trace_io import (
    event_histogram,
    load_record,
    load_session,
    persist_record,
    read_pairs_csv,
    read_summary_csv,
    scan_corpus,
    write_ablation_csv,
    write_summary_csv,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2

DEFAULT_BUDGETS = "5,10,15,20,25,30"


class UsageError(Exception):
    """Bad arguments detected after parsing."""


def _fmt(value: float) -> str:
    return f"{value:.6g}"


def _ints(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise UsageError(f"expected a comma-separated list of integers, got {text!r}") from e


def _checked(fn, *args: Any, **kwargs: Any) -> Any:
    """Run a call whose ValueError means the arguments or input file are out of range."""
    try:
        return fn(*args, **kwargs)
    except DegenerateSampleError:
        raise
    except ValueError as e:
        raise UsageError(str(e)) from e


def _ids(text: str) -> List[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def parse_variants(text: str) -> List[Variant]:
    """Accepts full, minus_qwbe, MinusQWBE, minus-qwbe and so on."""
    by_key = {v.value.replace("_", ""): v for v in Variant}
    variants = []
    for name in _ids(text):
        key = name.lower().replace("_", "").replace("-", "")
        if key not in by_key:
            raise UsageError(f"unknown variant {name!r}; choose from {', '.join(v.value for v in Variant)}")
        variants.append(by_key[key])
    if not variants:
        raise UsageError("no variants given")
    return variants


def write_manifest(out: Path, command: str, config: ExperimentConfig, **extra: Any) -> Path:
    manifest = {"command": command, "config": config.to_dict(), **extra}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _load_config(args: argparse.Namespace) -> ExperimentConfig:
    if not args.config:
        raise UsageError("--config is required")
    config = load_experiment(args.config)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    return config


def _run_key(row: Dict[str, Any]):
    return row["dataset_id"], row["variant"], int(row["seed"])


def merge_summary_row(path: Path, row: Dict[str, Any]) -> Path:
    """Add or replace the row of one run; rows stay sorted by (dataset, variant, seed)."""
    rows = [r for r in read_summary_csv(path) if _run_key(r) != _run_key(row)] if path.exists() else []
    rows.append(row)
    rows.sort(key=_run_key)
    return write_summary_csv(rows, path)


def record_name(record: ExperimentRecord) -> str:
    return f"record_{record.dataset_id}_{record.config.variant.value}_{record.seed}.jsonl"


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_simulate(args: argparse.Namespace) -> int:
    config = _load_config(args)
    if args.variant:
        config = replace(config, variant=parse_variants(args.variant)[0])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    generators = build_generators(summary_cap=config.memory_caps.summary_cap)
    status = EXIT_OK
    try:
        record = simulate(config, generators)
    except PipelineAborted as e:
        if e.partial_record is None:
            raise
        logger.error("run aborted, partial record kept: %s", e)
        record = e.partial_record
        status = EXIT_INTERNAL

    path = persist_record(record, out / record_name(record))
    row = record.summary_row()
    merge_summary_row(out / "summary.csv", row)
    write_manifest(out, "simulate", config, record=path.name)
    print(f"{path} win={row['win']} fsp={row['fsp']} nodes={row['nodes']}")
    return status


def cmd_ablate(args: argparse.Namespace) -> int:
    if args.seeds < 1:
        raise UsageError("--seeds must be at least 1")
    variants = parse_variants(args.variants)
    config = _load_config(args)
    first_seed = config.seed if args.seed is not None else 0
    seeds = list(range(first_seed, first_seed + args.seeds))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    records = run_ablation_suite(config, variants, seeds, workers=args.workers)
    rows = [r.summary_row() for r in records]
    for row in rows:
        logger.info("run variant=%s seed=%s win=%s fsp=%s nodes=%s",
                    row["variant"], row["seed"], row["win"], row["fsp"], row["nodes"])
    write_summary_csv(rows, out / "runs.csv")
    summaries = ablation_summary(rows)
    write_ablation_csv(summaries, out / "ablation.csv")

    budget = config.qwbe_params.proposal_budget * config.qwbe_params.iteration_budget
    full = [r for r in rows if r["variant"] == Variant.FULL.value]
    tests: Dict[str, Optional[Dict[str, Any]]] = {}
    for variant in variants:
        if variant is Variant.FULL or not full:
            continue
        other = [r for r in rows if r["variant"] == variant.value]
        try:
            tests[variant.value] = paired_fsp_test(full, other, budget).to_dict()
        except ValueError:
            tests[variant.value] = None
    write_manifest(
        out, "ablate", config,
        variants=[v.value for v in variants], seeds=seeds, workers=args.workers, fsp_tests=tests,
    )

    writer = csv.writer(sys.stdout)
    writer.writerow(["variant", "runs", "wins", "mean_delta_dice_pp", "mean_fsp", "mean_nodes"])
    for s in summaries:
        writer.writerow([
            s.variant, s.runs, s.wins,
            "" if s.mean_delta_dice_pp is None else _fmt(s.mean_delta_dice_pp),
            "" if s.mean_fsp is None else _fmt(s.mean_fsp),
            _fmt(s.mean_nodes),
        ])
    return EXIT_OK


def cmd_stats(args: argparse.Namespace) -> int:
    query = args.query
    if query == "binomial":
        print(_fmt(_checked(binomial_test_one_sided, args.k, args.n, args.p0)))
    elif query == "wilson":
        lower, upper = _checked(wilson_ci, args.k, args.n, args.confidence)
        print(f"{_fmt(lower)} {_fmt(upper)}")
    elif query == "bonferroni":
        print(_fmt(_checked(bonferroni_threshold, args.alpha, args.m)))
    elif query == "wilcoxon":
        a, b = _checked(read_pairs_csv, args.pairs)
        samples = _checked(PairedSamples.from_columns, a, b)
        result = wilcoxon_signed_rank(samples, alternative=args.alternative, method=args.method)
        print(f"statistic={_fmt(result.statistic)} p={_fmt(result.p_value)} n={result.n} method={result.method}")
    elif query == "pearson":
        a, b = _checked(read_pairs_csv, args.pairs)
        if len(a) < 2:
            raise UsageError(f"{args.pairs}: need at least two pairs")
        print(_fmt(pearson_r(a, b)))
    elif query == "concordance":
        universe = _ids(args.universe)
        if len(universe) == 1 and universe[0].isdigit():
            universe = [str(i) for i in range(1, int(universe[0]) + 1)]
        table = _checked(cross_run_concordance, set(_ids(args.wins_a)), set(_ids(args.wins_b)), set(universe))
        print(" ".join(f"{k}={v}" for k, v in table.to_dict().items()))
    elif query == "curve":
        summaries = [_checked(read_summary_csv, path) for path in args.summary]
        budgets = _ints(args.budgets)
        if args.union:
            if len(summaries) != 2:
                raise UsageError("--union needs exactly two --summary files")
            curve = union_win_curve(summaries[0], summaries[1], budgets)
        else:
            curve = cumulative_win_curve([row for rows in summaries for row in rows], budgets)
        writer = csv.writer(sys.stdout)
        writer.writerow(["budget", "win_rate"])
        for budget, rate in curve.points:
            writer.writerow([budget, _fmt(rate)])
    return EXIT_OK


def cmd_trace(args: argparse.Namespace) -> int:
    root = Path(args.root)
    if not root.exists():
        raise UsageError(f"trace root not found: {root}")
    tolerance = 1.0 if args.lenient else 0.0
    writer = csv.writer(sys.stdout)

    if args.report == "index":
        index = scan_corpus(root)
        writer.writerow(["stage", "events", "summaries", "codes"])
        for key, counts in index.stages.items():
            writer.writerow([key, counts.events, counts.summaries, counts.codes])
        totals = index.totals
        writer.writerow(["total", totals.events, totals.summaries, totals.codes])
        return EXIT_OK

    if root.is_file():
        histogram = load_session(root, tolerance=tolerance).histogram()
    else:
        histogram = event_histogram(root, workers=args.workers, tolerance=tolerance)
    writer.writerow(["event_type", "count"])
    for name, count in histogram.items():
        writer.writerow([name, count])
    writer.writerow(["total", sum(histogram.values())])
    return EXIT_OK


def cmd_show(args: argparse.Namespace) -> int:
    record = load_record(args.record)
    row = record.summary_row()
    print(
        f"dataset={row['dataset_id']} variant={row['variant']} seed={row['seed']} "
        f"baseline={record.baseline_name} m0={_fmt(record.m0)} win={row['win']} fsp={row['fsp']} nodes={row['nodes']}"
    )
    for step in record.steps:
        print()
        print(f"Trial {step.step}: node {step.node_id} on branch {step.branch_id}, winner {step.winner.value}, "
              f"feedback {step.feedback_mode.value}")
        if not step.feedback:
            continue
        if step.feedback_mode is DiagnosticMode.FAILURE:
            print(format_report_table(DiagnosticReport.from_dict(step.feedback)))
        else:
            print(format_audit_table(CompletenessAudit.from_dict(step.feedback)))
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    from .server import main as serve

    serve()
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="research-loop", description="Long-horizon research loop over a synthetic workbench.")
    parser.add_argument("--log-level", default=LOG_LEVEL, help="Logging level (default from LOG_LEVEL).")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="Run one experiment.")
    p.add_argument("--config", required=True, help="YAML file with experiment and landscape sections.")
    p.add_argument("--seed", type=int, default=None, help="Override the configured seed.")
    p.add_argument("--variant", default=None, help="Override the configured variant.")
    p.add_argument("--out", default="runs", help="Output directory.")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("ablate", help="Run variants over many seeds and aggregate.")
    p.add_argument("--config", required=True)
    p.add_argument("--variants", default=",".join(v.value for v in Variant))
    p.add_argument("--seeds", type=int, default=20, help="Number of seeds per variant.")
    p.add_argument("--seed", type=int, default=None, help="First seed (default 0).")
    p.add_argument("--workers", type=int, default=DEFAULT_WORKERS)
    p.add_argument("--out", default="ablation")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("stats", help="Statistical procedures.")
    queries = p.add_subparsers(dest="query", required=True)
    q = queries.add_parser("binomial", help="One-sided binomial test P(X >= k).")
    q.add_argument("k", type=int)
    q.add_argument("n", type=int)
    q.add_argument("p0", type=float, nargs="?", default=0.5)
    q = queries.add_parser("wilson", help="Wilson score interval.")
    q.add_argument("k", type=int)
    q.add_argument("n", type=int)
    q.add_argument("confidence", type=float, nargs="?", default=0.95)
    q = queries.add_parser("bonferroni", help="Per-test threshold alpha / m.")
    q.add_argument("alpha", type=float)
    q.add_argument("m", type=int)
    q = queries.add_parser("wilcoxon", help="Paired signed-rank test on a two-column CSV.")
    q.add_argument("--pairs", required=True)
    q.add_argument("--alternative", default="two-sided", choices=["two-sided", "greater", "less"])
    q.add_argument("--method", default="auto", choices=["auto", "exact", "approx"])
    q = queries.add_parser("pearson", help="Pearson correlation of a two-column CSV.")
    q.add_argument("--pairs", required=True)
    q = queries.add_parser("concordance", help="Two-run win concordance.")
    q.add_argument("--wins-a", required=True, help="Comma-separated dataset ids won by run A.")
    q.add_argument("--wins-b", required=True, help="Comma-separated dataset ids won by run B.")
    q.add_argument("--universe", required=True, help="Comma-separated ids, or N for 1..N.")
    q = queries.add_parser("curve", help="Cumulative win rate by node budget.")
    q.add_argument("--summary", action="append", required=True, help="Summary CSV; repeat for several runs.")
    q.add_argument("--budgets", default=DEFAULT_BUDGETS)
    q.add_argument("--union", action="store_true", help="Per-dataset union of two summaries.")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("trace", help="Agent trace corpus reports.")
    p.add_argument("report", choices=["index", "histogram"])
    p.add_argument("root", help="Corpus root, or one session file for histogram.")
    p.add_argument("--workers", type=int, default=DEFAULT_WORKERS)
    p.add_argument("--lenient", action="store_true", help="Skip unparseable lines.")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("show", help="Print the diagnostics of a saved record.")
    p.add_argument("record")
    p.set_defaults(func=cmd_show)

    p = sub.add_parser("serve", help="Start the stdio MCP server.")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    configure_logging(args.log_level)

    try:
        return args.func(args)
    except (UsageError, ConfigurationError, FileNotFoundError, TraceParseError, IncompatibleVersionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ResearchLoopError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception:
        logger.exception("internal error")
        return EXIT_INTERNAL
