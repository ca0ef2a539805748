"""Command-line entry point: analyze -> allocate -> prune, plus synthetic experiments.

Exit codes: 0 success, 1 usage error, 2 data error, 3 infeasible budget.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import allocation, synthlab
from ._io import atomic_write_csv, atomic_write_json
from .compression import REPORT_COLUMNS as COMPRESSION_COLUMNS
from .compression import apply_plan
from .errors import InfeasibleBudgetError, SpectraPruneError
from .metrics import METRICS, REPORT_COLUMNS, Analysis, analyze_model
from .tensorio import FORMATS, group_blocks, load_checkpoint, save_checkpoint

logger = logging.getLogger("spectraprune")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INFEASIBLE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _probability(text: str) -> float:
    value = float(text)
    if not 0 < value < 1:
        raise argparse.ArgumentTypeError(f"expected a value in (0, 1), got {text}")
    return value


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _float_list(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spectraprune", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0, help="seed for every random draw (default: 0)")
    parser.add_argument("--threads", type=int, default=1, help="worker threads for per-matrix analysis")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("analyze", help="spectral metrics for every grouped matrix")
    p.add_argument("--model", required=True)
    p.add_argument("--format", choices=FORMATS, default=None)
    p.add_argument("--grouping", default="llama", help="preset name (llama, gpt2) or rules JSON file")
    p.add_argument("--metric", choices=METRICS, default="alpha_hill")
    p.add_argument("--out", required=True, help="output directory for metrics.json / metrics.csv")

    p = sub.add_parser("allocate", help="sparsity plan from a metrics report")
    p.add_argument("--metrics", required=True, help="metrics.json written by analyze")
    p.add_argument("--sparsity", required=True, type=_probability, help="global target sparsity S")
    p.add_argument("--tau", type=float, default=None, help=f"non-uniformity (default {allocation.DEFAULT_TAU})")
    p.add_argument("--s1", type=float, default=None)
    p.add_argument("--s2", type=float, default=None)
    p.add_argument("--min-sparsity", type=_probability, default=None)
    p.add_argument("--tau-matrix", type=float, default=None, help="within-block tau for mixed granularity")
    p.add_argument("--granularity", choices=allocation.GRANULARITIES, default="per_block")
    p.add_argument("--out", required=True)

    p = sub.add_parser("budget", help="N:M, bit-width or rank plan from a metrics report")
    p.add_argument("--metrics", required=True)
    p.add_argument("--kind", choices=("nm", "bits", "ranks"), required=True)
    p.add_argument("--target", type=float, required=True,
                   help="nm: kept density; bits: average bits; ranks: kept fraction of total rank")
    p.add_argument("--group-size", type=int, default=8, help="M for N:M (default 8)")
    p.add_argument("--options", type=_int_list, default=[2, 3, 4], help="bit-width choices, comma separated")
    p.add_argument("--strategy", choices=("more_on_ht", "less_on_ht"), default="more_on_ht")
    p.add_argument("--tau", type=float, default=allocation.DEFAULT_TAU)
    p.add_argument("--model", default=None, help="checkpoint, needed for rank budgets")
    p.add_argument("--format", choices=FORMATS, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("prune", help="apply a plan to a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--format", choices=FORMATS, default=None)
    p.add_argument("--plan", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--out-format", choices=FORMATS, default=None)
    p.add_argument("--report", default=None, help="report path (default: <out>.report.json)")

    p = sub.add_parser("synth", help="synthetic spectrum experiments")
    ssub = p.add_subparsers(dest="experiment", required=True, parser_class=_Parser)
    c = ssub.add_parser("correlation", help="Hill alpha vs stable rank on Pareto ensembles")
    c.add_argument("--alphas", type=_float_list, default=list(synthlab.DEFAULT_ALPHA_GRID))
    c.add_argument("--n", type=int, default=synthlab.DEFAULT_N)
    c.add_argument("--seeds", type=int, default=synthlab.DEFAULT_SEEDS, help="ensembles per alpha")
    c.add_argument("--out", required=True)
    lra = ssub.add_parser("lra", help="compare rank-assignment strategies on a checkpoint")
    lra.add_argument("--model", required=True)
    lra.add_argument("--format", choices=FORMATS, default=None)
    lra.add_argument("--grouping", default="llama")
    lra.add_argument("--keep-fraction", type=float, default=0.5)
    lra.add_argument("--tau", type=float, default=allocation.DEFAULT_TAU)
    lra.add_argument("--out", required=True)
    return parser


def _load_analysis(path) -> Analysis:
    try:
        return Analysis.from_dict(json.loads(Path(path).read_text()))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise SpectraPruneError(f"{path}: not a metrics report ({exc})") from None


def cmd_analyze(args) -> int:
    store = load_checkpoint(args.model, args.format)
    grouping = group_blocks(store, args.grouping)
    if not grouping.blocks:
        raise SpectraPruneError("no tensor matched the grouping rules")
    analysis = analyze_model(store, grouping, args.metric, threads=args.threads)
    out = Path(args.out)
    report = analysis.to_dict()
    report["ungrouped"] = list(grouping.ungrouped)
    atomic_write_json(out / "metrics.json", report)
    atomic_write_csv(out / "metrics.csv", REPORT_COLUMNS, [m.row() for m in analysis.matrices])
    failed = [m for m in analysis.matrices if m.error]
    for m in failed:
        logger.warning("%s: %s", m.name, m.error)
    print(f"analyzed {len(analysis.matrices)} matrices in {len(analysis.blocks)} blocks -> {out}")
    return EXIT_OK


def cmd_allocate(args) -> int:
    if args.tau is not None and (args.s1 is not None or args.s2 is not None or args.min_sparsity is not None):
        raise UsageError("give only one of --tau, --s1/--s2, --min-sparsity")
    if args.min_sparsity is not None and (args.s1 is not None or args.s2 is not None):
        raise UsageError("give only one of --tau, --s1/--s2, --min-sparsity")
    if (args.s1 is None) != (args.s2 is None):
        raise UsageError("--s1 and --s2 must be given together")
    analysis = _load_analysis(args.metrics)
    plan = allocation.plan_from_analysis(
        analysis,
        args.sparsity,
        args.granularity,
        tau=args.tau,
        s1=args.s1,
        s2=args.s2,
        min_sparsity=args.min_sparsity,
        tau_matrix=args.tau_matrix,
    )
    atomic_write_json(args.out, plan.to_dict())
    values = plan.per_matrix.values()
    print(f"plan: S={plan.target} granularity={plan.granularity} min={min(values):.6f} max={max(values):.6f} -> {args.out}")
    return EXIT_OK


def cmd_budget(args) -> int:
    analysis = _load_analysis(args.metrics)
    metric = analysis.metric
    names = [m.name for m in analysis.matrices]
    missing = [m.name for m in analysis.matrices if m.value(metric) is None]
    if missing:
        raise SpectraPruneError(f"no usable {metric} for {missing}")
    q = allocation.quality_from_metric([m.value(metric) for m in analysis.matrices], metric)
    d = [m.d for m in analysis.matrices]
    if args.kind == "nm":
        plan = allocation.allocate_nm(q, d, args.group_size, args.target, tau=args.tau, names=names)
    elif args.kind == "bits":
        plan = allocation.allocate_bits(q, d, args.options, args.target, names=names)
    else:
        if args.model is None:
            raise UsageError("--kind ranks needs --model to read matrix shapes")
        store = load_checkpoint(args.model, args.format)
        full = [min(store[n].shape) for n in names]
        keep = int(round(args.target * sum(full)))
        plan = allocation.allocate_ranks(q, full, keep, args.strategy, tau=args.tau, names=names)
    atomic_write_json(args.out, plan.to_dict())
    print(f"{args.kind} plan for {len(names)} matrices -> {args.out}")
    return EXIT_OK


def cmd_prune(args) -> int:
    store = load_checkpoint(args.model, args.format)
    try:
        plan = allocation.plan_from_dict(json.loads(Path(args.plan).read_text()))
    except (KeyError, TypeError, ValueError) as exc:
        raise SpectraPruneError(f"{args.plan}: not a plan file ({exc})") from None
    pruned, report = apply_plan(store, plan)
    out_format = args.out_format or args.format
    save_checkpoint(pruned, args.out, out_format)
    report_path = Path(args.report) if args.report else Path(f"{args.out}.report.json")
    atomic_write_json(report_path, report.to_dict())
    atomic_write_csv(report_path.with_suffix(".csv"), COMPRESSION_COLUMNS, [vars(m) for m in report.matrices])
    print(f"global achieved sparsity: {report.global_sparsity:.6f}")
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.experiment == "correlation":
        result = synthlab.correlation_experiment(args.alphas, args.n, args.seeds, base_seed=args.seed)
        atomic_write_csv(args.out, synthlab.CORRELATION_COLUMNS, result.rows)
        r = "undefined" if result.pearson_r is None else f"{result.pearson_r:.4f}"
        print(f"pearson r(alpha_hill, stable_rank) = {r}")
        return EXIT_OK
    store = load_checkpoint(args.model, args.format)
    grouping = group_blocks(store, args.grouping)
    total = sum(min(store[n].shape) for n in grouping.grouped_names)
    keep = max(len(grouping.grouped_names), int(round(args.keep_fraction * total)))
    report = synthlab.lra_strategy_experiment(store, grouping, keep, tau=args.tau, threads=args.threads)
    atomic_write_json(args.out, report)
    for name, res in report["strategies"].items():
        print(f"{name}: total reconstruction error {res['total_error']:.6g}")
    return EXIT_OK


COMMANDS = {
    "analyze": cmd_analyze,
    "allocate": cmd_allocate,
    "budget": cmd_budget,
    "prune": cmd_prune,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"spectraprune: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InfeasibleBudgetError as exc:
        print(f"spectraprune: infeasible budget: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (SpectraPruneError, OSError, ValueError) as exc:
        print(f"spectraprune: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
