# cli.py
"""
Command-line entry point.

Data goes to stdout or `--out`; the echoed run configuration (`# key=value`
lines) goes to stdout only and is suppressed by `--no-header`. Diagnostics
go to stderr. Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

import argparse
import logging
import sys
from datetime import datetime
from typing import Callable, Dict, Optional, Sequence, TextIO

from config import Config
from core.cost import (COST_PRESETS, AmortizedCost, AnalyticCost, CostProvider, InterpolatedCost,
                       TableCost, cost_preset, cost_table_text, load_cost_table, warmup)
from core.database import CostStore
from core.errors import ServingToolkitError
from core.graph import MODEL_PRESETS, build_encoder_graph, flops, format_records, model_config, parse_records
from core.planner import (PlannerConfig, ReleasePolicy, alloc_free_trace, caching_allocator_sim,
                          footprint_study, mem_allocate, plan_gsoc, plan_high_water, verify_plan)
from core.reduce import bench_reductions
from core.scheduler import PLAN_COLUMNS, TriggerKind, TriggerPolicy, load_requests, schedule
from core.sim import Workload, find_critical_point, generate_lengths, run_sim, sweep_rates, trace_text
from utils.formats import csv_text, keyvalue_text, write_text
from utils.log import configure_logging

logger = logging.getLogger("cli")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Input that parses but cannot be used (exit code 2)"""


class CliArgumentParser(argparse.ArgumentParser):
    """ArgumentParser that reports usage errors on a given stream"""

    def __init__(self, *args, stream: Optional[TextIO] = None, **kwargs):
        super().__init__(*args, **kwargs)
        self.stream = stream

    def error(self, message: str):
        stream = self.stream or sys.stderr
        self.print_usage(stream)
        stream.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


# ---------------------------------------------------------------- arguments

def _add_global_flags(parser: argparse.ArgumentParser, with_defaults: bool) -> None:
    """
    Flags accepted before and after the subcommand. The subcommand copy has
    no defaults, so it only overrides values actually given after it.
    """
    def default(value):
        return value if with_defaults else argparse.SUPPRESS

    parser.add_argument("--seed", type=int, default=default(Config.DEFAULT_SEED))
    parser.add_argument("--out", default=default(None), help="write data here instead of stdout")
    parser.add_argument("--format", choices=("csv", "keyvalue"), default=default(None),
                        help="data format (default depends on the subcommand)")
    parser.add_argument("--no-header", action="store_true", default=default(False),
                        help="do not echo the run configuration")
    parser.add_argument("--log-level", default=default(Config.LOG_LEVEL))


def _add_model(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--model", choices=sorted(MODEL_PRESETS), default="bert-base")


def _add_costs(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("cost provider")
    group.add_argument("--costs", metavar="TABLE_CSV", help="cost table CSV (seq_len,batch,latency_s)")
    group.add_argument("--cost-store", metavar="NAME", help="cost table stored in the SQLite cost store")
    group.add_argument("--db", default=Config.COST_DB_PATH, help="SQLite cost store path")
    group.add_argument("--interpolate", action="store_true",
                       help="bilinear interpolation between table entries")
    group.add_argument("--preset", choices=sorted(COST_PRESETS), default="launch-bound",
                       help="analytic cost preset used when no table is given")
    _add_model(group)


def _add_policy(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--algo", choices=("dp", "naive", "nobatch"), default="dp")
    parser.add_argument("--policy", choices=("hungry", "lazy"), default="hungry")
    parser.add_argument("--timeout", type=float, default=Config.LAZY_TIMEOUT)
    parser.add_argument("--max-batch", type=int, default=Config.MAX_BATCH)
    parser.add_argument("--latency-constraint", type=float, default=Config.LATENCY_CONSTRAINT)


def _add_workload(parser: argparse.ArgumentParser, rate_required: bool = True) -> None:
    parser.add_argument("--rate", type=float, required=rate_required, default=None if rate_required else 100.0,
                        help="arrival rate in requests/second")
    parser.add_argument("--len-lo", type=int, default=2)
    parser.add_argument("--len-hi", type=int, default=100)
    parser.add_argument("--dur", type=float, default=10.0, help="arrival window in seconds")


def build_arg_parser(stream: Optional[TextIO] = None) -> argparse.ArgumentParser:
    parser = CliArgumentParser(prog="servekit", stream=stream,
                               description="Memory planning, batch scheduling and serving simulation "
                                           "for variable-length transformer inference")
    _add_global_flags(parser, with_defaults=True)
    common = argparse.ArgumentParser(add_help=False)
    _add_global_flags(common, with_defaults=False)
    subparsers = parser.add_subparsers(dest="command", required=True)

    def command(name: str, summary: str) -> argparse.ArgumentParser:
        return subparsers.add_parser(name, help=summary, parents=[common], stream=stream)

    p = command("flops", "GEMM FLOPs of one inference")
    _add_model(p)
    p.add_argument("--seq", type=int, required=True)
    p.add_argument("--batch", type=int, default=1)

    p = command("records", "tensor usage records of the encoder graph")
    _add_model(p)
    p.add_argument("--seq", type=int, required=True)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--repeat-layers", action="store_true", help="emit one layer's records")

    p = command("plan-memory", "plan intermediate tensor offsets")
    p.add_argument("--records", required=True)
    p.add_argument("--chunk-size", type=int, default=Config.DEFAULT_CHUNK_SIZE)
    p.add_argument("--k-scale", type=float, default=Config.K_SCALE)
    p.add_argument("--alignment", type=int, default=Config.ALIGNMENT)
    p.add_argument("--algo", choices=("turbo", "gsoc", "caching"), default="turbo")

    p = command("schedule", "batch a request file")
    p.add_argument("--requests", required=True, help="CSV id,seq_len,arrival")
    p.add_argument("--algo", choices=("dp", "naive", "nobatch"), default="dp")
    _add_costs(p)

    p = command("warmup", "measure a cost table over a grid")
    p.add_argument("--grid-seq", type=int, nargs="+", required=True)
    p.add_argument("--grid-batch", type=int, nargs="+", required=True)
    p.add_argument("--preset", choices=sorted(COST_PRESETS), default="launch-bound")
    p.add_argument("--store", metavar="NAME", help="also save the table to the SQLite cost store")
    p.add_argument("--db", default=Config.COST_DB_PATH)
    _add_model(p)

    p = command("simulate", "simulate serving under Poisson arrivals")
    _add_workload(p)
    _add_policy(p)
    _add_costs(p)
    p.add_argument("--trace", metavar="CSV", help="per-request trace output")

    p = command("critical-point", "largest stable arrival rate")
    _add_workload(p, rate_required=False)
    _add_policy(p)
    _add_costs(p)
    p.add_argument("--rel-tol", type=float, default=0.01)

    p = command("sweep", "serving throughput over a list of arrival rates")
    _add_workload(p, rate_required=False)
    _add_policy(p)
    _add_costs(p)
    p.add_argument("--rates", type=float, nargs="+", required=True)

    p = command("footprint", "allocator footprints over a request sequence")
    _add_model(p)
    p.add_argument("--lengths", type=int, nargs="+", help="explicit request lengths")
    p.add_argument("--count", type=int, default=50)
    p.add_argument("--len-lo", type=int, default=5)
    p.add_argument("--len-hi", type=int, default=500)
    p.add_argument("--chunk-size", type=int, default=Config.DEFAULT_CHUNK_SIZE)
    p.add_argument("--k-scale", type=float, default=Config.K_SCALE)
    p.add_argument("--idle-limit", type=int, default=Config.IDLE_RELEASE_LIMIT,
                   help="inferences an unused chunk survives (0 = release immediately)")

    p = command("bench-reductions", "reduction kernels against float64 oracles")
    p.add_argument("--rows", type=int, default=64)
    p.add_argument("--cols", type=int, default=768)
    p.add_argument("--timing", action="store_true", help="include rows/sec (not deterministic)")

    return parser


# ---------------------------------------------------------------- helpers

def _output(args, csv_data: Callable[[], str], keyvalue_data: Callable[[], str], default: str) -> str:
    fmt = args.format or default
    return csv_data() if fmt == "csv" else keyvalue_data()


def _one_row_csv(values: Dict[str, object]) -> str:
    return csv_text(list(values), [[repr(v) if isinstance(v, float) else v for v in values.values()]])


def _cost_provider(args) -> CostProvider:
    if args.costs and args.cost_store:
        raise UsageError("--costs and --cost-store are mutually exclusive")
    if args.costs or args.cost_store:
        if args.costs:
            table = load_cost_table(args.costs)
        else:
            with CostStore(args.db) as store:
                table = store.load_table(args.cost_store)
        if not table.entries:
            raise UsageError("cost table is empty")
        return InterpolatedCost(table) if args.interpolate else TableCost(table)
    return AnalyticCost(model_config(args.model), cost_preset(args.preset))


def _policy(args) -> TriggerPolicy:
    return TriggerPolicy(TriggerKind(args.policy), timeout=args.timeout, max_batch=args.max_batch,
                         latency_constraint=args.latency_constraint)


def _workload(args) -> Workload:
    return Workload(args.rate, args.len_lo, args.len_hi, args.dur, args.seed)


def _header(args) -> str:
    values = {key: value for key, value in sorted(vars(args).items()) if key != "func"}
    values["run_at"] = datetime.now().isoformat(timespec="seconds")
    return "".join(f"# {line}" for line in keyvalue_text(values).splitlines(keepends=True))


# ---------------------------------------------------------------- subcommands

def cmd_flops(args) -> str:
    config = model_config(args.model)
    values = {"model": args.model, "batch": args.batch, "seq_len": args.seq,
              "flops": flops(config, args.batch, args.seq)}
    values["gflops"] = values["flops"] / 1e9
    return _output(args, lambda: _one_row_csv(values), lambda: keyvalue_text(values), "keyvalue")


def cmd_records(args) -> str:
    graph = build_encoder_graph(model_config(args.model), args.batch, args.seq, args.repeat_layers)
    return format_records(graph.tensors)


def cmd_plan_memory(args) -> str:
    records = parse_records(args.records)
    if not records:
        raise UsageError(f"record file {args.records} has no records")

    if args.algo == "caching":
        stats = caching_allocator_sim(alloc_free_trace(records))
        summary = {"algo": args.algo, **stats.as_dict()}
        return _output(args, lambda: _one_row_csv(summary), lambda: keyvalue_text(summary), "csv")

    if args.algo == "turbo":
        cfg = PlannerConfig(default_chunk_size=args.chunk_size, k_scale=args.k_scale, alignment=args.alignment)
        plan, stats = mem_allocate(records, [], cfg)
        summary = {"algo": args.algo, "chunks": len(plan.chunks), "footprint": plan.footprint,
                   "high_water": plan_high_water(plan), **stats.as_dict()}
    else:
        plan = plan_gsoc(records, args.alignment)
        summary = {"algo": args.algo, "chunks": len(plan.chunks), "footprint": plan.footprint,
                   "high_water": plan_high_water(plan)}

    violations = verify_plan(records, plan)
    if violations:
        raise ServingToolkitError(f"plan failed verification: {violations[0]}")

    plan_csv = csv_text(("tensor_id", "chunk_id", "offset"), plan.rows())
    return _output(args, lambda: plan_csv + "\n" + keyvalue_text(summary),
                   lambda: keyvalue_text(summary), "csv")


def cmd_schedule(args) -> str:
    requests = load_requests(args.requests)
    if not requests:
        raise UsageError(f"request file {args.requests} has no requests")
    plan = schedule(requests, AmortizedCost(_cost_provider(args)), args.algo)
    summary = {"algo": args.algo, "requests": plan.num_requests, "batches": len(plan.batches),
               "predicted_cost": plan.predicted_cost}
    return _output(args, lambda: csv_text(PLAN_COLUMNS, plan.rows()) + "\n" + keyvalue_text(summary),
                   lambda: keyvalue_text(summary), "csv")


def cmd_warmup(args) -> str:
    executor = AnalyticCost(model_config(args.model), cost_preset(args.preset))
    table = warmup(executor, args.grid_seq, args.grid_batch)
    if args.store:
        with CostStore(args.db) as store:
            store.save_table(args.store, table, source=f"analytic:{args.preset}")
    return cost_table_text(table)


def cmd_simulate(args) -> str:
    report = run_sim(_workload(args), _policy(args), args.algo, _cost_provider(args))
    if args.trace:
        with open(args.trace, "w", encoding="utf-8", newline="") as handle:
            handle.write(trace_text(report))
    values = report.as_dict()
    return _output(args, lambda: _one_row_csv(values), lambda: keyvalue_text(values), "keyvalue")


def cmd_critical_point(args) -> str:
    rate = find_critical_point(_workload(args), _policy(args), args.algo, _cost_provider(args),
                               rel_tol=args.rel_tol)
    values = {"algo": args.algo, "policy": args.policy, "critical_rate": rate}
    return _output(args, lambda: _one_row_csv(values), lambda: keyvalue_text(values), "keyvalue")


def cmd_sweep(args) -> str:
    reports = sweep_rates(_workload(args), args.rates, _policy(args), args.algo, _cost_provider(args))
    columns = ("rate", "request_throughput", "serving_throughput", "latency_avg", "latency_p99",
               "mean_batch_size", "divergent")
    rows = [[repr(getattr(r, c)) if isinstance(getattr(r, c), float) else getattr(r, c) for c in columns]
            for r in reports]
    return csv_text(columns, rows)


def cmd_footprint(args) -> str:
    if args.lengths:
        lengths = args.lengths
    else:
        lengths = [int(s) for s in generate_lengths(args.len_lo, args.len_hi, args.count, args.seed)]
    overrides = dict(default_chunk_size=args.chunk_size, k_scale=args.k_scale)
    if args.idle_limit > 0:
        overrides.update(release_policy=ReleasePolicy.IDLE_LIMIT, idle_limit=args.idle_limit)
    else:
        overrides.update(release_policy=ReleasePolicy.IMMEDIATE)
    study = footprint_study(model_config(args.model), lengths, PlannerConfig.from_config(**overrides))
    columns = ("request", "seq_len", "planner_chunks", "planner_held", "planner_peak", "gsoc", "caching")
    return csv_text(columns, study.rows())


def cmd_bench_reductions(args) -> str:
    values = bench_reductions(args.rows, args.cols, args.seed).as_dict(timing=args.timing)
    return _output(args, lambda: _one_row_csv(values), lambda: keyvalue_text(values), "keyvalue")


COMMANDS: Dict[str, Callable] = {
    "flops": cmd_flops,
    "records": cmd_records,
    "plan-memory": cmd_plan_memory,
    "schedule": cmd_schedule,
    "warmup": cmd_warmup,
    "simulate": cmd_simulate,
    "critical-point": cmd_critical_point,
    "sweep": cmd_sweep,
    "footprint": cmd_footprint,
    "bench-reductions": cmd_bench_reductions,
}


def main(argv: Optional[Sequence[str]] = None, stdout: Optional[TextIO] = None,
         stderr: Optional[TextIO] = None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_arg_parser(stderr)
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE

    configure_logging(args.log_level)
    try:
        Config.validate()
        data = COMMANDS[args.command](args)
    except UsageError as e:
        stderr.write(f"{parser.prog} {args.command}: error: {e}\n")
        return EXIT_USAGE
    except (ServingToolkitError, OSError, ValueError, KeyError) as e:
        logger.debug("command failed", exc_info=True)
        stderr.write(f"error: {e}\n")
        return EXIT_RUNTIME

    if not args.no_header:
        write_text(stdout, _header(args))
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as handle:
            write_text(handle, data)
    else:
        write_text(stdout, data)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
