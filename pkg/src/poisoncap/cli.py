"""Command-line entry point.

Every command streams machine-readable output line by line (JSON lines or
CSV).  Exit status: 0 when everything matched expectations, 1 on any
mismatch, 2 on usage or parse errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from contextlib import contextmanager

from . import harness
from .cachesim import CacheGeometry, CacheHierarchy, stats_csv
from .churn import churn_trace
from .errors import NestedUnsupportedByBaseline, ParseError

EXIT_OK, EXIT_MISMATCH, EXIT_USAGE = 0, 1, 2
CORPUS_CSV = ["scenario", "class", "status", "verdict", "kind", "at_step"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _default_seed(fallback: int) -> int:
    env = os.environ.get("POISONCAP_SEED")
    if env is None:
        return fallback
    try:
        return int(env, 0)
    except ValueError:
        raise UsageError(f"POISONCAP_SEED is not an integer: {env!r}") from None


def _semantics_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=("strict", "hardware", "legacy"))
    p.add_argument("--revoker", choices=harness.REVOKERS)
    p.add_argument("--store", choices=("trap", "cancel"), help="override the dangling-store action")
    p.add_argument("--uninit", choices=("trap", "zero"), help="override the uninitialised-read action")


def _output_flags(p: argparse.ArgumentParser, formats=("json", "csv")) -> None:
    p.add_argument("--out", help="write to this file instead of stdout")
    p.add_argument("--format", choices=formats, default=formats[0])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="poisoncap", description="Poison-capability memory-safety simulator.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="run one scenario file")
    p.add_argument("scenario")
    _semantics_flags(p)
    _output_flags(p, ("json",))

    p = sub.add_parser("corpus", help="run every scenario under a corpus directory")
    p.add_argument("directory", nargs="?", help="defaults to the bundled corpus")
    _semantics_flags(p)
    _output_flags(p)

    p = sub.add_parser("compare-revokers", help="differential run of the probing and bitmap revokers")
    p.add_argument("--seed", type=int)
    p.add_argument("--ops", type=int, default=1000)
    p.add_argument("--scenario", help="compare on this scenario instead of a random workload")
    _output_flags(p, ("json",))

    p = sub.add_parser("cache-bench", help="LRU vs poison-aware replacement on churn workloads")
    p.add_argument("--seed", type=int)
    p.add_argument("--ops", type=int, default=120, help="churn iterations per workload")
    p.add_argument("--geometry", choices=("paper", "desk"), default="desk")
    _output_flags(p, ("csv", "json"))

    p = sub.add_parser("dump", help="run a scenario and print the final memory image")
    p.add_argument("scenario")
    p.add_argument("--all", action="store_true", help="include untagged zero words")
    _semantics_flags(p)
    _output_flags(p, ("json",))
    return parser


@contextmanager
def _sink(path):
    if path is None:
        yield sys.stdout
    else:
        with open(path, "w", encoding="utf-8") as fh:
            yield fh


def _emit(out, line: str) -> None:
    out.write(line + "\n")
    out.flush()


def _overrides(args) -> dict:
    return {k: getattr(args, k) for k in ("mode", "revoker", "store", "uninit")}


def _cmd_run(args, out) -> int:
    sc = harness.load_scenario(args.scenario)
    report = harness.run_scenario(sc, _overrides(args))
    _emit(out, harness.report_json(report))
    return EXIT_OK if report["status"] == "pass" else EXIT_MISMATCH


def _cmd_corpus(args, out) -> int:
    files = harness.corpus_files(args.directory)
    if not files:
        raise UsageError(f"no scenarios found under {args.directory or harness.CORPUS_DIR}")
    scenarios = [harness.load_scenario(p) for p in files]  # parse everything before running
    reports = []
    writer = None
    if args.format == "csv":
        writer = csv.DictWriter(out, fieldnames=CORPUS_CSV, lineterminator="\n")
        writer.writeheader()
    for sc in scenarios:
        report = harness.run_scenario(sc, _overrides(args))
        reports.append(report)
        if writer is None:
            _emit(out, harness.report_json(report))
        else:
            obs = report["observed"]
            writer.writerow({"scenario": sc.name, "class": sc.cls, "status": report["status"],
                             "verdict": obs["verdict"], "kind": obs["kind"] or "", "at_step": "" if obs["at_step"] is None else obs["at_step"]})
            out.flush()
    summary = harness.summarize(reports)
    failed = sum(c["fail"] for c in summary.values())
    if writer is None:
        _emit(out, json.dumps({"schema": harness.SCHEMA_VERSION, "summary": summary, "failed": failed}, sort_keys=True))
    else:
        print(f"corpus: {len(reports) - failed}/{len(reports)} pass", file=sys.stderr)
    return EXIT_MISMATCH if failed else EXIT_OK


def _cmd_compare(args, out) -> int:
    if args.ops <= 0:
        raise UsageError("--ops must be positive")
    seed = args.seed if args.seed is not None else _default_seed(7)
    sc = harness.load_scenario(args.scenario) if args.scenario else None
    try:
        result = harness.compare_revokers(seed, args.ops, sc)
    except NestedUnsupportedByBaseline as e:
        raise UsageError(f"comparison needs a single-layer workload: {e}") from None
    _emit(out, json.dumps({"schema": harness.SCHEMA_VERSION, **result}, sort_keys=True))
    return EXIT_OK if result["verdict"] == "equal" else EXIT_MISMATCH


def cache_bench(seed: int, iterations: int, geometry: CacheGeometry) -> list[dict]:
    """Stats rows for each (workload, policy) pair."""
    workloads = [
        (f"churn_s{seed}", churn_trace(seed, "poison", iterations)),
        ("adversarial", churn_trace(seed, "poison", iterations, adversarial=True)),
        (f"churn_zero_s{seed}", churn_trace(seed, "zero", iterations)),
    ]
    rows = []
    for name, trace in workloads:
        mem_bytes = int(trace.addrs.max()) + 16 if len(trace) else 16
        for policy in ("lru", "poison"):
            stats = CacheHierarchy(geometry, mem_bytes, policy).run(trace)
            rows.extend(stats.rows(name, policy))
    return rows


def _cmd_cache_bench(args, out) -> int:
    if args.ops <= 0:
        raise UsageError("--ops must be positive")
    seed = args.seed if args.seed is not None else _default_seed(0)
    rows = cache_bench(seed, args.ops, CacheGeometry.preset(args.geometry))
    if args.format == "csv":
        out.write(stats_csv(rows))
        out.flush()
    else:
        for row in rows:
            _emit(out, json.dumps({"schema": harness.SCHEMA_VERSION, **row}, sort_keys=True))
    return EXIT_OK


def _cmd_dump(args, out) -> int:
    sc = harness.load_scenario(args.scenario)
    report = harness.run_scenario(sc, _overrides(args), keep_machine=True)
    machine = report.pop("_machine", None)
    _emit(out, json.dumps({"schema": harness.SCHEMA_VERSION, "scenario": sc.name,
                           "status": report["status"], "observed": report["observed"]}, sort_keys=True))
    if machine is not None:
        for line in machine.mem.dump(all_words=args.all):
            _emit(out, line)
    return EXIT_OK if report["status"] == "pass" else EXIT_MISMATCH


COMMANDS = {
    "run": _cmd_run,
    "corpus": _cmd_corpus,
    "compare-revokers": _cmd_compare,
    "cache-bench": _cmd_cache_bench,
    "dump": _cmd_dump,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        with _sink(args.out) as out:
            return COMMANDS[args.command](args, out)
    except (UsageError, ParseError, OSError) as e:
        print(f"poisoncap: error: {e}", file=sys.stderr)
        return EXIT_USAGE
