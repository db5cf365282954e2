"""Command-line interface: ``hdmm optimize|error|run|validate``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import io
from .error import ErrorReport
from .mechanism import OPERATORS, opt_hdmm, run_hdmm

logger = logging.getLogger("hdmm")


def _operators(text):
    ops = [o.strip() for o in text.split(",") if o.strip()]
    bad = [o for o in ops if o not in OPERATORS]
    if bad or not ops:
        raise argparse.ArgumentTypeError(f"operators must be a comma list drawn from {','.join(OPERATORS)}")
    return tuple(ops)


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def build_parser():
    parser = argparse.ArgumentParser(prog="hdmm", description="Workload-adaptive private query answering.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, strategy=False):
        p.add_argument("--workload", required=True, help="workload JSON file")
        p.add_argument("--schema", help="schema JSON file (overrides a schema embedded in the workload)")
        p.add_argument("--out", help="output file (default: stdout)")
        if strategy:
            p.add_argument("--strategy", help="strategy JSON file; optimized from scratch when omitted")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--restarts", type=_positive_int, default=25)
        p.add_argument("--operators", type=_operators, default=OPERATORS)
        p.add_argument("--threads", type=_positive_int, default=os.cpu_count() or 1)
        p.add_argument("--epsilon", type=float, default=1.0)

    common(sub.add_parser("optimize", help="select a strategy and write it as JSON"))
    common(sub.add_parser("error", help="report expected error against the baselines"), strategy=True)
    p = sub.add_parser("run", help="answer the workload privately from a CSV of records")
    common(p, strategy=True)
    p.add_argument("--data", required=True, help="CSV file with one record per row")
    p = sub.add_parser("validate", help="check workload, schema and data files")
    p.add_argument("--workload", required=True)
    p.add_argument("--schema")
    p.add_argument("--data")
    return parser


def _load_workload(args):
    schema = io.parse_schema(io.load_json(args.schema)) if args.schema else None
    doc = io.load_json(args.workload)
    if schema is not None and isinstance(doc, dict):
        doc = {k: v for k, v in doc.items() if k != "schema"}
    return io.parse_workload(doc, schema)


def _emit(text, path):
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _strategy(args, workload):
    if getattr(args, "strategy", None):
        return io.parse_strategy(io.load_json(args.strategy))
    return opt_hdmm(workload, args.operators, restarts=args.restarts, seed=args.seed, threads=args.threads)


def cmd_optimize(args):
    workload = _load_workload(args)
    strategy = _strategy(args, workload)
    _emit(io.dumps(io.strategy_to_json(strategy)), args.out)
    report = ErrorReport.build(workload, strategy, args.epsilon, name=os.path.basename(args.workload))
    print(report.to_text(), file=sys.stderr if not args.out else sys.stdout)
    return 0


def cmd_error(args):
    workload = _load_workload(args)
    strategy = _strategy(args, workload)
    report = ErrorReport.build(workload, strategy, args.epsilon, name=os.path.basename(args.workload))
    if args.out:
        _emit(report.to_json() + "\n", args.out)
    print(report.to_text())
    return 0


def cmd_run(args):
    workload = _load_workload(args)
    with open(args.data, newline="") as fh:
        data = io.ingest_csv(workload.schema, fh)
    strategy = io.parse_strategy(io.load_json(args.strategy)) if args.strategy else None
    result = run_hdmm(
        workload, data, args.epsilon, args.operators,
        restarts=args.restarts, seed=args.seed, threads=args.threads, strategy=strategy,
    )
    answers, start = {}, 0
    for j in range(workload.k):
        m = workload.term_rows(j)
        answers[str(j)] = result.workload_answers[start:start + m].tolist()
        start += m
    doc = {
        "epsilon": result.epsilon,
        "seed": result.seed,
        "records": float(data.counts.sum()),
        "converged": bool(result.converged),
        "strategy": io.strategy_to_json(result.strategy),
        "answers": answers,
    }
    _emit(io.dumps(doc), args.out)
    return 0


def cmd_validate(args):
    workload = _load_workload(args)
    s = workload.schema
    print(f"schema: {s.d} attributes, domain size {s.N}")
    print(f"workload: {workload.k} terms, {workload.rows} queries, {workload.encoded_size()} stored values")
    if args.data:
        with open(args.data, newline="") as fh:
            data = io.ingest_csv(s, fh)
        print(f"data: {int(np.sum(data.counts))} records")
    return 0


COMMANDS = {"optimize": cmd_optimize, "error": cmd_error, "run": cmd_run, "validate": cmd_validate}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"hdmm: I/O error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, TypeError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"hdmm: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
