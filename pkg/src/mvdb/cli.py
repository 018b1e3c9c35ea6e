"""Command-line driver: compile an index offline, answer queries online.

Project layout: a directory holding ``schema.txt``, ``views.txt`` and
``data/<Relation>.tsv`` (one TSV per relation).  The compiled index lives in
``index.mvx`` inside the project unless ``--index`` says otherwise.

Exit codes: 0 success, 1 usage, 2 input error, 3 inconsistent constraints,
4 world cap exceeded.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from .core import (DataError, InconsistentConstraintsError, IndexFormatError,
                   InvalidViewError, Mvdb, MvdbError, OrderMismatchError,
                   QueryParseError, SchemaError, WorldCapError, load_data,
                   load_schema)
from . import ucq as U
from .translate import answer_query, build_indb, load_views
from .oracle import DEFAULT_WORLD_CAP, EnumerationEvaluator, translation_check
from .mvindex import (IndexEvaluator, build_index, load_index, save_index,
                      SINK0, SINK1)
from .gendata import generate_project

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_INCONSISTENT = 3
EXIT_CAP = 4

_INPUT_ERRORS = (SchemaError, DataError, QueryParseError, InvalidViewError,
                 IndexFormatError, OrderMismatchError, FileNotFoundError)


class _UsageError(Exception):
    pass


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _load_project(project: str, with_views: bool = True) -> Mvdb:
    root = Path(project)
    schema = load_schema(root / "schema.txt")
    data = load_data(schema, root / "data")
    views = []
    views_path = root / "views.txt"
    if with_views and views_path.exists():
        views = load_views(views_path, schema)
    return Mvdb(schema, data, views)


def _index_path(args) -> Path:
    if args.index:
        return Path(args.index)
    return Path(args.project) / "index.mvx"


def _emit(out, columns, rows, tsv: bool):
    if tsv:
        for row in rows:
            print("\t".join(str(c) for c in row), file=out)
        return
    widths = [len(c) for c in columns]
    srows = [[str(c) for c in row] for row in rows]
    for row in srows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    print("  ".join(c.ljust(w) for c, w in zip(columns, widths)), file=out)
    for row in srows:
        print("  ".join(c.ljust(w) for c, w in zip(row, widths)), file=out)


def cmd_compile(args, out) -> int:
    db = _load_project(args.project)
    t0 = time.perf_counter()
    tr = build_indb(db)
    index = build_index(tr)
    elapsed = time.perf_counter() - t0
    path = _index_path(args)
    save_index(index, path)
    if not db.views:
        print("warning: no views; index has zero constituents",
              file=sys.stderr)
    rows = [(repr(c.key), c.size(), c.width(), c.rank_lo, c.rank_hi)
            for c in index.constituents]
    _emit(out, ["key", "size", "width", "rank_lo", "rank_hi"], rows, args.tsv)
    total = sum(c.size() for c in index.constituents)
    if args.tsv:
        print(f"total\t{total}", file=out)
        print(f"p0_w\t{index.p0_w!r}", file=out)
    else:
        print(f"total size {total}, P0(W) = {index.p0_w!r}", file=out)
        print(f"wrote {path} in {elapsed * 1e3:.1f} ms", file=out)
    return EXIT_OK


def _check_index_matches(index, tr):
    facts = tr.indb.probabilistic_facts()
    if len(facts) != len(index.order):
        raise DataError("index does not match the project data; recompile")
    for f in facts:
        r = index.order.rank.get(f)
        if r is None or index.probs[r] != tr.indb.probability(f):
            raise DataError("index does not match the project data; recompile")


def cmd_query(args, out) -> int:
    db = _load_project(args.project)
    tr = build_indb(db)
    q = U.parse_query(args.query, db.schema)
    if args.engine == "oracle":
        evaluator = EnumerationEvaluator(tr, world_cap=args.world_cap)
    else:
        index = load_index(_index_path(args))
        if index.schema_digest != db.schema.digest():
            raise DataError("index was compiled for a different schema")
        _check_index_matches(index, tr)
        mode = "cc" if args.engine == "ccmv" else "mv"
        evaluator = IndexEvaluator(index, tr.indb.possible_instance(), mode)
    results = answer_query(q, tr, evaluator)
    for _, p in results:
        if not (-args.tolerance <= p <= 1.0 + args.tolerance):
            raise MvdbError(f"probability {p!r} outside [0, 1] beyond "
                            f"the tolerance {args.tolerance}")
    columns = [f"x{i + 1}" for i in range(q.head_arity)] + ["probability"]
    timing = args.timing and args.engine != "oracle"
    if timing:
        columns += ["lineage_us", "build_us", "intersect_us"]
    rows = []
    for answer, p in results:
        row = list(answer) + [repr(p)]
        if timing:
            row += [evaluator.last_timing.get("lineage_us", 0),
                    evaluator.last_timing.get("build_us", 0),
                    evaluator.last_timing.get("intersect_us", 0)]
        rows.append(row)
    _emit(out, columns, rows, args.tsv)
    return EXIT_OK


def cmd_oracle(args, out) -> int:
    db = _load_project(args.project)
    q = U.parse_query(args.query, db.schema)
    rows = []
    instance = db.possible_instance()
    bool_queries = ([(tuple(), q)] if q.is_boolean() else
                    [(a, U.substitute(q, a))
                     for a in U.answer_tuples(q, instance)])
    for answer, bq in bool_queries:
        lhs, rhs, delta = translation_check(db, bq, world_cap=args.world_cap)
        label = args.query if not answer else \
            args.query + " @ " + ",".join(str(v) for v in answer)
        rows.append((label, repr(lhs), repr(rhs), repr(delta)))
    _emit(out, ["query", "lhs", "rhs", "delta"], rows, args.tsv)
    return EXIT_OK


def cmd_stats(args, out) -> int:
    index = load_index(_index_path(args))
    rows = [(repr(c.key), c.size(), c.width(), c.rank_lo, c.rank_hi,
             repr(c.prob_root))
            for c in index.constituents]
    _emit(out, ["key", "size", "width", "rank_lo", "rank_hi", "prob_root"],
          rows, args.tsv)
    if args.tsv:
        print(f"p0_w\t{index.p0_w!r}", file=out)
        print(f"p0_not_w\t{index.p0_not_w!r}", file=out)
    else:
        print(f"P0(W) = {index.p0_w!r}, P0(not W) = {index.p0_not_w!r}",
              file=out)
    if args.dump:
        for c in index.constituents:
            print(f"constituent {c.key!r}", file=out)
            root = 0 if c.root_code == SINK0 else \
                (1 if c.root_code == SINK1 else c.root_code + 2)
            print(f"root {root}", file=out)
            print("order " + " ".join(str(f) for f in index.order.facts),
                  file=out)

            def node_id(code):
                if code == SINK0:
                    return 0
                if code == SINK1:
                    return 1
                return code + 2

            for pos in range(c.n):
                print(f"{pos + 2} {c.rank[pos]} {node_id(c.lo[pos])} "
                      f"{node_id(c.hi[pos])}", file=out)
    return EXIT_OK


def cmd_gen_dblp(args, out) -> int:
    views = tuple(v.strip() for v in args.views.split(",") if v.strip())
    try:
        path = generate_project(args.out, seed=args.seed, scale=args.scale,
                                views=views)
    except ValueError as exc:
        raise _UsageError(str(exc)) from None
    print(f"generated project at {path}", file=out)
    return EXIT_OK


def _build_parser() -> _ArgumentParser:
    parser = _ArgumentParser(prog="mvdb")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, project=True):
        if project:
            p.add_argument("--project", required=True)
        p.add_argument("--index", default=None)
        p.add_argument("--tsv", action="store_true")
        p.add_argument("--tolerance", type=float, default=1e-9)
        p.add_argument("--world-cap", dest="world_cap", type=int,
                       default=DEFAULT_WORLD_CAP)

    p = sub.add_parser("compile")
    common(p)
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("query")
    common(p)
    p.add_argument("--engine", choices=["mv", "ccmv", "oracle"],
                   default="ccmv")
    p.add_argument("--timing", action="store_true")
    p.add_argument("query")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("oracle")
    common(p)
    p.add_argument("query")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("stats")
    p.add_argument("--project", default=None)
    p.add_argument("--index", default=None)
    p.add_argument("--tsv", action="store_true")
    p.add_argument("--dump", action="store_true")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("gen-dblp")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--scale", type=int, default=2)
    p.add_argument("--views", default="v1,v2")
    p.set_defaults(func=cmd_gen_dblp)
    return parser


def main(argv=None, out=None) -> int:
    out = out if out is not None else sys.stdout
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "command", None) == "stats" and not (
                args.index or args.project):
            raise _UsageError("stats needs --index or --project")
        return args.func(args, out)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InconsistentConstraintsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INCONSISTENT
    except WorldCapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CAP
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except MvdbError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def entry():
    sys.exit(main())
