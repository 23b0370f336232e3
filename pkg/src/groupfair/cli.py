"""Command-line entry point: ``groupfair <subcommand> ...``.

Exit codes: 0 on success, 1 on data or solver errors, 2 on usage errors.
JSON floats carry 17 significant digits; every document has ``format_version``.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from groupfair.errors import GroupFairError
from groupfair.instance import FORMAT_VERSION, GroupedInstance, analyze

# ----------------------------------------------------------------- output


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def _emit_json(obj, out, indent=0):
    pad = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            out.write("{}")
            return
        out.write("{\n")
        for i, (k, v) in enumerate(obj.items()):
            out.write(f"{pad}  {json.dumps(k)}: ")
            _emit_json(v, out, indent + 1)
            out.write(",\n" if i < len(obj) - 1 else "\n")
        out.write(pad + "}")
    elif isinstance(obj, list):
        if all(not isinstance(v, (dict, list)) for v in obj):
            out.write("[")
            for i, v in enumerate(obj):
                _emit_json(v, out, indent)
                if i < len(obj) - 1:
                    out.write(", ")
            out.write("]")
            return
        out.write("[\n")
        for i, v in enumerate(obj):
            out.write(pad + "  ")
            _emit_json(v, out, indent + 1)
            out.write(",\n" if i < len(obj) - 1 else "\n")
        out.write(pad + "]")
    elif isinstance(obj, bool) or obj is None:
        out.write(json.dumps(obj))
    elif isinstance(obj, float):
        out.write(_fmt17(obj) if math.isfinite(obj) else "null")
    elif isinstance(obj, int):
        out.write(str(obj))
    else:
        out.write(json.dumps(str(obj) if not isinstance(obj, str) else obj))


def _fmt17(x: float) -> str:
    s = format(x, ".17g")
    return s if any(c in s for c in ".en") else s + ".0"


def dumps17(obj) -> str:
    """JSON text with every float written to 17 significant digits."""
    buf = io.StringIO()
    _emit_json(_to_jsonable(obj), buf)
    buf.write("\n")
    return buf.getvalue()


def _csv_rows(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for r in rows:
        w.writerow([_fmt17(x) if isinstance(x, float) else x for x in r])
    return buf.getvalue()


def _write(args, doc: dict, csv_text: str | None):
    if args.format == "csv":
        if csv_text is None:
            raise UsageError(f"{args.command} has no CSV form")
        text = csv_text
    else:
        text = dumps17(doc)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


class UsageError(Exception):
    pass


# ------------------------------------------------------------- subcommands


def _load_instance(path) -> GroupedInstance:
    return GroupedInstance.load(path)


def _matrix_csv(header, matrix) -> str:
    rows = [header] + [[i] + [float(v) for v in row] for i, row in enumerate(np.atleast_2d(matrix))]
    return _csv_rows(rows)


def cmd_analyze(args):
    an = analyze(_load_instance(args.instance))
    doc = an.to_dict()
    rows = [["group", "arm", "gap", "j_group", "j_max", "suboptimal_for_group"]]
    for g in range(an.G):
        for a in range(an.K):
            if an.instance.access[g, a]:
                rows.append([g, a, float(an.gap[g, a]), float(an.j_group[g, a]), float(an.j_max[a]),
                             int(an.sub_of_group[g, a])])
    _write(args, doc, _csv_rows(rows))


def cmd_nash(args):
    from groupfair.nash import solve_nash
    sol = solve_nash(analyze(_load_instance(args.instance)))
    _write(args, sol.to_dict(), _matrix_csv(["group"] + [f"arm{a}" for a in range(sol.q.shape[1])], sol.q))


def cmd_pof(args):
    from groupfair.nash import price_of_fairness
    rep = price_of_fairness(analyze(_load_instance(args.instance)))
    d = rep.to_dict()
    rows = [["quantity", "value"]] + [[k, float(v)] for k, v in d.items()
                                      if isinstance(v, (int, float)) and k != "format_version"]
    _write(args, d, _csv_rows(rows))


def cmd_pof_table(args):
    from groupfair.experiments import pof_table
    kinds = ("iid", "skewed") if args.kind == "all" else (args.kind,)
    tab = pof_table(kinds, tuple(args.G), args.n, args.seed)
    _write(args, tab.to_dict(), tab.csv_text())


def _seed_list(spec: list) -> list:
    out = []
    for s in spec:
        if ":" in s:
            a, b = s.split(":")
            out.extend(range(int(a), int(b)))
        else:
            out.append(int(s))
    return out


def cmd_simulate(args):
    from groupfair.simulator import aggregate, run
    inst = _load_instance(args.instance)
    seeds = _seed_list(args.seeds)
    traces = [run(inst, args.policy, args.T, s, resolve=args.resolve) for s in seeds]
    rep = aggregate(traces)
    doc = rep.to_dict()
    doc["config"] = {"instance": inst.to_dict(), "policy": args.policy, "T": args.T, "seeds": seeds,
                     "resolve": args.resolve}
    doc["runs"] = [{"seed": tr.seed, "regret": tr.regret.tolist(), "pulls": tr.pulls.tolist(),
                    "arrivals": tr.arrivals.tolist()} for tr in traces]
    rows = [["seed", "group", "arm", "pulls", "regret"]]
    for tr in traces:
        for g in range(inst.G):
            for a in range(inst.K):
                rows.append([tr.seed, g, a, int(tr.pulls[g, a]), float(tr.regret[g])])
    _write(args, doc, _csv_rows(rows))


def cmd_ctx_solve(args):
    from groupfair.contextual.model import ContextualInstance
    from groupfair.contextual.programs import solve_L, solve_Lfair
    inst = ContextualInstance.load(args.instance)
    sol = solve_L(inst) if args.program == "L" else solve_Lfair(inst)
    _write(args, sol.to_dict(), sol.csv_text())


def cmd_ctx_simulate(args):
    from groupfair.contextual.model import ContextualInstance
    from groupfair.contextual.oam import simulate
    inst = ContextualInstance.load(args.instance)
    tr = simulate(inst, args.policy, args.T, args.seed, c=args.c, resolve=args.resolve)
    _write(args, tr.metadata(), tr.csv_text())


def cmd_warfarin(args):
    from groupfair.warfarin import PHARMGKB, Schema, run_pipeline
    base = PHARMGKB if args.schema == "pharmgkb" else Schema()
    schema = Schema(**{**base.__dict__, "delimiter": args.delimiter})
    inst, rep = run_pipeline(args.csv, args.group_by, schema)
    if args.instance_out:
        inst.save(args.instance_out)
    doc = rep.to_dict()
    doc["config"] = {"csv": str(args.csv), "group_by": args.group_by, "schema": args.schema}
    _write(args, doc, rep.csv_text())


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="groupfair", description="Grouped bandit fairness laboratory.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out", help="write here instead of stdout")
        sp.add_argument("--format", choices=("json", "csv"), default="json")
        return sp

    for name, fn, helptext in (("analyze", cmd_analyze, "gap constants, lower bound, disagreement point"),
                               ("nash", cmd_nash, "min-norm Nash bargaining shares"),
                               ("pof", cmd_pof, "price of fairness with its bounds")):
        sp = common(sub.add_parser(name, help=helptext))
        sp.add_argument("instance", help="instance JSON")
        sp.set_defaults(fn=fn)

    sp = common(sub.add_parser("pof-table", help="PoF medians and 95th percentiles"))
    sp.add_argument("--kind", choices=("iid", "skewed", "all"), default="all")
    sp.add_argument("--G", type=int, nargs="+", default=[3, 5, 10, 50])
    sp.add_argument("--n", type=int, default=500)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_pof_table)

    sp = common(sub.add_parser("simulate", help="K-armed policy simulation"))
    sp.add_argument("instance")
    sp.add_argument("--policy", choices=("klucb", "pfucb", "greedy"), required=True)
    sp.add_argument("--T", type=int, required=True)
    sp.add_argument("--seeds", nargs="+", default=["0"], help="integers or half-open ranges a:b")
    sp.add_argument("--resolve", choices=("doubling", "every"), default="doubling")
    sp.set_defaults(fn=cmd_simulate)

    sp = common(sub.add_parser("ctx-solve", help="contextual allocation programs"))
    sp.add_argument("program", choices=("L", "Lfair"))
    sp.add_argument("instance")
    sp.set_defaults(fn=cmd_ctx_solve)

    sp = common(sub.add_parser("ctx-simulate", help="OAM / PF-OAM simulation"))
    sp.add_argument("instance")
    sp.add_argument("--policy", choices=("oam", "pfoam"), required=True)
    sp.add_argument("--T", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--c", type=float, default=1.0)
    sp.add_argument("--resolve", choices=("doubling", "every"), default="doubling")
    sp.set_defaults(fn=cmd_ctx_simulate)

    sp = common(sub.add_parser("warfarin", help="patient CSV to allocation report"))
    sp.add_argument("--csv", required=True)
    sp.add_argument("--group-by", choices=("race", "age"), default="race")
    sp.add_argument("--schema", choices=("default", "pharmgkb"), default="default")
    sp.add_argument("--delimiter", default=",")
    sp.add_argument("--instance-out", help="also save the contextual instance JSON")
    sp.set_defaults(fn=cmd_warfarin)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        args.fn(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"groupfair: error: {e}", file=sys.stderr)
        return 2
    except (GroupFairError, OSError, ValueError, KeyError, json.JSONDecodeError) as e:
        print(f"groupfair: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
