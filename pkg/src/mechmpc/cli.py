"""Command-line entry point: learn, verify, simulate and compare."""

from __future__ import annotations

import argparse
import csv
import datetime
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .gamerunner import (CONTROLLERS, compare_report, run_learning, run_mpc, truthful_profile,
                         verify_nash)
from .mechanism import Message, MessageError
from .scenario import ConfigError, build_scenario, load_config
from .solver import NumericalFailure
from .sysmodel import ModelError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("mechmpc")


def fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


class Writer:
    """Output files sharing one provenance header."""

    def __init__(self, out: Path, fmt_: str, header: dict):
        self.out = out
        self.format = fmt_
        self.header = header
        self.out.mkdir(parents=True, exist_ok=True)
        self.stamp = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
        self.written = []

    def csv(self, name: str, columns, rows) -> Path:
        path = self.out / f"{name}.csv"
        with path.open("w", newline="") as fh:
            for k, v in self.header.items():
                fh.write(f"# {k}: {v}\n")
            fh.write(f"# timestamp: {self.stamp}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for row in rows:
                w.writerow([fmt(x) for x in row])
        self.written.append(path)
        return path

    def jsonl(self, name: str, records) -> Path:
        path = self.out / f"{name}.jsonl"
        with path.open("w") as fh:
            fh.write(json.dumps({"header": self.header}, sort_keys=True) + "\n")
            fh.write(json.dumps({"timestamp": self.stamp}) + "\n")
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True, allow_nan=True) + "\n")
        self.written.append(path)
        return path

    def table(self, name: str, columns, rows) -> Path:
        if self.format == "csv":
            return self.csv(name, columns, rows)
        return self.jsonl(name, ({c: (float(x) if isinstance(x, np.floating) else x)
                                  for c, x in zip(columns, row)} for row in rows))


def read_jsonl(path) -> list:
    """Records of a file written by :class:`Writer`, header and timestamp lines dropped."""
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if isinstance(rec, dict) and set(rec) <= {"header", "timestamp"}:
            continue
        out.append(rec)
    return out


def canonical_command(args) -> str:
    parts = [args.command]
    for key in sorted(vars(args)):
        if key in ("command", "out", "jobs", "func", "verbose"):
            continue
        val = getattr(args, key)
        if val is None or val is False or val == []:
            continue
        flag = "--" + key.replace("_", "-")
        if val is True:
            parts.append(flag)
        elif isinstance(val, list):
            parts.extend(f"{flag} {v}" for v in val)
        else:
            parts.append(f"{flag} {val}")
    return " ".join(parts)


def _prepare(args):
    doc = load_config(args.scenario, args.set, args.seed)
    if getattr(args, "rounds", None) is not None:
        doc.setdefault("learning", {})["rounds"] = args.rounds
    if getattr(args, "samples", None) is not None:
        doc.setdefault("verify", {})["samples"] = args.samples
    scn = build_scenario(doc)
    header = {"tool": f"mechmpc {__version__}", "scenario_sha256": scn.hash, "seed": scn.seed,
              "command": canonical_command(args)}
    return scn, Writer(Path(args.out), args.format, header)


def cmd_learn(args) -> int:
    scn, out = _prepare(args)
    records = run_learning(scn, jobs=args.jobs)
    tol = float(scn.config.get("learning", {}).get("tol", 1e-6))
    out.jsonl("rounds", (r.to_dict() for r in records))
    last = records[-1]
    converged = last.change < tol
    rows = [[r.round, r.status, r.change] + [np.nan if c is None else c for c in r.true_costs]
            + [np.nan if f is None else f.total for f in r.fees] for r in records]
    I = scn.model.num_agents
    cols = (["round", "status", "change"] + [f"true_cost_{i + 1}" for i in range(I)]
            + [f"fee_{i + 1}" for i in range(I)])
    out.table("learning", cols, rows)
    out.jsonl("profile", [m.to_dict() for m in last.messages])
    summary = {"rounds": len(records), "final_change": last.change, "converged": converged,
               "tol": tol}
    out.jsonl("summary", [summary])
    print(f"{'converged' if converged else 'not converged'} after {len(records)} rounds "
          f"(message change {last.change:.3g})")
    return EXIT_OK


def _load_profile(args, scn) -> list:
    path = Path(args.profile)
    if not path.is_file():
        raise ConfigError(f"profile file not found: {path}")
    recs = read_jsonl(path)
    if recs and "messages" in recs[0]:
        idx = (args.round or len(recs)) - 1
        if not 0 <= idx < len(recs):
            raise ConfigError(f"--round {args.round} outside 1..{len(recs)}")
        recs = recs[idx]["messages"]
    msgs = [Message.from_dict(r) for r in recs]
    if len(msgs) != scn.model.num_agents:
        raise ConfigError(f"profile has {len(msgs)} messages, scenario has {scn.model.num_agents} agents")
    return msgs


def cmd_verify(args) -> int:
    scn, out = _prepare(args)
    if args.seed_truthful:
        msgs, _ = truthful_profile(scn)
    elif args.profile:
        msgs = _load_profile(args, scn)
    else:
        raise ConfigError("verify needs --profile PATH or --seed-truthful")
    rep = verify_nash(scn, msgs, jobs=args.jobs)
    cols = ["agent", "base_cost", "max_decrease", "best_kind", "samples", "incomparable"]
    rows = [[a.agent + 1, a.base_cost, a.max_decrease, a.best_kind or "", a.samples, a.incomparable]
            for a in rep.agents]
    out.table("nash", cols, rows)
    print(f"{'pass' if rep.passed else 'FAIL'}: largest cost decrease {rep.max_decrease:.3g} "
          f"(tol {rep.tol:g})")
    return EXIT_OK if rep.passed else EXIT_FAIL


def _write_log(out: Writer, lg, scn):
    if out.format == "jsonl":
        return out.jsonl(f"mpc_{lg.controller}", lg.records())
    n, I = lg.states.shape[1], lg.stage_costs.shape[1]
    cols = (["stage"] + [f"x{r + 1}" for r in range(n)] + [f"u{r + 1}" for r in range(lg.inputs.shape[1])]
            + [f"cost{i + 1}" for i in range(I)] + [f"d{r + 1}" for r in range(n)]
            + ["plan_cost", "status"])
    rows = [[t] + list(lg.states[t]) + list(lg.inputs[t]) + list(lg.stage_costs[t])
            + list(lg.disturbance[t]) + [lg.plan_costs[t], lg.statuses[t]] for t in range(lg.length)]
    return out.csv(f"mpc_{lg.controller}", cols, rows)


def cmd_simulate(args) -> int:
    scn, out = _prepare(args)
    lg = run_mpc(scn, args.controller, jobs=args.jobs)
    _write_log(out, lg, scn)
    print(f"{args.controller}-MPC cumulative true cost {lg.cumulative():.6g}")
    return EXIT_OK


def cmd_compare(args) -> int:
    scn, out = _prepare(args)
    logs = [run_mpc(scn, c, jobs=args.jobs, keep_messages=False) for c in CONTROLLERS]
    start = int(scn.config.get("mpc", {}).get("report_start", 10))
    rep = compare_report(logs, start=start)
    if out.format == "jsonl":
        for lg in logs:
            _write_log(out, lg, scn)
    for name in ("costs", "traces", "combined", "summary"):
        out.table(name, *rep[name])
    for row in rep["summary"][1]:
        print(f"{row[0]}-MPC cumulative cost from stage {start}: {row[1]:.6g} "
              f"(gap vs P {100 * row[2]:+.2f}%)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mechmpc", description=__doc__)
    parser.add_argument("--version", action="version", version=f"mechmpc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", metavar="PATH", help="scenario JSON (default: shipped scenario)")
    common.add_argument("--out", metavar="DIR", default="out", help="output directory")
    common.add_argument("--seed", type=int, help="override the scenario seed")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-key override, repeatable, last wins")
    common.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    common.add_argument("--jobs", type=int, default=1, help="worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("learn", parents=[common], help="replay rounds at a fixed initial state")
    p.add_argument("--rounds", type=int)
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("verify", parents=[common], help="sampled Nash deviation check")
    p.add_argument("--samples", type=int)
    p.add_argument("--profile", metavar="PATH", help="profile.jsonl or rounds.jsonl from learn")
    p.add_argument("--round", type=int, help="round to take from a rounds.jsonl transcript")
    p.add_argument("--seed-truthful", action="store_true",
                   help="use equilibrium messages built from the centralized solution")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("simulate", parents=[common], help="closed loop with one controller")
    p.add_argument("--controller", choices=CONTROLLERS, default="M")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", parents=[common], help="closed loop with all three controllers")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    for name in ("rounds", "samples"):
        val = getattr(args, name, None)
        if val is not None and val < 1:
            print(f"error: --{name} must be >= 1", file=sys.stderr)
            return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, ModelError, MessageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
