"""Command-line entry point: attack experiments, analytic checks and cross-chain scenarios.

Exit codes: 0 success, 1 internal failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

from . import attack, model
from .errors import CifuvError, ConfigError, InvalidInputError, InvalidProfileError
from .netsim import VerifyMode

SEED_ENV = "CIFUV_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _number_list(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _write(data: bytes, out: str | None) -> None:
    if out is None or out == "-":
        sys.stdout.buffer.write(data)
        sys.stdout.flush()
    else:
        Path(out).write_bytes(data)


def _csv_bytes(header: list[str], rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue().encode()


# -- attack-sim ------------------------------------------------------------

def _resolve_selects(args, n: int) -> list[float] | None:
    if args.model == "equal":
        if args.select is not None:
            raise UsageError("--select applies to the chosen model only")
        return None
    if args.select is None:
        raise UsageError("the chosen model needs --select")
    selects = list(args.select)
    if any(not 0.0 <= s <= 1.0 for s in selects):
        raise UsageError("--select values must lie in [0, 1]")
    if len(selects) == 1 and n > 1:
        # One value targets sys1; the remainder is spread evenly over the others.
        rest = (1.0 - selects[0]) / (n - 1)
        selects += [rest] * (n - 1)
    if len(selects) != n:
        raise UsageError(f"--select has {len(selects)} values for {n} systems")
    if abs(sum(selects) - 1.0) > model.SELECT_SUM_TOLERANCE:
        raise UsageError(f"--select values sum to {sum(selects)!r}, expected 1")
    return selects


def cmd_attack_sim(args) -> int:
    if (args.case is None) == (args.ltpa is None):
        raise UsageError("give exactly one of --case or --ltpa")
    if args.rounds < 1:
        raise UsageError("--rounds must be >= 1")
    n = len(attack.CASES[args.case]) if args.case else len(args.ltpa)
    selects = _resolve_selects(args, n)
    profiles = attack.case_profiles(args.case, args.ltpa, selects)
    config = attack.ExperimentConfig(seed=args.seed, rounds=args.rounds, profiles=profiles)
    report = attack.run_experiment(config)
    _write(attack.emit_report(report, args.format), args.out)
    print(
        f"mean_ra={report.mean_ra:.1f} ratio_to_strong={report.ratio_to_strong:.4f} "
        f"fraction_above_strong_ltpa={report.fraction_above_strong_ltpa:.4f}",
        file=sys.stderr,
    )
    return 0


# -- analyze ---------------------------------------------------------------

def load_profiles(path: str) -> list[model.SystemProfile]:
    """Read profiles from JSON: a list, ``{"profiles": [...]}`` or ``{"case": "c1"}``.

    Each profile is ``{"id": str, "ltpa": number, "select": number?}``.
    """
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read profiles: {exc}") from None
    if isinstance(raw, dict) and "case" in raw:
        return list(attack.case_profiles(raw["case"], selects=raw.get("select")))
    items = raw.get("profiles") if isinstance(raw, dict) else raw
    if not isinstance(items, list) or not items:
        raise ConfigError("profiles must be a non-empty list")
    out = []
    for i, item in enumerate(items):
        if not isinstance(item, dict) or "ltpa" not in item:
            raise ConfigError(f"profile {i} needs an ltpa")
        ltpa, select = item["ltpa"], item.get("select")
        if isinstance(ltpa, bool) or not isinstance(ltpa, (int, float)):
            raise ConfigError(f"profile {i}: ltpa must be a number")
        if select is not None and (isinstance(select, bool) or not isinstance(select, (int, float))):
            raise ConfigError(f"profile {i}: select must be a number")
        out.append(model.SystemProfile(str(item.get("id", f"sys{i + 1}")), float(ltpa),
                                       None if select is None else float(select)))
    return out


def analyze(profiles: list[model.SystemProfile]) -> dict:
    report = model.downgrade_report(profiles)
    has_selects = profiles[0].select_prob is not None
    return {
        "profiles": [{"id": p.id, "ltpa": p.ltpa, "select": p.select_prob,
                      "broken_possibility": p.broken_possibility} for p in profiles],
        "p_all_equal": model.p_all_equal(profiles),
        "p_all_chosen": model.p_all_chosen(profiles) if has_selects else None,
        "first_broken": profiles[model.first_broken(profiles)].id,
        "downgrade": {
            "model": "chosen" if has_selects else "equal",
            "downgraded_pairs": [{"weaker": w, "downgraded": o} for w, o in report.downgraded_pairs],
            "p_all": report.p_all,
        },
    }


def cmd_analyze(args) -> int:
    result = analyze(load_profiles(args.profiles))
    _write((json.dumps(result, indent=2) + "\n").encode(), args.out)
    return 0


# -- cross-chain -----------------------------------------------------------

def cmd_crosschain_demo(args) -> int:
    from .scenario import Scenario, run_scenario

    scenario = Scenario.load(args.scenario)
    if args.seed is not None:
        scenario.seed = args.seed
    run = run_scenario(scenario, args.mode)
    if args.out:
        Path(args.out).write_bytes(run.sim.trace_jsonl())
    summary = (json.dumps(run.summary, indent=2) + "\n").encode()
    if args.summary:
        Path(args.summary).write_bytes(summary)
    else:
        _write(summary, None)
    return 0


def cmd_fork_race(args) -> int:
    from .scenario import fork_race_campaign

    if args.races < 1 or args.k < 1:
        raise UsageError("--races and --k must be >= 1")
    if not 0.0 < args.hash_share < 1.0:
        raise UsageError("--hash-share must lie in (0, 1)")
    results = fork_race_campaign(args.races, args.k, seed=args.seed, hash_share=args.hash_share,
                                 give_up=args.give_up)
    rows = [(r.seed, r.fork_outcome, r.confirmations["pending"], r.confirmations["confirmed"],
             r.confirmations["invalidated"], r.confirmed_then_evicted) for r in results]
    _write(_csv_bytes(["race_seed", "fork_outcome", "pending", "confirmed", "invalidated",
                       "confirmed_then_evicted"], rows), args.out)
    print(f"confirmed_then_evicted={sum(r.confirmed_then_evicted for r in results)} races={len(results)}",
          file=sys.stderr)
    return 0


def cmd_sync_check(args) -> int:
    from .scenario import sync_equivalence_run

    if args.seeds < 1 or args.rounds < 1:
        raise UsageError("--seeds and --rounds must be >= 1")
    rows = []
    for seed in range(args.seed, args.seed + args.seeds):
        rep = sync_equivalence_run(seed, args.rounds)
        rows.append((seed, int(rep.ok), int(rep.final_match), rep.rebranches,
                     sum(r.blocks_fetched for r in rep.rounds), sum(r.expected_changed for r in rep.rounds)))
    _write(_csv_bytes(["seed", "ok", "final_match", "rebranches", "blocks_fetched", "blocks_changed"], rows),
           args.out)
    return 0 if all(r[1] for r in rows) else 1


# -- tables ----------------------------------------------------------------

def cmd_tables(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in attack.CHOSEN_GRID:
        profiles = attack.case_profiles("c2", selects=[s, 1.0 - s])
        rep = attack.run_experiment(attack.ExperimentConfig(args.seed, args.rounds, profiles))
        rows.append((f"{s:.6g}", f"{rep.mean_ra:.1f}", f"{rep.ratio_to_strong:.4f}"))
    (out / "chosen_attack_c2.csv").write_bytes(_csv_bytes(["select_sys1", "mean_ra", "ratio_to_strong"], rows))
    rows = []
    for case in sorted(attack.CASES):
        profiles = attack.case_profiles(case)
        rep = attack.run_experiment(attack.ExperimentConfig(args.seed, args.rounds, profiles))
        ltpa_strong = max(p.ltpa for p in profiles)
        n = int(ltpa_strong / min(p.ltpa for p in profiles))
        rows.append((case, int(ltpa_strong), n, f"{rep.mean_ra:.1f}", f"{rep.ratio_to_strong:.4f}",
                     f"{2 / n:.4f}", f"{rep.fraction_above_strong_ltpa:.4f}"))
    (out / "equal_attack_curve.csv").write_bytes(_csv_bytes(
        ["case", "ltpa_strong", "ratio_ltpa", "mean_ra", "ratio_to_strong", "expected_2_over_n",
         "fraction_above_strong_ltpa"], rows))
    return 0


# -- wiring ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    seed = _default_seed()
    p = _Parser(prog="cifuv", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    a = sub.add_parser("attack-sim", help="run the two-counter attack experiment")
    a.add_argument("--case", choices=sorted(attack.CASES))
    a.add_argument("--ltpa", type=_number_list, help="comma-separated ltpa per system")
    a.add_argument("--model", choices=("equal", "chosen"), default="equal")
    a.add_argument("--select", type=_number_list,
                   help="chosen possibilities; a single value targets sys1 and splits the rest evenly")
    a.add_argument("--rounds", type=int, default=10000)
    a.add_argument("--seed", type=int, default=seed)
    a.add_argument("--out")
    a.add_argument("--format", choices=("csv", "json"), default="csv")
    a.set_defaults(func=cmd_attack_sim)

    z = sub.add_parser("analyze", help="whole-system broken possibility and downgrade report")
    z.add_argument("--profiles", required=True)
    z.add_argument("--out")
    z.set_defaults(func=cmd_analyze)

    c = sub.add_parser("crosschain-demo", help="run a cross-chain network scenario")
    c.add_argument("--scenario", required=True)
    c.add_argument("--mode", choices=[m.value for m in VerifyMode], default=VerifyMode.CIFUV.value)
    c.add_argument("--out", help="trace output (JSON lines)")
    c.add_argument("--summary", help="write the summary here instead of stdout")
    c.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    c.set_defaults(func=cmd_crosschain_demo)

    f = sub.add_parser("fork-race", help="confirmation safety against a minority fork miner")
    f.add_argument("--k", type=int, default=6)
    f.add_argument("--races", type=int, default=1000)
    f.add_argument("--hash-share", type=float, default=0.2)
    f.add_argument("--give-up", type=int, default=12)
    f.add_argument("--seed", type=int, default=seed)
    f.add_argument("--out")
    f.set_defaults(func=cmd_fork_race)

    s = sub.add_parser("sync-check", help="replica equivalence under randomized honest schedules")
    s.add_argument("--seeds", type=int, default=100)
    s.add_argument("--rounds", type=int, default=50)
    s.add_argument("--seed", type=int, default=seed, help="first seed")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sync_check)

    t = sub.add_parser("tables", help="write the attack-experiment tables as CSV")
    t.add_argument("--out-dir", required=True)
    t.add_argument("--rounds", type=int, default=10000)
    t.add_argument("--seed", type=int, default=seed)
    t.set_defaults(func=cmd_tables)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except (ConfigError, InvalidInputError, InvalidProfileError) as exc:
        print(f"cifuv: error: {exc}", file=sys.stderr)
        return 2
    except CifuvError as exc:
        print(f"cifuv: failure: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - report and map to the internal-failure code
        print(f"cifuv: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
