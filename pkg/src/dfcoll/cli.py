"""Command-line entry point: ``python3 -m dfcoll <scenario> [flags]``."""

from __future__ import annotations

import argparse
import logging
import sys

from .geometry import CollectiveKind, ReduceFn
from .harness import SCENARIOS, ScenarioSpec, rows_to_csv, run_scenario, write_outputs, BENCH_COLUMNS, TRACE_COLUMNS
from .queues import CQ_IMPLS
from .stickiness import OrderKind


def _common(p: argparse.ArgumentParser) -> None:
    d = ScenarioSpec()
    p.add_argument("--ranks", type=int, default=None, help="number of ranks (scenario default if omitted)")
    p.add_argument("--lanes", type=int, default=d.lanes)
    p.add_argument("--kind", choices=[k.value for k in CollectiveKind], default=d.kind.value)
    p.add_argument("--op", choices=[f.value for f in ReduceFn], default=d.op.value)
    p.add_argument("--minbytes", type=int, default=d.minbytes)
    p.add_argument("--maxbytes", type=int, default=d.maxbytes)
    p.add_argument("--stepfactor", type=int, default=d.stepfactor)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--collectives", type=int, default=None, help="collectives per iteration")
    p.add_argument("--order-policy", choices=[k.value for k in OrderKind], default=d.order_policy)
    p.add_argument("--spin-base", type=int, default=d.spin_base)
    p.add_argument("--spin-step", type=int, default=d.spin_step)
    p.add_argument("--spin-min", type=int, default=d.spin_min)
    p.add_argument("--boost", type=int, default=d.boost)
    p.add_argument("--boost-cap", type=int, default=None)
    p.add_argument("--stall-rounds", type=int, default=d.stall_rounds)
    p.add_argument("--idle-rounds", type=int, default=d.idle_rounds)
    p.add_argument("--spins-per-round", type=int, default=d.spins_per_round)
    p.add_argument("--slots", type=int, default=None, help="baseline concurrent-collective limit per lane")
    p.add_argument("--cq-impl", choices=sorted(CQ_IMPLS), default=d.cq_impl)
    p.add_argument("--mode", choices=["occl", "baseline"], default=d.mode)
    p.add_argument("--delay-rank", type=int, default=None)
    p.add_argument("--delay-rounds", type=int, default=None)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--watchdog", type=float, default=d.watchdog, help="seconds")
    p.add_argument("--out", default=None, help="output path; event log goes next to it")
    p.add_argument("--format", choices=["csv", "json"], default=d.format)
    p.add_argument("-v", "--verbose", action="store_true")


# per-scenario defaults applied when the flag is omitted
SCENARIO_DEFAULTS = {
    "bench": dict(ranks=4, iters=5, collectives=1),
    "misorder": dict(ranks=4, iters=200, collectives=8),
    "depletion": dict(ranks=3, iters=1, collectives=3, slots=2),
    "syncop": dict(ranks=2, iters=1, collectives=2),
    "trace": dict(ranks=4, iters=1, collectives=161, delay_rank=2, delay_rounds=20),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dfcoll", description=__doc__)
    sub = parser.add_subparsers(dest="scenario", required=True)
    for name in SCENARIOS:
        _common(sub.add_parser(name))
    return parser


def spec_from_args(args: argparse.Namespace) -> ScenarioSpec:
    defaults = SCENARIO_DEFAULTS[args.scenario]

    def pick(name):
        v = getattr(args, name)
        return defaults.get(name) if v is None else v

    return ScenarioSpec(
        scenario=args.scenario,
        ranks=pick("ranks"),
        lanes=args.lanes,
        kind=CollectiveKind(args.kind),
        op=ReduceFn(args.op),
        minbytes=args.minbytes,
        maxbytes=args.maxbytes,
        stepfactor=args.stepfactor,
        iters=pick("iters"),
        collectives=pick("collectives"),
        order_policy=args.order_policy,
        spin_base=args.spin_base,
        spin_step=args.spin_step,
        spin_min=args.spin_min,
        boost=args.boost,
        boost_cap=args.boost_cap,
        idle_rounds=args.idle_rounds,
        stall_rounds=args.stall_rounds,
        spins_per_round=args.spins_per_round,
        cq_impl=args.cq_impl,
        mode=args.mode,
        stream_slots=pick("slots"),
        delay_rank=pick("delay_rank"),
        delay_rounds=pick("delay_rounds") or 0,
        seed=args.seed,
        watchdog=args.watchdog,
        out=args.out,
        format=args.format,
    )


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    spec = spec_from_args(args)
    result = run_scenario(spec)
    if spec.out:
        for path in write_outputs(result, spec.out, spec.format):
            print(f"wrote {path}", file=sys.stderr)
    elif result.rows:
        columns = BENCH_COLUMNS if spec.scenario == "bench" else TRACE_COLUMNS
        sys.stdout.write(rows_to_csv(result.rows, columns))
    print(result.summary(), file=sys.stderr if result.rows and not spec.out else sys.stdout)
    return 0 if result.passed else 1


if __name__ == "__main__":
    raise SystemExit(main())
