"""Run the misordered-submission scenario with and without the daemon.

    python3 scripts/misorder_demo.py --iters 50 --watchdog 20
"""

import argparse

from dfcoll.harness import ScenarioSpec, run_misorder


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--iters", type=int, default=50)
    ap.add_argument("--collectives", type=int, default=8)
    ap.add_argument("--watchdog", type=float, default=20.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    for mode in ("occl", "baseline"):
        spec = ScenarioSpec(scenario="misorder", collectives=args.collectives, iters=args.iters,
                            stall_rounds=8, watchdog=args.watchdog, seed=args.seed, mode=mode)
        print(run_misorder(spec).summary())


if __name__ == "__main__":
    main()
