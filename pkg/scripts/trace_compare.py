"""Compare sticky scheduling against a flat, eager one on the surge trace.

Prints the median preemptions and the longest lane queue per seed.
"""

import argparse
import statistics

from dfcoll.harness import ScenarioSpec, run_trace


def measure(seed: int, flat: bool):
    spec = ScenarioSpec(scenario="trace", collectives=161, delay_rank=2, delay_rounds=20, seed=seed)
    if flat:
        spec.order_policy = "eager"
        spec.spin_base = spec.spin_min = 64
        spec.spin_step = 0
        spec.boost = 1
    res = run_trace(spec)
    med = statistics.median(r.total_preemptions for r in res.records)
    return med, max(row["queue_len"] for row in res.rows)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=3)
    args = ap.parse_args()
    print("seed  sticky_median  sticky_qmax  flat_median  flat_qmax")
    for seed in range(args.seeds):
        a, b = measure(seed, False), measure(seed, True)
        print(f"{seed:4d}  {a[0]:13g}  {a[1]:11d}  {b[0]:11g}  {b[1]:9d}")


if __name__ == "__main__":
    main()
