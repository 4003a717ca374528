"""Parameter / FLOP / timing split for the desk and paper presets."""

import argparse

from rsrnet.core import set_deterministic
from rsrnet.experiments import complexity_summary, write_json


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="results/complexity.json")
    ap.add_argument("--timing-runs", type=int, default=3)
    args = ap.parse_args()
    set_deterministic()
    summary = complexity_summary(args.timing_runs)
    for name, rep in summary.items():
        print(f"[{name}]")
        print(rep["table"])
        print("per module:", rep["per_module"])
        print()
    write_json(summary, args.out)


if __name__ == "__main__":
    main()
