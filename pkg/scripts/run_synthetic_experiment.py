"""Run the desk-scale synthetic experiment and print per-phenotype outcomes.

    python3 scripts/run_synthetic_experiment.py --out runs/exp --seed 0 [--set key=value ...]
"""

import argparse
import dataclasses
import json
import logging

from ehrfuse.experiment import DEFAULT_OVERRIDES, run_experiment


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/experiment")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--set", action="append", default=[])
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)
    res = run_experiment(args.out, args.seed, [*DEFAULT_OVERRIDES, *args.set])
    print(json.dumps({
        "seconds": res.seconds,
        "phenotypes": {k: dataclasses.asdict(v) for k, v in res.phenotypes.items()},
        "biomarker": res.biomarker,
    }, indent=2))


if __name__ == "__main__":
    main()
