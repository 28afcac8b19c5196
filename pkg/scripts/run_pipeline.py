"""Run train -> (optional single-task baselines) -> search -> report for one config.

    python3 scripts/run_pipeline.py --config configs/default.json --out runs --baseline
"""

import argparse
import os
import sys

from mtnas.cli import main


def run(config: str | None, seed: int | None, baseline: bool) -> int:
    common = (["--config", config] if config else []) + (["--seed", str(seed)] if seed is not None else [])
    steps = [["train"]] + ([["train", "--single-task"]] if baseline else []) + [["search"], ["report"]]
    for step in steps:
        code = main(step + common)
        if code:
            print(f"step {' '.join(step)} failed with exit code {code}", file=sys.stderr)
            return code
    return 0


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", help="output root (sets MTNAS_OUTPUT_ROOT)")
    ap.add_argument("--baseline", action="store_true", help="also train single-task baselines for delta_T")
    args = ap.parse_args()
    if args.out:
        os.environ["MTNAS_OUTPUT_ROOT"] = args.out
    sys.exit(run(args.config, args.seed, args.baseline))
