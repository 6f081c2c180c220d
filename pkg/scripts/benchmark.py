"""Toy benchmark: 400 train / 100 test scenes, 2000 iterations with OHEM.

    python3 scripts/benchmark.py [--seed N] [--iterations N] [--out results.json]
"""

import argparse
import json
import logging

from fcis.experiments import BenchmarkConfig, run_benchmark


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seed", type=int, default=0, help="training seed")
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--head-mode", default="joint")
    ap.add_argument("--no-ohem", action="store_true")
    ap.add_argument("--out", help="write a JSON summary here")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = BenchmarkConfig().variant(head_mode=args.head_mode, ohem=not args.no_ohem, seed=args.seed,
                                    iterations=args.iterations)
    r = run_benchmark(cfg, progress=250)
    print(r.result.table())
    print(r.summary())
    if args.out:
        with open(args.out, "w") as f:
            json.dump(dict(map50=r.result.map50, map70=r.result.map70, map_coco=r.result.map_coco,
                           train_seconds=r.train_seconds, infer_seconds=r.infer_seconds,
                           param_digest=r.param_digest, detection_digest=r.detection_digest), f, indent=2)


if __name__ == "__main__":
    main()
