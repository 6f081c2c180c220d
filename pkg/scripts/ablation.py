"""Head-mode and OHEM ablations on the toy benchmark, three training seeds each.

    python3 scripts/ablation.py [--seeds 0 1 2] [--variants joint separate ...] [--out ablation.json]
"""

import argparse
import json
import logging

from fcis.experiments import ABLATION_VARIANTS, BenchmarkConfig, median_map50, run_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--variants", nargs="+", default=list(ABLATION_VARIANTS), choices=list(ABLATION_VARIANTS))
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--out", help="write per-run JSON here")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    base = BenchmarkConfig().variant(iterations=args.iterations)
    runs = run_ablation(base, seeds=args.seeds, variants=args.variants)
    print(f"{'variant':24s} {'median mAP@0.5':>15s} {'median ms/iter':>15s}  per-seed mAP@0.5 / mAP@0.7")
    for name, rs in runs.items():
        ms = sorted(1000 * r.seconds_per_iteration for r in rs)[len(rs) // 2]
        per = "  ".join(f"{r.result.map50:.3f}/{r.result.map70:.3f}" for r in rs)
        print(f"{name:24s} {median_map50(rs):15.4f} {ms:15.1f}  {per}")
    if args.out:
        dump = {name: [dict(seed=s, map50=r.result.map50, map70=r.result.map70, map_coco=r.result.map_coco,
                            train_seconds=r.train_seconds, seconds_per_iteration=r.seconds_per_iteration)
                       for s, r in zip(args.seeds, rs)] for name, rs in runs.items()}
        with open(args.out, "w") as f:
            json.dump(dump, f, indent=2)


if __name__ == "__main__":
    main()
