#!/usr/bin/env python3
"""Median held-out mPrec / mRec / AP@50 of every ablation variant over several seeds.

    python scripts/run_ablation.py --seeds 0 1 2 3 4 --out results/ablation.csv
"""

import argparse
import csv
import logging
from pathlib import Path

from gicn.experiments import VARIANTS, Lab


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=VARIANTS)
    ap.add_argument("--out", default="results/ablation.csv")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    lab = Lab()
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "seed", "mprec", "mrec", "ap50"])
        for v in args.variants:
            for s in args.seeds:
                rep = lab.score(v, s)
                w.writerow([v, s, rep.m_prec, rep.m_rec, rep.m_ap])
                fh.flush()
    print(f"{'variant':<16}{'mPrec':>8}{'mRec':>8}{'AP@50':>8}")
    for v in args.variants:
        print(f"{v:<16}" + "".join(f"{lab.median(v, args.seeds, m):>8.3f}"
                                   for m in ("m_prec", "m_rec", "m_ap")))


if __name__ == "__main__":
    main()
