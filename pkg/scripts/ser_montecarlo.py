#!/usr/bin/env python3
"""Closed-form M-QAM symbol error rate against a Monte-Carlo run of the demapper.

Writes a CSV with one row per (M, SNR): analytic SER, simulated SER and the
deviation in binomial standard errors.

    python3 scripts/ser_montecarlo.py --symbols 1000000 --out ser_mc.csv
"""
import argparse
import csv
import math
import sys

import numpy as np

from bucketline import analytics
from bucketline.modem import qam_demap, qam_map


def simulate_ser(M, snr_db, n, rng):
    k = int(math.log2(M))
    bits = rng.integers(0, 2, (n, k))
    noise = math.sqrt(10 ** (-snr_db / 10) / 2) * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
    rx = qam_demap(qam_map(bits.ravel(), M) + noise, M).reshape(n, k)
    return np.any(rx != bits, axis=1).mean()


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--M", type=int, action="append")
    ap.add_argument("--snr", type=float, nargs="+", default=[4, 8, 12, 16, 20, 24])
    ap.add_argument("--symbols", type=int, default=200_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out")
    args = ap.parse_args(argv)
    rng = np.random.default_rng(args.seed)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.writer(fh)
    w.writerow(["M", "snr_db", "ser_formula", "ser_montecarlo", "z"])
    for M in args.M or [16, 64]:
        for snr in args.snr:
            p = analytics.ser_mqam(M, snr)
            q = simulate_ser(M, snr, args.symbols, rng)
            se = math.sqrt(p * (1 - p) / args.symbols) if 0 < p < 1 else float("nan")
            w.writerow([M, snr, f"{p:.6e}", f"{q:.6e}", f"{(q - p) / se:.2f}" if se == se and se > 0 else "nan"])
    if args.out:
        fh.close()


if __name__ == "__main__":
    main()
