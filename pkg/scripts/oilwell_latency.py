#!/usr/bin/env python3
"""Measurement-cycle latency versus queue length: simulation against the closed form.

    python3 scripts/oilwell_latency.py --nodes 1 10 100 1000
"""
import argparse
import time

from bucketline.simkernel import Scenario, simulate, verify_against_analytics


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--nodes", type=int, nargs="+", default=[1, 10, 100, 1000])
    ap.add_argument("--t-nn", type=float, default=0.33e-3)
    ap.add_argument("--t-il", type=float, default=0.033e-3)
    ap.add_argument("--t-acq", type=float, default=1.0)
    args = ap.parse_args(argv)
    print(f"{'N':>6} {'simulated_s':>12} {'closed_form_s':>14} {'rel_err':>9} {'wall_s':>7}")
    for n in args.nodes:
        s = Scenario(node_count=n, t_nn_s=args.t_nn, t_il_s=args.t_il, t_acq_s=args.t_acq,
                     preassigned=n > 100)
        t0 = time.perf_counter()
        rep = verify_against_analytics(simulate(s).metrics, s)
        print(f"{n:>6} {rep['simulated_s']:>12.6f} {rep['analytic_s']:>14.6f} "
              f"{rep['relative_error']:>9.1e} {time.perf_counter() - t0:>7.2f}")


if __name__ == "__main__":
    main()
