"""Command-line entry points.

    bucketline simulate --scenario desk8 --out runs/ [--seed N] [--fidelity abstract]
    bucketline ser-curve --M 16 --M 64 --snr -5:25:0.5 [--out dir]
    bucketline rates --scenario oilwell1000
    bucketline latency --scenario oilwell1000 [--simulate]
    bucketline selftest

Exit codes: 0 ok, 1 configuration error, 2 selftest divergence.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from . import analytics, framecodec
from .protocol import ProtocolError
from .simkernel import (
    ConfigError, EventLog, Scenario, UnknownTarget, atomic_write, load_scenario,
    simulate, verify_against_analytics,
)

log = logging.getLogger("bucketline")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2


# ---------------------------------------------------------------------------
# library-level helpers the subcommands wrap

def network_summary_rows(s: Scenario) -> list[tuple[str, str]]:
    o = s.ofdm
    spacing_khz = o.subcarrier_spacing / 1e3
    bucket_rate = analytics.bucket_rate(o.extended_symbol_s, o.symbols_per_bucket)
    profile_s = s.node_count / bucket_rate
    cfg = s.protocol_config()
    lo, hi = o.fft_size // 2, o.fft_size // 2 + o.fft_size
    rows = [
        ("Channel bandwidth", f"{2 * o.sample_rate / 1e6:g} MHz"),
        ("Subcarrier bandwidth", f"{spacing_khz:.3f} kHz"),
        ("Total number of subcarriers", str(2 * o.fft_size)),
        ("Total OFDM subcarriers", str(o.fft_size)),
        ("Channel allocation", f"k={lo} -- {hi} ({lo * o.subcarrier_spacing / 1e6:g} MHz -- "
                               f"{hi * o.subcarrier_spacing / 1e6:g} MHz)"),
        ("Data / pilot carriers", f"{o.data_carriers} / {o.pilot_carriers}"),
        ("Modulation", f"{o.qam_order}-QAM"),
        ("FFT", str(o.fft_size)),
        ("Guard interval", f"{o.cp_fraction * 100:g}%"),
        ("Bucket duration", f"{o.bucket_duration_s * 1e3:.4f} ms"),
        ("Data rate (bucket/s)", f"{int(bucket_rate)}"),
        ("Dataset profile transmission time",
         f"{'< 1 s' if profile_s < 1 else '>= 1 s'} ({profile_s:.4f} s for N={s.node_count})"),
        ("Code rate", str(s.codec.code_rate)),
        ("Transmission power", f"{cfg.ramp_start_dbm} dBm -- {cfg.ramp_stop_dbm} dBm"
                               f" (hardware -50 dBm -- 10 dBm)"),
        ("Output power step", f"{cfg.ramp_step_db} dB"),
        ("PHY rate", f"{analytics.rate_table(o, s.node_count)['phy_rate_bps'] / 1e6:g} Mbps"),
    ]
    return rows


def print_network_summary(s: Scenario, out=None) -> str:
    rows = network_summary_rows(s)
    width = max(len(k) for k, _ in rows)
    text = "".join(f"{k:<{width}}  {v}\n" for k, v in rows)
    if out is not None:
        out.write(text)
    return text


def parse_snr_range(text: str) -> list[float]:
    """``a:b:step`` inclusive of b (within half a step), or a single value."""
    parts = text.split(":")
    try:
        nums = [float(p) for p in parts]
    except ValueError:
        raise ConfigError("snr", f"not a number in {text!r}") from None
    if len(nums) == 1:
        return nums
    if len(nums) != 3 or nums[2] <= 0 or nums[1] < nums[0]:
        raise ConfigError("snr", f"expected start:stop:step with step > 0, got {text!r}")
    a, b, step = nums
    count = int(math.floor((b - a) / step + 0.5)) + 1
    return [round(a + i * step, 12) for i in range(count)]


def events_csv(ev: EventLog) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "seq", "kind", "actor", "details"])
    for e in ev:
        w.writerow([repr(e.t), e.seq, e.kind, e.actor, json.dumps(e.details, sort_keys=True)])
    return buf.getvalue()


def scenario_from_args(args) -> Scenario:
    s = load_scenario(args.scenario)
    over = {}
    for item in args.override or ():
        key, eq, value = item.partition("=")
        if not eq:
            raise ConfigError("override", f"expected key=value, got {item!r}")
        over[key.strip()] = value.strip()
    if getattr(args, "seed", None) is not None:
        over["rng_seed"] = str(args.seed)
    if getattr(args, "fidelity", None):
        over["fidelity"] = args.fidelity
    return s.with_overrides(over) if over else s


# ---------------------------------------------------------------------------
# subcommands

def cmd_simulate(args) -> int:
    s = scenario_from_args(args)
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise ConfigError("out", f"{out} exists and is not a directory")
    t0 = time.perf_counter()
    run = simulate(s)
    log.info("simulated %d events in %.2f s", len(run.log), time.perf_counter() - t0)
    out.mkdir(parents=True, exist_ok=True)
    if args.format == "csv":
        atomic_write(out / "events.csv", events_csv(run.log))
    else:
        atomic_write(out / "events.jsonl", run.log.to_jsonl())
    atomic_write(out / "metrics.csv", run.metrics.to_csv())
    if "cycle_latency_s" in run.metrics:
        print(f"cycle latency {run.metrics['cycle_latency_s']:.6f} s, "
              f"{run.metrics['delivered_readings']}/{s.node_count} readings")
    return EXIT_OK


def cmd_ser_curve(args) -> int:
    orders = args.M or [16]
    for M in orders:
        try:
            analytics.ser_mqam(M, 0.0)
        except analytics.BadOrder as exc:
            raise ConfigError("M", str(exc)) from None
    text = analytics.ser_curve_csv(orders, parse_snr_range(args.snr))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        atomic_write(out / "ser_curve.csv", text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_rates(args) -> int:
    print_network_summary(scenario_from_args(args), sys.stdout)
    return EXIT_OK


def cmd_latency(args) -> int:
    s = scenario_from_args(args)
    t_nn, t_il = s.hop_times
    print(f"N={s.node_count} t_nn={t_nn * 1e3:.4f} ms t_il={t_il * 1e3:.4f} ms t_acq={s.t_acq_s:g} s")
    print(f"closed-form latency {s.analytic_latency_s():.6f} s")
    if args.simulate:
        rep = verify_against_analytics(simulate(s).metrics, s)
        print(f"simulated latency   {rep['simulated_s']:.6f} s "
              f"(relative error {rep['relative_error']:.2e})")
    return EXIT_OK


def selftest_checks() -> list[tuple[str, bool, str]]:
    checks = []

    def add(name, ok, detail):
        checks.append((name, bool(ok), detail))

    r = analytics.phy_rate()
    add("phy rate 40 Mbps", r == 40e6, f"{r:g}")
    b = analytics.bucket_rate(25.6e-6, 13)
    add("bucket rate in [3004, 3005]", 3004 <= b <= 3005, f"{b:.3f}")
    lat = analytics.latency_estimate(analytics.LatencyInputs(1000, 0.33e-3, 0.033e-3, 1.0))
    add("oil-well latency ~2.088 s", abs(lat - 2.088) / 2.088 < 5e-4, f"{lat:.6f}")
    crc = framecodec.crc32(b"123456789")
    add("crc32 check value", crc == 0x89A1897F, f"0x{crc:08X}")
    add("link range 50 m", analytics.link_range(10, 15, 0.3) == 50.0,
        f"{analytics.link_range(10, 15, 0.3):g}")
    for n in (1, 8, 100):
        s = Scenario(node_count=n, preassigned=n > 8)
        rep = verify_against_analytics(simulate(s).metrics, s)
        add(f"simulated latency N={n}", rep["within_tolerance"], f"rel err {rep['relative_error']:.2e}")
    return checks


def cmd_selftest(args) -> int:
    checks = selftest_checks()
    for name, ok, detail in checks:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in checks) else EXIT_DIVERGED


# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors; 2 is reserved for selftest divergence
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _glue_negative(argv: Sequence[str]) -> list[str]:
    """``--snr -5:25:1`` -> ``--snr=-5:25:1`` so argparse does not read it as a flag."""
    out, it = [], iter(argv)
    for a in it:
        if a == "--snr":
            out.append(f"--snr={next(it, '')}")
        else:
            out.append(a)
    return out


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bucketline", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def scenario_flags(sp, out_required=False):
        sp.add_argument("--scenario", default="desk8", help="builtin name or scenario file")
        sp.add_argument("--override", action="append", metavar="KEY=VALUE")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--fidelity", choices=("abstract", "waveform"))

    sp = sub.add_parser("simulate", help="run a scenario and write events + metrics")
    scenario_flags(sp)
    sp.add_argument("--out", default="out")
    sp.add_argument("--format", choices=("jsonl", "csv"), default="jsonl")
    sp.set_defaults(fn=cmd_simulate)

    sp = sub.add_parser("ser-curve", help="closed-form SER vs SNR as CSV")
    sp.add_argument("--M", type=int, action="append")
    sp.add_argument("--snr", default="-5:25:0.5")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_ser_curve)

    sp = sub.add_parser("rates", help="network specification summary")
    scenario_flags(sp)
    sp.set_defaults(fn=cmd_rates)

    sp = sub.add_parser("latency", help="closed-form cycle latency")
    scenario_flags(sp)
    sp.add_argument("--simulate", action="store_true", help="also run the scenario and compare")
    sp.set_defaults(fn=cmd_latency)

    sp = sub.add_parser("selftest", help="analytic vs simulated cross-checks")
    sp.set_defaults(fn=cmd_selftest)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    level = os.environ.get("BUCKETLINE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = build_parser().parse_args(_glue_negative(argv))
    except SystemExit as exc:      # usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    try:
        return args.fn(args)
    except (ConfigError, UnknownTarget) as exc:
        print(f"bucketline: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ProtocolError, ValueError) as exc:
        print(f"bucketline: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
