"""Closed-form rate, latency, link-budget and symbol-error calculators."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

from scipy import integrate, special

__all__ = [
    "RateInputs", "LatencyInputs", "BadShape", "BadOrder",
    "phy_rate", "bucket_rate", "command_propagation", "measure_return",
    "latency_estimate", "q_function", "ser_mqam", "link_range", "power_step",
    "ser_curve", "ser_curve_csv", "rate_table",
]


class BadShape(ValueError):
    pass


class BadOrder(ValueError):
    pass


@dataclass(frozen=True)
class RateInputs:
    ofdm_subcarriers: int = 256
    qam_bits: int = 4
    code_rate: Fraction = Fraction(1, 2)
    symbol_s: float = 20.48e-6
    guard_s: float = 5.12e-6

    def __post_init__(self):
        if self.ofdm_subcarriers <= 0 or self.qam_bits <= 0:
            raise ValueError("subcarrier count and bits per symbol must be positive")
        if not 0 < self.code_rate <= 1:
            raise ValueError("code rate must be in (0, 1]")
        if self.symbol_s <= 0 or self.guard_s < 0:
            raise ValueError("symbol time must be positive, guard time non-negative")


@dataclass(frozen=True)
class LatencyInputs:
    node_count: int
    t_nn_s: float
    t_il_s: float
    t_acq_s: float

    def __post_init__(self):
        if self.node_count < 1:
            raise ValueError("node_count must be >= 1")
        if min(self.t_nn_s, self.t_il_s, self.t_acq_s) < 0:
            raise ValueError("times must be non-negative")

    @property
    def hop_s(self) -> float:
        return self.t_nn_s + self.t_il_s


def phy_rate(r: RateInputs = RateInputs()) -> float:
    """Raw PHY rate in bit/s: subcarriers * n * CR / ((T + T_G) / 2)."""
    return r.ofdm_subcarriers * r.qam_bits * float(r.code_rate) / ((r.symbol_s + r.guard_s) / 2)


def bucket_rate(symbol_extended_s: float, symbols_per_bucket: int = 13) -> float:
    if symbol_extended_s <= 0 or symbols_per_bucket <= 0:
        raise ValueError("inputs must be positive")
    return 1.0 / (symbols_per_bucket * symbol_extended_s)


def command_propagation(l: LatencyInputs) -> float:
    """Time for the measurement request to reach the last node."""
    return l.node_count * l.hop_s


def measure_return(l: LatencyInputs) -> float:
    """Acquisition plus the time for the last node's bucket to come back."""
    return (2 * l.node_count - 1) * l.hop_s + l.t_acq_s


def latency_estimate(l: LatencyInputs) -> float:
    return command_propagation(l) + measure_return(l)


def _lambda0(alpha: float) -> float:
    return math.sqrt(math.gamma(3 / alpha) / math.gamma(1 / alpha))


def q_function(x: float, alpha: float = 2.0) -> float:
    """Tail probability of unit-variance generalized Gaussian noise.

    alpha == 2 uses the erfc closed form; other shapes integrate the density.
    """
    if not alpha > 0:
        raise BadShape(f"alpha must be positive, got {alpha}")
    if alpha == 2:
        return 0.5 * math.erfc(x / math.sqrt(2))
    if x < 0:
        return 1.0 - q_function(-x, alpha)
    lam = _lambda0(alpha)
    norm = alpha * lam / (2 * math.gamma(1 / alpha))
    val, _ = integrate.quad(lambda u: math.exp(-((lam * u) ** alpha)), x, math.inf,
                            epsabs=1e-14, epsrel=1e-12, limit=200)
    return norm * val


def _check_square_order(M: int) -> int:
    root = math.isqrt(M)
    if M < 4 or root * root != M or M & (M - 1):
        raise BadOrder(f"M must be a square power of two >= 4, got {M}")
    return root


def ser_mqam(M: int, snr_db: float) -> float:
    """Symbol error probability of square M-QAM in Gaussian noise, SNR = Es/N0."""
    root = _check_square_order(M)
    if snr_db == math.inf:
        return 0.0
    es_n0 = 10 ** (snr_db / 10)
    q = q_function(math.sqrt(3 * es_n0 / (M - 1)))
    a = 4 * (1 - 1 / root)
    return a * q - (a * a / 4) * q * q


def link_range(tx_power_dbm: float, tx_snr_db: float, attenuation_db_per_m: float,
               decode_snr_db: float = 0.0) -> float:
    """Distance at which SNR falls to the decode threshold.

    The noise floor is tx_power_dbm - tx_snr_db; tx power cancels out.
    """
    if attenuation_db_per_m <= 0:
        raise ValueError("attenuation must be positive")
    return (tx_snr_db - decode_snr_db) / attenuation_db_per_m


def power_step(range_db: float, bits: int) -> float:
    return range_db / 2 ** bits


# ---------------------------------------------------------------------------
# tabular emitters

def ser_curve(orders: Sequence[int], snrs_db: Iterable[float]) -> list[dict]:
    rows = []
    for s in snrs_db:
        row = {"snr_db": float(s)}
        for M in orders:
            row[f"ser_m{M}"] = ser_mqam(M, s)
        rows.append(row)
    return rows


def ser_curve_csv(orders: Sequence[int], snrs_db: Iterable[float]) -> str:
    rows = ser_curve(orders, snrs_db)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["snr_db"] + [f"ser_m{M}" for M in orders],
                       lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: repr(v) for k, v in row.items()})
    return buf.getvalue()


def rate_table(ofdm=None, node_count: int = 1000, t_acq_s: float = 1.0,
               t_il_fraction: float = 0.1) -> dict[str, float]:
    """Derived rates for an OFDM configuration (see modem.OfdmConfig)."""
    if ofdm is None:
        from .modem import OfdmConfig
        ofdm = OfdmConfig()
    t_ext = ofdm.extended_symbol_s
    bucket_s = ofdm.bucket_duration_s
    lat = LatencyInputs(node_count, bucket_s, t_il_fraction * bucket_s, t_acq_s)
    return {
        "phy_rate_bps": phy_rate(RateInputs(ofdm.fft_size, ofdm.bits_per_symbol, Fraction(1, 2),
                                            ofdm.symbol_s, t_ext - ofdm.symbol_s)),
        "bucket_rate_per_s": bucket_rate(t_ext, ofdm.symbols_per_bucket),
        "bucket_duration_s": bucket_s,
        "profile_transmission_s": node_count / bucket_rate(t_ext, ofdm.symbols_per_bucket),
        "latency_s": latency_estimate(lat),
    }
