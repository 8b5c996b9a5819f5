"""Shared-cable medium: attenuation, delay, FIR multipath and generalized-Gaussian noise.

Sample amplitudes are in sqrt(mW): mean |x|**2 of a burst equals its TX power in mW,
so dBm bookkeeping and waveform scaling stay consistent.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .analytics import BadShape

__all__ = [
    "CableModel", "LinkBudget", "BadShape", "gg_lambda", "gg_pdf",
    "sample_generalized_gaussian", "propagate", "superpose", "link_budget",
    "delay_samples", "dbm_to_mw", "mw_to_dbm",
]


def dbm_to_mw(dbm: float) -> float:
    return 10.0 ** (dbm / 10.0)


def mw_to_dbm(mw: float) -> float:
    return 10.0 * math.log10(mw) if mw > 0 else -math.inf


@dataclass(frozen=True)
class CableModel:
    attenuation_db_per_m: float = 0.3
    propagation_speed: float = 2.0e8
    fir_taps: tuple = (1.0,)
    noise_alpha: float = 2.0
    noise_sigma: Optional[float] = None      # per real dimension; None -> from noise floor
    reference_tx_dbm: float = 10.0
    tx_snr_db: Optional[float] = 15.0        # None -> noiseless cable
    sensitivity_dbm: float = -50.0
    decode_snr_db: float = 0.0
    impulse_prob: float = 0.0
    impulse_amplitude: float = 0.0

    def __post_init__(self):
        if self.attenuation_db_per_m < 0:
            raise ValueError("attenuation must be non-negative")
        if not self.noise_alpha > 0:
            raise BadShape(f"noise_alpha must be positive, got {self.noise_alpha}")
        if self.propagation_speed <= 0:
            raise ValueError("propagation speed must be positive")
        object.__setattr__(self, "fir_taps", tuple(complex(t) for t in self.fir_taps))
        if len(self.fir_taps) == 0:
            raise ValueError("fir_taps must not be empty")

    @property
    def noise_floor_dbm(self) -> float:
        """Total complex noise power; -inf for a noiseless cable."""
        if self.noise_sigma is not None:
            return mw_to_dbm(2 * self.noise_sigma ** 2)
        if self.tx_snr_db is None:
            return -math.inf
        return self.reference_tx_dbm - self.tx_snr_db

    @property
    def sigma(self) -> float:
        if self.noise_sigma is not None:
            return float(self.noise_sigma)
        floor = self.noise_floor_dbm
        return 0.0 if floor == -math.inf else math.sqrt(dbm_to_mw(floor) / 2)

    def check_taps(self, cp_len: int) -> None:
        if len(self.fir_taps) > cp_len:
            raise ValueError(f"{len(self.fir_taps)} FIR taps exceed the cyclic prefix ({cp_len})")


@dataclass(frozen=True)
class LinkBudget:
    tx_power_dbm: float
    distance_m: float
    rx_power_dbm: float
    snr_db: float

    def decodable(self, cable: CableModel) -> bool:
        return self.rx_power_dbm >= cable.sensitivity_dbm and self.snr_db >= cable.decode_snr_db


def link_budget(tx_power_dbm: float, distance_m: float, cable: CableModel = CableModel()) -> LinkBudget:
    rx = tx_power_dbm - cable.attenuation_db_per_m * distance_m
    return LinkBudget(tx_power_dbm, distance_m, rx, rx - cable.noise_floor_dbm)


def delay_samples(distance_m: float, cable: CableModel, sample_rate: float) -> int:
    return int(round(distance_m / cable.propagation_speed * sample_rate))


# ---------------------------------------------------------------------------
# generalized Gaussian noise

def gg_lambda(alpha: float, sigma: float) -> float:
    return math.sqrt(math.gamma(3 / alpha) / (sigma ** 2 * math.gamma(1 / alpha)))


def gg_pdf(u, alpha: float, sigma: float = 1.0, mu: float = 0.0):
    if not alpha > 0:
        raise BadShape(f"alpha must be positive, got {alpha}")
    lam = gg_lambda(alpha, sigma)
    u = np.asarray(u, dtype=float)
    return alpha * lam / (2 * math.gamma(1 / alpha)) * np.exp(-((lam * np.abs(u - mu)) ** alpha))


def sample_generalized_gaussian(alpha: float, sigma: float, count: int, rng=None) -> np.ndarray:
    """i.i.d. zero-mean samples with variance sigma**2.

    |Lambda*X|**alpha is Gamma(1/alpha, 1) distributed; the sign is uniform.
    """
    if not alpha > 0:
        raise BadShape(f"alpha must be positive, got {alpha}")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    rng = np.random.default_rng(rng)
    if sigma == 0:
        return np.zeros(count)
    g = rng.gamma(1.0 / alpha, 1.0, size=count)
    sign = np.where(rng.random(count) < 0.5, -1.0, 1.0)
    return sign * g ** (1.0 / alpha) / gg_lambda(alpha, sigma)


def complex_noise(cable: CableModel, count: int, rng) -> np.ndarray:
    rng = np.random.default_rng(rng)
    sigma = cable.sigma
    noise = (sample_generalized_gaussian(cable.noise_alpha, sigma, count, rng)
             + 1j * sample_generalized_gaussian(cable.noise_alpha, sigma, count, rng))
    if cable.impulse_prob > 0:
        hits = rng.random(count) < cable.impulse_prob
        phase = np.exp(2j * np.pi * rng.random(count))
        noise = noise + hits * cable.impulse_amplitude * phase
    return noise


# ---------------------------------------------------------------------------

def propagate(samples, cable: CableModel, distance_m: float, rng=None,
              sample_rate: float = 12.5e6, tx_power_dbm: Optional[float] = None,
              noise: bool = True, pad: int = 0):
    """Attenuate, delay, convolve with the FIR taps and add noise.

    ``samples`` may be an OfdmBurst or a complex array. ``pad`` extra noise
    samples are appended after the convolution tail. Returns (samples, LinkBudget).
    """
    if distance_m < 0:
        raise ValueError("distance must be non-negative")
    if hasattr(samples, "samples"):
        if tx_power_dbm is None:
            tx_power_dbm = samples.tx_power_dbm
        samples = samples.samples
    x = np.asarray(samples, dtype=complex)
    if tx_power_dbm is None:
        tx_power_dbm = mw_to_dbm(float(np.mean(np.abs(x) ** 2))) if x.size else -math.inf
    gain = 10 ** (-cable.attenuation_db_per_m * distance_m / 20)
    d = delay_samples(distance_m, cable, sample_rate)
    y = np.convolve(gain * x, np.asarray(cable.fir_taps))
    out = np.zeros(d + y.size + pad, dtype=complex)
    out[d:d + y.size] = y
    if noise and (cable.sigma > 0 or cable.impulse_prob > 0):
        out += complex_noise(cable, out.size, rng)
    return out, link_budget(tx_power_dbm, distance_m, cable)


def superpose(transmissions: Iterable[tuple[int, Sequence[complex]]], length: Optional[int] = None) -> np.ndarray:
    """Sample-wise sum of (start_sample, samples) pairs on a common clock."""
    items = [(int(s), np.asarray(x, dtype=complex)) for s, x in transmissions]
    end = max((s + x.size for s, x in items), default=0)
    n = end if length is None else max(length, end)
    out = np.zeros(n, dtype=complex)
    for s, x in items:
        if s < 0:
            raise ValueError("start sample must be non-negative")
        out[s:s + x.size] += x
    return out
