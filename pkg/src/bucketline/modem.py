"""Complex-baseband QAM/OFDM modem for buckets.

A bucket is 13 extended OFDM symbols: 8 identical sync symbols, 2 sign-inverted
SFD symbols, then 3 payload symbols each carrying the same coded PSDU.

PSDU = MPDU || frame control (22 octets)::

    version:1 | type echo:1 | FC-CRC-32:4 | reserved zero:16

The reserved octets sit last so the final six bits double as the convolutional
encoder tail; they bypass the scrambler and the decoder terminates in state 0.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np

from . import framecodec as fc
from .framecodec import CodecConfig

__all__ = [
    "OfdmConfig", "OfdmBurst", "LinkStats", "ModemError", "BadLength", "UnsupportedOrder",
    "Overflow", "DemodFailed", "qam_constellation", "qam_map", "qam_demap",
    "ofdm_symbol", "add_cyclic_prefix", "frame_control", "modulate_bucket",
    "detect_burst", "demodulate_bucket", "receive", "write_burst", "read_burst",
]

FC_VERSION = 1
FC_OCTETS = 22


class ModemError(ValueError):
    pass


class BadLength(ModemError):
    pass


class UnsupportedOrder(ModemError):
    pass


class Overflow(ModemError):
    pass


class DemodFailed(ModemError):
    def __init__(self, msg, stats=None):
        super().__init__(msg)
        self.stats = stats


@dataclass(frozen=True)
class OfdmConfig:
    fft_size: int = 256
    subcarrier_spacing: float = 48828.125
    cp_fraction: float = 0.25
    data_carriers: int = 212
    pilot_carriers: int = 44
    qam_order: int = 16
    preamble_symbols: int = 8
    sfd_symbols: int = 2
    payload_symbols: int = 3
    detect_threshold: float = 0.7
    detect_window_symbols: int = 4
    fft_backoff: int = 2

    def __post_init__(self):
        if self.data_carriers + self.pilot_carriers > self.fft_size:
            raise ValueError("data + pilot carriers exceed the FFT size")
        if self.pilot_carriers < 2:
            raise ValueError("at least two pilot carriers are needed for interpolation")
        if self.preamble_symbols < 2 or self.sfd_symbols < 1:
            raise ValueError("need >= 2 sync symbols and >= 1 SFD symbol")
        if self.detect_window_symbols >= self.preamble_symbols:
            raise ValueError("detection window must be shorter than the sync run")
        _bits_per_point(self.qam_order)

    @property
    def sample_rate(self) -> float:
        return self.fft_size * self.subcarrier_spacing

    @property
    def cp_len(self) -> int:
        return int(round(self.fft_size * self.cp_fraction))

    @property
    def ext_len(self) -> int:
        return self.fft_size + self.cp_len

    @property
    def symbol_s(self) -> float:
        return self.fft_size / self.sample_rate

    @property
    def extended_symbol_s(self) -> float:
        return self.ext_len / self.sample_rate

    @property
    def bits_per_symbol(self) -> int:
        return _bits_per_point(self.qam_order)

    @property
    def sync_symbols(self) -> int:
        return self.preamble_symbols + self.sfd_symbols

    @property
    def symbols_per_bucket(self) -> int:
        return self.sync_symbols + self.payload_symbols

    @property
    def bucket_samples(self) -> int:
        return self.symbols_per_bucket * self.ext_len

    @property
    def bucket_duration_s(self) -> float:
        return self.bucket_samples / self.sample_rate

    @property
    def capacity_bits(self) -> int:
        return self.data_carriers * self.bits_per_symbol


@dataclass(frozen=True)
class OfdmBurst:
    samples: np.ndarray
    tx_power_dbm: float
    sample_rate: float

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class LinkStats:
    evm: float
    replica_crc_ok: tuple
    voted: bool


# ---------------------------------------------------------------------------
# QAM

def _bits_per_point(M: int) -> int:
    n = int(M).bit_length() - 1
    if M < 2 or (1 << n) != M or (n > 1 and n % 2):
        raise UnsupportedOrder(f"M must be 2 or an even power of two, got {M}")
    return n


def _gray(x: int) -> int:
    return x ^ (x >> 1)


@lru_cache(maxsize=None)
def _axis_levels(M: int) -> np.ndarray:
    """Unnormalized level for each per-axis Gray label, indexed by label."""
    if M == 2:
        return np.array([1.0, -1.0])
    k = math.isqrt(M)
    levels = np.empty(k)
    for p in range(k):
        levels[_gray(p)] = 2 * p + 1 - k
    return levels


@lru_cache(maxsize=None)
def qam_constellation(M: int) -> np.ndarray:
    """Unit-energy points indexed by symbol value (bits read MSB first).

    The in-phase axis carries the high half of the bits, quadrature the low half.
    """
    n = _bits_per_point(M)
    if M == 2:
        return np.array([1.0 + 0j, -1.0 + 0j])
    half = n // 2
    lv = _axis_levels(M)
    sym = np.arange(M)
    pts = lv[sym >> half] + 1j * lv[sym & ((1 << half) - 1)]
    e_avg = 2 * (M - 1) / 3
    out = pts / math.sqrt(e_avg)
    out.setflags(write=False)
    return out


def qam_map(bits, M: int = 16) -> np.ndarray:
    n = _bits_per_point(M)
    bits = np.asarray(bits, dtype=np.int64)
    if bits.size % n:
        raise BadLength(f"{bits.size} bits is not a multiple of {n}")
    weights = 1 << np.arange(n - 1, -1, -1)
    sym = bits.reshape(-1, n) @ weights
    return qam_constellation(M)[sym]


def qam_demap(points, M: int = 16) -> np.ndarray:
    """Minimum-distance hard decisions; ties go to the lower Gray label."""
    n = _bits_per_point(M)
    points = np.asarray(points, dtype=complex).ravel()
    if M == 2:
        sym = (points.real < 0).astype(np.int64)
    else:
        half = n // 2
        lv = _axis_levels(M) / math.sqrt(2 * (M - 1) / 3)
        gi = np.argmin(np.abs(points.real[:, None] - lv[None, :]), axis=1)
        gq = np.argmin(np.abs(points.imag[:, None] - lv[None, :]), axis=1)
        sym = (gi << half) | gq
    shifts = np.arange(n - 1, -1, -1)
    return ((sym[:, None] >> shifts) & 1).astype(np.uint8).ravel()


# ---------------------------------------------------------------------------
# OFDM symbol assembly

def ofdm_symbol(freq) -> np.ndarray:
    """b[n] = (1/N) sum_k d_k exp(j 2 pi k n / N)."""
    return np.fft.ifft(np.asarray(freq, dtype=complex))


def add_cyclic_prefix(body, cp_len: int) -> np.ndarray:
    body = np.asarray(body)
    return np.concatenate([body[body.size - cp_len:], body]) if cp_len else body.copy()


@lru_cache(maxsize=8)
def _layout(cfg: OfdmConfig):
    N = cfg.fft_size
    pilot_idx = np.unique(np.round(np.linspace(0, N - 1, cfg.pilot_carriers)).astype(int))
    if pilot_idx.size != cfg.pilot_carriers:
        raise ValueError("pilot spacing collapses; too many pilots for the FFT size")
    rest = np.setdiff1d(np.arange(N), pilot_idx)
    data_idx = rest[: cfg.data_carriers]
    ks = fc.lfsr_keystream(N + cfg.pilot_carriers)
    sync_freq = 1.0 - 2.0 * ks[:N]
    pilot_vals = 1.0 - 2.0 * ks[N:]
    sync_ext = add_cyclic_prefix(ofdm_symbol(sync_freq), cfg.cp_len)
    template = np.concatenate([sync_ext] * cfg.preamble_symbols + [-sync_ext] * cfg.sfd_symbols)
    for a in (pilot_idx, data_idx, pilot_vals, sync_ext, template):
        a.setflags(write=False)
    return pilot_idx, data_idx, pilot_vals, sync_ext, template


def frame_control(mpdu: bytes) -> bytes:
    head = bytes([FC_VERSION, mpdu[0] >> 6])
    reserved = bytes(16)
    return head + struct.pack(">I", fc.crc32(head + reserved)) + reserved


def _psdu_bits(mpdu: bytes) -> np.ndarray:
    return fc.bytes_to_bits(bytes(mpdu) + frame_control(mpdu))


def _whiten(bits: np.ndarray, codec: CodecConfig) -> np.ndarray:
    out = bits.copy()
    body = bits.size - fc.TAIL_BITS
    out[:body] = fc.scramble(bits[:body], codec.scrambler_seed)
    return out


def _scale(cfg: OfdmConfig, tx_power_dbm: float) -> float:
    return math.sqrt(cfg.fft_size * 10 ** (tx_power_dbm / 10))


def modulate_bucket(psdu: bytes, cfg: OfdmConfig = OfdmConfig(),
                    codec: CodecConfig = CodecConfig(), tx_power_dbm: float = 10.0) -> OfdmBurst:
    if len(psdu) != codec.mpdu_len:
        raise BadLength(f"PSDU must be {codec.mpdu_len} octets, got {len(psdu)}")
    bits = _psdu_bits(psdu)
    coded = fc.fec_encode(_whiten(bits, codec), codec)
    if coded.size > cfg.capacity_bits:
        raise Overflow(f"{coded.size} coded bits exceed {cfg.capacity_bits} carrier bits")
    n = cfg.bits_per_symbol
    padded = np.zeros(cfg.capacity_bits, dtype=np.uint8)
    padded[:coded.size] = coded
    pilot_idx, data_idx, pilot_vals, sync_ext, _ = _layout(cfg)
    freq = np.zeros(cfg.fft_size, dtype=complex)
    freq[data_idx] = qam_map(padded[: (padded.size // n) * n], cfg.qam_order)
    freq[pilot_idx] = pilot_vals
    payload = add_cyclic_prefix(ofdm_symbol(freq), cfg.cp_len)
    parts = ([sync_ext] * cfg.preamble_symbols + [-sync_ext] * cfg.sfd_symbols
             + [payload] * cfg.payload_symbols)
    samples = np.concatenate(parts) * _scale(cfg, tx_power_dbm)
    return OfdmBurst(samples, tx_power_dbm, cfg.sample_rate)


# ---------------------------------------------------------------------------
# receiver

def _self_correlation(r: np.ndarray, lag: int, window: int):
    prod = r[lag:] * np.conj(r[:-lag])
    e = np.abs(r) ** 2
    cp = np.concatenate([[0], np.cumsum(prod)])
    ce = np.concatenate([[0.0], np.cumsum(e)])
    m = prod.size - window + 1
    if m <= 0:
        return np.zeros(0)
    P = cp[window:window + m] - cp[:m]
    e1 = ce[window:window + m] - ce[:m]
    e2 = ce[lag + window:lag + window + m] - ce[lag:lag + m]
    R = 0.5 * (e1 + e2)
    mag = np.abs(P)
    denom = np.maximum(R - mag, 1e-12 * R)
    return np.where(R > 0, mag / np.where(denom > 0, denom, 1.0), 0.0)


def detect_burst(stream, cfg: OfdmConfig = OfdmConfig()) -> Optional[int]:
    """Offset of the first burst in ``stream`` or None.

    Coarse detection thresholds a self-correlation SNR estimate over the
    repeated sync symbols; the start is then refined with the known
    preamble and confirmed by the SFD sign flip.
    """
    r = np.asarray(stream, dtype=complex)
    L = cfg.ext_len
    if r.size < cfg.bucket_samples:
        return None
    metric = _self_correlation(r, L, cfg.detect_window_symbols * L)
    _, _, _, _, template = _layout(cfg)
    tlen = template.size
    last = r.size - cfg.bucket_samples
    start = 0
    while start < metric.size:
        hits = np.flatnonzero(metric[start:] > cfg.detect_threshold)
        if hits.size == 0:
            return None
        d0 = start + int(hits[0])
        lo = max(0, d0 - 2 * L)
        hi = min(last, d0 + cfg.preamble_symbols * L)
        if lo <= hi:
            windows = np.lib.stride_tricks.sliding_window_view(r[lo:hi + tlen], tlen)
            c = lo + int(np.argmax(np.abs(windows @ np.conj(template))))
            k = cfg.preamble_symbols
            a = r[c + (k - 1) * L: c + k * L]
            b = r[c + k * L: c + (k + 1) * L]
            if np.real(np.vdot(a, b)) < 0:
                return c
        start = d0 + cfg.preamble_symbols * L
    return None


def _equalize(body: np.ndarray, cfg: OfdmConfig, back: int = 0):
    pilot_idx, data_idx, pilot_vals, _, _ = _layout(cfg)
    Y = np.fft.fft(body)
    if back:
        # window opened `back` samples early: undo the known linear phase
        Y = Y * np.exp(2j * np.pi * np.arange(cfg.fft_size) * back / cfg.fft_size)
    Hp = Y[pilot_idx] / pilot_vals
    H = (np.interp(data_idx, pilot_idx, Hp.real) + 1j * np.interp(data_idx, pilot_idx, Hp.imag))
    H = np.where(np.abs(H) > 0, H, 1.0)
    return Y[data_idx] / H


def _decode_replica(eq: np.ndarray, cfg: OfdmConfig, codec: CodecConfig) -> bytes:
    n_info = 8 * (codec.mpdu_len + FC_OCTETS)
    n_coded = 2 * n_info
    bits = qam_demap(eq, cfg.qam_order)[:n_coded]
    info = fc.fec_decode(bits, codec, terminated=True)
    plain = _whiten(info, codec)
    return fc.bits_to_bytes(plain)[: codec.mpdu_len]


def _icv_ok(mpdu: bytes, codec: CodecConfig) -> bool:
    frame = codec.cipher.decrypt(mpdu)
    return fc.crc32(frame[:-4]) == struct.unpack(">I", frame[-4:])[0]


def demodulate_bucket(stream, offset: int, cfg: OfdmConfig = OfdmConfig(),
                      codec: CodecConfig = CodecConfig()):
    """Recover the PSDU from a burst starting at ``offset``. Returns (psdu, LinkStats)."""
    r = np.asarray(stream, dtype=complex)
    L, N = cfg.ext_len, cfg.fft_size
    back = min(cfg.fft_backoff, cfg.cp_len)
    need = 8 * (codec.mpdu_len + FC_OCTETS) * 2
    if need > cfg.capacity_bits:
        raise Overflow(f"{need} coded bits exceed {cfg.capacity_bits} carrier bits")
    constellation = qam_constellation(cfg.qam_order)
    replicas, oks, err, tot = [], [], 0.0, 0
    for i in range(cfg.payload_symbols):
        s = offset + (cfg.sync_symbols + i) * L + cfg.cp_len - back
        body = r[s:s + N]
        if s < 0 or body.size < N:
            raise BadLength("stream too short for the burst at this offset")
        eq = _equalize(body, cfg, back)
        nearest = constellation[np.argmin(np.abs(eq[:, None] - constellation[None, :]), axis=1)]
        err += float(np.sum(np.abs(eq - nearest) ** 2))
        tot += eq.size
        psdu = _decode_replica(eq, cfg, codec)
        replicas.append(psdu)
        oks.append(_icv_ok(psdu, codec))
    evm = math.sqrt(err / tot)
    voted = False
    if len(replicas) == 3:
        cand = fc.majority_vote(*replicas)
        if _icv_ok(cand, codec):
            stats = LinkStats(evm, tuple(oks), True)
            return cand, stats
    stats = LinkStats(evm, tuple(oks), voted)
    for psdu, ok in zip(replicas, oks):
        if ok:
            return psdu, stats
    raise DemodFailed("no replica passed the ICV check", stats)


def receive(stream, cfg: OfdmConfig = OfdmConfig(), codec: CodecConfig = CodecConfig()):
    """Detect and demodulate the first burst; returns (psdu, stats, offset)."""
    off = detect_burst(stream, cfg)
    if off is None:
        raise DemodFailed("no burst detected")
    psdu, stats = demodulate_bucket(stream, off, cfg, codec)
    return psdu, stats, off


# ---------------------------------------------------------------------------
# burst dump: interleaved little-endian float64 I/Q plus a text sidecar

def write_burst(path, burst: OfdmBurst, cfg: OfdmConfig = OfdmConfig()) -> None:
    path = Path(path)
    iq = np.empty(2 * burst.samples.size, dtype="<f8")
    iq[0::2] = burst.samples.real
    iq[1::2] = burst.samples.imag
    path.write_bytes(iq.tobytes())
    header = (f"fs = {cfg.sample_rate!r}\nN = {cfg.fft_size}\ncp = {cfg.cp_len}\n"
              f"M = {cfg.qam_order}\ntx_power_dbm = {burst.tx_power_dbm!r}\n"
              f"samples = {burst.samples.size}\n")
    path.with_suffix(path.suffix + ".txt").write_text(header)


def read_burst(path) -> OfdmBurst:
    path = Path(path)
    iq = np.frombuffer(path.read_bytes(), dtype="<f8")
    meta = {}
    for line in path.with_suffix(path.suffix + ".txt").read_text().splitlines():
        k, _, v = line.partition("=")
        meta[k.strip()] = v.strip()
    return OfdmBurst(iq[0::2] + 1j * iq[1::2], float(meta["tx_power_dbm"]), float(meta["fs"]))
