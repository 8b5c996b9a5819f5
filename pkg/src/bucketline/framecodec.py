"""Bit-exact MPDU (bucket payload) construction and the PHY bit pipeline.

Wire layout, big-endian throughout (see docs/FORMATS.md)::

    header     2 octets   type:2 | future use:14 (sent as zeros, ignored on parse)
    timestamp  4 octets   milliseconds since coordinator epoch, wraps at 2**32
    addresses  16 octets  original source, final destination,
                          current destination, current source (NetID:8 | NodeID:24)
    MSDU       L - 26     type-dependent, zero padded
    ICV        4 octets   CRC-32 over all preceding octets

CRC convention: zero initial register, MSB first, no reflection, no final XOR.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Callable, Union

import numpy as np

__all__ = [
    "Address", "BucketType", "Command", "MeasurementData", "Beacon", "BeaconKind",
    "Management", "Acknowledgment", "Mpdu", "CodecConfig", "Cipher", "IDENTITY_CIPHER",
    "CrcPolynomial", "CRC1", "CRC8_GENERAL", "CRC8_ATM", "CRC16", "CRC32", "CRC_POLYNOMIALS",
    "crc", "crc32", "lfsr_keystream", "scramble", "conv_encode", "viterbi_decode",
    "interleave", "deinterleave", "fec_encode", "fec_decode", "majority_vote",
    "serialize_mpdu", "parse_mpdu", "bytes_to_bits", "bits_to_bytes",
    "FrameError", "OversizeMsdu", "IcvMismatch", "BadLength", "UnknownType",
    "ZeroSeed", "UnsupportedRate", "LengthMismatch",
    "HEADER_OCTETS", "TIMESTAMP_OCTETS", "ADDRESS_OCTETS", "ICV_OCTETS",
    "MIN_MPDU_OCTETS", "MAX_MPDU_OCTETS",
]


class FrameError(ValueError):
    """Base class for codec errors."""


class OversizeMsdu(FrameError):
    pass


class IcvMismatch(FrameError):
    """ICV does not match the frame contents; the frame is corrupted."""


class BadLength(FrameError):
    pass


class UnknownType(FrameError):
    pass


class ZeroSeed(FrameError):
    pass


class UnsupportedRate(FrameError):
    pass


class LengthMismatch(FrameError):
    pass


HEADER_OCTETS = 2
TIMESTAMP_OCTETS = 4
ADDRESS_OCTETS = 4
ICV_OCTETS = 4
MIN_MPDU_OCTETS = 27
MAX_MPDU_OCTETS = 42
_FIXED_OCTETS = HEADER_OCTETS + TIMESTAMP_OCTETS + 4 * ADDRESS_OCTETS + ICV_OCTETS  # 26


# ---------------------------------------------------------------------------
# bit helpers

def bytes_to_bits(data: bytes) -> np.ndarray:
    """MSB-first unpacking into a uint8 array of 0/1."""
    return np.unpackbits(np.frombuffer(bytes(data), dtype=np.uint8))


def bits_to_bytes(bits) -> bytes:
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.size % 8:
        raise BadLength(f"bit count {bits.size} is not a multiple of 8")
    return np.packbits(bits).tobytes()


# ---------------------------------------------------------------------------
# field types

@dataclass(frozen=True)
class Address:
    net_id: int = 0
    node_id: int = 0

    COORDINATOR_NODE_ID = 0
    BROADCAST_NODE_ID = 0xFFFFFF

    def __post_init__(self):
        if not 0 <= self.net_id < 1 << 8:
            raise ValueError(f"net_id out of range: {self.net_id}")
        if not 0 <= self.node_id < 1 << 24:
            raise ValueError(f"node_id out of range: {self.node_id}")

    def pack(self) -> bytes:
        return struct.pack(">I", (self.net_id << 24) | self.node_id)

    @classmethod
    def unpack(cls, raw: bytes) -> "Address":
        if len(raw) != ADDRESS_OCTETS:
            raise BadLength(f"address needs 4 octets, got {len(raw)}")
        (word,) = struct.unpack(">I", raw)
        return cls(word >> 24, word & 0xFFFFFF)

    @property
    def is_coordinator(self) -> bool:
        return self.node_id == self.COORDINATOR_NODE_ID

    def __str__(self) -> str:
        return f"{self.net_id}:{self.node_id}"


class BucketType(enum.IntEnum):
    MEASUREMENT_DATA = 0
    BEACON = 1
    MANAGEMENT = 2
    ACKNOWLEDGMENT = 3


class Command(enum.IntEnum):
    """Management command/status codes, numbered in listing order."""
    ACKNOWLEDGMENT = 0
    ASSOCIATION_START = 1
    ASSOCIATION_REQUEST = 2
    ASSOCIATION_END = 3
    AUTOMATIC_REPEAT_QUERY = 4
    COORDINATOR_ALIVE_AND_READY = 5
    DATA_AVAILABLE = 6
    DISSOCIATION = 7
    GLOBAL_DATA_REQUEST = 8
    GLOBAL_STATUS_REQUEST = 9
    HELLO_NEIGHBOR = 10
    NODE_DATA_REQUEST = 11
    NODE_STATUS_REQUEST = 12
    MALFUNCTION = 13
    NODE_ACTIVE = 14
    NODE_FAILURE_DETECTED = 15
    NODE_ADDRESS_TABLE_REQUEST = 16
    NEIGHBOR_INACTIVE = 17
    ORPHAN = 18
    PERFECT = 19
    PRIORITY_BUCKET_AVAILABLE = 20
    READY_TO_RETRANSMIT = 21
    REQUEST_SENSOR_ID = 22
    REQUEST_NODE_ID = 23
    REQUEST_NET_ID = 24
    SET_NODE_ID_NET_ID = 25


class BeaconKind(enum.IntEnum):
    CENTRAL = 0
    DISCOVER = 1


@dataclass(frozen=True)
class MeasurementData:
    pressure_pa: int
    temperature_k: int
    flags: int = 0

    OCTETS = 5

    def __post_init__(self):
        if not 0 <= self.pressure_pa < 1 << 27:
            raise ValueError(f"pressure_pa needs 27 bits: {self.pressure_pa}")
        if not 0 <= self.temperature_k < 1 << 10:
            raise ValueError(f"temperature_k needs 10 bits: {self.temperature_k}")
        if not 0 <= self.flags < 1 << 3:
            raise ValueError(f"flags needs 3 bits: {self.flags}")

    def encode(self) -> bytes:
        word = self.pressure_pa | (self.temperature_k << 27) | (self.flags << 37)
        return word.to_bytes(self.OCTETS, "big")

    @classmethod
    def decode(cls, raw: bytes) -> "MeasurementData":
        word = int.from_bytes(raw[: cls.OCTETS], "big")
        return cls(word & ((1 << 27) - 1), (word >> 27) & 0x3FF, (word >> 37) & 0x7)


@dataclass(frozen=True)
class Beacon:
    kind: BeaconKind = BeaconKind.CENTRAL

    def encode(self) -> bytes:
        return bytes([int(self.kind)])

    @classmethod
    def decode(cls, raw: bytes) -> "Beacon":
        try:
            return cls(BeaconKind(raw[0]))
        except ValueError:
            raise UnknownType(f"unknown beacon kind {raw[0]}") from None


@dataclass(frozen=True)
class Management:
    """Command code plus payload. The payload occupies the rest of the MSDU
    field, so a parsed payload is always full width (zero padded)."""
    command: Command
    payload: bytes = b""

    def __post_init__(self):
        object.__setattr__(self, "command", Command(self.command))
        if len(self.payload) > 15:
            raise ValueError("management payload is at most 15 octets")

    def encode(self) -> bytes:
        return bytes([int(self.command)]) + bytes(self.payload)

    @classmethod
    def decode(cls, raw: bytes) -> "Management":
        try:
            command = Command(raw[0])
        except ValueError:
            raise UnknownType(f"unknown management command {raw[0]}") from None
        return cls(command, bytes(raw[1:]))

    def payload_int(self, octets: int = 4) -> int:
        return int.from_bytes(self.payload[:octets], "big")


@dataclass(frozen=True)
class Acknowledgment:
    def encode(self) -> bytes:
        return b""

    @classmethod
    def decode(cls, raw: bytes) -> "Acknowledgment":
        return cls()


Msdu = Union[MeasurementData, Beacon, Management, Acknowledgment]

_MSDU_TYPE = {
    MeasurementData: BucketType.MEASUREMENT_DATA,
    Beacon: BucketType.BEACON,
    Management: BucketType.MANAGEMENT,
    Acknowledgment: BucketType.ACKNOWLEDGMENT,
}
_MSDU_CLASS = {v: k for k, v in _MSDU_TYPE.items()}


@dataclass(frozen=True)
class Mpdu:
    msdu: Msdu
    original_source: Address = Address()
    final_destination: Address = Address()
    current_destination: Address = Address()
    current_source: Address = Address()
    timestamp_ms: int = 0

    def __post_init__(self):
        if type(self.msdu) not in _MSDU_TYPE:
            raise UnknownType(f"not an MSDU: {self.msdu!r}")
        if not 0 <= self.timestamp_ms < 1 << 32:
            raise ValueError("timestamp_ms must fit 32 bits")

    @property
    def type(self) -> BucketType:
        return _MSDU_TYPE[type(self.msdu)]


# ---------------------------------------------------------------------------
# CRC

@dataclass(frozen=True)
class CrcPolynomial:
    """Generator polynomial given by its exponents (highest = degree)."""
    name: str
    exponents: tuple[int, ...]

    @property
    def degree(self) -> int:
        return max(self.exponents)

    @property
    def value(self) -> int:
        """Full polynomial as an integer, bit i = coefficient of x**i."""
        v = 0
        for e in self.exponents:
            v ^= 1 << e
        return v

    def at_zero(self) -> int:
        return int(0 in self.exponents)

    def at_one(self) -> int:
        return len(self.exponents) % 2


CRC1 = CrcPolynomial("CRC-1", (0, 1))
CRC8_GENERAL = CrcPolynomial("CRC-8", (0, 2, 4, 6, 7, 8))
CRC8_ATM = CrcPolynomial("CRC-8-ATM", (0, 1, 2, 8))
CRC16 = CrcPolynomial("CRC-16", (0, 5, 12, 16))
CRC32 = CrcPolynomial(
    "CRC-32", (0, 1, 2, 4, 5, 7, 8, 10, 11, 12, 16, 22, 23, 26, 32))
CRC_POLYNOMIALS = (CRC1, CRC8_GENERAL, CRC8_ATM, CRC16, CRC32)


def crc(bits, poly: CrcPolynomial = CRC32) -> np.ndarray:
    """Remainder of message(x) * x**degree divided by poly, MSB first.

    Returns ``poly.degree`` bits, highest power first.
    """
    n = poly.degree
    low = poly.value ^ (1 << n)
    mask = (1 << n) - 1
    reg = 0
    for b in np.asarray(bits, dtype=np.uint8).tolist():
        top = ((reg >> (n - 1)) & 1) ^ b
        reg = (reg << 1) & mask
        if top:
            reg ^= low
    return np.array([(reg >> (n - 1 - i)) & 1 for i in range(n)], dtype=np.uint8)


@lru_cache(maxsize=None)
def _crc32_table() -> tuple[int, ...]:
    poly = CRC32.value & 0xFFFFFFFF
    table = []
    for byte in range(256):
        reg = byte << 24
        for _ in range(8):
            reg = ((reg << 1) ^ poly) if reg & 0x80000000 else (reg << 1)
            reg &= 0xFFFFFFFF
        table.append(reg)
    return tuple(table)


def crc32(data: bytes) -> int:
    """Byte-wise CRC-32 with the same convention as :func:`crc`."""
    table = _crc32_table()
    reg = 0
    for byte in bytes(data):
        reg = ((reg << 8) & 0xFFFFFFFF) ^ table[(reg >> 24) ^ byte]
    return reg


# ---------------------------------------------------------------------------
# scrambler

SCRAMBLER_DEGREE = 10
SCRAMBLER_SEED = (1 << SCRAMBLER_DEGREE) - 1


@lru_cache(maxsize=64)
def _keystream_cached(seed: int, length: int) -> bytes:
    # register bit i holds x[n-1-i]; feedback x[n] = x[n-3] ^ x[n-10]
    reg = seed
    out = bytearray(length)
    for i in range(length):
        bit = ((reg >> 2) ^ (reg >> 9)) & 1
        out[i] = bit
        reg = ((reg << 1) | bit) & SCRAMBLER_SEED
    return bytes(out)


def lfsr_keystream(length: int, seed: int = SCRAMBLER_SEED) -> np.ndarray:
    """Keystream of the additive scrambler S(x) = 1 + x^3 + x^10."""
    if not 0 < seed <= SCRAMBLER_SEED:
        raise ZeroSeed("scrambler seed must be a nonzero 10-bit value")
    return np.frombuffer(_keystream_cached(seed, length), dtype=np.uint8).copy()


def scramble(bits, seed: int = SCRAMBLER_SEED) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.uint8)
    return bits ^ lfsr_keystream(bits.size, seed)


# ---------------------------------------------------------------------------
# convolutional code, K=7, generators 133/171 octal

CONSTRAINT_LENGTH = 7
GENERATORS = (0o133, 0o171)
TAIL_BITS = CONSTRAINT_LENGTH - 1
_N_STATES = 1 << TAIL_BITS


def _parity(x: int) -> int:
    return bin(x).count("1") & 1


@lru_cache(maxsize=None)
def _trellis():
    # state = previous 6 inputs, most recent in bit 5; register = u<<6 | state
    out = np.zeros((_N_STATES, 2), dtype=np.uint8)   # 2-bit output code per (state, u)
    nxt = np.zeros((_N_STATES, 2), dtype=np.int64)
    for s in range(_N_STATES):
        for u in (0, 1):
            reg = (u << TAIL_BITS) | s
            out[s, u] = (_parity(reg & GENERATORS[0]) << 1) | _parity(reg & GENERATORS[1])
            nxt[s, u] = reg >> 1
    # predecessors of each next state: (prev state, input)
    pred = np.zeros((_N_STATES, 2), dtype=np.int64)
    pred_out = np.zeros((_N_STATES, 2), dtype=np.uint8)
    for ns in range(_N_STATES):
        u = ns >> (TAIL_BITS - 1)
        for b in (0, 1):
            s = ((ns << 1) & (_N_STATES - 1)) | b
            pred[ns, b] = s
            pred_out[ns, b] = out[s, u]
    return out, nxt, pred, pred_out


def conv_encode(bits) -> np.ndarray:
    """Rate-1/2 encoding from the zero state, no flush bits appended."""
    out, nxt, _, _ = _trellis()
    bits = np.asarray(bits, dtype=np.uint8)
    coded = np.empty(2 * bits.size, dtype=np.uint8)
    s = 0
    for i, u in enumerate(bits.tolist()):
        c = out[s, u]
        coded[2 * i] = c >> 1
        coded[2 * i + 1] = c & 1
        s = nxt[s, u]
    return coded


def viterbi_decode(coded, terminated: bool = False) -> np.ndarray:
    """Hard-decision maximum-likelihood decoding.

    With ``terminated`` the survivor ending in the zero state is chosen
    (the last six information bits were zero); otherwise the best metric wins.
    Ties resolve toward the lower-numbered predecessor.
    """
    coded = np.asarray(coded, dtype=np.uint8)
    if coded.size % 2:
        raise BadLength("coded length must be even")
    _, _, pred, pred_out = _trellis()
    steps = coded.size // 2
    if steps == 0:
        return np.zeros(0, dtype=np.uint8)
    rx = (coded[0::2].astype(np.int64) << 1) | coded[1::2]
    # hamming distance between received pair and each 2-bit code
    ham = np.array([[bin(a ^ b).count("1") for b in range(4)] for a in range(4)], dtype=np.int64)
    branch = ham[rx]                      # (steps, 4)
    big = 1 << 40
    metric = np.full(_N_STATES, big, dtype=np.int64)
    metric[0] = 0
    decisions = np.empty((steps, _N_STATES), dtype=np.uint8)
    p0, p1 = pred[:, 0], pred[:, 1]
    o0, o1 = pred_out[:, 0], pred_out[:, 1]
    for t in range(steps):
        bm = branch[t]
        m0 = metric[p0] + bm[o0]
        m1 = metric[p1] + bm[o1]
        choose1 = m1 < m0
        decisions[t] = choose1
        metric = np.where(choose1, m1, m0)
    state = 0 if terminated else int(np.argmin(metric))
    out = np.empty(steps, dtype=np.uint8)
    for t in range(steps - 1, -1, -1):
        out[t] = state >> (TAIL_BITS - 1)
        state = int(pred[state, decisions[t, state]])
    return out


# ---------------------------------------------------------------------------
# block interleaver

@lru_cache(maxsize=32)
def _interleave_perm(n: int, rows: int) -> np.ndarray:
    cols = -(-n // rows)
    grid = np.arange(rows * cols).reshape(rows, cols)
    order = grid.T.ravel()
    return order[order < n]


def interleave(bits, rows: int = 16) -> np.ndarray:
    """Write row by row, read column by column."""
    bits = np.asarray(bits, dtype=np.uint8)
    return bits[_interleave_perm(bits.size, rows)]


def deinterleave(bits, rows: int = 16) -> np.ndarray:
    bits = np.asarray(bits)
    out = np.empty_like(bits)
    out[_interleave_perm(bits.size, rows)] = bits
    return out


# ---------------------------------------------------------------------------
# codec configuration

class Cipher:
    """Pluggable octet transform applied after the ICV is computed."""

    def encrypt(self, data: bytes) -> bytes:
        return data

    def decrypt(self, data: bytes) -> bytes:
        return data


IDENTITY_CIPHER = Cipher()

CODE_RATES = (Fraction(1, 2), Fraction(2, 3), Fraction(3, 4), Fraction(5, 6), Fraction(7, 8))


@dataclass(frozen=True)
class CodecConfig:
    mpdu_len: int = 31
    scrambler_seed: int = SCRAMBLER_SEED
    code_rate: Fraction = Fraction(1, 2)
    interleaver_rows: int = 16
    cipher: Cipher = field(default=IDENTITY_CIPHER, compare=False, repr=False)

    def __post_init__(self):
        if not MIN_MPDU_OCTETS <= self.mpdu_len <= MAX_MPDU_OCTETS:
            raise BadLength(f"mpdu_len must be in [27, 42], got {self.mpdu_len}")
        if not 0 < self.scrambler_seed <= SCRAMBLER_SEED:
            raise ZeroSeed("scrambler seed must be a nonzero 10-bit value")
        rate = Fraction(self.code_rate)
        if rate not in CODE_RATES:
            raise UnsupportedRate(f"code rate {rate} not in {[str(r) for r in CODE_RATES]}")
        object.__setattr__(self, "code_rate", rate)
        if self.interleaver_rows < 1:
            raise ValueError("interleaver_rows must be positive")

    @property
    def msdu_octets(self) -> int:
        return self.mpdu_len - _FIXED_OCTETS


def _check_rate(cfg: CodecConfig) -> None:
    if cfg.code_rate != Fraction(1, 2):
        raise UnsupportedRate(f"only rate 1/2 is implemented, got {cfg.code_rate}")


def fec_encode(bits, cfg: CodecConfig = CodecConfig()) -> np.ndarray:
    """Convolutional encode (rate 1/2) then block-interleave."""
    _check_rate(cfg)
    return interleave(conv_encode(bits), cfg.interleaver_rows)


def fec_decode(bits, cfg: CodecConfig = CodecConfig(), terminated: bool = False) -> np.ndarray:
    _check_rate(cfg)
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.size % 2:
        raise BadLength("coded length must be even")
    return viterbi_decode(deinterleave(bits, cfg.interleaver_rows), terminated=terminated)


def majority_vote(a: bytes, b: bytes, c: bytes) -> bytes:
    if not len(a) == len(b) == len(c):
        raise LengthMismatch(f"replica lengths differ: {len(a)}, {len(b)}, {len(c)}")
    x, y, z = (np.frombuffer(bytes(r), dtype=np.uint8) for r in (a, b, c))
    return ((x & y) | (x & z) | (y & z)).tobytes()


# ---------------------------------------------------------------------------
# MPDU serialization

def serialize_mpdu(m: Mpdu, cfg: CodecConfig = CodecConfig()) -> bytes:
    body = m.msdu.encode()
    width = cfg.msdu_octets
    if len(body) > width:
        raise OversizeMsdu(f"{type(m.msdu).__name__} needs {len(body)} octets, "
                           f"MSDU field is {width} at mpdu_len={cfg.mpdu_len}")
    header = int(m.type) << 14          # future-use bits go out as zeros
    frame = b"".join((
        struct.pack(">HI", header, m.timestamp_ms),
        m.original_source.pack(),
        m.final_destination.pack(),
        m.current_destination.pack(),
        m.current_source.pack(),
        body.ljust(width, b"\0"),
    ))
    frame += struct.pack(">I", crc32(frame))
    return cfg.cipher.encrypt(frame)


def parse_mpdu(raw: bytes, cfg: CodecConfig = CodecConfig()) -> Mpdu:
    if len(raw) != cfg.mpdu_len:
        raise BadLength(f"expected {cfg.mpdu_len} octets, got {len(raw)}")
    frame = cfg.cipher.decrypt(bytes(raw))
    (icv,) = struct.unpack(">I", frame[-ICV_OCTETS:])
    if crc32(frame[:-ICV_OCTETS]) != icv:
        raise IcvMismatch("ICV mismatch")
    header, timestamp = struct.unpack(">HI", frame[:6])
    btype = BucketType(header >> 14)
    addrs = [Address.unpack(frame[6 + 4 * i: 10 + 4 * i]) for i in range(4)]
    msdu_raw = frame[22:-ICV_OCTETS]
    msdu = _MSDU_CLASS[btype].decode(msdu_raw)
    return Mpdu(msdu, *addrs, timestamp_ms=timestamp)    # future-use bits ignored
