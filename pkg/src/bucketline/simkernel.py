"""Deterministic discrete-event kernel binding the protocol to a channel model.

Two media are offered. ``AbstractMedium`` decides delivery from the link
budget alone; ``WaveformMedium`` pushes every bucket through the modem, the
cable model and the receiver. Both expose the interface expected by
:class:`bucketline.protocol.Network`.
"""
from __future__ import annotations

import enum
import gc
import heapq
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from functools import lru_cache
from pathlib import Path
from typing import Callable, Iterator, NamedTuple, Optional

import numpy as np

from . import framecodec as fc
from . import modem
from .analytics import LatencyInputs, latency_estimate, ser_mqam
from .channel import CableModel, link_budget, propagate
from .framecodec import CodecConfig
from .modem import OfdmConfig
from .protocol import AssociationStalled, CsmaParams, Network, ProtocolConfig

__all__ = [
    "EVENT_KINDS", "Event", "EventLog", "Simulator", "AbstractMedium", "WaveformMedium",
    "Fidelity", "FaultKind", "Fault", "Scenario", "ConfigError", "UnknownTarget",
    "EnergyModel", "Metrics", "Run", "simulate", "run_scenario", "inject_fault",
    "verify_against_analytics", "build_positions", "load_scenario", "parse_scenario_text",
    "BUILTIN_SCENARIOS", "atomic_write",
]

EVENT_KINDS = ("TxStart", "TxEnd", "RxDetect", "RxDecoded", "StateChange", "Warning",
               "CycleStart", "CycleEnd", "Fault")
LOG_SCHEMA_VERSION = 1
_JSON = json.JSONEncoder(separators=(",", ":"), default=str)


class ConfigError(ValueError):
    def __init__(self, field_name: str, msg: str):
        super().__init__(f"{field_name}: {msg}")
        self.field = field_name


class UnknownTarget(ValueError):
    pass


# ---------------------------------------------------------------------------
# event log and scheduler

class Event(NamedTuple):
    t: float
    seq: int
    kind: str
    actor: str
    details: dict


class EventLog:
    """Append-only, totally ordered by (t, seq)."""

    def __init__(self):
        self._rows: list = []

    def append(self, t: float, kind: str, actor: str, details: dict) -> None:
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {kind!r}")
        self._rows.append((t, kind, actor, details))

    def __len__(self) -> int:
        return len(self._rows)

    def __iter__(self) -> Iterator[Event]:
        for seq, (t, kind, actor, details) in enumerate(self._rows):
            yield Event(t, seq, kind, actor, details)

    def __getitem__(self, i) -> Event:
        t, kind, actor, details = self._rows[i]
        return Event(t, i if i >= 0 else len(self._rows) + i, kind, actor, details)

    def of_kind(self, *kinds: str) -> list:
        return [e for e in self if e.kind in kinds]

    @staticmethod
    def format(e: Event) -> str:
        return _JSON.encode({"t": e.t, "seq": e.seq, "kind": e.kind, "actor": e.actor,
                             "details": e.details})

    def iter_jsonl(self) -> Iterator[str]:
        for e in self:
            yield self.format(e) + "\n"

    def to_jsonl(self) -> str:
        return "".join(self.iter_jsonl())


class Simulator:
    """Heap-based event loop; ties at equal times run in enqueue order."""

    def __init__(self, log: Optional[EventLog] = None):
        self.now = 0.0
        self.log = EventLog() if log is None else log
        self._q: list = []
        self._seq = 0

    def at(self, t: float, fn: Callable, *args) -> None:
        if t < self.now:
            raise ValueError(f"cannot schedule in the past ({t} < {self.now})")
        heapq.heappush(self._q, (t, self._seq, fn, args))
        self._seq += 1

    def after(self, dt: float, fn: Callable, *args) -> None:
        self.at(self.now + dt, fn, *args)

    def emit(self, kind: str, actor: str, **details) -> None:
        self.log.append(self.now, kind, actor, details)

    def run(self, until: Optional[float] = None, stop: Optional[Callable] = None) -> None:
        # the log only grows and holds no cycles; generational GC passes over it
        # dominate large runs, so collection is paused while the loop runs
        was_enabled = gc.isenabled()
        gc.disable()
        try:
            self._loop(until, stop)
        finally:
            if was_enabled:
                gc.enable()

    def _loop(self, until, stop) -> None:
        q = self._q
        while q:
            if stop is not None and stop():
                return
            if until is not None and q[0][0] > until:
                return
            t, _, fn, args = heapq.heappop(q)
            self.now = t
            fn(*args)

    @property
    def pending(self) -> int:
        return len(self._q)


# ---------------------------------------------------------------------------
# media

class AbstractMedium:
    """Delivery iff the link budget clears sensitivity and the decode SNR.

    With ``ser_losses`` a bucket is additionally lost with the probability
    that all three payload replicas contain a symbol error.
    """

    def __init__(self, cable: CableModel = CableModel(), ofdm: OfdmConfig = OfdmConfig(),
                 rng=None, ser_losses: bool = False):
        self.cable = cable
        self.ofdm = ofdm
        self.rng = np.random.default_rng(rng)
        self.ser_losses = ser_losses
        self._budget = lru_cache(maxsize=65536)(self._compute)

    def _compute(self, power_dbm: float, distance_m: float):
        b = link_budget(power_dbm, distance_m, self.cable)
        ok = b.decodable(self.cable)
        p_loss = 0.0
        if ok and self.ser_losses and math.isfinite(b.snr_db):
            ser = ser_mqam(self.ofdm.qam_order, b.snr_db)
            p_loss = (1.0 - (1.0 - ser) ** self.ofdm.data_carriers) ** self.ofdm.payload_symbols
        return b.rx_power_dbm >= self.cable.sensitivity_dbm, ok, p_loss

    def transfer(self, mpdu, src_m: float, dst_m: float, power_dbm: float):
        detected, ok, p_loss = self._budget(power_dbm, abs(dst_m - src_m))
        if ok and p_loss > 0 and self.rng.random() < p_loss:
            ok = False
        return (mpdu if ok else None), detected

    def rssi_dbm(self, power_dbm: float, distance_m: float) -> float:
        return power_dbm - self.cable.attenuation_db_per_m * distance_m

    def reach_m(self, power_dbm: float) -> float:
        c = self.cable
        if c.attenuation_db_per_m == 0:
            return math.inf
        sens = (power_dbm - c.sensitivity_dbm) / c.attenuation_db_per_m
        snr = (power_dbm - c.noise_floor_dbm - c.decode_snr_db) / c.attenuation_db_per_m
        return max(0.0, min(sens, snr))


class WaveformMedium(AbstractMedium):
    """Every bucket is modulated, propagated through the cable and demodulated."""

    DETECT_MARGIN_DB = 6.0      # no detection is attempted this far below the decode SNR
    LEAD_SAMPLES = 97

    def __init__(self, cable: CableModel = CableModel(), ofdm: OfdmConfig = OfdmConfig(),
                 codec: CodecConfig = CodecConfig(), rng=None):
        super().__init__(cable, ofdm, rng)
        cable.check_taps(ofdm.cp_len)
        self.codec = codec
        self._burst = lru_cache(maxsize=256)(self._modulate)
        self.buckets = 0

    def _modulate(self, raw: bytes, power_dbm: float):
        return modem.modulate_bucket(raw, self.ofdm, self.codec, power_dbm)

    def transfer(self, mpdu, src_m: float, dst_m: float, power_dbm: float):
        d = abs(dst_m - src_m)
        b = link_budget(power_dbm, d, self.cable)
        if b.rx_power_dbm < self.cable.sensitivity_dbm:
            return None, False
        if b.snr_db < self.cable.decode_snr_db - self.DETECT_MARGIN_DB:
            return None, False
        self.buckets += 1
        raw = fc.serialize_mpdu(mpdu, self.codec)
        burst = self._burst(raw, float(power_dbm))
        rx, _ = propagate(burst, self.cable, d, self.rng, self.ofdm.sample_rate, pad=self.ofdm.ext_len)
        lead = np.zeros(self.LEAD_SAMPLES, dtype=complex)
        if self.cable.sigma > 0:
            from .channel import complex_noise
            lead = complex_noise(self.cable, self.LEAD_SAMPLES, self.rng)
        stream = np.concatenate([lead, rx])
        try:
            psdu, _, _ = modem.receive(stream, self.ofdm, self.codec)
            return fc.parse_mpdu(psdu, self.codec), True
        except (modem.DemodFailed, fc.FrameError, ValueError):
            return None, modem.detect_burst(stream, self.ofdm) is not None

    def reach_m(self, power_dbm: float) -> float:
        c = self.cable
        if c.attenuation_db_per_m == 0:
            return math.inf
        sens = (power_dbm - c.sensitivity_dbm) / c.attenuation_db_per_m
        snr = (power_dbm - c.noise_floor_dbm - c.decode_snr_db + self.DETECT_MARGIN_DB) / c.attenuation_db_per_m
        return max(0.0, min(sens, snr))


# ---------------------------------------------------------------------------
# scenario

class Fidelity(enum.Enum):
    ABSTRACT = "abstract"
    WAVEFORM = "waveform"


class FaultKind(enum.Enum):
    NODE_FAIL = "NodeFail"
    NODE_ORPHAN = "NodeOrphan"
    COORDINATOR_FAIL = "CoordinatorFail"
    LINK_CUT = "LinkCut"


@dataclass(frozen=True)
class Fault:
    time_s: float
    kind: FaultKind
    target: str = ""           # node index, "a-b" for a link, anything for the coordinator
    duration_s: float = 1.0    # silence interval for NodeOrphan

    def __post_init__(self):
        object.__setattr__(self, "kind", _enum(FaultKind, self.kind, "faults.kind"))
        object.__setattr__(self, "target", str(self.target))
        if self.time_s < 0 or self.duration_s <= 0:
            raise ConfigError("faults", "fault time must be >= 0 and duration > 0")

    @classmethod
    def parse(cls, text: str) -> "Fault":
        parts = text.split()
        if not 2 <= len(parts) <= 4:
            raise ConfigError("faults", f"expected 'time kind [target] [duration]', got {text!r}")
        try:
            t = float(parts[0])
            dur = float(parts[3]) if len(parts) > 3 else 1.0
        except ValueError:
            raise ConfigError("faults", f"bad number in {text!r}") from None
        return cls(t, parts[1], parts[2] if len(parts) > 2 else "", dur)

    def render(self) -> str:
        return f"{self.time_s!r} {self.kind.value} {self.target or '-'} {self.duration_s!r}"


def _enum(cls, value, name):
    if isinstance(value, cls):
        return value
    for m in cls:
        if str(value).lower() in (m.value.lower(), m.name.lower()):
            return m
    raise ConfigError(name, f"unknown value {value!r}; choose from {[m.value for m in cls]}")


@dataclass(frozen=True)
class Scenario:
    node_count: int = 8
    spacing_m: float = 10.0
    positions_m: Optional[tuple] = None
    cable: CableModel = CableModel()
    ofdm: OfdmConfig = OfdmConfig()
    codec: CodecConfig = CodecConfig()
    csma: CsmaParams = CsmaParams()
    t_acq_s: float = 1.0
    t_il_fraction: float = 0.1
    t_nn_s: Optional[float] = None          # None -> bucket airtime
    t_il_s: Optional[float] = None          # None -> t_il_fraction * t_nn
    fidelity: Fidelity = Fidelity.ABSTRACT
    faults: tuple = ()
    rng_seed: int = 0
    duration_s: Optional[float] = None      # None -> a single cycle
    preassigned: bool = False
    standby: bool = True
    ser_losses: bool = False
    net_id: int = 1
    retry_limit: int = 3
    deadline_factor: float = 1.5
    heartbeat_cycles: float = 10.0
    missed_heartbeats: int = 3
    event_window_s: Optional[float] = None
    cycle_interval_s: Optional[float] = None
    sleep_between_cycles: bool = False
    power_margin_db: int = 0

    def __post_init__(self):
        object.__setattr__(self, "fidelity", _enum(Fidelity, self.fidelity, "fidelity"))
        faults = tuple(f if isinstance(f, Fault) else Fault.parse(f) for f in self.faults)
        object.__setattr__(self, "faults", faults)
        if self.node_count < 1:
            raise ConfigError("node_count", "must be >= 1")
        if not self.spacing_m > 0:
            raise ConfigError("spacing_m", "must be > 0")
        if self.positions_m is not None:
            pos = tuple(float(x) for x in self.positions_m)
            object.__setattr__(self, "positions_m", pos)
            if len(pos) != self.node_count:
                raise ConfigError("positions_m", f"{len(pos)} positions for {self.node_count} nodes")
            if any(b <= a for a, b in zip((0.0,) + pos, pos)):
                raise ConfigError("positions_m", "must be positive and strictly increasing")
        if any(b.time_s < a.time_s for a, b in zip(faults, faults[1:])):
            raise ConfigError("faults", "must be sorted by time")
        if self.t_acq_s < 0:
            raise ConfigError("t_acq_s", "must be >= 0")
        if not 0 <= self.t_il_fraction:
            raise ConfigError("t_il_fraction", "must be >= 0")
        if self.t_nn_s is not None and not self.t_nn_s > 0:
            raise ConfigError("t_nn_s", "must be > 0")
        if self.t_il_s is not None and self.t_il_s < 0:
            raise ConfigError("t_il_s", "must be >= 0")
        if self.duration_s is not None and self.duration_s < 0:
            raise ConfigError("duration_s", "must be >= 0")
        if self.retry_limit < 0:
            raise ConfigError("retry_limit", "must be >= 0")
        if self.deadline_factor < 1:
            raise ConfigError("deadline_factor", "must be >= 1")
        if not 0 <= self.net_id < 256:
            raise ConfigError("net_id", "must fit 8 bits")

    @property
    def hop_times(self) -> tuple:
        t_nn = self.ofdm.bucket_duration_s if self.t_nn_s is None else self.t_nn_s
        t_il = self.t_il_fraction * t_nn if self.t_il_s is None else self.t_il_s
        return t_nn, t_il

    def protocol_config(self) -> ProtocolConfig:
        t_nn, t_il = self.hop_times
        return ProtocolConfig(t_nn_s=t_nn, t_il_s=t_il, t_acq_s=self.t_acq_s, net_id=self.net_id,
                              retry_limit=self.retry_limit, deadline_factor=self.deadline_factor,
                              heartbeat_cycles=self.heartbeat_cycles,
                              missed_heartbeats=self.missed_heartbeats,
                              event_window_s=self.event_window_s,
                              cycle_interval_s=self.cycle_interval_s,
                              sleep_between_cycles=self.sleep_between_cycles, csma=self.csma,
                              msdu_octets=self.codec.msdu_octets,
                              power_margin_db=self.power_margin_db)

    def analytic_latency_s(self, n: Optional[int] = None) -> float:
        t_nn, t_il = self.hop_times
        return latency_estimate(LatencyInputs(self.node_count if n is None else n, t_nn, t_il, self.t_acq_s))

    # -- flat dotted-key form ----------------------------------------------
    def to_mapping(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in _NESTED:
                for g in fields(v):
                    if (f.name, g.name) in _HIDDEN:
                        continue
                    out[f"{f.name}.{g.name}"] = _render(getattr(v, g.name))
            elif f.name == "faults":
                out["faults"] = "; ".join(x.render() for x in v)
            else:
                out[f.name] = _render(v)
        return out

    def with_overrides(self, mapping: dict) -> "Scenario":
        top, nested = {}, {k: {} for k in _NESTED}
        for key, raw in mapping.items():
            key = key.strip()
            head, _, tail = key.partition(".")
            if tail:
                if head not in _NESTED:
                    raise ConfigError(key, "unknown section")
                cls = type(getattr(self, head))
                known = {g.name for g in fields(cls)} - {g for h, g in _HIDDEN if h == head}
                if tail not in known:
                    raise ConfigError(key, "unknown key")
                nested[head][tail] = _coerce(key, raw, getattr(getattr(self, head), tail))
            else:
                if key not in _TOP or key in _NESTED:
                    raise ConfigError(key, "unknown key")
                if key == "faults":
                    top[key] = tuple(Fault.parse(x) for x in str(raw).split(";") if x.strip()) \
                        if isinstance(raw, str) else tuple(raw)
                else:
                    top[key] = _coerce(key, raw, getattr(self, key), key in _OPTIONAL_FLOAT)
        for head, kv in nested.items():
            if kv:
                try:
                    top[head] = replace(getattr(self, head), **kv)
                except ConfigError:
                    raise
                except (ValueError, TypeError) as exc:
                    raise ConfigError(head, str(exc)) from None
        try:
            return replace(self, **top)
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError("scenario", str(exc)) from None


_NESTED = ("cable", "ofdm", "codec", "csma")
_HIDDEN = {("codec", "cipher")}
_TOP = {f.name for f in fields(Scenario)}
_OPTIONAL_FLOAT = {"t_nn_s", "t_il_s", "duration_s", "event_window_s", "cycle_interval_s"}


def _render(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, enum.Enum):
        return str(v.value)
    if isinstance(v, tuple):
        return ", ".join(_render(x) for x in v)
    if isinstance(v, complex):
        return repr(v.real) if v.imag == 0 else repr(v).strip("()")
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key: str, raw, default, optional_float: bool = False):
    if not isinstance(raw, str):
        return raw
    s = raw.strip()
    try:
        if s.lower() == "none":
            if default is None or optional_float or key in ("cable.noise_sigma", "cable.tx_snr_db", "positions_m"):
                return None
            raise ValueError("none not allowed here")
        if isinstance(default, bool):
            if s.lower() in ("true", "yes", "1", "on"):
                return True
            if s.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"not a boolean: {s!r}")
        if isinstance(default, enum.Enum):
            return _enum(type(default), s, key)
        if isinstance(default, int):
            return int(s, 0)
        if isinstance(default, Fraction):
            return Fraction(s)
        if isinstance(default, tuple) or key == "positions_m":
            items = [x.strip() for x in s.split(",") if x.strip()]
            if key == "cable.fir_taps":
                return tuple(complex(x.replace(" ", "")) for x in items)
            return tuple(float(x) for x in items)
        if isinstance(default, float) or default is None or optional_float:
            return float(s)
        return s
    except ConfigError:
        raise
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(key, str(exc)) from None


def parse_scenario_text(text: str, base: Scenario = Scenario()) -> Scenario:
    """Flat ``dotted.key = value`` lines; ``#`` starts a comment."""
    mapping = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise ConfigError(f"line {n}", f"expected key = value, got {line!r}")
        mapping[key.strip()] = value.strip()
    return base.with_overrides(mapping)


BUILTIN_SCENARIOS = {
    "desk8": Scenario(node_count=8),
    "oilwell1000": Scenario(node_count=1000, t_nn_s=0.33e-3, t_il_s=0.033e-3, t_acq_s=1.0,
                            preassigned=True),
}


def load_scenario(name_or_path) -> Scenario:
    if str(name_or_path) in BUILTIN_SCENARIOS:
        return BUILTIN_SCENARIOS[str(name_or_path)]
    path = Path(name_or_path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("scenario", f"cannot read {path}: {exc.strerror}") from None
    return parse_scenario_text(text)


def build_positions(s: Scenario) -> list:
    if s.positions_m is not None:
        return list(s.positions_m)
    return [s.spacing_m * (i + 1) for i in range(s.node_count)]


# ---------------------------------------------------------------------------
# metrics

@dataclass(frozen=True)
class EnergyModel:
    supply_v: float = 5.0
    sleep_a: float = 10e-6
    idle_a: float = 1e-3
    tx_a: float = 20e-3

    def joules(self, durations: dict) -> float:
        return self.supply_v * (durations["tx"] * self.tx_a + durations["idle"] * self.idle_a
                                + durations["sleep"] * self.sleep_a)


class Metrics(dict):
    """Flat key/value table."""

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("key,value\n")
        for k, v in self.items():
            buf.write(f"{k},{_render(v) if not isinstance(v, str) else v}\n")
        return buf.getvalue()

    @property
    def cycle_latencies(self) -> list:
        return [self[f"cycle.{i}.latency_s"] for i in range(self.get("cycles", 0))]


# ---------------------------------------------------------------------------
# running

@dataclass
class Run:
    scenario: Scenario
    log: EventLog
    metrics: Metrics
    network: Network


def _station_for(net: Network, target: str):
    try:
        idx = int(target)
    except ValueError:
        raise UnknownTarget(f"not a node index: {target!r}") from None
    if idx == 0:
        return net.master
    if not 1 <= idx <= len(net.nodes):
        raise UnknownTarget(f"no node {idx} in a {len(net.nodes)}-node queue")
    return net.nodes[idx - 1]


def _check_target(net: Network, f: Fault) -> None:
    if f.kind is FaultKind.LINK_CUT:
        a, sep, b = f.target.partition("-")
        if not sep:
            raise UnknownTarget(f"link target must look like 'a-b', got {f.target!r}")
        _station_for(net, a), _station_for(net, b)
    elif f.kind in (FaultKind.NODE_FAIL, FaultKind.NODE_ORPHAN):
        st = _station_for(net, f.target)
        if st.is_coordinator:
            raise UnknownTarget("use CoordinatorFail for the coordinator")


def inject_fault(net: Network, f: Fault) -> Event:
    """Apply ``f`` now and return the Fault event it logged."""
    _check_target(net, f)
    sim = net.sim
    if f.kind is FaultKind.LINK_CUT:
        a, _, b = f.target.partition("-")
        sa, sb = _station_for(net, a), _station_for(net, b)
        sim.emit("Fault", sa.actor, fault=f.kind.value, target=f.target)
        net.cut_link(sa, sb)
    elif f.kind is FaultKind.COORDINATOR_FAIL:
        sim.emit("Fault", net.master.actor, fault=f.kind.value, target=f.target or "master")
        net.fail_master()
    else:
        st = _station_for(net, f.target)
        sim.emit("Fault", st.actor, fault=f.kind.value, target=f.target)
        net.fail_node(st)
        if f.kind is FaultKind.NODE_ORPHAN:
            sim.at(sim.now + f.duration_s, net.restore_orphan, st)
    return sim.log[-1]


def _medium(s: Scenario, rng):
    if s.fidelity is Fidelity.WAVEFORM:
        return WaveformMedium(s.cable, s.ofdm, s.codec, rng)
    return AbstractMedium(s.cable, s.ofdm, rng, s.ser_losses)


def simulate(s: Scenario, energy: EnergyModel = EnergyModel()) -> Run:
    """Association (unless pre-assigned), then cycles until ``duration_s``."""
    seeds = np.random.SeedSequence(s.rng_seed).spawn(2)
    sim = Simulator()
    net = Network(sim, _medium(s, np.random.default_rng(seeds[0])), build_positions(s),
                  s.protocol_config(), standby=s.standby, rng=np.random.default_rng(seeds[1]))
    for f in s.faults:
        _check_target(net, f)
        sim.at(f.time_s, inject_fault, net, f)
    if s.preassigned:
        net.preassign()
    else:
        net.start_association()
        sim.run(stop=lambda: net._assoc.done)
        rep = net.association
        if rep.stalled:
            last = max(rep.assigned.values(), default=0)
            raise AssociationStalled(f"association stopped after node {last} of {s.node_count}", last, rep)
    start = sim.now
    if s.duration_s is None:
        net.start_cycle()
        sim.run(stop=lambda: net.cycle is None and not net._events_running)
    else:
        until = start + s.duration_s
        if s.standby:
            net.start_heartbeats(until)
        net.run_cycles(until)
        sim.run(stop=lambda: sim.now >= until and net.cycle is None and not net._events_running)
    return Run(s, sim.log, collect_metrics(net, s, energy), net)


def run_scenario(s: Scenario):
    """Returns (EventLog, Metrics)."""
    r = simulate(s)
    return r.log, r.metrics


def collect_metrics(net: Network, s: Scenario, energy: EnergyModel = EnergyModel()) -> Metrics:
    m = Metrics()
    total = net.sim.now
    m["schema"] = LOG_SCHEMA_VERSION
    m["nodes"] = s.node_count
    m["fidelity"] = s.fidelity.value
    m["seed"] = s.rng_seed
    a = net.association
    m["association.nodes"] = len(a.assigned) if a else 0
    m["association.duration_s"] = a.duration_s if a else 0.0
    m["cycles"] = len(net.reports)
    for i, r in enumerate(net.reports):
        m[f"cycle.{i}.start_s"] = r.start_s
        m[f"cycle.{i}.latency_s"] = r.latency_s
        m[f"cycle.{i}.delivered"] = r.delivered
        m[f"cycle.{i}.lost_to_faults"] = len(r.lost_to_faults)
        m[f"cycle.{i}.timed_out"] = len(r.timed_out)
    if net.reports:
        m["cycle_latency_s"] = net.reports[0].latency_s
        m["delivered_readings"] = net.reports[0].delivered
    m["analytic_latency_s"] = s.analytic_latency_s()
    m["attempts"] = net.attempts
    m["bucket_error_rate"] = net.failures / net.attempts if net.attempts else 0.0
    m["collisions"] = net.collisions
    m["retries"] = net.retries
    m["warnings"] = len(net.warnings)
    m["sim_time_s"] = total
    joules = 0.0
    for n in net.nodes:
        e = energy.joules(net.state_durations(n, total))
        m[f"energy_j.node.{n.index}"] = e
        joules += e
    m["energy_j.total"] = joules
    return m


def verify_against_analytics(metrics: Metrics, s: Scenario, tolerance: float = 0.01) -> dict:
    sim = float(metrics["cycle_latency_s"])
    ana = s.analytic_latency_s()
    rel = abs(sim - ana) / ana
    return {"simulated_s": sim, "analytic_s": ana, "relative_error": rel, "within_tolerance": rel <= tolerance}


def atomic_write(path, text: str) -> None:
    """Write through a temporary file in the same directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
