"""Bucket-brigade state machines: association, measurement cycle, events, healing.

Nodes and coordinators are plain state holders; :class:`Network` drives them
from callbacks scheduled on a duck-typed simulator ``sim`` providing

* ``now`` (seconds), ``at(t, fn, *args)``, ``emit(kind, actor, **details)``
* ``run(until=None, stop=None)``

and a medium providing ``transfer(mpdu, src_m, dst_m, power_dbm) -> (Mpdu|None, detected)``
and ``reach_m(power_dbm)``. See :mod:`bucketline.simkernel` for both.

A hop occupies ``t_nn`` of airtime followed by ``t_il`` of processing; the
per-hop acknowledgment is folded into that period, so a sender learns the
outcome one hop period after it started transmitting.
"""
from __future__ import annotations

import bisect
import enum
import math
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from .framecodec import (Acknowledgment, Address, BucketType, Command, Management,
                         MeasurementData, Mpdu)

__all__ = [
    "ProtocolError", "AssociationStalled", "OrphanUnreachable", "CycleTimeout", "PhaseError",
    "Direction", "Phase", "Role", "CyclePhase", "NeighborEntry", "NodeState",
    "CoordinatorState", "CsmaParams", "Intent", "Slot", "Schedule", "arbitrate",
    "ProtocolConfig", "Station", "SensorNode", "Coordinator", "CycleReport",
    "AssociationReport", "OrphanReport", "FailoverReport", "Network",
    "run_association", "run_measurement_cycle", "handle_orphan", "coordinator_failover",
    "POWER_MIN_DBM", "POWER_MAX_DBM",
]

POWER_MIN_DBM = -50
POWER_MAX_DBM = 10
BROADCAST = Address(0, Address.BROADCAST_NODE_ID)


class ProtocolError(RuntimeError):
    pass


class AssociationStalled(ProtocolError):
    def __init__(self, msg, last_reached: int, report=None):
        super().__init__(msg)
        self.last_reached = last_reached
        self.report = report


class OrphanUnreachable(ProtocolError):
    pass


class CycleTimeout(ProtocolError):
    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


class PhaseError(ProtocolError):
    pass


class Direction(enum.Enum):
    UPSTREAM = "upstream"
    DOWNSTREAM = "downstream"


class Phase(enum.Enum):
    UNASSOCIATED = "Unassociated"
    ASSOCIATING = "Associating"
    IDLE = "Idle"
    MEASURING = "Measuring"
    RELAYING_UP = "RelayingUp"
    AWAITING_ACK = "AwaitingAck"
    ORPHAN = "Orphan"
    FAILED = "Failed"


P = Phase
PHASE_EDGES = {
    P.UNASSOCIATED: {P.ASSOCIATING, P.FAILED},
    P.ASSOCIATING: {P.IDLE, P.UNASSOCIATED, P.FAILED},
    P.IDLE: {P.MEASURING, P.ORPHAN, P.FAILED},
    P.MEASURING: {P.AWAITING_ACK, P.IDLE, P.FAILED},
    P.AWAITING_ACK: {P.RELAYING_UP, P.IDLE, P.FAILED},
    P.RELAYING_UP: {P.IDLE, P.FAILED},
    P.ORPHAN: {P.IDLE, P.FAILED},
    P.FAILED: {P.ORPHAN, P.UNASSOCIATED},
}
del P


class Role(enum.Enum):
    MASTER = "Master"
    STANDBY = "Standby"


class CyclePhase(enum.Enum):
    MEASUREMENT_CYCLE = "MeasurementCycle"
    EVENT_PERIOD = "EventPeriod"


# ---------------------------------------------------------------------------
# state records

@dataclass
class NeighborEntry:
    address: Optional[Address]
    direction: Direction
    min_tx_power_dbm: int
    last_seen_ms: int = 0
    active: bool = True
    sensor_id: int = 0
    rssi_dbm: float = -math.inf

    def __post_init__(self):
        if not POWER_MIN_DBM <= self.min_tx_power_dbm <= POWER_MAX_DBM:
            raise ValueError(f"min_tx_power_dbm out of range: {self.min_tx_power_dbm}")

    @property
    def rank(self):
        # lower power first; at equal power the stronger (closer) one
        return (self.min_tx_power_dbm, -self.rssi_dbm)


def _sensor_id(index: int) -> int:
    # deterministic stand-in for the factory-programmed identifier
    return (0x5EB0 << 48) | (index * 0x9E3779B1 & 0xFFFFFFFFFFFF)


@dataclass
class NodeState:
    sensor_id: int
    address: Optional[Address] = None
    phase: Phase = Phase.UNASSOCIATED
    neighbor_table: list = field(default_factory=list)
    tx_power_dbm: int = -5
    pending_event_buckets: deque = field(default_factory=deque)

    def __post_init__(self):
        if not 0 <= self.sensor_id < 1 << 64:
            raise ValueError("sensor_id must fit 64 bits")

    def transition(self, new: Phase) -> None:
        if new is self.phase:
            return
        if new not in PHASE_EDGES[self.phase]:
            raise PhaseError(f"illegal transition {self.phase.value} -> {new.value}")
        if self.address is None and new not in (Phase.UNASSOCIATED, Phase.ASSOCIATING, Phase.FAILED):
            raise PhaseError(f"unassigned node cannot enter {new.value}")
        self.phase = new

    def set_power(self, dbm) -> None:
        if dbm != int(dbm) or not POWER_MIN_DBM <= dbm <= POWER_MAX_DBM:
            raise ValueError(f"tx power must be an integer dBm in [{POWER_MIN_DBM}, {POWER_MAX_DBM}]")
        self.tx_power_dbm = int(dbm)

    def entry(self, sensor_id: int) -> Optional[NeighborEntry]:
        for e in self.neighbor_table:
            if e.sensor_id == sensor_id:
                return e
        return None

    def record(self, entry: NeighborEntry) -> NeighborEntry:
        old = self.entry(entry.sensor_id)
        if old is not None:
            return old
        keys = [e.rank for e in self.neighbor_table]
        self.neighbor_table.insert(bisect.bisect_right(keys, entry.rank), entry)
        return entry

    def neighbors(self, direction: Direction, active_only: bool = True) -> list:
        """Entries in one direction, closest first."""
        return [e for e in self.neighbor_table
                if e.direction is direction and (e.active or not active_only)]


@dataclass
class CoordinatorState:
    role: Role = Role.MASTER
    active_nodes: set = field(default_factory=set)
    pending_replies: set = field(default_factory=set)
    cycle_timer_ms: float = 0.0
    measurement_log: dict = field(default_factory=dict)
    heartbeat_period_ms: float = 0.0


@dataclass(frozen=True)
class CsmaParams:
    cifs_us: float = 51.2
    prp_slots: int = 2
    rifs_us: float = 25.6
    backoff_slot_us: float = 25.6
    cw_min: int = 8
    cw_max: int = 64

    def __post_init__(self):
        if min(self.cifs_us, self.rifs_us, self.backoff_slot_us) <= 0 or self.prp_slots <= 0:
            raise ValueError("CSMA timings must be positive")
        if not 0 < self.cw_min <= self.cw_max:
            raise ValueError("need 0 < cw_min <= cw_max")


# ---------------------------------------------------------------------------
# arbitration

@dataclass(frozen=True)
class Intent:
    depth: int                   # 0 is the coordinator
    event: bool = False
    bucket_type: BucketType = BucketType.MANAGEMENT
    tag: object = None

    @property
    def from_coordinator(self) -> bool:
        return self.depth == 0


@dataclass(frozen=True)
class Slot:
    intent: Intent
    start_us: float
    backoff_slots: int
    rounds: int


@dataclass(frozen=True)
class Schedule:
    slots: tuple
    deferred: tuple
    collisions: int

    @property
    def order(self) -> list:
        return [s.intent for s in self.slots]


def _priority(i: Intent, phase: CyclePhase):
    if i.from_coordinator:
        return (0, 0)
    if phase is CyclePhase.MEASUREMENT_CYCLE:
        return (1, i.depth)        # upstream first
    return (1, -i.depth)           # deeper first


def arbitrate(pending: Iterable[Intent], phase: CyclePhase, csma: CsmaParams = CsmaParams(),
              rng=None, airtime_us: float = 332.8, max_rounds: int = 10_000) -> Schedule:
    """Order contending intents: coordinator, then PRP class, then binary exponential backoff."""
    rng = np.random.default_rng(rng)
    pending = list(pending)
    deferred = [i for i in pending
                if phase is CyclePhase.MEASUREMENT_CYCLE and i.event and not i.from_coordinator]
    live = [i for i in pending if not any(i is d for d in deferred)]
    classes: dict = {}
    for i in live:
        classes.setdefault(_priority(i, phase), []).append(i)
    t, slots, collisions = 0.0, [], 0
    for key in sorted(classes):
        contenders = list(classes[key])
        cw = [csma.cw_min] * len(contenders)
        rounds = 0
        while contenders:
            rounds += 1
            if rounds > max_rounds:
                raise RuntimeError("contention did not resolve")
            t += csma.cifs_us + csma.prp_slots * csma.backoff_slot_us
            if len(contenders) == 1:
                draws = [0]
            else:
                draws = [int(rng.integers(0, w)) for w in cw]
            low = min(draws)
            t += low * csma.backoff_slot_us
            winners = [k for k, d in enumerate(draws) if d == low]
            if len(winners) > 1:
                collisions += 1
                t += airtime_us
                for k in winners:
                    cw[k] = min(2 * cw[k], csma.cw_max)
                continue
            k = winners[0]
            slots.append(Slot(contenders[k], t, low, rounds))
            t += airtime_us + csma.rifs_us
            del contenders[k], cw[k]
            rounds = 0
    return Schedule(tuple(slots), tuple(deferred), collisions)


# ---------------------------------------------------------------------------
# configuration and stations

@dataclass(frozen=True)
class ProtocolConfig:
    t_nn_s: float = 0.3328e-3
    t_il_s: float = 0.03328e-3
    t_acq_s: float = 1.0
    net_id: int = 1
    ramp_start_dbm: int = -5
    ramp_stop_dbm: int = 10
    ramp_step_db: int = 1
    retry_limit: int = 3
    deadline_factor: float = 1.5
    heartbeat_cycles: float = 10.0
    missed_heartbeats: int = 3
    event_window_s: Optional[float] = None     # None -> t_nn_s * node count
    cycle_interval_s: Optional[float] = None   # None -> back to back
    sleep_between_cycles: bool = False
    csma: CsmaParams = CsmaParams()
    msdu_octets: int = 5
    power_margin_db: int = 0        # added to a neighbor's recorded minimum power

    def __post_init__(self):
        if self.t_nn_s <= 0 or self.t_il_s < 0 or self.t_acq_s < 0:
            raise ValueError("need t_nn_s > 0 and non-negative t_il_s, t_acq_s")
        if not (POWER_MIN_DBM <= self.ramp_start_dbm <= self.ramp_stop_dbm <= POWER_MAX_DBM):
            raise ValueError("power ramp must lie inside the transmitter range")
        if self.ramp_step_db < 1 or self.retry_limit < 0 or self.missed_heartbeats < 1:
            raise ValueError("ramp step >= 1, retry limit >= 0, missed heartbeats >= 1")
        if self.deadline_factor < 1:
            raise ValueError("deadline factor must be >= 1")

    @property
    def hop_s(self) -> float:
        return self.t_nn_s + self.t_il_s

    @property
    def ramp(self) -> list:
        return list(range(self.ramp_start_dbm, self.ramp_stop_dbm + 1, self.ramp_step_db))


COORDINATOR_SID = 0xC0_0000_0000_0000_00


class Station:
    """Common radio bookkeeping for sensor nodes and coordinators."""
    is_coordinator = False

    def __init__(self, index: int, position_m: float, state: NodeState):
        self.index = index
        self.position_m = float(position_m)
        self.state = state
        self.alive = True
        self.tx_until = -math.inf
        self.rx_until = -math.inf
        self.tx_s = 0.0
        self.off_s = 0.0
        self.sleep_s = 0.0
        self.off_since: Optional[float] = None
        self.sleep_since: Optional[float] = None
        self.reset_cycle(None)

    def reset_cycle(self, cycle_id):
        self.cycle_id = cycle_id
        self.parent: Optional[Station] = None
        self.child: Optional[Station] = None
        self.ready = False
        self.triggered = False
        self.sent_own = False
        self.got_child = False
        self.busy = False
        self.queue: deque = deque()
        self.reading: Optional[MeasurementData] = None

    @property
    def sid(self) -> int:
        return self.state.sensor_id

    @property
    def address(self) -> Optional[Address]:
        return self.state.address

    @property
    def node_id(self) -> int:
        return self.state.address.node_id if self.state.address is not None else -1

    @property
    def actor(self) -> str:
        if self.state.address is None:
            return f"sid:{self.sid:016x}"
        return str(self.state.address)

    def __repr__(self):
        return f"<{type(self).__name__} {self.actor} @{self.position_m:g} m>"


class SensorNode(Station):
    pass


class Coordinator(Station):
    is_coordinator = True

    def __init__(self, name: str, net_id: int, role: Role = Role.MASTER):
        super().__init__(0, 0.0, NodeState(COORDINATOR_SID, Address(net_id, 0), Phase.IDLE))
        self.name = name
        self.cstate = CoordinatorState(role=role)
        self.traffic_log: list = []
        self.last_heartbeat_s = 0.0

    @property
    def actor(self) -> str:
        return self.name


# ---------------------------------------------------------------------------
# reports

@dataclass
class AssociationReport:
    assigned: dict                 # deployment index -> NodeID
    order: list                    # deployment indices in assignment order
    last_node: Optional[int]       # NodeID that sent association-end
    start_s: float = 0.0
    end_s: float = math.nan
    stalled: bool = False

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s


@dataclass
class CycleReport:
    index: int
    timestamp_ms: int
    start_s: float
    expected: tuple
    deepest: int
    deadline_s: float
    readings: dict = field(default_factory=dict)     # NodeID -> MeasurementData
    order: list = field(default_factory=list)
    arrivals: dict = field(default_factory=dict)     # NodeID -> seconds
    end_s: float = math.nan
    lost_to_faults: tuple = ()
    timed_out: tuple = ()
    deadline_hit: bool = False

    @property
    def delivered(self) -> int:
        return len(self.readings)

    @property
    def latency_s(self) -> float:
        return self.end_s - self.start_s


@dataclass
class OrphanReport:
    node_id: int
    requested_s: float
    relay: Optional[str] = None
    deferred: bool = False
    rejoined: bool = False
    unreachable: bool = False
    end_s: float = math.nan
    readded_by: list = field(default_factory=list)


@dataclass
class FailoverReport:
    failed_s: float
    promoted_s: Optional[float] = None
    new_master: Optional[str] = None
    halted: bool = False
    missed_heartbeats: int = 0


@dataclass
class _Assoc:
    report: AssociationReport
    expected: int
    next_id: int = 1
    done: bool = False


@dataclass
class _Cycle:
    id: int
    report: CycleReport
    acq_at: float
    active: bool = True


def _short_id(sid: int) -> bytes:
    # low 32 bits of the sensor ID; the MSDU is too narrow for all 64
    return (sid & 0xFFFFFFFF).to_bytes(4, "big")


def _label_msdu(msdu) -> str:
    return msdu.command.name if isinstance(msdu, Management) else type(msdu).__name__


def _label(m: Mpdu) -> str:
    if isinstance(m.msdu, Management):
        return m.msdu.command.name
    return m.type.name


# Management commands whose handling is driven by the sender-side callback chain
_CHAINED = {Command.HELLO_NEIGHBOR, Command.ASSOCIATION_REQUEST, Command.ASSOCIATION_END,
            Command.NEIGHBOR_INACTIVE, Command.NODE_ACTIVE, Command.ASSOCIATION_START,
            Command.SET_NODE_ID_NET_ID}


# ---------------------------------------------------------------------------
# network driver

class Network:
    """One branch: a coordinator (plus optional colocated standby) and a queue of nodes."""

    def __init__(self, sim, medium, positions_m, config: ProtocolConfig = ProtocolConfig(),
                 standby: bool = True, rng=None):
        positions = [float(x) for x in positions_m]
        if any(b <= a for a, b in zip([0.0] + positions, positions)):
            raise ValueError("node positions must be positive and strictly increasing")
        self.sim = sim
        self.medium = medium
        self.cfg = config
        self.rng = np.random.default_rng(rng)
        self.master = Coordinator("coordinator", config.net_id)
        self.standby = Coordinator("standby", config.net_id, Role.STANDBY) if standby else None
        self.nodes = [SensorNode(i + 1, x, NodeState(_sensor_id(i + 1)))
                      for i, x in enumerate(positions)]
        self._positions = [0.0] + positions
        self._by_sid = {n.sid: n for n in self.nodes}
        self.cut: set = set()
        self.attempts = self.failures = self.retries = self.collisions = 0
        self.warnings: list = []
        self.reports: list = []
        self.halted = False
        self.association: Optional[AssociationReport] = None
        self.orphans: list = []
        self.failovers: list = []
        self._assoc: Optional[_Assoc] = None
        self.cycle: Optional[_Cycle] = None
        self._cycle_count = 0
        self._until = -math.inf
        self._event_close = -math.inf
        self._deferred_orphans: list = []
        self._events_running = False
        self._last_cycle_start = -math.inf
        self.heartbeat_period_s = math.inf

    # -- lookup ------------------------------------------------------------
    def station(self, key) -> Station:
        """By NodeID (0 = master) or by deployment index for unassigned nodes."""
        if key == 0:
            return self.master
        for n in self.nodes:
            if n.node_id == key:
                return n
        raise KeyError(key)

    def _resolve(self, sid: int) -> Station:
        return self.master if sid == COORDINATOR_SID else self._by_sid[sid]

    def _stations(self) -> list:
        return [self.master] + self.nodes

    def _link_ok(self, a: Station, b: Station) -> bool:
        return frozenset((a.index, b.index)) not in self.cut

    def _candidates(self, st: Station, power_dbm: float) -> list:
        reach = self.medium.reach_m(power_dbm)
        lo = bisect.bisect_left(self._positions, st.position_m - reach)
        hi = bisect.bisect_right(self._positions, st.position_m + reach)
        everyone = self._stations()
        return [s for s in everyone[lo:hi] if s is not st and s.alive]

    def _tx_power(self, e: NeighborEntry) -> int:
        return min(e.min_tx_power_dbm + self.cfg.power_margin_db, POWER_MAX_DBM)

    def _power_to(self, a: Station, b: Station) -> int:
        e = a.state.entry(b.sid)
        return self._tx_power(e) if e is not None else self.cfg.ramp_stop_dbm

    def _phase(self, st: Station, new: Phase) -> None:
        if st.is_coordinator or st.state.phase is new:
            return
        old = st.state.phase
        st.state.transition(new)
        self.sim.emit("StateChange", st.actor, phase=new.value, previous=old.value)

    def _mpdu(self, src: Station, dst: Optional[Station], msdu, origin=None, final=None,
              timestamp_ms: int = 0) -> Mpdu:
        if len(msdu.encode()) > self.cfg.msdu_octets:
            raise ProtocolError(f"{_label_msdu(msdu)} does not fit a {self.cfg.msdu_octets}-octet MSDU")
        me = src.address or Address(self.cfg.net_id, 0)
        return Mpdu(msdu,
                    original_source=origin or me,
                    final_destination=final or (dst.address if dst and dst.address else BROADCAST),
                    current_destination=dst.address if dst and dst.address else BROADCAST,
                    current_source=me,
                    timestamp_ms=timestamp_ms)

    # -- single hop --------------------------------------------------------
    def _send(self, src: Station, dst: Station, mpdu: Mpdu, power: float, on_result: Callable,
              listeners=(), attempt: int = 0) -> None:
        sim, cfg = self.sim, self.cfg
        now = sim.now
        collision = dst.tx_until > now or dst.rx_until > now
        if collision:
            self.collisions += 1
        src.tx_until = now + cfg.t_nn_s
        dst.rx_until = max(dst.rx_until, now + cfg.t_nn_s)
        src.tx_s += cfg.t_nn_s
        self.attempts += 1
        src.state.tx_power_dbm = int(power)
        sim.emit("TxStart", src.actor, to=dst.actor, what=_label(mpdu),
                 origin=mpdu.original_source.node_id, power_dbm=power, attempt=attempt)
        sim.at(now + cfg.t_nn_s, self._hop_end, src, dst, mpdu, power, on_result, listeners, collision)

    def _hop_end(self, src, dst, mpdu, power, on_result, listeners, collision):
        sim, medium = self.sim, self.medium
        sim.emit("TxEnd", src.actor)
        got = None
        if src.alive and dst.alive and not collision and self._link_ok(src, dst):
            got, detected = medium.transfer(mpdu, src.position_m, dst.position_m, power)
            if got is None and detected:
                sim.emit("RxDetect", dst.actor, src=src.actor, decoded=False)
        if got is not None:
            sim.emit("RxDecoded", dst.actor, src=src.actor, what=_label(got))
        else:
            self.failures += 1
        heard = []
        for l in listeners:
            if l is not None and l.alive and src.alive and self._link_ok(src, l):
                g, _ = medium.transfer(mpdu, src.position_m, l.position_m, power)
                if g is not None:
                    heard.append((l, g))
        sim.at(sim.now + self.cfg.t_il_s, self._hop_done, src, dst, got, on_result, heard)

    def _hop_done(self, src, dst, got, on_result, heard):
        if got is not None and dst.alive:
            self._deliver(dst, got, src)
        for l, g in heard:
            if l.alive:
                self._overhear(l, g, src)
        on_result(got is not None)

    def _reliable(self, src, dst, mpdu, power, done: Callable, listeners=(), attempt: int = 0):
        """Send with up to ``retry_limit`` retransmissions; ``done(ok)``."""
        def result(ok):
            if ok or not src.alive:
                done(ok and src.alive)
            elif attempt < self.cfg.retry_limit:
                self.retries += 1
                self._reliable(src, dst, mpdu, power, done, listeners, attempt + 1)
            else:
                done(False)
        self._send(src, dst, mpdu, power, result, listeners, attempt)

    def _try_neighbors(self, st: Station, entries: list, build: Callable, done: Callable,
                       power_floor: Optional[Callable] = None):
        """Walk ``entries`` closest first until one hop succeeds; ``done(station or None)``.

        Neighbors that exhaust the retry budget are marked inactive and reported.
        """
        if not entries or not st.alive:
            done(None)
            return
        e = entries[0]
        dst = self._resolve(e.sensor_id)
        power = self._tx_power(e) if power_floor is None else max(self._tx_power(e), power_floor(dst))

        def result(ok):
            if not st.alive:
                return
            if ok:
                e.last_seen_ms = int(self.sim.now * 1000) & 0xFFFFFFFF
                done(dst)
            else:
                self._neighbor_lost(st, e)
                self._try_neighbors(st, entries[1:], build, done, power_floor)
        self._reliable(st, dst, build(dst), power, result)

    def _neighbor_lost(self, st: Station, e: NeighborEntry) -> None:
        if not e.active:
            return
        e.active = False
        lost = e.address.node_id if e.address is not None else -1
        if st.is_coordinator:
            self._node_failed(lost, st.actor)
            return
        if lost == 0:
            return
        note = Management(Command.NEIGHBOR_INACTIVE, lost.to_bytes(3, "big"))
        st.state.pending_event_buckets.append(
            self._mpdu(st, self.master, note, final=self.master.address))

    def _node_failed(self, node_id: int, reporter: str) -> None:
        m = self.master
        if node_id in m.cstate.active_nodes:
            m.cstate.active_nodes.discard(node_id)
            self.warnings.append((self.sim.now, node_id, reporter))
            self.sim.emit("Warning", m.actor, reason="node-failure", node=node_id, reporter=reporter)
            if self.standby is not None:
                self.standby.cstate.active_nodes.discard(node_id)

    # -- receive dispatch --------------------------------------------------
    def _deliver(self, dst: Station, m: Mpdu, src: Station) -> None:
        if dst.is_coordinator:
            self._mirror(m)
        if isinstance(m.msdu, MeasurementData):
            if dst.is_coordinator:
                self._coordinator_data(dst, m, src)
            else:
                self._node_data(dst, m, src)
        elif isinstance(m.msdu, Management):
            cmd = m.msdu.command
            if cmd is Command.GLOBAL_DATA_REQUEST:
                self._on_request(dst, m, src)
            elif cmd is Command.NODE_DATA_REQUEST:
                self._on_data_request(dst, m, src)
            # chained commands are handled by the sender's callback; others are no-ops

    def _mirror(self, m: Mpdu) -> None:
        sb = self.standby
        if sb is not None and sb.alive and sb.cstate.role is Role.STANDBY:
            sb.traffic_log.append((self.sim.now, m.original_source.node_id, _label(m), m.timestamp_ms))
            if isinstance(m.msdu, MeasurementData):
                sb.cstate.measurement_log.setdefault(m.timestamp_ms, {})[m.original_source.node_id] = m.msdu

    def _overhear(self, st: Station, m: Mpdu, src: Station) -> None:
        # a node overhearing its parent's own reading takes it as the data request
        cyc = self.cycle
        if (cyc is None or st.cycle_id != cyc.id or not isinstance(m.msdu, MeasurementData)
                or src is not st.parent or m.original_source != src.address):
            return
        st.triggered = True
        if st.ready:
            self._send_own(st)

    # -- association -------------------------------------------------------
    def start_association(self, expected: Optional[int] = None) -> None:
        for n in self.nodes:
            if n.state.address is not None:
                raise ProtocolError("association needs every node unassociated")
        rep = AssociationReport({}, [], None, start_s=self.sim.now)
        self._assoc = _Assoc(rep, len(self.nodes) if expected is None else expected)
        self.association = rep
        self.sim.emit("StateChange", self.master.actor, phase="Associating")
        self._ramp(self.master, self.cfg.ramp)

    def _ramp(self, st: Station, levels: list) -> None:
        if not st.alive:
            return
        if not levels:
            self._ramp_done(st)
            return
        p = levels[0]
        hello = self._mpdu(st, None, Management(Command.HELLO_NEIGHBOR, bytes([p & 0xFF])))
        st.tx_until = self.sim.now + self.cfg.t_nn_s
        st.tx_s += self.cfg.t_nn_s
        st.state.tx_power_dbm = p
        self.attempts += 1
        self.sim.emit("TxStart", st.actor, to="broadcast", what="HELLO_NEIGHBOR", origin=st.node_id,
                      power_dbm=p, attempt=0)
        self.sim.at(self.sim.now + self.cfg.t_nn_s, self._hello_end, st, levels, hello)

    def _hello_end(self, st: Station, levels: list, hello: Mpdu) -> None:
        sim, p = self.sim, levels[0]
        sim.emit("TxEnd", st.actor)
        repliers = []
        for cand in self._candidates(st, p):
            if cand.is_coordinator or not self._link_ok(st, cand):
                continue
            unassociated = cand.state.address is None
            if cand.state.entry(st.sid) is not None and (not unassociated or st.state.entry(cand.sid)):
                continue
            got, _ = self.medium.transfer(hello, st.position_m, cand.position_m, p)
            if got is None:
                continue
            rssi = self.medium.rssi_dbm(p, abs(cand.position_m - st.position_m))
            sim.emit("RxDecoded", cand.actor, src=st.actor, what="HELLO_NEIGHBOR")
            cand.state.record(NeighborEntry(
                st.address, Direction.UPSTREAM if unassociated else Direction.DOWNSTREAM, p,
                int(sim.now * 1000) & 0xFFFFFFFF, True, st.sid, rssi))
            if unassociated:
                repliers.append((-rssi, cand.index, cand))
        repliers.sort(key=lambda r: r[:2])
        after = lambda: sim.at(sim.now + self.cfg.t_il_s, self._ramp, st, levels[1:])
        self._replies(st, [r[2] for r in repliers], p, after)

    def _replies(self, st: Station, repliers: list, p: int, then: Callable) -> None:
        if not repliers:
            then()
            return
        cand = repliers[0]
        if cand.state.phase is Phase.UNASSOCIATED:
            self._phase(cand, Phase.ASSOCIATING)
        req = self._mpdu(cand, st, Management(Command.ASSOCIATION_REQUEST, _short_id(cand.sid)))

        def result(ok):
            if ok:
                rssi = self.medium.rssi_dbm(p, abs(cand.position_m - st.position_m))
                st.state.record(NeighborEntry(None, Direction.DOWNSTREAM, p,
                                              int(self.sim.now * 1000) & 0xFFFFFFFF, True, cand.sid, rssi))
            self._replies(st, repliers[1:], p, lambda: then())
        self._reliable(cand, st, req, p, result)

    def _ramp_done(self, st: Station) -> None:
        fresh = [e for e in st.state.neighbors(Direction.DOWNSTREAM, active_only=False)
                 if self._resolve(e.sensor_id).state.address is None]
        self._authorize(st, fresh)

    def _authorize(self, st: Station, fresh: list) -> None:
        a = self._assoc
        if not fresh:
            self._association_end(st)
            return
        e = fresh[0]
        node = self._resolve(e.sensor_id)
        nid = a.next_id
        setid = self._mpdu(st, node, Management(Command.SET_NODE_ID_NET_ID,
                                                Address(self.cfg.net_id, nid).pack()),
                           final=Address.unpack(_short_id(node.sid)))

        def assigned(ok):
            if not ok:
                self._authorize(st, fresh[1:])
                return
            a.next_id += 1
            self._assign(node, Address(self.cfg.net_id, nid))
            start = self._mpdu(st, node, Management(Command.ASSOCIATION_START))
            self._reliable(st, node, start, self._tx_power(e), started)

        def started(ok):
            if not ok:
                self._authorize(st, fresh[1:])
                return
            self._phase(st, Phase.IDLE)
            self._ramp(node, self.cfg.ramp)
        self._reliable(st, node, setid, self._tx_power(e), assigned)

    def _assign(self, node: Station, addr: Address) -> None:
        node.state.address = addr
        a = self._assoc
        a.report.assigned[node.index] = addr.node_id
        a.report.order.append(node.index)
        # neighbors are always listening, so every table holding this node learns its address
        for s in self._stations():
            e = s.state.entry(node.sid)
            if e is not None:
                e.address = addr
        if self.standby is not None:
            e = self.standby.state.entry(node.sid)
            if e is not None:
                e.address = addr
        self.sim.emit("StateChange", node.actor, phase=node.state.phase.value, assigned=addr.node_id)

    def _association_end(self, last: Station) -> None:
        a = self._assoc
        self._phase(last, Phase.IDLE)
        a.report.last_node = last.node_id if not last.is_coordinator else None
        if last.is_coordinator:
            self._association_complete(0)
            return
        end = self._mpdu(last, self.master, Management(Command.ASSOCIATION_END, last.node_id.to_bytes(3, "big")),
                         final=self.master.address)
        self.sim.emit("StateChange", last.actor, phase="Idle", note="association-end")
        self._relay_up(last, end, lambda ok: self._association_complete(last.node_id if ok else -1))

    def _association_complete(self, last_id: int) -> None:
        a = self._assoc
        m = self.master
        ids = set(a.report.assigned.values())
        m.cstate.active_nodes = set(ids)
        if self.standby is not None:
            self.standby.cstate.active_nodes = set(ids)
            self.standby.state.neighbor_table = [NeighborEntry(**vars(e)) for e in m.state.neighbor_table]
        a.report.end_s = self.sim.now
        a.report.stalled = len(ids) < a.expected
        a.done = True
        self.sim.emit("StateChange", m.actor, phase="Idle", note="association-complete",
                      nodes=len(ids), last=last_id)
        if a.report.stalled:
            self.sim.emit("Warning", m.actor, reason="association-stalled",
                          reached=len(ids), expected=a.expected)

    def preassign(self) -> None:
        """Assign addresses in queue order and fill neighbor tables without airtime."""
        levels = self.cfg.ramp
        hello = Mpdu(Management(Command.HELLO_NEIGHBOR))
        for k, n in enumerate(self.nodes, start=1):
            n.state.address = Address(self.cfg.net_id, k)
            n.state.phase = Phase.IDLE
        for st in self._stations():
            for cand in self._candidates(st, levels[-1]):
                if cand.is_coordinator and st.is_coordinator:
                    continue
                for p in levels:
                    got, _ = self.medium.transfer(hello, st.position_m, cand.position_m, p)
                    if got is not None:
                        d = Direction.DOWNSTREAM if cand.node_id > st.node_id else Direction.UPSTREAM
                        rssi = self.medium.rssi_dbm(p, abs(cand.position_m - st.position_m))
                        st.state.record(NeighborEntry(cand.address, d, p, 0, True, cand.sid, rssi))
                        break
        ids = {n.node_id for n in self.nodes}
        self.master.cstate.active_nodes = set(ids)
        if self.standby is not None:
            self.standby.cstate.active_nodes = set(ids)
            self.standby.state.neighbor_table = [NeighborEntry(**vars(e)) for e in self.master.state.neighbor_table]
        self.association = AssociationReport({n.index: n.node_id for n in self.nodes},
                                             [n.index for n in self.nodes],
                                             self.nodes[-1].node_id if self.nodes else None,
                                             self.sim.now, self.sim.now)

    # -- multi-hop relays --------------------------------------------------
    def _relay_up(self, st: Station, m: Mpdu, done: Callable) -> None:
        """Carry ``m`` hop by hop to the master; ``done(ok)``."""
        def arrived(dst):
            if dst is None:
                done(False)
            elif dst.is_coordinator:
                self._mirror(m)
                done(True)
            else:
                self._relay_up(dst, m, done)
        build = lambda d: Mpdu(m.msdu, m.original_source, m.final_destination,
                               d.address, st.address, m.timestamp_ms)
        self._try_neighbors(st, st.state.neighbors(Direction.UPSTREAM), build, arrived)

    def _relay_down(self, st: Station, m: Mpdu, target: int, visit: Callable, done: Callable) -> None:
        """Carry ``m`` toward NodeID ``target``, calling ``visit`` at every node reached."""
        if not st.is_coordinator:
            visit(st)
        if st.node_id >= target:
            done(st)
            return
        ahead = [e for e in st.state.neighbors(Direction.DOWNSTREAM)
                 if e.address is not None and e.address.node_id <= target]

        def arrived(dst):
            if dst is None:
                done(None)
            else:
                self._relay_down(dst, m, target, visit, done)
        build = lambda d: Mpdu(m.msdu, m.original_source, m.final_destination,
                               d.address, st.address, m.timestamp_ms)
        self._try_neighbors(st, ahead, build, arrived)

    # -- measurement cycle -------------------------------------------------
    def analytic_latency_s(self, n: Optional[int] = None) -> float:
        from .analytics import LatencyInputs, latency_estimate
        n = len(self.master.cstate.active_nodes) if n is None else n
        return latency_estimate(LatencyInputs(max(n, 1), self.cfg.t_nn_s, self.cfg.t_il_s, self.cfg.t_acq_s))

    def start_cycle(self) -> CycleReport:
        m, sim, cfg = self.master, self.sim, self.cfg
        if self.cycle is not None:
            raise ProtocolError("a measurement cycle is already running")
        if not m.alive or m.cstate.role is not Role.MASTER:
            raise ProtocolError("no live master coordinator")
        active = sorted(m.cstate.active_nodes)
        n = len(active)
        now = sim.now
        ts = int(round(now * 1000)) & 0xFFFFFFFF
        deadline = now + cfg.deadline_factor * self.analytic_latency_s(n)
        rep = CycleReport(self._cycle_count, ts, now, tuple(active), active[-1] if active else 0, deadline)
        cyc = _Cycle(self._cycle_count, rep, now + n * cfg.hop_s)
        self._cycle_count += 1
        self._last_cycle_start = now
        self.cycle = cyc
        m.reset_cycle(cyc.id)
        m.cstate.pending_replies = set(active)
        m.cstate.cycle_timer_ms = deadline * 1000
        sim.emit("CycleStart", m.actor, cycle=cyc.id, timestamp_ms=ts, expected=n, deadline_s=deadline)
        if not active:
            self._end_cycle()
            return rep
        # the request is addressed to the deepest active node; the payload is the
        # acquisition instant relative to the request, in units of 10 ns
        payload = min(int(round(n * cfg.hop_s * 1e8)), 0xFFFFFFFF).to_bytes(4, "big")
        req = self._mpdu(m, None, Management(Command.GLOBAL_DATA_REQUEST, payload),
                         final=Address(cfg.net_id, rep.deepest),
                         timestamp_ms=ts)
        self._forward_request(m, req)
        # the coordinator's own "data request" to its child is the acquisition instant itself
        sim.at(cyc.acq_at + cfg.t_acq_s + (cfg.retry_limit + 2) * cfg.hop_s, self._watchdog, m, cyc.id)
        sim.at(deadline, self._deadline, cyc.id)
        return rep

    def _forward_request(self, st: Station, req: Mpdu) -> None:
        cyc = self.cycle
        deepest = cyc.report.deepest
        ahead = [e for e in st.state.neighbors(Direction.DOWNSTREAM)
                 if e.address is not None and e.address.node_id <= deepest]
        build = lambda d: Mpdu(req.msdu, req.original_source, req.final_destination,
                               d.address, st.address, req.timestamp_ms)

        def done(child):
            if self.cycle is cyc and st.cycle_id == cyc.id:
                st.child = child
        self._try_neighbors(st, ahead, build, done)

    def _on_request(self, node: Station, req: Mpdu, src: Station) -> None:
        cyc = self.cycle
        if (node.is_coordinator or cyc is None or node.cycle_id == cyc.id
                or req.timestamp_ms != cyc.report.timestamp_ms or node.state.phase is not Phase.IDLE):
            return
        node.reset_cycle(cyc.id)
        node.parent = src
        if node.sleep_since is not None:
            node.sleep_s += self.sim.now - node.sleep_since
            node.sleep_since = None
        self._phase(node, Phase.MEASURING)
        start = max(self.sim.now, cyc.acq_at)
        self.sim.at(start + self.cfg.t_acq_s, self._acquired, node, cyc.id)
        if node.node_id < cyc.report.deepest:
            self._forward_request(node, req)

    def _acquired(self, node: Station, cid: int) -> None:
        cyc = self.cycle
        if cyc is None or cyc.id != cid or node.cycle_id != cid or not node.alive:
            return
        p = int(self.rng.integers(20_000_000, 40_000_000))
        t = int(self.rng.integers(300, 600))
        node.reading = MeasurementData(p, t)
        node.ready = True
        if node.triggered or (node.parent is not None and node.parent.is_coordinator):
            self._send_own(node)

    def _send_own(self, node: Station) -> None:
        cyc = self.cycle
        if node.sent_own or not node.ready or cyc is None or node.cycle_id != cyc.id:
            return
        node.sent_own = True
        if node.state.phase is Phase.MEASURING:
            self._phase(node, Phase.AWAITING_ACK)
        mpdu = self._mpdu(node, node.parent, node.reading, final=self.master.address,
                          timestamp_ms=cyc.report.timestamp_ms)
        self._upload(node, mpdu, own=True)

    def _upload(self, node: Station, mpdu: Mpdu, own: bool = False) -> None:
        """Send ``mpdu`` to the cycle parent, falling back to farther upstream neighbors."""
        if node.busy:
            node.queue.append((mpdu, own))
            return
        cyc = self.cycle
        if cyc is None or node.cycle_id != cyc.id or node.parent is None:
            return
        node.busy = True
        child = node.child if own else None
        parent = node.parent
        power = self._power_to(node, parent)
        if child is not None:
            power = max(power, self._power_to(node, child))
        out = Mpdu(mpdu.msdu, mpdu.original_source, mpdu.final_destination, parent.address,
                   node.address, mpdu.timestamp_ms)

        def result(ok):
            node.busy = False
            if not node.alive or self.cycle is not cyc or node.cycle_id != cyc.id:
                return
            if not ok:
                e = node.state.entry(parent.sid)
                if e is not None:
                    self._neighbor_lost(node, e)
                ups = node.state.neighbors(Direction.UPSTREAM)
                node.parent = self._resolve(ups[0].sensor_id) if ups else None
                if node.parent is not None:
                    node.queue.appendleft((mpdu, own))
            elif own and node.state.phase is Phase.AWAITING_ACK:
                if node.child is not None:
                    self._phase(node, Phase.RELAYING_UP)
                    self.sim.at(self.sim.now + (self.cfg.retry_limit + 2) * self.cfg.hop_s,
                                self._watchdog, node, cyc.id)
                else:
                    self._phase(node, Phase.IDLE)
            elif (mpdu.original_source.node_id == cyc.report.deepest
                  and node.state.phase is Phase.RELAYING_UP):
                self._phase(node, Phase.IDLE)
            if node.queue:
                self._upload(node, *node.queue.popleft())
        self._reliable(node, parent, out, power, result, listeners=(child,) if child else ())

    def _node_data(self, node: Station, m: Mpdu, src: Station) -> None:
        cyc = self.cycle
        if cyc is None or node.cycle_id != cyc.id or m.timestamp_ms != cyc.report.timestamp_ms:
            return
        if src.node_id > node.node_id:
            if src is not node.child:
                node.child = src
            node.got_child = True
        self._upload(node, m)

    def _coordinator_data(self, m_st: Coordinator, m: Mpdu, src: Station) -> None:
        cyc = self.cycle
        if m_st is not self.master or cyc is None or m.timestamp_ms != cyc.report.timestamp_ms:
            return
        nid = m.original_source.node_id
        rep = cyc.report
        if src is m_st.child or m_st.child is None:
            m_st.child = src
            m_st.got_child = True
        if nid in rep.readings:
            return
        rep.readings[nid] = m.msdu
        rep.order.append(nid)
        rep.arrivals[nid] = self.sim.now
        m_st.cstate.pending_replies.discard(nid)
        if not m_st.cstate.pending_replies or nid == rep.deepest:
            self._end_cycle()

    def _watchdog(self, st: Station, cid: int) -> None:
        cyc = self.cycle
        if cyc is None or cyc.id != cid or st.cycle_id != cid or not st.alive:
            return
        if st.got_child or st.child is None:
            return
        child = st.child
        deepest = cyc.report.deepest
        ahead = [e for e in st.state.neighbors(Direction.DOWNSTREAM)
                 if e.address is not None and child.node_id <= e.address.node_id <= deepest]
        ask = Management(Command.NODE_DATA_REQUEST)
        build = lambda d: self._mpdu(st, d, ask, timestamp_ms=cyc.report.timestamp_ms)

        def done(dst):
            if self.cycle is not cyc or st.got_child:
                return
            st.child = dst
            if dst is None:
                if not st.is_coordinator and not st.busy and not st.queue:
                    if st.state.phase is Phase.RELAYING_UP:
                        self._phase(st, Phase.IDLE)
                elif st.is_coordinator:
                    self._end_cycle()
                return
            self.sim.at(self.sim.now + self.cfg.t_acq_s + (self.cfg.retry_limit + 2) * self.cfg.hop_s,
                        self._watchdog, st, cid)
        self._try_neighbors(st, ahead, build, done)

    def _on_data_request(self, node: Station, m: Mpdu, src: Station) -> None:
        cyc = self.cycle
        if node.is_coordinator or cyc is None or m.timestamp_ms != cyc.report.timestamp_ms:
            return
        if node.cycle_id != cyc.id:
            # never saw the broadcast request: join late and pass it on
            req = Mpdu(Management(Command.GLOBAL_DATA_REQUEST), m.original_source, BROADCAST,
                       node.address, src.address, m.timestamp_ms)
            self._on_request(node, req, src)
            if node.cycle_id != cyc.id:
                return
        node.parent = src
        node.triggered = True
        if node.ready:
            self._send_own(node)

    def _deadline(self, cid: int) -> None:
        cyc = self.cycle
        if cyc is not None and cyc.id == cid:
            cyc.report.deadline_hit = True
            self._end_cycle()

    def _end_cycle(self) -> None:
        cyc, m, sim = self.cycle, self.master, self.sim
        rep = cyc.report
        rep.end_s = sim.now
        missing = [n.node_id for n in self.nodes if n.node_id not in rep.readings]
        rep.lost_to_faults = tuple(sorted(i for i in missing
                                          if i not in rep.expected or not self.station(i).alive))
        rep.timed_out = tuple(sorted(set(missing) - set(rep.lost_to_faults)))
        m.cstate.measurement_log[rep.timestamp_ms] = dict(rep.readings)
        if m.alive:
            # a dead master's cycle just lapses at the deadline
            sim.emit("CycleEnd", m.actor, cycle=cyc.id, timestamp_ms=rep.timestamp_ms,
                     delivered=rep.delivered, latency_s=rep.latency_s, order=list(rep.order),
                     timed_out=list(rep.timed_out), lost=list(rep.lost_to_faults),
                     deadline_hit=rep.deadline_hit)
            if rep.timed_out:
                sim.emit("Warning", m.actor, reason="cycle-timeout", pending=list(rep.timed_out))
        self.cycle = None
        self.reports.append(rep)
        for n in self.nodes:
            if n.alive and n.state.phase in (Phase.MEASURING, Phase.AWAITING_ACK, Phase.RELAYING_UP):
                self._phase(n, Phase.IDLE)
            if n.alive and self.cfg.sleep_between_cycles and n.state.phase is Phase.IDLE:
                n.sleep_since = sim.now
            n.cycle_id = None
        m.cycle_id = None
        self._event_period()

    # -- event period ------------------------------------------------------
    @property
    def event_window_s(self) -> float:
        w = self.cfg.event_window_s
        return self.cfg.t_nn_s * max(len(self.nodes), 1) if w is None else w

    def _event_period(self) -> None:
        self._events_running = True
        self._event_close = self.sim.now + self.event_window_s
        self._event_round(0)

    def _event_round(self, rounds: int) -> None:
        intents = [Intent(n.node_id, event=True, tag=n) for n in self.nodes
                   if n.alive and n.state.pending_event_buckets]
        if not intents or rounds > len(self.nodes) + 2:
            self._events_done()
            return
        sched = arbitrate(intents, CyclePhase.EVENT_PERIOD, self.cfg.csma, self.rng,
                          airtime_us=self.cfg.t_nn_s * 1e6)
        self.collisions += sched.collisions
        self._event_slots(list(sched.slots), rounds)

    def _event_slots(self, slots: list, rounds: int) -> None:
        if not slots:
            self._event_round(rounds + 1)
            return
        slot, rest = slots[0], slots[1:]
        c = self.cfg.csma
        wait = (c.cifs_us + c.prp_slots * c.backoff_slot_us + slot.backoff_slots * c.backoff_slot_us) * 1e-6
        node = slot.intent.tag
        self.sim.at(self.sim.now + wait, self._event_send, node, rest, rounds)

    def _event_send(self, node: Station, rest: list, rounds: int) -> None:
        q = node.state.pending_event_buckets
        if not q or not node.alive:
            self._event_slots(rest, rounds)
            return
        m = q.popleft()

        def done(ok):
            if ok:
                self._coordinator_event(m)
            self._event_send(node, rest, rounds) if q else self._event_slots(rest, rounds)
        self._relay_up(node, m, done)

    def _coordinator_event(self, m: Mpdu) -> None:
        cmd = m.msdu.command
        if cmd is Command.NEIGHBOR_INACTIVE:
            self._node_failed(m.msdu.payload_int(3), str(m.original_source))

    def _events_done(self) -> None:
        self._events_running = False
        if self._deferred_orphans:
            node, rep = self._deferred_orphans.pop(0)
            self._orphan_start(node, rep)
            return
        self._schedule_next_cycle()

    def _schedule_next_cycle(self) -> None:
        t = max(self.sim.now, self._event_close)
        if self.cfg.cycle_interval_s is not None:
            t = max(t, self._last_cycle_start + self.cfg.cycle_interval_s)
        if t < self._until and not self.halted:
            self.sim.at(t, self._cycle_tick)

    def _cycle_tick(self) -> None:
        m = self.master
        if self.cycle is not None or self._events_running or self.halted:
            return
        if m.alive and m.cstate.role is Role.MASTER and self.sim.now < self._until:
            self.start_cycle()

    def run_cycles(self, until_s: float, first_at: Optional[float] = None) -> None:
        """Repeat measurement cycles back to back (or at ``cycle_interval_s``) until ``until_s``."""
        self._until = until_s
        self._event_close = -math.inf
        self.sim.at(self.sim.now if first_at is None else first_at, self._cycle_tick)

    # -- orphans -----------------------------------------------------------
    def restore_orphan(self, node: Station) -> OrphanReport:
        """Bring a silenced node back; it declares itself orphan and asks to rejoin."""
        if node.alive:
            raise ProtocolError(f"{node.actor} is not silenced")
        self._power_on(node)
        self._phase(node, Phase.ORPHAN)
        return self.handle_orphan(node)

    def handle_orphan(self, node: Station) -> OrphanReport:
        rep = OrphanReport(node.node_id, self.sim.now)
        self.orphans.append(rep)
        if node.state.phase is not Phase.ORPHAN:
            self._phase(node, Phase.ORPHAN)
        if self.cycle is not None or self._events_running:
            rep.deferred = True
            self._deferred_orphans.append((node, rep))
            self.sim.emit("StateChange", node.actor, phase="Orphan", note="recovery-deferred")
        else:
            self._orphan_start(node, rep)
        return rep

    def _orphan_start(self, node: Station, rep: OrphanReport) -> None:
        self._events_running = True
        self._orphan_ramp(node, rep, self.cfg.ramp)

    def _orphan_ramp(self, node: Station, rep: OrphanReport, levels: list) -> None:
        sim = self.sim
        if not levels:
            rep.unreachable = True
            rep.end_s = sim.now
            sim.emit("Warning", node.actor, reason="orphan-unreachable", node=node.node_id)
            self._events_done()
            return
        p = levels[0]
        req = self._mpdu(node, None, Management(
            Command.ASSOCIATION_REQUEST, _short_id(node.sid)),
            final=self.master.address)
        node.tx_s += self.cfg.t_nn_s
        self.attempts += 1
        sim.emit("TxStart", node.actor, to="broadcast", what="ASSOCIATION_REQUEST", origin=node.node_id,
                 power_dbm=p, attempt=0)
        heard = []
        for cand in self._candidates(node, p):
            if not self._link_ok(node, cand) or cand.state.phase in (Phase.ORPHAN, Phase.FAILED):
                continue
            if not cand.is_coordinator and cand.state.address is None:
                continue
            got, _ = self.medium.transfer(req, node.position_m, cand.position_m, p)
            if got is not None:
                heard.append(cand)
        sim.at(sim.now + self.cfg.hop_s, self._orphan_heard, node, rep, levels, req, heard)

    def _orphan_heard(self, node, rep, levels, req, heard) -> None:
        self.sim.emit("TxEnd", node.actor)
        if not heard:
            self._orphan_ramp(node, rep, levels[1:])
            return
        relay = min(heard, key=lambda s: (s.node_id, s.index))
        rep.relay = relay.actor
        self.sim.emit("RxDecoded", relay.actor, src=node.actor, what="ASSOCIATION_REQUEST")
        if relay.is_coordinator:
            self._orphan_accepted(node, rep)
        else:
            self._relay_up(relay, req, lambda ok: self._orphan_accepted(node, rep) if ok else
                           self._orphan_failed(node, rep))

    def _orphan_failed(self, node, rep) -> None:
        rep.unreachable = True
        rep.end_s = self.sim.now
        self.sim.emit("Warning", node.actor, reason="orphan-unreachable", node=node.node_id)
        self._events_done()

    def _orphan_accepted(self, node: Station, rep: OrphanReport) -> None:
        m = self.master
        nid = node.node_id
        m.cstate.active_nodes.add(nid)
        if self.standby is not None:
            self.standby.cstate.active_nodes.add(nid)
        e = m.state.entry(node.sid)
        if e is not None:
            e.active = True
        self.sim.emit("StateChange", m.actor, note="node-readded", node=nid)
        ups = [x for x in node.state.neighbors(Direction.UPSTREAM, active_only=False) if x.address is not None]
        downs = [x for x in node.state.neighbors(Direction.DOWNSTREAM, active_only=False)
                 if x.address is not None and self._resolve(x.sensor_id).alive]
        target = downs[0].address.node_id if downs else (ups[0].address.node_id if ups else 0)
        note = self._mpdu(m, None, Management(Command.NODE_ACTIVE, nid.to_bytes(3, "big")))

        def visit(st):
            x = st.state.entry(node.sid)
            if x is not None and not x.active:
                x.active = True
            if x is not None:
                rep.readded_by.append(st.node_id)

        def reached(st):
            if st is None or target == 0:
                self._orphan_confirm(m if st is None else st, node, rep)
                return
            self._orphan_confirm(st, node, rep)
        if target == 0:
            self._orphan_confirm(m, node, rep)
        else:
            self._relay_down(m, note, target, visit, reached)

    def _orphan_confirm(self, st: Station, node: Station, rep: OrphanReport) -> None:
        msg = self._mpdu(st, node, Management(Command.SET_NODE_ID_NET_ID, node.address.pack()))

        def done(ok):
            rep.end_s = self.sim.now
            if ok:
                for x in node.state.neighbor_table:
                    x.active = True
                self._phase(node, Phase.IDLE)
                rep.rejoined = True
            else:
                self.sim.emit("Warning", node.actor, reason="orphan-unreachable", node=node.node_id)
                rep.unreachable = True
            self._events_done()
        self._reliable(st, node, msg, self._power_to(st, node), done)

    # -- faults ------------------------------------------------------------
    def _power_off(self, st: Station) -> None:
        if st.alive:
            st.alive = False
            st.off_since = self.sim.now

    def _power_on(self, st: Station) -> None:
        if not st.alive:
            st.alive = True
            st.off_s += self.sim.now - st.off_since
            st.off_since = None

    def fail_node(self, node: Station) -> None:
        self._power_off(node)
        if node.state.phase is not Phase.FAILED:
            old = node.state.phase
            node.state.phase = Phase.FAILED
            self.sim.emit("StateChange", node.actor, phase="Failed", previous=old.value)

    def cut_link(self, a: Station, b: Station) -> None:
        self.cut.add(frozenset((a.index, b.index)))

    def fail_master(self) -> FailoverReport:
        rep = FailoverReport(self.sim.now)
        self.failovers.append(rep)
        old = self.master
        self._power_off(old)
        if self.standby is None or not self.standby.alive:
            rep.halted = True
            self.halted = True
            self.sim.emit("Warning", old.actor, reason="network-halted",
                          note="coordinator failed with no standby")
        return rep

    # -- heartbeats and failover -------------------------------------------
    def start_heartbeats(self, until_s: float, period_s: Optional[float] = None) -> None:
        p = self.cfg.heartbeat_cycles * self.analytic_latency_s() if period_s is None else period_s
        self.heartbeat_period_s = p
        self._hb_until = until_s
        self.master.cstate.heartbeat_period_ms = p * 1000
        self.master.last_heartbeat_s = self.sim.now
        if self.standby is not None:
            self.standby.last_heartbeat_s = self.sim.now
            self.standby.cstate.heartbeat_period_ms = p * 1000
        self.sim.at(self.sim.now + p, self._heartbeat)

    def _heartbeat(self) -> None:
        sim, m, sb = self.sim, self.master, self.standby
        if sim.now > self._hb_until:
            return
        p = self.heartbeat_period_s
        if m.alive and sb is not None:
            # colocated wired link: no channel, no contention
            sim.emit("TxStart", m.actor, to=sb.actor, what="COORDINATOR_ALIVE_AND_READY", origin=0,
                     power_dbm=None, attempt=0)
            if sb.alive:
                sb.last_heartbeat_s = sim.now
        if sb is not None and sb.alive and sb.cstate.role is Role.STANDBY:
            missed = int(round((sim.now - sb.last_heartbeat_s) / p))
            if missed >= self.cfg.missed_heartbeats:
                self._promote(missed)
                return
        if self.standby is not None or m.alive:
            sim.at(sim.now + p, self._heartbeat)

    def _promote(self, missed: int) -> None:
        sim = self.sim
        old, new = self.master, self.standby
        new.cstate.role = Role.MASTER
        old.cstate.role = Role.STANDBY
        new.state.neighbor_table = [NeighborEntry(**vars(e)) for e in old.state.neighbor_table]
        for k, v in old.cstate.measurement_log.items():
            new.cstate.measurement_log.setdefault(k, dict(v))
        self.master, self.standby = new, None
        for rep in self.failovers:
            if rep.promoted_s is None and not rep.halted:
                rep.promoted_s = sim.now
                rep.new_master = new.actor
                rep.missed_heartbeats = missed
        sim.emit("StateChange", new.actor, role=Role.MASTER.value, previous=old.actor, missed=missed)
        # announce so nodes that wrote the coordinator off re-enable it
        sim.emit("TxStart", new.actor, to="broadcast", what="COORDINATOR_ALIVE_AND_READY", origin=0,
                 power_dbm=self.cfg.ramp_stop_dbm, attempt=0)
        for n in self.nodes:
            e = n.state.entry(COORDINATOR_SID)
            if e is not None:
                e.active = True
        if self.cycle is not None:
            self.cycle.report.deadline_hit = True
            self._end_cycle()
        elif not self._events_running:
            self._cycle_tick()

    # -- energy ------------------------------------------------------------
    def state_durations(self, st: Station, total_s: float) -> dict:
        off = st.off_s + (total_s - st.off_since if st.off_since is not None else 0.0)
        sleep = st.sleep_s + (total_s - st.sleep_since if st.sleep_since is not None else 0.0)
        tx = st.tx_s
        return {"tx": tx, "idle": total_s - tx - off - sleep, "sleep": sleep, "off": off}


# ---------------------------------------------------------------------------
# operation-level entry points

def run_association(net: Network, expected: Optional[int] = None) -> AssociationReport:
    net.start_association(expected)
    net.sim.run(stop=lambda: net._assoc.done)
    rep = net._assoc.report
    if not net._assoc.done:
        raise ProtocolError("association did not finish")
    if rep.stalled:
        last = max(rep.assigned.values(), default=0)
        raise AssociationStalled(f"association stopped after node {last} of {net._assoc.expected}",
                                 last, rep)
    return rep


def run_measurement_cycle(net: Network, strict: bool = False) -> CycleReport:
    """One cycle plus its event period. ``strict`` raises CycleTimeout on missing replies."""
    net._until = -math.inf
    rep = net.start_cycle()
    net.sim.run(stop=lambda: net.cycle is None and not net._events_running)
    if strict and rep.timed_out:
        raise CycleTimeout(f"no reply from nodes {list(rep.timed_out)}", rep)
    return rep


def handle_orphan(net: Network, node: Station) -> OrphanReport:
    rep = net.restore_orphan(node) if not node.alive else net.handle_orphan(node)
    net.sim.run(stop=lambda: not math.isnan(rep.end_s))
    if rep.unreachable:
        raise OrphanUnreachable(f"{node.actor} has no reachable neighbor")
    return rep


def coordinator_failover(net: Network, until_s: float) -> FailoverReport:
    """Stop the master now and run until ``until_s``; the standby promotes if configured."""
    rep = net.fail_master()
    net.sim.run(until=until_s, stop=lambda: rep.promoted_s is not None or rep.halted)
    return rep
