import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bucketline import protocol as pr
from bucketline.framecodec import Address, BucketType, MeasurementData
from bucketline.protocol import (
    CsmaParams, CyclePhase, Direction, Intent, NeighborEntry, NodeState, Phase,
)
from bucketline.simkernel import AbstractMedium, EnergyModel, Scenario, Simulator, simulate

from oracles import latency_reference

T_NN, T_IL = 0.3328e-3, 0.03328e-3


def _net(n=8, spacing=10.0, positions=None, **kw):
    sim = Simulator()
    pos = positions if positions is not None else [spacing * (i + 1) for i in range(n)]
    return sim, pr.Network(sim, AbstractMedium(), pos, **kw)


def _associated(n=8, **kw):
    sim, net = _net(n, **kw)
    pr.run_association(net)
    return sim, net


def min_power_oracle(distance_m, ramp=range(-5, 11), atten=0.3, floor=-5.0, sensitivity=-50.0):
    """Lowest ramp level whose received power clears both the noise floor and sensitivity."""
    for p in ramp:
        rx = p - atten * distance_m
        if rx - floor >= 0 and rx >= sensitivity:
            return p
    return None


def _intervals(log):
    """(start, end, sender, receiver) for every radio transmission."""
    open_tx, out = {}, []
    for e in log:
        if e.kind == "TxStart" and e.details.get("power_dbm") is not None:
            open_tx[e.actor] = (e.t, e.details["to"])
        elif e.kind == "TxEnd" and e.actor in open_tx:
            t0, to = open_tx.pop(e.actor)
            out.append((t0, e.t, e.actor, to))
    return out


# ---------------------------------------------------------------------------
# state records

def test_phase_edges():
    s = NodeState(1)
    s.transition(Phase.ASSOCIATING)
    with pytest.raises(pr.PhaseError):
        s.transition(Phase.IDLE)            # no address yet
    s.address = Address(1, 1)
    s.transition(Phase.IDLE)
    with pytest.raises(pr.PhaseError):
        s.transition(Phase.RELAYING_UP)     # must measure and await an ack first
    s.transition(Phase.MEASURING)
    s.transition(Phase.AWAITING_ACK)
    s.transition(Phase.RELAYING_UP)
    s.transition(Phase.IDLE)


def test_power_setting_resolution():
    s = NodeState(7)
    s.set_power(-50)
    s.set_power(10)
    for bad in (11, -51, 2.5):
        with pytest.raises(ValueError):
            s.set_power(bad)
    with pytest.raises(ValueError):
        NeighborEntry(None, Direction.UPSTREAM, 11)
    with pytest.raises(ValueError):
        NodeState(1 << 64)


def test_neighbor_table_closest_first():
    s = NodeState(1)
    for sid, p, rssi in [(1, 4, -8.0), (2, -2, -5.0), (3, 1, -6.0), (4, -2, -4.0)]:
        s.record(NeighborEntry(None, Direction.DOWNSTREAM, p, sensor_id=sid, rssi_dbm=rssi))
    assert [e.sensor_id for e in s.neighbor_table] == [4, 2, 3, 1]
    assert s.record(NeighborEntry(None, Direction.UPSTREAM, 0, sensor_id=2)).min_tx_power_dbm == -2


def test_csma_validation():
    with pytest.raises(ValueError):
        CsmaParams(cw_min=64, cw_max=8)
    with pytest.raises(ValueError):
        CsmaParams(cifs_us=0)


# ---------------------------------------------------------------------------
# association

def test_association_assigns_queue_order():
    sim, net = _net(8)
    rep = pr.run_association(net)
    assert rep.assigned == {i: i for i in range(1, 9)}
    assert rep.order == list(range(1, 9))
    assert rep.last_node == 8
    ends = [e for e in sim.log if e.kind == "TxStart" and e.details["what"] == "ASSOCIATION_END"]
    assert ends[0].details["origin"] == 8
    addrs = [n.address for n in net.nodes]
    assert len(set(addrs)) == 8 and all(a.net_id == 1 for a in addrs)
    assert all(n.state.phase is Phase.IDLE for n in net.nodes)


def test_neighbor_min_power_matches_link_budget():
    sim, net = _associated(8)
    pos = {0: 0.0, **{n.node_id: n.position_m for n in net.nodes}}
    checked = 0
    for n in net.nodes:
        for e in n.state.neighbor_table:
            d = abs(pos[e.address.node_id] - n.position_m)
            assert e.min_tx_power_dbm == min_power_oracle(d)
            want = Direction.UPSTREAM if e.address.node_id < n.node_id else Direction.DOWNSTREAM
            assert e.direction is want
            checked += 1
        # everyone within 50 m is known
        reach = [k for k, x in pos.items() if k != n.node_id and abs(x - n.position_m) <= 50]
        assert sorted(e.address.node_id for e in n.state.neighbor_table) == sorted(reach)
    assert checked > 0
    assert [min_power_oracle(d) for d in (10, 20, 30, 40, 50)] == [-2, 1, 4, 7, 10]


def test_single_node_association():
    sim, net = _net(1)
    rep = pr.run_association(net)
    assert rep.assigned == {1: 1} and rep.last_node == 1


def test_gap_stalls_association():
    positions = [10, 20, 30, 40, 100, 110, 120, 130]
    sim, net = _net(positions=positions)
    with pytest.raises(pr.AssociationStalled) as info:
        pr.run_association(net)
    assert info.value.last_reached == 4
    assert min_power_oracle(60) is None


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(3.0, 45.0), min_size=1, max_size=10))
def test_addresses_unique_and_in_queue_order(gaps):
    positions = list(np.cumsum(gaps))
    sim, net = _net(positions=positions)
    rep = pr.run_association(net)
    assert [rep.assigned[i + 1] for i in range(len(gaps))] == list(range(1, len(gaps) + 1))
    assert len({n.address for n in net.nodes}) == len(gaps)


# ---------------------------------------------------------------------------
# measurement cycle

def test_healthy_cycle_order_and_latency():
    sim, net = _associated(8)
    rep = pr.run_measurement_cycle(net, strict=True)
    assert rep.order == list(range(1, 9))
    assert rep.delivered == 8
    assert net.retries == 0 and net.collisions == 0 and not net.warnings
    assert rep.latency_s == pytest.approx(latency_reference(8, T_NN, T_IL, 1.0), rel=1e-9)
    assert rep.latency_s <= 1.5 * latency_reference(8, T_NN, T_IL, 1.0)
    assert all(n.state.phase is Phase.IDLE for n in net.nodes)
    arrivals = [rep.arrivals[i] for i in rep.order]
    assert arrivals == sorted(arrivals)


def test_single_node_cycle_two_transfers():
    sim, net = _associated(1)
    mark = len(sim.log)
    rep = pr.run_measurement_cycle(net)
    tx = [e.details["what"] for e in list(sim.log)[mark:] if e.kind == "TxStart"]
    assert tx == ["GLOBAL_DATA_REQUEST", "MEASUREMENT_DATA"]
    assert rep.latency_s == pytest.approx(2 * (T_NN + T_IL) + 1.0, rel=1e-12)


def test_timestamp_propagation():
    sim, net = _associated(8)
    seen = []
    inner = net.medium.transfer

    def spy(mpdu, *a):
        seen.append(mpdu)
        return inner(mpdu, *a)
    net.medium.transfer = spy
    rep = pr.run_measurement_cycle(net)
    data = [m for m in seen if isinstance(m.msdu, MeasurementData)]
    # children also overhear their parent's reading, so count distinct hops
    hops = {(m.original_source.node_id, m.current_source.node_id) for m in data}
    assert len(hops) == 8 * 9 // 2           # every reading hops all the way up
    assert {m.timestamp_ms for m in data} == {rep.timestamp_ms}
    assert {m.original_source.node_id for m in data} == set(range(1, 9))


def test_one_bucket_per_segment_in_healthy_cycle():
    sim, net = _associated(8)
    mark = len(sim.log)
    pr.run_measurement_cycle(net)
    iv = _intervals(list(sim.log)[mark:])
    assert iv
    for i, (a0, a1, sa, ra) in enumerate(iv):
        for b0, b1, sb, rb in iv[i + 1:]:
            if b0 < a1 and a0 < b1:
                assert not {sa, ra} & {sb, rb}, (sa, ra, sb, rb)


def test_causality():
    r = simulate(Scenario(node_count=8, faults=("0.08 NodeFail 5",)))
    sent = set()
    for e in r.log:
        if e.kind == "TxStart":
            sent.add((e.actor, e.details["what"]))
        if e.kind in ("RxDecoded", "RxDetect"):
            assert (e.details["src"], e.details["what"]) in sent


def test_node_failure_self_heals():
    r = simulate(Scenario(node_count=8, faults=("0.08 NodeFail 5",)))
    rep = r.network.reports[0]
    assert rep.order == [1, 2, 3, 4, 6, 7, 8]
    assert rep.lost_to_faults == (5,)
    warnings = r.log.of_kind("Warning")
    assert len(warnings) == 1 and warnings[0].details["node"] == 5
    to6 = [e for e in r.log if e.kind == "TxStart" and e.actor == "1:4" and e.details["to"] == "1:6"]
    assert to6 and to6[0].details["power_dbm"] == min_power_oracle(20)
    assert rep.delivered + len(rep.lost_to_faults) + len(rep.timed_out) == 8


def test_link_cut_reroutes_at_higher_power():
    r = simulate(Scenario(node_count=8, faults=("0.08 LinkCut 4-5",)))
    hops = [e.details for e in r.log if e.kind == "TxStart" and e.actor == "1:4"
            and e.details["what"] == "NODE_DATA_REQUEST"]
    assert [h["to"] for h in hops] == ["1:5"] * 4 + ["1:6"]
    assert hops[-1]["power_dbm"] > hops[0]["power_dbm"]
    rep = r.network.reports[0]
    assert {6, 7, 8} <= set(rep.order)
    assert rep.delivered + len(rep.lost_to_faults) + len(rep.timed_out) == 8


def test_strict_cycle_timeout():
    sim, net = _associated(4)
    net.cut_link(net.station(2), net.station(3))
    net.cut_link(net.station(1), net.station(3))
    net.cut_link(net.station(2), net.station(4))
    net.cut_link(net.station(1), net.station(4))
    with pytest.raises(pr.CycleTimeout) as info:
        pr.run_measurement_cycle(net, strict=True)
    assert set(info.value.report.timed_out) == {3, 4}


def test_cycle_timer_follows_analytic_deadline():
    sim, net = _associated(8)
    rep = net.start_cycle()
    assert rep.deadline_s - rep.start_s == pytest.approx(1.5 * latency_reference(8, T_NN, T_IL, 1.0))


# ---------------------------------------------------------------------------
# arbitration

def test_coordinator_first():
    for phase in CyclePhase:
        sched = pr.arbitrate([Intent(4, event=True), Intent(0), Intent(2)], phase, rng=1)
        assert sched.order[0].depth == 0


def test_event_buckets_deferred_during_cycle():
    sched = pr.arbitrate([Intent(3, event=True), Intent(2, bucket_type=BucketType.MEASUREMENT_DATA)],
                         CyclePhase.MEASUREMENT_CYCLE, rng=1)
    assert [i.depth for i in sched.order] == [2]
    assert [i.depth for i in sched.deferred] == [3]


def test_deeper_wins_in_event_period():
    sched = pr.arbitrate([Intent(3, event=True), Intent(7, event=True)], CyclePhase.EVENT_PERIOD, rng=2)
    assert [i.depth for i in sched.order] == [7, 3]
    sched = pr.arbitrate([Intent(3), Intent(7)], CyclePhase.MEASUREMENT_CYCLE, rng=2)
    assert [i.depth for i in sched.order] == [3, 7]


def test_ties_resolve_without_livelock():
    csma = CsmaParams()
    rng = np.random.default_rng(99)
    worst = 0
    for _ in range(10_000):
        sched = pr.arbitrate([Intent(5, event=True, tag="a"), Intent(5, event=True, tag="b")],
                             CyclePhase.EVENT_PERIOD, csma, rng=rng)
        assert sorted(s.intent.tag for s in sched.slots) == ["a", "b"]
        assert all(s.backoff_slots < csma.cw_max for s in sched.slots)
        worst = max(worst, sched.collisions)
    assert worst < 10


# ---------------------------------------------------------------------------
# orphans

def test_orphan_rejoins():
    sim, net = _associated(8)
    pr.run_measurement_cycle(net)
    n5 = net.station(5)
    net.fail_node(n5)
    rep = pr.handle_orphan(net, n5)
    assert rep.rejoined and not rep.deferred
    assert {4, 6} <= set(rep.readded_by)
    for k in (4, 6):
        assert net.station(k).state.entry(n5.sid).active
    assert 5 in net.master.cstate.active_nodes
    assert n5.state.phase is Phase.IDLE
    assert pr.run_measurement_cycle(net).delivered == 8


def test_orphan_unreachable():
    sim, net = _associated(3)
    n3 = net.station(3)
    for other in (net.master, net.station(1), net.station(2)):
        net.cut_link(n3, other)
    net.fail_node(n3)
    with pytest.raises(pr.OrphanUnreachable):
        pr.handle_orphan(net, n3)


def test_orphan_during_cycle_is_deferred():
    sim, net = _associated(8)
    n5 = net.station(5)
    net.fail_node(n5)
    cyc = net.start_cycle()
    rep = net.restore_orphan(n5)
    assert rep.deferred
    sim.run(stop=lambda: not math.isnan(rep.end_s))
    assert rep.rejoined and rep.end_s > cyc.end_s


# ---------------------------------------------------------------------------
# coordinator failover

def test_failover_completes_next_cycle():
    s = Scenario(node_count=8, duration_s=45.0, cycle_interval_s=2.0, faults=("1.5 CoordinatorFail",))
    r = simulate(s)
    fo = r.network.failovers[0]
    period = r.network.heartbeat_period_s
    assert period == pytest.approx(10 * s.analytic_latency_s())
    assert fo.new_master == "standby" and fo.missed_heartbeats == 3
    assert fo.promoted_s - fo.failed_s <= 3 * period
    after = [c for c in r.network.reports if c.start_s > fo.promoted_s - 1e-9]
    assert after and after[0].delivered == 8
    masters = [e for e in r.log if e.kind == "StateChange" and e.details.get("role") == "Master"]
    assert len(masters) == 1


def test_no_standby_halts():
    r = simulate(Scenario(node_count=8, duration_s=5.0, cycle_interval_s=2.0, standby=False,
                          faults=("1.5 CoordinatorFail",)))
    assert r.network.halted
    assert [e.details["reason"] for e in r.log.of_kind("Warning")] == ["network-halted"]
    assert all(c.start_s < 1.5 for c in r.network.reports)


def test_live_master_never_demoted():
    sim, net = _net(8)
    net.preassign()
    p = 1.0
    net.start_heartbeats(until_s=1000 * p, period_s=p)
    sim.run()
    beats = [e for e in sim.log if e.kind == "TxStart" and e.details["what"] == "COORDINATOR_ALIVE_AND_READY"]
    assert len(beats) == 1000
    assert not net.failovers and net.master.actor == "coordinator"
    assert net.standby.cstate.role is pr.Role.STANDBY


# ---------------------------------------------------------------------------
# energy bookkeeping

def test_energy_counters_consistent():
    r = simulate(Scenario(node_count=8, duration_s=3.0, faults=("0.5 NodeFail 3",)))
    total = r.metrics["sim_time_s"]
    em = EnergyModel()
    joules = 0.0
    for n in r.network.nodes:
        d = r.network.state_durations(n, total)
        assert min(d.values()) >= -1e-12
        assert sum(d.values()) == pytest.approx(total, rel=1e-12)
        want = em.supply_v * (d["tx"] * 20e-3 + d["idle"] * 1e-3 + d["sleep"] * 10e-6)
        assert r.metrics[f"energy_j.node.{n.index}"] == pytest.approx(want, rel=1e-12)
        joules += want
    assert r.metrics["energy_j.total"] == pytest.approx(joules, rel=1e-12)
    off = r.network.state_durations(r.network.nodes[2], total)["off"]
    assert off == pytest.approx(total - 0.5)


def test_sleep_between_cycles_counted():
    r = simulate(Scenario(node_count=3, duration_s=6.0, cycle_interval_s=3.0, sleep_between_cycles=True))
    total = r.metrics["sim_time_s"]
    d = r.network.state_durations(r.network.nodes[0], total)
    assert d["sleep"] > 0
    assert sum(d.values()) == pytest.approx(total, rel=1e-12)
