import io
import itertools
from dataclasses import replace
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apesim.engine import MS, US, Engine
from apesim.errors import ConfigError
from apesim.fabric import BUFFER_BASE, Fabric
from apesim.lofamo import (
    HOST_CRASH,
    LINK_FAIL,
    NIC_FAIL,
    FaultEvent,
    Lofamo,
    LofamoConfig,
    Status,
    affine_fit,
    all_faults,
    fault_set_orbits,
    reachable,
    run_faults,
    time_to_awareness,
    translate_fault,
)
from apesim.topology import DIRECTIONS, Direction, TorusSpec, canonical_link

WD = 1 * MS


@pytest.fixture(scope="module")
def cfg(lofamo_cfg):
    return replace(lofamo_cfg, wd_ns=WD)


def control_fabric(platform, engine=None):
    return Fabric(platform, engine=engine, data_plane=False)


def traced(platform, cfg, faults=(), horizon=10 * WD, seed=0):
    buf = io.StringIO()
    fabric = control_fabric(platform, Engine(seed, trace=buf))
    lf = Lofamo(fabric, cfg, faults)
    fabric.engine.run_until(horizon)
    rows = [line.split("\t") for line in buf.getvalue().splitlines()]
    return lf, [(int(t), target, kind) for t, _, target, kind in rows]


def heartbeat_times(events, node):
    return [t for t, target, kind in events if target == f"host{node}" and kind == "heartbeat"]


# -- configuration -------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ConfigError):
        LofamoConfig(wd_ns=0)
    with pytest.raises(ConfigError):
        LofamoConfig(neighbor_poll_phase=Fraction(1))
    with pytest.raises(ConfigError):
        LofamoConfig(service_net_latency_ns=-1)
    assert LofamoConfig(neighbor_poll_phase="0.3").neighbor_poll_phase == Fraction(3, 10)


def test_fault_event_validation():
    with pytest.raises(ConfigError):
        FaultEvent(0, "meteor", 0)
    with pytest.raises(ConfigError):
        FaultEvent(0, LINK_FAIL, 0)
    with pytest.raises(ConfigError):
        FaultEvent(0, HOST_CRASH, 0, Direction.XP)
    with pytest.raises(ConfigError):
        FaultEvent(0, HOST_CRASH, -1)


def test_master_must_exist(platform, cfg):
    with pytest.raises(ConfigError):
        Lofamo(control_fabric(platform), replace(cfg, master=platform.torus.nodes))


# -- host heartbeat ------------------------------------------------------------

def test_ten_updates_evenly_spaced(platform, cfg):
    lf, events = traced(platform, cfg, horizon=10 * WD - 1)
    for n in range(platform.torus.nodes):
        times = heartbeat_times(events, n)
        assert len(times) == 10 == lf.host_updates[n]
        assert {b - a for a, b in itertools.pairwise(times)} == {WD}


def test_heartbeats_stop_at_crash(platform, cfg):
    at = 3 * WD + 123
    lf, events = traced(platform, cfg, [FaultEvent(5, HOST_CRASH, at)], horizon=10 * WD)
    # the tick already queued for 4*WD fires into a dead host and is not renewed
    assert heartbeat_times(events, 5) == [0, WD, 2 * WD, 3 * WD, 4 * WD]
    assert lf.host_updates[5] == 4 and lf.regs[5].host_wd_last == 3 * WD
    assert lf.host_updates[6] == 11


def test_heartbeat_at_crash_instant_still_lands(platform, cfg):
    lf, events = traced(platform, cfg, [FaultEvent(5, HOST_CRASH, 3 * WD)], horizon=10 * WD)
    assert lf.host_updates[5] == 4 and lf.regs[5].host_wd_last == 3 * WD


def test_jittered_phases_fixed_per_node_and_seed(platform, cfg):
    jittered = replace(cfg, phase_jitter=Fraction(1, 4))
    _, a = traced(platform, jittered, seed=7)
    _, b = traced(platform, jittered, seed=7)
    _, c = traced(platform, jittered, seed=8)
    assert a == b
    first = {}
    for n in range(platform.torus.nodes):
        times = heartbeat_times(a, n)
        assert {y - x for x, y in itertools.pairwise(times)} == {WD}
        assert 0 <= times[0] < WD // 4
        first[n] = times[0]
    assert len(set(first.values())) > 1
    assert [heartbeat_times(c, n)[0] for n in first] != list(first.values())


# -- NIC watchdog ----------------------------------------------------------------

def test_no_false_positives_healthy_torus(platform, cfg):
    lf = run_faults(lambda: control_fabric(platform), cfg, [], horizon=1000 * WD,
                    stop_when_aware=False)
    assert not lf.false_positive
    assert lf.master_collect().all_ok
    assert not lf.report_log
    for r in lf.regs:
        assert r.host_status == Status.OK
        assert all(s == Status.OK for s, _ in r.neighbor_status.values())


@pytest.mark.slow
def test_no_false_positives_million_periods(platform, cfg):
    single = replace(platform, torus=TorusSpec((1, 1, 1)))
    lf = run_faults(lambda: control_fabric(single), cfg, [], horizon=10**6 * WD,
                    stop_when_aware=False)
    assert lf.host_updates == [10**6 + 1]
    assert not lf.false_positive and lf.master_collect().all_ok


@pytest.mark.parametrize("period", [0, 1, 7])
def test_local_detect_delay_on_phase_grid(platform, cfg, period):
    # under phase-0 updates and checks, a crash at phase p is seen after 2*WD - p
    for step in range(20):
        phase = step * WD // 20
        at = period * WD + phase
        lf = run_faults(lambda: control_fabric(platform), cfg, [FaultEvent(9, HOST_CRASH, at)])
        tr = lf.traces[(9, Status.HOST_FAULT)]
        delay = tr.t_local_detect - at
        assert WD < delay <= 2 * WD
        assert delay == 2 * WD - phase


def test_nic_fail_reported_by_own_host(platform, cfg):
    at = 2 * WD + 5
    lf = run_faults(lambda: control_fabric(platform), cfg, [FaultEvent(6, NIC_FAIL, at)],
                    stop_when_aware=False, horizon=at + 4 * WD)
    assert lf.regs[6].apenet_status == Status.NIC_FAULT
    reporters = {r for _, r, key in lf.report_log if key == (6, Status.NIC_FAULT)}
    assert reporters == {6}
    assert lf.master_collect().node_status(6) == Status.NIC_FAULT
    assert not lf.false_positive
    for d in DIRECTIONS:
        assert not lf.fabric.channels[(6, d)].alive
        assert not lf.fabric.reverse(lf.fabric.channels[(6, d)]).alive


# -- diagnostics -----------------------------------------------------------------

def test_five_distinct_neighbours_informed(platform, cfg):
    assert platform.torus.dims == (4, 4, 1)
    lf = run_faults(lambda: control_fabric(platform), cfg, [FaultEvent(5, HOST_CRASH, WD + 1)],
                    stop_when_aware=False, horizon=5 * WD)
    informed = {m for m in range(platform.torus.nodes)
                if any(s == Status.HOST_FAULT for s, _ in lf.regs[m].neighbor_status.values())}
    expected = set(platform.torus.neighbor_table[5].values())
    assert len(expected) == 5 and 5 in expected
    assert informed == expected


def test_idle_channels_use_control_frames(platform, cfg):
    lf = run_faults(lambda: control_fabric(platform), cfg, [], horizon=3 * WD,
                    stop_when_aware=False)
    chans = lf.fabric.channels.values()
    assert sum(ch.diag_piggybacked for ch in chans) == 0
    # checks at 0, WD, 2WD, 3WD on every channel
    assert all(ch.diag_control == 4 for ch in chans)


def test_freshness_never_in_future(platform, cfg):
    lf = run_faults(lambda: control_fabric(platform), cfg, [FaultEvent(3, HOST_CRASH, WD // 3)],
                    horizon=6 * WD + 17, stop_when_aware=False)
    now = lf.engine.now()
    for r in lf.regs:
        assert r.host_wd_last <= now and r.apenet_wd_last <= now
        assert all(fresh <= now for _, fresh in r.neighbor_status.values())


# -- neighbour poll and master -----------------------------------------------------

def test_one_report_per_fault_per_reporter(platform, cfg):
    lf = run_faults(lambda: control_fabric(platform), cfg, [FaultEvent(5, HOST_CRASH, WD + 1)],
                    stop_when_aware=False, horizon=50 * WD)
    reports = [(r, key) for _, r, key in lf.report_log]
    assert len(reports) == len(set(reports))
    reporters = {r for r, key in reports if key == (5, Status.HOST_FAULT)}
    assert reporters == set(platform.torus.neighbor_table[5].values()) - {5}
    health = lf.master_collect()
    assert health.faults(platform.torus) == {(5, Status.HOST_FAULT)}
    first = min(t for t, _, key in lf.report_log if key == (5, Status.HOST_FAULT))
    tr = lf.traces[(5, Status.HOST_FAULT)]
    assert health.reports[(5, Status.HOST_FAULT)] == tr.t_master_aware
    assert tr.t_master_aware == first + cfg.service_net_latency_ns


def test_single_host_crash_complete_trace(platform, cfg):
    f = FaultEvent(10, HOST_CRASH, 4 * WD + 333)
    lf = run_faults(lambda: control_fabric(platform), cfg, [f])
    tr = lf.traces[f.key(platform.torus)]
    assert f.at <= tr.t_local_detect <= tr.t_neighbor_aware <= tr.t_master_aware
    assert tr.ta <= lf.detection_bound()
    assert lf.master_collect().faults(platform.torus) == {(10, Status.HOST_FAULT)}
    assert lf.master_collect().node_status(10) == Status.HOST_FAULT


def test_link_fail_reported_once_by_canonical_key(platform, cfg):
    f = FaultEvent(5, LINK_FAIL, WD + 1, Direction.XM)
    lf = run_faults(lambda: control_fabric(platform), cfg, [f], stop_when_aware=False,
                    horizon=6 * WD)
    link = canonical_link(5, Direction.XM, platform.torus)
    health = lf.master_collect()
    assert health.faults(platform.torus) == {(link, Status.LINK_FAULT)}
    assert health.link_status(5, Direction.XM, platform.torus) == Status.LINK_FAULT
    m = platform.torus.neighbor_table[5][Direction.XM]
    assert health.link_status(m, Direction.XP, platform.torus) == Status.LINK_FAULT
    assert not lf.false_positive


def test_link_fail_drops_queued_frames(platform):
    fabric = Fabric(platform)
    lf = Lofamo(fabric, LofamoConfig(wd_ns=WD))
    for n in (0, 1):
        fabric.register(n, "host", BUFFER_BASE, 1 << 20)
    rec = fabric.post_put(0, 0, 1, size=1 << 20)
    ch = fabric.channels[(0, Direction.XP)]
    fabric.engine.run_until(100 * US)
    queued = len(ch.queue)
    assert queued > 0
    lf.inject_fault(FaultEvent(0, LINK_FAIL, 100 * US, Direction.XP))
    fabric.engine.run_until(40 * WD)
    assert not ch.alive and not fabric.reverse(ch).alive
    assert not ch.queue and ch.frames_dropped >= queued
    assert rec.completed is None


def test_duplicate_injection_rejected(platform, cfg):
    with pytest.raises(ConfigError):
        Lofamo(control_fabric(platform), cfg,
               [FaultEvent(1, HOST_CRASH, 0), FaultEvent(1, HOST_CRASH, WD)])
    with pytest.raises(ConfigError):
        Lofamo(control_fabric(platform), cfg,
               [FaultEvent(0, LINK_FAIL, 0, Direction.XP), FaultEvent(1, LINK_FAIL, 0, Direction.XM)])
    lf = Lofamo(control_fabric(platform), cfg, [FaultEvent(2, NIC_FAIL, 0)])
    with pytest.raises(ConfigError):
        lf.inject_fault(FaultEvent(2, NIC_FAIL, WD))


@pytest.mark.parametrize("faults", [
    [FaultEvent(0, HOST_CRASH, WD + 1), FaultEvent(10, HOST_CRASH, 2 * WD)],
    [FaultEvent(3, NIC_FAIL, WD + 1), FaultEvent(12, LINK_FAIL, WD + 7, Direction.YP),
     FaultEvent(9, HOST_CRASH, 3 * WD)],
])
def test_k_faults_k_entries(platform, cfg, faults):
    assert reachable(faults, platform.torus)
    lf = run_faults(lambda: control_fabric(platform), cfg, faults)
    assert lf.master_collect().faults(platform.torus) == {f.key(platform.torus) for f in faults}
    assert not lf.undetected() and not lf.false_positive


# -- time to awareness -------------------------------------------------------------

def test_ta_samples_bounded(platform, cfg):
    rows, traces = time_to_awareness(platform, cfg, [WD], samples=100, seed=3)
    assert rows[0].undetected == 0 and len(traces) == 100
    for _, tr in traces:
        assert tr.fault.at <= tr.t_local_detect <= tr.t_master_aware
        assert WD < tr.t_local_detect - tr.fault.at <= 2 * WD
    assert 1.5 * WD < rows[0].mean_ns < 2.1 * WD


def test_ta_reproducible_per_seed(platform, cfg):
    a = time_to_awareness(platform, cfg, [WD], samples=30, seed=5)[0]
    b = time_to_awareness(platform, cfg, [WD], samples=30, seed=5)[0]
    c = time_to_awareness(platform, cfg, [WD], samples=30, seed=6)[0]
    assert a == b and a != c


def test_wd_to_zero_leaves_propagation(platform, cfg):
    # Ta lies in (WD + service latency, bound]; both ends shrink to propagation
    floor = cfg.service_net_latency_ns
    for wd in (160 * US, 40 * US, 10 * US):
        small = replace(cfg, wd_ns=wd)
        _, traces = time_to_awareness(platform, small, [wd], samples=40)
        bound = Lofamo(control_fabric(platform), small).detection_bound()
        assert bound - 3 * wd < 1 * US + floor
        for _, tr in traces:
            assert wd + floor < tr.ta <= bound


def test_affine_fit_exact_line():
    xs = [1, 2, 5, 9]
    slope, intercept, r2 = affine_fit(xs, [1.8 * x + 7 for x in xs])
    assert slope == pytest.approx(1.8) and intercept == pytest.approx(7) and r2 == pytest.approx(1)


# -- fault-set enumeration -----------------------------------------------------------

def test_all_faults_inventory(platform):
    pool = all_faults(platform.torus, 0)
    kinds = [f.kind for f in pool]
    assert (kinds.count(HOST_CRASH), kinds.count(NIC_FAIL), kinds.count(LINK_FAIL)) == (16, 16, 48)
    assert len({f.component(platform.torus) for f in pool}) == 80


def test_orbits_partition_all_small_sets(platform):
    from math import comb
    orbits = list(fault_set_orbits(platform.torus, 0))
    assert sum(size for _, size in orbits) == comb(80, 1) + comb(80, 2) + comb(80, 3)
    assert all(16 % size == 0 for _, size in orbits)


def test_reachability_examples(platform):
    t = platform.torus
    assert reachable([FaultEvent(0, HOST_CRASH, 0)], t)
    assert not reachable([FaultEvent(0, HOST_CRASH, 0), FaultEvent(0, NIC_FAIL, 0)], t)
    assert not reachable([FaultEvent(0, NIC_FAIL, 0), FaultEvent(0, HOST_CRASH, 0)], t)
    # all four in-plane neighbours of node 0 dead
    ring = [FaultEvent(m, HOST_CRASH, 0) for m in set(t.neighbor_table[0].values()) - {0}]
    assert not reachable([FaultEvent(0, HOST_CRASH, 0)] + ring, t)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 79), st.integers(0, 79), st.integers(0, 15), st.integers(0, 2 * WD))
def test_translation_invariance(platform, cfg, i, j, shift_index, at):
    torus = platform.torus
    pool = all_faults(torus, WD + at)
    faults = [pool[i]] if i == j else [pool[i], pool[j]]
    if not reachable(faults, torus):
        return
    shift = (shift_index % 4, shift_index // 4, 0)
    moved = [translate_fault(f, shift, torus) for f in faults]
    a = run_faults(lambda: control_fabric(platform), cfg, faults)
    b = run_faults(lambda: control_fabric(platform), cfg, moved)
    assert sorted(tr.ta for tr in a.traces.values()) == sorted(tr.ta for tr in b.traces.values())
