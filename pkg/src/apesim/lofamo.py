"""LO|FA|MO: mutual host/NIC watchdogs with neighbour diagnostics.

Per node three periodic activities run every watchdog period ``WD``, each
at its own phase (a fraction of ``WD``):

* host heartbeat: the host software refreshes the host watchdog register
  and checks that the NIC has refreshed its own register recently;
* NIC check: the NIC declares the host dead when its register is older than
  ``WD``, marks silent neighbour ports as link faults, refreshes its own
  register and pushes its status byte to all six neighbours;
* neighbour poll: the host reads the neighbour registers and forwards
  every new non-OK entry to the master over the service network.

Status bytes ride the piggyback field of data frames, or a control frame
when the channel is idle, so the protocol never delays data.
"""

from __future__ import annotations

import enum
import itertools
import math
import statistics
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Optional

from apesim.engine import MS, US, Engine
from apesim.errors import ConfigError
from apesim.topology import (
    DIRECTIONS,
    Direction,
    TorusSpec,
    canonical_link,
    coord_of,
    links,
    node_of,
)

HOST_CRASH = "host-crash"
NIC_FAIL = "nic-fail"
LINK_FAIL = "link-fail"
FAULT_KINDS = (HOST_CRASH, NIC_FAIL, LINK_FAIL)

_VALID = 0x80


class Status(enum.IntEnum):
    OK = 0
    HOST_FAULT = 1
    NIC_FAULT = 2
    LINK_FAULT = 3
    UNKNOWN = 4


@dataclass(frozen=True)
class LofamoConfig:
    wd_ns: int = 500 * MS
    host_update_phase: Fraction = Fraction(0)
    nic_check_phase: Fraction = Fraction(0)
    neighbor_poll_phase: Fraction = Fraction(3, 10)
    service_net_latency_ns: int = 10 * US
    master: int = 0
    phase_jitter: Fraction = Fraction(0)

    def __post_init__(self):
        for name in ("host_update_phase", "nic_check_phase", "neighbor_poll_phase", "phase_jitter"):
            value = Fraction(str(getattr(self, name)))
            object.__setattr__(self, name, value)
            if not 0 <= value < 1:
                raise ConfigError(f"lofamo {name} must be a fraction of WD in [0, 1), got {value}")
        if self.wd_ns <= 0:
            raise ConfigError("lofamo watchdog period must be positive")
        if self.service_net_latency_ns < 0:
            raise ConfigError("service network latency must be >= 0")

    def phase_ns(self, phase: Fraction) -> int:
        return math.floor(phase * self.wd_ns)


@dataclass(frozen=True)
class FaultEvent:
    node: int
    kind: str
    at: int
    direction: Optional[Direction] = None

    def __post_init__(self):
        if self.kind not in FAULT_KINDS:
            raise ConfigError(f"unknown fault kind {self.kind!r}; expected one of {FAULT_KINDS}")
        if (self.kind == LINK_FAIL) != (self.direction is not None):
            raise ConfigError("a direction is required for link-fail and only for link-fail")
        if self.at < 0:
            raise ConfigError("fault time must be >= 0")

    def key(self, torus: TorusSpec):
        """Identity of the fault as the master records it."""
        if self.kind == HOST_CRASH:
            return self.node, Status.HOST_FAULT
        if self.kind == NIC_FAIL:
            return self.node, Status.NIC_FAULT
        return canonical_link(self.node, self.direction, torus), Status.LINK_FAULT

    def component(self, torus: TorusSpec):
        if self.kind == LINK_FAIL:
            return "link", canonical_link(self.node, self.direction, torus)
        return ("host" if self.kind == HOST_CRASH else "nic"), self.node

    def __str__(self):
        where = f"{self.node}{self.direction}" if self.direction else str(self.node)
        return f"{self.kind}@{where}"


@dataclass
class WatchdogRegisterSet:
    host_wd_last: int = 0
    host_status: Status = Status.OK
    apenet_wd_last: int = 0
    apenet_status: Status = Status.OK
    neighbor_status: dict = field(default_factory=lambda: {d: (Status.OK, 0) for d in DIRECTIONS})


@dataclass
class AwarenessTrace:
    fault: FaultEvent
    t_local_detect: Optional[int] = None
    t_neighbor_aware: Optional[int] = None
    t_master_aware: Optional[int] = None

    @property
    def ta(self) -> Optional[int]:
        if self.t_master_aware is None:
            return None
        return self.t_master_aware - self.fault.at


@dataclass
class HealthMap:
    """What the master knows: first arrival time of every distinct fault report."""

    reports: dict = field(default_factory=dict)
    last_report: dict = field(default_factory=dict)

    def node_status(self, node: int) -> Status:
        if (node, Status.NIC_FAULT) in self.reports:
            return Status.NIC_FAULT
        if (node, Status.HOST_FAULT) in self.reports:
            return Status.HOST_FAULT
        return Status.OK

    def link_status(self, node: int, d: Direction, torus: TorusSpec) -> Status:
        key = (canonical_link(node, d, torus), Status.LINK_FAULT)
        return Status.LINK_FAULT if key in self.reports else Status.OK

    def faults(self, torus: TorusSpec) -> set:
        """Distinct faults, with link reports explained by a dead NIC folded away."""
        dead_nics = {s for s, st in self.reports if st == Status.NIC_FAULT}
        out = set()
        for subject, st in self.reports:
            if st == Status.LINK_FAULT:
                n, d = subject
                if n in dead_nics or torus.neighbor_table[n][d] in dead_nics:
                    continue
            out.add((subject, st))
        return out

    @property
    def all_ok(self) -> bool:
        return not self.reports


class Lofamo:
    """Protocol state for every node of a :class:`~apesim.fabric.Fabric`."""

    def __init__(self, fabric, cfg: LofamoConfig = LofamoConfig(),
                 faults: Iterable[FaultEvent] = (), stop_when_aware: bool = False):
        self.fabric = fabric
        self.engine: Engine = fabric.engine
        self.cfg = cfg
        self.torus: TorusSpec = fabric.torus
        self.nodes = self.torus.nodes
        self.cfg_check_master()
        self.regs = [WatchdogRegisterSet() for _ in range(self.nodes)]
        self.host_alive = [True] * self.nodes
        self.nic_alive = [True] * self.nodes
        self.reported = [set() for _ in range(self.nodes)]
        self.health = HealthMap()
        self.stop_when_aware = stop_when_aware
        self.false_positive = False
        self.host_updates = [0] * self.nodes
        self.report_log: list = []
        self._dead: set = set()
        self._table = self.torus.neighbor_table
        self.faults = list(faults)
        self.traces: dict = {}
        seen = set()
        for f in self.faults:
            self.torus.check(f.node)
            comp = f.component(self.torus)
            if comp in seen:
                raise ConfigError(f"fault {f}: component {comp} is injected twice")
            seen.add(comp)
            self.traces[f.key(self.torus)] = AwarenessTrace(f)
        self._unaware = len(self.traces)
        for ch in fabric.channels.values():
            ch.diag_sink = self._on_diag
        for f in sorted(self.faults, key=lambda f: f.at):
            self._schedule_fault(f)
        rng = self.engine.rng.stream("lofamo.phase")
        wd = cfg.wd_ns
        for n in range(self.nodes):
            offset = math.floor(rng.random() * cfg.phase_jitter * wd) if cfg.phase_jitter else 0
            self.engine.schedule(cfg.phase_ns(cfg.host_update_phase) + offset, self._host_tick,
                                 target=f"host{n}", kind="heartbeat", data=n)
            self.engine.schedule(cfg.phase_ns(cfg.nic_check_phase) + offset, self._nic_check,
                                 target=f"nic{n}", kind="wdcheck", data=n)
            self.engine.schedule(cfg.phase_ns(cfg.neighbor_poll_phase) + offset, self._poll,
                                 target=f"host{n}", kind="poll", data=n)

    def cfg_check_master(self) -> None:
        self.torus.check(self.cfg.master)

    # -- faults ----------------------------------------------------------------

    def inject_fault(self, fault: FaultEvent) -> None:
        """Schedule an additional fault."""
        key = fault.key(self.torus)
        if key in self.traces:
            raise ConfigError(f"fault {fault} already scheduled")
        self.faults.append(fault)
        self.traces[key] = AwarenessTrace(fault)
        self._unaware += 1
        self._schedule_fault(fault)

    def _schedule_fault(self, fault: FaultEvent) -> None:
        # re-queued at its own instant: a fault at t lands after everything already due at t,
        # so a heartbeat at exactly t still counts
        self.engine.schedule(fault.at, self._defer, target=f"node{fault.node}", kind="fault-due",
                             data=fault)

    def _defer(self, ev) -> None:
        self.engine.schedule(ev.fire_at, self._inject, target=ev.target, kind="fault", data=ev.data)

    def _inject(self, ev) -> None:
        f: FaultEvent = ev.data
        comp = f.component(self.torus)
        if comp in self._dead:
            raise ConfigError(f"fault {f}: component already dead")
        self._dead.add(comp)
        chans = self.fabric.channels
        data_nodes = self.fabric.nodes
        if f.kind == HOST_CRASH:
            self.host_alive[f.node] = False
            if data_nodes:
                data_nodes[f.node].host_alive = False
        elif f.kind == NIC_FAIL:
            self.nic_alive[f.node] = False
            if data_nodes:
                data_nodes[f.node].nic_alive = False
            for d in DIRECTIONS:
                ch = chans[(f.node, d)]
                ch.fail()
                self.fabric.reverse(ch).fail()
        else:
            ch = chans[(f.node, f.direction)]
            ch.fail()
            self.fabric.reverse(ch).fail()

    # -- periodic activities ---------------------------------------------------

    def _host_tick(self, ev) -> None:
        n = ev.data
        if not self.host_alive[n]:
            return
        now = self.engine.now()
        r = self.regs[n]
        r.host_wd_last = now
        self.host_updates[n] += 1
        if now - r.apenet_wd_last > self.cfg.wd_ns and (n, Status.NIC_FAULT) not in self.reported[n]:
            r.apenet_status = Status.NIC_FAULT
            self._local_detect((n, Status.NIC_FAULT), now)
            self._report(n, (n, Status.NIC_FAULT))
        self.engine.schedule(now + self.cfg.wd_ns, self._host_tick, target=ev.target,
                             kind="heartbeat", data=n)

    def _nic_check(self, ev) -> None:
        n = ev.data
        if not self.nic_alive[n]:
            return
        now = self.engine.now()
        wd = self.cfg.wd_ns
        r = self.regs[n]
        if r.host_status == Status.OK and now - r.host_wd_last > wd:
            r.host_status = Status.HOST_FAULT
            self._local_detect((n, Status.HOST_FAULT), now)
        r.apenet_wd_last = now
        ports = r.neighbor_status
        for d in DIRECTIONS:
            st, fresh = ports[d]
            if st != Status.LINK_FAULT and now - fresh > wd:
                ports[d] = (Status.LINK_FAULT, fresh)
                self._link_detect(n, d, now)
        byte = _VALID | r.host_status
        chans = self.fabric.channels
        for d in DIRECTIONS:
            chans[(n, d)].send_diagnostic(byte)
        self.engine.schedule(now + wd, self._nic_check, target=ev.target, kind="wdcheck", data=n)

    def _poll(self, ev) -> None:
        n = ev.data
        if not self.host_alive[n]:
            return
        now = self.engine.now()
        if self.nic_alive[n]:
            for d, (st, _) in self.regs[n].neighbor_status.items():
                if st == Status.HOST_FAULT:
                    self._report(n, (self._table[n][d], Status.HOST_FAULT))
                elif st == Status.LINK_FAULT:
                    self._report(n, (canonical_link(n, d, self.torus), Status.LINK_FAULT))
        self.engine.schedule(now + self.cfg.wd_ns, self._poll, target=ev.target, kind="poll", data=n)

    # -- diagnostics -----------------------------------------------------------

    def _on_diag(self, byte: int, ch) -> None:
        m = ch.dst
        if not self.nic_alive[m]:
            return
        now = self.engine.now()
        status = Status(byte & 0x7F)
        self.regs[m].neighbor_status[ch.direction.opposite] = (status, now)
        if status == Status.HOST_FAULT and ch.src != m:
            tr = self.traces.get((ch.src, Status.HOST_FAULT))
            if tr is not None and tr.t_neighbor_aware is None:
                tr.t_neighbor_aware = now

    def _local_detect(self, key, now: int) -> None:
        tr = self.traces.get(key)
        if tr is None:
            self.false_positive = True
        elif tr.t_local_detect is None:
            tr.t_local_detect = now

    def _link_detect(self, n: int, d: Direction, now: int) -> None:
        link = canonical_link(n, d, self.torus)
        tr = self.traces.get((link, Status.LINK_FAULT))
        if tr is not None:
            if tr.t_local_detect is None:
                tr.t_local_detect = tr.t_neighbor_aware = now
            return
        m = self._table[n][d]
        explained = False
        for node in (m, n):
            tr = self.traces.get((node, Status.NIC_FAULT))
            if tr is not None:
                explained = True
                if node == m and tr.t_neighbor_aware is None:
                    tr.t_neighbor_aware = now
        if not explained:
            self.false_positive = True

    def _report(self, reporter: int, key) -> None:
        if key in self.reported[reporter]:
            return
        self.reported[reporter].add(key)
        self.report_log.append((self.engine.now(), reporter, key))
        self.engine.schedule(self.engine.now() + self.cfg.service_net_latency_ns, self._master,
                             target="master", kind="report", data=key)

    def _master(self, ev) -> None:
        key = ev.data
        now = self.engine.now()
        self.health.last_report[key] = now
        if key in self.health.reports:
            return
        self.health.reports[key] = now
        tr = self.traces.get(key)
        if tr is not None and tr.t_master_aware is None:
            tr.t_master_aware = now
            self._unaware -= 1
            if self._unaware == 0 and self.stop_when_aware:
                self.engine.stop()

    # -- results -----------------------------------------------------------------

    def master_collect(self) -> HealthMap:
        return self.health

    def detection_bound(self) -> int:
        """Worst-case fault-to-master time under the reachability condition."""
        cfg = self.cfg
        link = self.fabric.cfg.link
        propagation = (cfg.service_net_latency_ns + link.hop_latency_ns
                       + self.fabric.channels[(0, Direction.XP)].serialization(0)
                       + math.ceil(cfg.phase_jitter * cfg.wd_ns))
        return 2 * cfg.wd_ns + cfg.wd_ns + propagation

    def undetected(self) -> list[AwarenessTrace]:
        return [t for t in self.traces.values() if t.t_master_aware is None]


# -- fault-set enumeration -----------------------------------------------------

def all_faults(torus: TorusSpec, at: int) -> list[FaultEvent]:
    out = [FaultEvent(n, HOST_CRASH, at) for n in range(torus.nodes)]
    out += [FaultEvent(n, NIC_FAIL, at) for n in range(torus.nodes)]
    out += [FaultEvent(n, LINK_FAIL, at, d) for n, d in links(torus)]
    return out


def reachable(faults: Iterable[FaultEvent], torus: TorusSpec) -> bool:
    """Every fault has a live observer that can reach the master.

    A crashed host needs its own NIC plus a neighbour whose host, NIC and
    connecting link all work. A dead NIC needs its own host. A dead link
    needs one endpoint with a working host and NIC.
    """
    faults = list(faults)
    hosts = {f.node for f in faults if f.kind == HOST_CRASH}
    nics = {f.node for f in faults if f.kind == NIC_FAIL}
    dead_links = {canonical_link(f.node, f.direction, torus) for f in faults if f.kind == LINK_FAIL}
    table = torus.neighbor_table

    def healthy(n):
        return n not in hosts and n not in nics

    for f in faults:
        n = f.node
        if f.kind == HOST_CRASH:
            if n in nics:
                return False
            if not any(m != n and healthy(m) and canonical_link(n, d, torus) not in dead_links
                       for d, m in table[n].items()):
                return False
        elif f.kind == NIC_FAIL:
            if n in hosts:
                return False
        else:
            if not (healthy(n) or healthy(table[n][f.direction])):
                return False
    return True


def fault_sets(torus: TorusSpec, at: int, max_size: int = 3):
    pool = all_faults(torus, at)
    for k in range(1, max_size + 1):
        yield from itertools.combinations(pool, k)


def translate_fault(f: FaultEvent, shift: tuple, torus: TorusSpec) -> FaultEvent:
    c = coord_of(f.node, torus)
    moved = tuple((a + b) % n for a, b, n in zip(c, shift, torus.dims))
    return FaultEvent(node_of(moved, torus), f.kind, f.at, f.direction)


def fault_set_orbits(torus: TorusSpec, at: int, max_size: int = 3):
    """Fault sets up to torus translation, as ``(representative, orbit_size)``.

    The protocol is translation invariant when every node shares the same
    phases (the service network is a uniform star), so one simulation per
    orbit covers every member.
    """
    pool = all_faults(torus, at)
    index = {f.key(torus): i for i, f in enumerate(pool)}
    perms = [[index[translate_fault(f, shift, torus).key(torus)] for f in pool]
             for shift in itertools.product(*(range(n) for n in torus.dims))]
    for k in range(1, max_size + 1):
        for combo in itertools.combinations(range(len(pool)), k):
            images = {tuple(sorted(perm[i] for i in combo)) for perm in perms}
            if min(images) == combo:
                yield tuple(pool[i] for i in combo), len(images)


def run_faults(fabric_factory, cfg: LofamoConfig, faults, horizon: Optional[int] = None,
               stop_when_aware: bool = True) -> Lofamo:
    """Simulate one fault scenario on a fresh control-plane-only fabric."""
    fabric = fabric_factory()
    lf = Lofamo(fabric, cfg, faults, stop_when_aware=stop_when_aware)
    if horizon is None:
        last = max((f.at for f in lf.faults), default=0)
        horizon = last + lf.detection_bound()
    fabric.engine.run_until(horizon)
    return lf


# -- time to awareness ---------------------------------------------------------

@dataclass
class TaRow:
    wd_ns: int
    samples: int
    mean_ns: float
    max_ns: int
    undetected: int


def time_to_awareness(platform, base: LofamoConfig, wd_values_ns: Iterable[int],
                      samples: int = 1000, seed: int = 0, kind: str = HOST_CRASH):
    """Monte Carlo of single faults at a uniformly random phase of the period.

    Returns ``(rows, traces)``; ``traces`` is a list of ``(wd_ns, trace)``.
    """
    from dataclasses import replace

    from apesim.engine import RngStreams
    from apesim.fabric import Fabric

    rows, traces = [], []
    rng = RngStreams(seed)
    torus = platform.torus
    if kind == LINK_FAIL:
        candidates = links(torus)
    else:
        candidates = [(n, None) for n in range(torus.nodes)]
    for wd in wd_values_ns:
        cfg = replace(base, wd_ns=wd)
        draw = rng.stream(f"ta.{wd}")
        tas, missing = [], 0
        for _ in range(samples):
            node, direction = candidates[draw.randrange(len(candidates))]
            at = wd + math.floor(draw.random() * wd)
            fault = FaultEvent(node, kind, at, direction)
            lf = run_faults(lambda: Fabric(platform, seed=seed, data_plane=False), cfg, [fault])
            tr = next(iter(lf.traces.values()))
            traces.append((wd, tr))
            if tr.ta is None:
                missing += 1
            else:
                tas.append(tr.ta)
        rows.append(TaRow(wd, samples, statistics.fmean(tas) if tas else float("nan"),
                          max(tas) if tas else 0, missing))
    return rows, traces


def affine_fit(xs, ys) -> tuple[float, float, float]:
    """Least-squares ``y = slope * x + intercept``; returns (slope, intercept, r2)."""
    slope, intercept = statistics.linear_regression(xs, ys)
    mean = statistics.fmean(ys)
    ss_tot = sum((y - mean) ** 2 for y in ys)
    ss_res = sum((y - (slope * x + intercept)) ** 2 for x, y in zip(xs, ys))
    return slope, intercept, 1.0 - ss_res / ss_tot if ss_tot else 1.0


# -- data-plane interference -------------------------------------------------

WORKLOAD_SIZES = (8, 32, 128, 512, 4096, 16384, 65536)


@dataclass
class WorkloadResult:
    latencies: list
    diag_piggybacked: int
    diag_control: int


def mixed_workload(platform, cfg: Optional[LofamoConfig], messages: int = 10_000,
                   seed: int = 0, mean_gap_ns: int = 2_000) -> WorkloadResult:
    """Per-message latencies of a random all-to-all workload.

    Sources, destinations, memory kinds and sizes are drawn from the seed
    alone, so the same workload runs with the protocol on (``cfg``) or off
    (``None``).
    """
    from apesim.fabric import BUFFER_BASE, Fabric
    from apesim.nic import MEMORY_KINDS

    fabric = Fabric(platform, seed=seed)
    nodes = fabric.torus.nodes
    for n in range(nodes):
        for kind in MEMORY_KINDS:
            fabric.register(n, kind, BUFFER_BASE, max(WORKLOAD_SIZES))
    if cfg is not None:
        Lofamo(fabric, cfg)
    draw = fabric.engine.rng.stream("workload")
    t = 0
    recs = []
    for _ in range(messages):
        t += max(1, round(draw.expovariate(1.0 / mean_gap_ns)))
        src = draw.randrange(nodes)
        dst = draw.randrange(nodes)
        recs.append(fabric.post_put(t, src, dst, draw.choice(MEMORY_KINDS),
                                    draw.choice(MEMORY_KINDS), draw.choice(WORKLOAD_SIZES),
                                    p2p=draw.random() < 0.5))
    horizon = t
    while any(r.completed is None for r in recs):
        horizon += 10 * MS
        fabric.engine.run_until(horizon)
        if horizon > t + 10_000 * MS:
            break
    chans = fabric.channels.values()
    return WorkloadResult([r.latency_ns for r in recs],
                          sum(ch.diag_piggybacked for ch in chans),
                          sum(ch.diag_control for ch in chans))
