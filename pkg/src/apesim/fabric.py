"""Simulated APEnet+ platform: nodes, channels and the RDMA put path.

A put walks through these stages, each a serialized resource except the
link hops::

    sender CPU      staging copy (GPU source without P2P) + injection overhead
    DMA             one read transaction per frame, k outstanding, shared bus
    links           e-cube route, credit flow control per channel
    RX engine       TLB translation (Nios path on a miss) + write into memory
    receiver CPU    completion delivery + GPU P2P small-message cost
                    + staging copy (GPU destination without P2P)

Completion records carry a breakdown whose parts telescope to the total.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional

from apesim.apelink import Channel, FramingParams, Frame, LinkProfile, link_preset
from apesim.engine import Engine
from apesim.errors import ConfigError, ProtectionFault
from apesim.nic import (
    GPU,
    HOST,
    MEMORY_KINDS,
    DmaEngine,
    EndpointProfile,
    HostBusProfile,
    NicConfig,
    PageTable,
    Tlb,
    host_bus_preset,
    rate_bytes_per_ns,
    transfer_ns,
)
from apesim.topology import DIRECTIONS, TorusSpec, route

STAGING_BASE = 1 << 44
BUFFER_BASE = 0x1000_0000

BREAKDOWN_KEYS = ("sender_queue", "staging_src", "injection", "dma", "link", "rx",
                  "receiver_queue", "delivery", "gpu_p2p", "staging_dst")


@dataclass(frozen=True)
class PlatformConfig:
    torus: TorusSpec = TorusSpec((4, 4, 1))
    link: LinkProfile = field(default_factory=lambda: link_preset("apelink-operational"))
    framing: FramingParams = field(default_factory=FramingParams)
    host_bus: HostBusProfile = field(default_factory=lambda: host_bus_preset("gen2-x8"))
    nic: NicConfig = field(default_factory=NicConfig)
    host: EndpointProfile = field(default_factory=lambda: EndpointProfile(HOST))
    gpu: EndpointProfile = field(default_factory=lambda: EndpointProfile(GPU))

    def endpoint(self, kind: str) -> EndpointProfile:
        return self.gpu if kind == GPU else self.host


@dataclass
class PutRecord:
    msg_id: int
    src: int
    dst: int
    src_kind: str
    dst_kind: str
    size: int
    p2p: bool
    src_vaddr: int
    dst_vaddr: int
    posted: int
    hops: int = 0
    frames: int = 0
    status: str = "pending"
    stamps: dict = field(default_factory=dict)
    paddrs: list = field(default_factory=list)
    tlb_hits: int = 0
    tlb_misses: int = 0
    on_complete: Optional[Callable[["PutRecord"], None]] = field(default=None, repr=False)
    _dma_done: int = field(default=0, repr=False)
    _drained: int = field(default=0, repr=False)

    @property
    def completed(self) -> Optional[int]:
        return self.stamps.get("complete")

    @property
    def latency_ns(self) -> Optional[int]:
        done = self.completed
        return None if done is None else done - self.posted

    @property
    def breakdown(self) -> dict[str, int]:
        s = self.stamps
        marks = [self.posted, s["cpu_start"], s["staged"], s["injected"], s["dma_done"],
                 s["arrived"], s["drained"], s["rx_cpu_start"], s["delivered"], s["gpu_done"],
                 s["complete"]]
        return {k: marks[i + 1] - marks[i] for i, k in enumerate(BREAKDOWN_KEYS)}


class Node:
    def __init__(self, fabric: "Fabric", nid: int):
        cfg = fabric.cfg
        self.id = nid
        self.page_table = PageTable(cfg.nic.tlb.page_bytes)
        self.tlb = Tlb(nid, cfg.nic.tlb, self.page_table)
        self.dma = DmaEngine(fabric.engine, cfg.nic.dma, name=f"dma{nid}")
        self.tx_cpu_free = 0
        self.rx_cpu_free = 0
        self.rx_queue: deque = deque()
        self.rx_busy = False
        self.protection_faults = 0
        self.host_alive = True
        self.nic_alive = True
        self.delivered_bytes = 0


class Fabric:
    """All nodes and channels of one torus, driven by a single engine."""

    def __init__(self, cfg: PlatformConfig = PlatformConfig(), engine: Optional[Engine] = None,
                 seed: int = 0, data_plane: bool = True):
        self.cfg = cfg
        self.engine = engine if engine is not None else Engine(seed)
        self.torus = cfg.torus
        self.nodes = [Node(self, n) for n in range(cfg.torus.nodes)] if data_plane else []
        table = cfg.torus.neighbor_table
        self.channels: dict = {}
        for n in range(cfg.torus.nodes):
            for d in DIRECTIONS:
                self.channels[(n, d)] = Channel(self.engine, n, d, table[n][d], cfg.link,
                                                cfg.framing, self._on_arrival)
        self.records: list[PutRecord] = []
        self._next_msg = 0
        self._bus_rate = cfg.host_bus.bytes_per_ns
        gpu_cap = cfg.gpu.gpu_read_bandwidth_cap
        self._gpu_read_rate = min(self._bus_rate, rate_bytes_per_ns(gpu_cap)) if gpu_cap else self._bus_rate
        self._staging_rate = {k: rate_bytes_per_ns(cfg.endpoint(k).staging_copy_bandwidth)
                              for k in MEMORY_KINDS}
        self._routes: dict = {}

    # -- setup ---------------------------------------------------------------

    def register(self, node: int, kind: str, vaddr: int, size: int) -> None:
        self.nodes[node].page_table.register(kind, vaddr, size)

    def reverse(self, ch: Channel) -> Channel:
        return self.channels[(ch.dst, ch.direction.opposite)]

    def route(self, src: int, dst: int):
        key = (src, dst)
        hops = self._routes.get(key)
        if hops is None:
            hops = []
            n = src
            for d in route(src, dst, self.torus):
                hops.append(self.channels[(n, d)])
                n = self.torus.neighbor_table[n][d]
            self._routes[key] = hops
        return hops

    # -- put path --------------------------------------------------------------

    def uses_p2p(self, src_kind: str, dst_kind: str, p2p: bool) -> bool:
        involved = [self.cfg.endpoint(k) for k in (src_kind, dst_kind) if k == GPU]
        return p2p and all(e.p2p_enabled for e in involved)

    def post_put(self, at: int, src: int, dst: int, src_kind: str = HOST, dst_kind: str = HOST,
                 size: int = 32, p2p: bool = True, src_vaddr: int = BUFFER_BASE,
                 dst_vaddr: int = BUFFER_BASE,
                 on_complete: Optional[Callable[[PutRecord], None]] = None) -> PutRecord:
        if src_kind not in MEMORY_KINDS or dst_kind not in MEMORY_KINDS:
            raise ConfigError(f"unknown memory kind in {src_kind}->{dst_kind}")
        if size < 0:
            raise ConfigError("message size must be >= 0")
        self.torus.check(src)
        self.torus.check(dst)
        rec = PutRecord(self._next_msg, src, dst, src_kind, dst_kind, size,
                        self.uses_p2p(src_kind, dst_kind, p2p), src_vaddr, dst_vaddr, at,
                        on_complete=on_complete)
        self._next_msg += 1
        rec.frames = max(1, -(-size // self.cfg.framing.max_payload_bytes))
        rec.hops = len(self.route(src, dst))
        self.records.append(rec)
        self.engine.schedule(at, self._sender_cpu, target=f"host{src}", kind="post", data=rec)
        return rec

    def _staging_ns(self, kind: str, size: int) -> int:
        ep = self.cfg.endpoint(kind)
        return ep.staging_copy_latency_ns + transfer_ns(size, self._staging_rate[kind])

    def _sender_cpu(self, ev) -> None:
        rec: PutRecord = ev.data
        node = self.nodes[rec.src]
        if not node.host_alive:
            rec.status = "sender_dead"
            return
        now = self.engine.now()
        start = max(now, node.tx_cpu_free)
        staging = self._staging_ns(GPU, rec.size) if rec.src_kind == GPU and not rec.p2p else 0
        injected = start + staging + self.cfg.endpoint(rec.src_kind).injection_overhead_ns
        node.tx_cpu_free = injected
        rec.stamps.update(cpu_start=start, staged=start + staging, injected=injected)
        self.engine.schedule(injected, self._start_dma, target=f"nic{rec.src}", kind="inject",
                             data=rec)

    def _start_dma(self, ev) -> None:
        rec: PutRecord = ev.data
        node = self.nodes[rec.src]
        if not node.nic_alive:
            rec.status = "nic_dead"
            return
        chunk = self.cfg.framing.max_payload_bytes
        rate = self._gpu_read_rate if rec.src_kind == GPU and rec.p2p else self._bus_rate
        for i in range(rec.frames):
            length = min(chunk, rec.size - i * chunk)
            f = Frame(dst=rec.dst, msg_id=rec.msg_id, length=length, seq=i,
                      last=i == rec.frames - 1)
            f.ref = [rec, 0]
            node.dma.submit(transfer_ns(length, rate), lambda _r, f=f: self._frame_read(f))

    def _frame_read(self, f: Frame) -> None:
        rec = f.ref[0]
        rec._dma_done += 1
        if rec._dma_done == rec.frames:
            rec.stamps["dma_done"] = self.engine.now()
        hops = self.route(rec.src, rec.dst)
        if hops:
            hops[0].send(f)
        else:
            self._rx_enqueue(self.nodes[rec.dst], f, None)

    def _on_arrival(self, f: Frame, ch: Channel) -> None:
        ref = f.ref
        if ref is None:
            return
        rec = ref[0]
        ref[1] += 1
        hops = self.route(rec.src, rec.dst)
        if ref[1] < len(hops):
            # the frame leaves this input buffer straight into the next output queue
            ch.return_credits(f.payload_words + self.cfg.framing.frame_overhead)
            if not self.nodes[ch.dst].nic_alive:
                return
            hops[ref[1]].send(f)
        else:
            self._rx_enqueue(self.nodes[ch.dst], f, ch)

    def _rx_enqueue(self, node: Node, f: Frame, ch: Optional[Channel]) -> None:
        if not node.nic_alive:
            return
        rec = f.ref[0]
        if f.last:
            rec.stamps["arrived"] = self.engine.now()
        node.rx_queue.append((f, ch))
        if not node.rx_busy:
            self._rx_next(node)

    def _rx_next(self, node: Node) -> None:
        if not node.rx_queue:
            node.rx_busy = False
            return
        node.rx_busy = True
        f, ch = node.rx_queue[0]
        rec: PutRecord = f.ref[0]
        cost = 0
        if rec.status != "protection_fault":
            try:
                cost = self._translate(node, rec, f)
                cost += transfer_ns(f.length, self._bus_rate)
            except ProtectionFault:
                rec.status = "protection_fault"
                node.protection_faults += 1
                cost = 0
        self.engine.after(cost, self._rx_done, target=f"rx{node.id}", kind="drain",
                          data=node)

    def _translate(self, node: Node, rec: PutRecord, f: Frame) -> int:
        chunk = self.cfg.framing.max_payload_bytes
        kind = rec.dst_kind
        base = rec.dst_vaddr + f.seq * chunk
        if kind == GPU and not rec.p2p:
            node.page_table.translate(node.id, GPU, base)
            kind, base = HOST, STAGING_BASE + base
            node.page_table.register(HOST, base, max(f.length, 1))
        page = self.cfg.nic.tlb.page_bytes
        cost = 0
        addr = base
        end = base + max(f.length, 1)
        while addr < end:
            paddr, latency, hit = node.tlb.translate(kind, addr)
            rec.paddrs.append((kind, addr, paddr))
            if hit:
                rec.tlb_hits += 1
            else:
                rec.tlb_misses += 1
            cost += latency
            addr = (addr // page + 1) * page
        return cost

    def _rx_done(self, ev) -> None:
        node: Node = ev.data
        f, ch = node.rx_queue.popleft()
        if ch is not None:
            ch.return_credits(f.payload_words + self.cfg.framing.frame_overhead)
        rec: PutRecord = f.ref[0]
        rec._drained += 1
        node.delivered_bytes += f.length
        if rec._drained == rec.frames:
            rec.stamps["drained"] = self.engine.now()
            self._receiver_cpu(rec)
        self._rx_next(node)

    def _receiver_cpu(self, rec: PutRecord) -> None:
        node = self.nodes[rec.dst]
        now = self.engine.now()
        if rec.status == "protection_fault" or not node.host_alive:
            rec.status = rec.status if rec.status == "protection_fault" else "receiver_dead"
            if rec.on_complete is not None:
                rec.on_complete(rec)
            return
        start = max(now, node.rx_cpu_free)
        delivered = start + self.cfg.nic.delivery_overhead_ns
        gpu_involved = GPU in (rec.src_kind, rec.dst_kind)
        gpu = (self.cfg.gpu.gpu_extra_small_msg_ns
               if rec.p2p and gpu_involved and rec.size <= self.cfg.nic.small_message_bytes else 0)
        staging = self._staging_ns(GPU, rec.size) if rec.dst_kind == GPU and not rec.p2p else 0
        done = delivered + gpu + staging
        node.rx_cpu_free = done
        rec.stamps.update(rx_cpu_start=start, delivered=delivered, gpu_done=delivered + gpu,
                          complete=done)
        self.engine.schedule(done, self._complete, target=f"host{rec.dst}", kind="complete",
                             data=rec)

    def _complete(self, ev) -> None:
        rec: PutRecord = ev.data
        rec.status = "ok"
        if rec.on_complete is not None:
            rec.on_complete(rec)

    def run(self, until: Optional[int] = None) -> int:
        if until is None:
            return self.engine.run()
        return self.engine.run_until(until)


# -- experiment helpers --------------------------------------------------------

def _pair(torus: TorusSpec, hops: int = 1) -> tuple[int, int]:
    """Source and destination ``hops`` steps apart along +x (then +y)."""
    from apesim.topology import Direction, follow
    path = []
    for axis_dir, size in ((Direction.XP, torus.dims[0]), (Direction.YP, torus.dims[1]),
                           (Direction.ZP, torus.dims[2])):
        take = min(hops - len(path), size // 2)
        path.extend([axis_dir] * max(take, 0))
    if len(path) != hops:
        raise ConfigError(f"torus {torus} has no node pair {hops} hops apart")
    return 0, follow(0, path, torus)


def _registered_fabric(cfg: PlatformConfig, src: int, dst: int, size: int, seed: int = 0,
                       span: int = 1) -> Fabric:
    fab = Fabric(cfg, seed=seed)
    for node in {src, dst}:
        for kind in MEMORY_KINDS:
            fab.register(node, kind, BUFFER_BASE, max(size, 1) * span)
    return fab


def rdma_put(cfg: PlatformConfig, src_kind: str = HOST, dst_kind: str = HOST, size: int = 32,
             p2p: bool = True, hops: int = 1, src: Optional[int] = None,
             dst: Optional[int] = None, warm: bool = True) -> PutRecord:
    """One-way latency of a single put on an otherwise idle platform.

    With ``warm`` a first put to the same buffer primes the TLB, as in a
    benchmark loop; the second put is returned.
    """
    if src is None or dst is None:
        src, dst = _pair(cfg.torus, hops)
    fab = _registered_fabric(cfg, src, dst, size)
    first = fab.post_put(0, src, dst, src_kind, dst_kind, size, p2p)
    if warm:
        fab.run()
        if first.status != "ok":
            return first
        first = fab.post_put(fab.engine.now(), src, dst, src_kind, dst_kind, size, p2p)
    fab.run()
    return first


def roundtrip(cfg: PlatformConfig, src_kind: str = HOST, dst_kind: str = HOST, size: int = 32,
              p2p: bool = True, hops: int = 1, src: Optional[int] = None,
              dst: Optional[int] = None) -> int:
    """Ping-pong latency: the pong leaves the destination buffer for the source buffer."""
    if src is None or dst is None:
        src, dst = _pair(cfg.torus, hops)
    fab = _registered_fabric(cfg, src, dst, size)
    result = {}

    def ping(t0, tag):
        def pong(rec):
            if rec.status != "ok":
                result[tag] = None
                return
            fab.post_put(fab.engine.now(), dst, src, dst_kind, src_kind, size, p2p,
                         on_complete=lambda r: result.__setitem__(
                             tag, r.completed - t0 if r.status == "ok" else None))
        fab.post_put(t0, src, dst, src_kind, dst_kind, size, p2p, on_complete=pong)

    ping(0, "warm")
    fab.run()
    t0 = fab.engine.now()
    ping(t0, "measured")
    fab.run()
    if result.get("measured") is None:
        raise ConfigError("roundtrip did not complete")
    return result["measured"]


def stream_bandwidth(cfg: PlatformConfig, src_kind: str, dst_kind: str, size: int,
                     count: Optional[int] = None, p2p: bool = True, hops: int = 1,
                     distinct_pages: bool = False, warm: Optional[bool] = None) -> float:
    """Sustained bytes/s of back-to-back puts, from completion spacing.

    ``distinct_pages`` sends every message to a fresh buffer region, which
    defeats the TLB; ``warm`` (default: unless ``distinct_pages``) primes it
    with one untimed pass first.
    """
    if warm is None:
        warm = not distinct_pages
    if count is None:
        count = max(8, min(256, math.ceil((4 << 20) / max(size, 1))))
    src, dst = _pair(cfg.torus, hops)
    span = count if distinct_pages else 1
    fab = _registered_fabric(cfg, src, dst, size, span=span)
    if warm:
        fab.post_put(0, src, dst, src_kind, dst_kind, size, p2p)
        fab.run()
    t0 = fab.engine.now()
    stride = size if distinct_pages else 0
    recs = [fab.post_put(t0, src, dst, src_kind, dst_kind, size, p2p,
                         dst_vaddr=BUFFER_BASE + i * stride) for i in range(count)]
    fab.run()
    done = [r.completed for r in recs]
    if any(d is None for d in done):
        raise ConfigError("bandwidth stream did not complete")
    if count == 1:
        return size / ((done[0] - t0) * 1e-9)
    return (count - 1) * size / ((done[-1] - done[0]) * 1e-9)


def bandwidth_sweep(cfg: PlatformConfig, src_kind: str, dst_kind: str, sizes,
                    p2p: bool = True) -> list[tuple[int, float]]:
    sizes = list(sizes)
    if sizes != sorted(sizes):
        raise ConfigError("bandwidth sweep sizes must be ascending")
    return [(s, stream_bandwidth(cfg, src_kind, dst_kind, s, p2p=p2p)) for s in sizes]
