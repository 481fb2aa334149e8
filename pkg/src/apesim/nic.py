"""Per-node NIC timing primitives: host bus, DMA engines, TLB, endpoints."""

from __future__ import annotations

import math
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, NamedTuple, Optional

from apesim.apelink import _fraction
from apesim.engine import Engine
from apesim.errors import ConfigError, ProtectionFault

HOST = "host"
GPU = "gpu"
MEMORY_KINDS = (HOST, GPU)


@dataclass(frozen=True)
class HostBusProfile:
    gen: str
    lanes: int
    transfer_rate_gtps: Fraction
    encoding: Fraction
    max_payload_bytes: int = 256

    def __post_init__(self):
        object.__setattr__(self, "transfer_rate_gtps", _fraction(self.transfer_rate_gtps))
        object.__setattr__(self, "encoding", _fraction(self.encoding))
        if self.lanes < 1 or self.transfer_rate_gtps <= 0 or not 0 < self.encoding <= 1:
            raise ConfigError(f"invalid host bus profile {self}")

    @property
    def bytes_per_ns(self) -> Fraction:
        return self.lanes * self.transfer_rate_gtps * self.encoding / 8


HOST_BUS_PRESETS = {
    "gen2-x8": HostBusProfile("gen2", 8, Fraction(5), Fraction(8, 10)),
    "gen3-x8": HostBusProfile("gen3", 8, Fraction(8), Fraction(128, 130)),
}


def host_bus_preset(name: str) -> HostBusProfile:
    try:
        return HOST_BUS_PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown host bus preset {name!r}; known: {sorted(HOST_BUS_PRESETS)}") from None


def host_bus_bandwidth(profile: HostBusProfile) -> float:
    """Raw host-interface bandwidth in bytes per second."""
    return float(profile.bytes_per_ns * 1_000_000_000)


def transfer_ns(nbytes: int, bytes_per_ns: Fraction) -> int:
    return math.ceil(Fraction(nbytes) / bytes_per_ns)


def rate_bytes_per_ns(bytes_per_s) -> Fraction:
    return _fraction(bytes_per_s) / 1_000_000_000


# -- DMA ---------------------------------------------------------------------

@dataclass(frozen=True)
class DmaConfig:
    engines: int = 2
    completion_latency_ns: int = 683
    request_bytes: int = 4096
    transfer_ns: Optional[int] = None  # fixed per-transaction bus time, overrides size/bandwidth

    def __post_init__(self):
        if self.engines < 1:
            raise ConfigError("dma engines must be >= 1")
        if self.completion_latency_ns < 0:
            raise ConfigError("dma completion latency must be >= 0")
        if self.request_bytes < 1:
            raise ConfigError("dma request size must be >= 1")


class DmaRecord(NamedTuple):
    index: int
    slot: int
    issue: int
    ready: int
    start: int
    end: int


class DmaEngine:
    """``engines`` outstanding-request slots sharing one serialized bus.

    A transaction holds its slot from issue until its bus transfer ends;
    data becomes available ``completion_latency_ns`` after issue and then
    waits for exclusive use of the bus.
    """

    def __init__(self, engine: Engine, cfg: DmaConfig, name: str = "dma"):
        self.engine = engine
        self.cfg = cfg
        self.name = name
        self.commands: deque = deque()
        self.free_slots = list(range(cfg.engines - 1, -1, -1))
        self.bus_waiting: deque = deque()
        self.bus_busy = False
        self.timeline: list[DmaRecord] = []
        self._count = 0

    def submit(self, bus_ns: int, on_done: Optional[Callable[[DmaRecord], None]] = None) -> None:
        self.commands.append((self._count, bus_ns, on_done))
        self._count += 1
        self._issue()

    def _issue(self) -> None:
        now = self.engine.now()
        while self.commands and self.free_slots:
            index, bus_ns, on_done = self.commands.popleft()
            slot = self.free_slots.pop()
            txn = [index, slot, now, None, None, bus_ns, on_done]
            self.engine.after(self.cfg.completion_latency_ns, self._ready, target=self.name,
                              kind="ready", data=txn)

    def _ready(self, ev) -> None:
        txn = ev.data
        txn[3] = ev.fire_at
        self.bus_waiting.append(txn)
        self._grant()

    def _grant(self) -> None:
        if self.bus_busy or not self.bus_waiting:
            return
        txn = self.bus_waiting.popleft()
        self.bus_busy = True
        txn[4] = self.engine.now()
        self.engine.after(txn[5], self._done, target=self.name, kind="xfer", data=txn)

    def _done(self, ev) -> None:
        index, slot, issue, ready, start, _, on_done = ev.data
        rec = DmaRecord(index, slot, issue, ready, start, ev.fire_at)
        self.timeline.append(rec)
        self.bus_busy = False
        self.free_slots.append(slot)
        if on_done is not None:
            on_done(rec)
        self._grant()
        self._issue()


def dma_schedule(n: int, size: int, cfg: DmaConfig,
                 bus: Optional[HostBusProfile] = None) -> tuple[int, list[DmaRecord]]:
    """Run ``n`` back-to-back read transactions of ``size`` bytes.

    Returns the finish time of the last transfer and the per-transaction
    timeline. ``cfg.transfer_ns`` fixes the bus time directly (handy for
    abstract time units); otherwise it is ``size`` over the bus bandwidth.
    """
    if n < 1:
        raise ValueError("need at least one transaction")
    if cfg.transfer_ns is not None:
        bus_ns = cfg.transfer_ns
    elif bus is not None:
        bus_ns = transfer_ns(size, bus.bytes_per_ns)
    else:
        raise ValueError("either cfg.transfer_ns or a host bus profile is required")
    engine = Engine()
    dma = DmaEngine(engine, cfg)
    for _ in range(n):
        dma.submit(bus_ns)
    engine.run()
    timeline = sorted(dma.timeline)
    return timeline[-1].end if timeline else 0, timeline


# -- address translation -----------------------------------------------------

@dataclass(frozen=True)
class TlbConfig:
    entries: int = 512
    page_bytes: int = 4096
    hit_latency_ns: int = 8
    miss_latency_ns: int = 1962

    def __post_init__(self):
        if self.entries < 1:
            raise ConfigError("tlb entries must be >= 1")
        if self.page_bytes < 1 or self.page_bytes & (self.page_bytes - 1):
            raise ConfigError("tlb page size must be a power of two")
        if self.hit_latency_ns < 0 or self.miss_latency_ns < 0:
            raise ConfigError("tlb latencies must be >= 0")


class Hit(NamedTuple):
    paddr: int
    latency_ns: int


MISS = None


class PageTable:
    """Authoritative virtual-to-physical map of one node, per memory kind."""

    def __init__(self, page_bytes: int = 4096):
        self.page_bytes = page_bytes
        self._map: dict[tuple[str, int], int] = {}
        self._next_frame = {HOST: 0x1000, GPU: 0x800000}

    def register(self, kind: str, vaddr: int, size: int) -> None:
        if kind not in MEMORY_KINDS:
            raise ConfigError(f"unknown memory kind {kind!r}")
        first = vaddr // self.page_bytes
        last = (vaddr + max(size, 1) - 1) // self.page_bytes
        for vpage in range(first, last + 1):
            if (kind, vpage) not in self._map:
                self._map[(kind, vpage)] = self._next_frame[kind]
                self._next_frame[kind] += 1

    def lookup_page(self, node: int, kind: str, vpage: int) -> int:
        try:
            return self._map[(kind, vpage)]
        except KeyError:
            raise ProtectionFault(node, kind, vpage * self.page_bytes) from None

    def translate(self, node: int, kind: str, vaddr: int) -> int:
        ppage = self.lookup_page(node, kind, vaddr // self.page_bytes)
        return ppage * self.page_bytes + vaddr % self.page_bytes

    def __contains__(self, key) -> bool:
        return key in self._map

    def __len__(self) -> int:
        return len(self._map)


class Tlb:
    """LRU cache of page translations in front of a :class:`PageTable`.

    A hit costs ``hit_latency_ns``; a miss goes to the embedded processor
    (``miss_latency_ns``) and installs the entry, evicting the least
    recently used one when full.
    """

    def __init__(self, node: int, cfg: TlbConfig, table: PageTable):
        if table.page_bytes != cfg.page_bytes:
            raise ConfigError("page table and TLB disagree on page size")
        self.node = node
        self.cfg = cfg
        self.table = table
        self._lru: OrderedDict[tuple[str, int], int] = OrderedDict()
        self.hits = 0
        self.misses = 0
        self.evictions = 0

    def __len__(self):
        return len(self._lru)

    def cached(self, kind: str, vaddr: int) -> bool:
        return (kind, vaddr // self.cfg.page_bytes) in self._lru

    def lookup(self, kind: str, vaddr: int) -> Optional[Hit]:
        vpage, offset = divmod(vaddr, self.cfg.page_bytes)
        key = (kind, vpage)
        # unregistered pages fault even when nothing is cached
        ppage = self.table.lookup_page(self.node, kind, vpage)
        if key in self._lru:
            self._lru.move_to_end(key)
            self.hits += 1
            return Hit(ppage * self.cfg.page_bytes + offset, self.cfg.hit_latency_ns)
        self.misses += 1
        return MISS

    def fill(self, kind: str, vaddr: int) -> tuple[int, int]:
        """Install the page after a miss; returns ``(paddr, miss_latency_ns)``."""
        vpage, offset = divmod(vaddr, self.cfg.page_bytes)
        ppage = self.table.lookup_page(self.node, kind, vpage)
        key = (kind, vpage)
        if key not in self._lru and len(self._lru) >= self.cfg.entries:
            self._lru.popitem(last=False)
            self.evictions += 1
        self._lru[key] = ppage
        self._lru.move_to_end(key)
        return ppage * self.cfg.page_bytes + offset, self.cfg.miss_latency_ns

    def translate(self, kind: str, vaddr: int) -> tuple[int, int, bool]:
        """Lookup, filling on a miss. Returns ``(paddr, latency_ns, hit)``."""
        hit = self.lookup(kind, vaddr)
        if hit is not None:
            return hit.paddr, hit.latency_ns, True
        paddr, latency = self.fill(kind, vaddr)
        return paddr, latency, False

    def lru_order(self) -> list[tuple[str, int]]:
        return list(self._lru)


# -- endpoints ---------------------------------------------------------------

@dataclass(frozen=True)
class EndpointProfile:
    kind: str
    injection_overhead_ns: int = 4078
    gpu_extra_small_msg_ns: int = 0
    p2p_enabled: bool = True
    staging_copy_bandwidth: float = 5.0e9
    staging_copy_latency_ns: int = 0
    gpu_read_bandwidth_cap: Optional[float] = None

    def __post_init__(self):
        if self.kind not in MEMORY_KINDS:
            raise ConfigError(f"unknown endpoint kind {self.kind!r}")
        if self.kind == HOST and self.gpu_read_bandwidth_cap is not None:
            raise ConfigError("gpu_read_bandwidth_cap only applies to gpu endpoints")
        if self.staging_copy_bandwidth <= 0:
            raise ConfigError("staging copy bandwidth must be positive")


@dataclass(frozen=True)
class NicConfig:
    dma: DmaConfig = field(default_factory=DmaConfig)
    tlb: TlbConfig = field(default_factory=TlbConfig)
    delivery_overhead_ns: int = 1200
    small_message_bytes: int = 8192
