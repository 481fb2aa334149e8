"""Acceptance criteria, one test each.

Every test prints a single ``PASS``/``FAIL`` line (visible without ``-s``)
with the measured value, the pinned tolerance and the runtime, then
asserts. Run just this file with ``pytest tests/test_acceptance.py``.
"""

import random
import time
from collections import deque
from dataclasses import replace
from fractions import Fraction
from itertools import product

import pytest

from apesim.apelink import Channel, Frame, deframe, efficiency, encode_words, frame, goodput
from apesim.calibration import infiniband_latency_ns
from apesim.cli import main
from apesim.engine import MS, US, Engine
from apesim.fabric import Fabric, rdma_put, roundtrip
from apesim.harness import MetricsTable, compare_report, params, tlb_bandwidths
from apesim.lofamo import (
    HOST_CRASH,
    affine_fit,
    fault_set_orbits,
    mixed_workload,
    reachable,
    run_faults,
    time_to_awareness,
)
from apesim.nic import GPU, HOST, DmaConfig, PageTable, Tlb, dma_schedule
from apesim.topology import Direction, TorusSpec, distance, follow, route


@pytest.fixture
def verdict(capsys):
    started = time.perf_counter()

    def record(number: int, name: str, ok: bool, detail: str, limit_s: float = None):
        elapsed = time.perf_counter() - started
        in_time = limit_s is None or elapsed < limit_s
        budget = f" (limit {limit_s:g} s)" if limit_s is not None else ""
        line = (f"[criterion {number:2d}] {'PASS' if ok and in_time else 'FAIL'}  {name}: "
                f"{detail}; {elapsed:.2f} s{budget}")
        with capsys.disabled():
            print("\n" + line)
        assert ok, line
        assert in_time, line

    return record


def test_01_dual_dma_gain(verdict, platform):
    one, _ = dma_schedule(4, 0, DmaConfig(1, completion_latency_ns=3, transfer_ns=2))
    two, _ = dma_schedule(4, 0, DmaConfig(2, completion_latency_ns=3, transfer_ns=2))
    dma = platform.nic.dma
    big1, _ = dma_schedule(256, dma.request_bytes, DmaConfig(1, dma.completion_latency_ns),
                           platform.host_bus)
    big2, _ = dma_schedule(256, dma.request_bytes, DmaConfig(2, dma.completion_latency_ns),
                           platform.host_bus)
    gain = 1 - big2 / big1
    ok = (one, two) == (20, 12) and Fraction(one - two, one) == Fraction(2, 5) \
        and abs(gain - 0.40) <= 0.01
    verdict(1, "dual-DMA gain",
            ok, f"hand oracle {one} vs {two}; n=256 gain {gain:.4f} (0.40 +/- 0.01)", 1)


def test_02_tlb_speedup(verdict, platform):
    hit, miss = tlb_bandwidths(platform, 64 * 1024)
    ratio = hit / miss

    rng = random.Random(2)
    table = PageTable(4096)
    for kind in (HOST, GPU):
        table.register(kind, 0, 256 * 4096)
    tlb = Tlb(0, replace(platform.nic.tlb, entries=32), table)
    mismatches = 0
    for _ in range(50_000):
        kind = rng.choice((HOST, GPU))
        vaddr = rng.randrange(256 * 4096)
        paddr, _, _ = tlb.translate(kind, vaddr)
        mismatches += paddr != table.translate(0, kind, vaddr)
    ok = abs(ratio - 1.60) <= 0.02 and mismatches == 0
    verdict(2, "TLB receive-bandwidth speedup", ok,
            f"hit/miss ratio {ratio:.4f} (1.60 +/- 0.02); {mismatches} translation mismatches "
            f"in 50000 lookups", 5)


def test_03_link_efficiency_and_plateau(verdict, platform):
    eff = efficiency(64 * 1024, platform.framing)
    assert platform.link.name == "apelink-operational"

    eng = Engine()
    arrivals = []
    params_ = platform.framing

    def drained(f, ch):
        arrivals.append(eng.now())
        ch.return_credits(f.stored_words(params_))

    ch = Channel(eng, 0, Direction.XP, 1, platform.link, params_, drained)
    for i in range(8000):
        ch.send(Frame(dst=1, msg_id=i, length=params_.max_payload_bytes))
    eng.run()
    rate = (len(arrivals) - 1) * params_.max_payload_bytes / ((arrivals[-1] - arrivals[0]) * 1e-9)
    target = 2.195e9
    ok = abs(eff - 0.784) <= 0.002 and abs(rate - target) <= 0.01 * target
    verdict(3, "link efficiency and plateau", ok,
            f"efficiency(64 KiB) {eff:.5f} (0.784 +/- 0.002); saturated channel "
            f"{rate / 1e9:.5f} GB/s (2.195 +/- 1%); model goodput "
            f"{goodput(platform.link, params_) / 1e9:.5f} GB/s", 10)


def test_04_latency_fixed_points(verdict, platform, cal):
    p2p = rdma_put(platform, GPU, GPU, 32, p2p=True).latency_ns
    staging = rdma_put(platform, GPU, GPU, 32, p2p=False).latency_ns
    table = MetricsTable()
    for path, v in (("p2p", p2p), ("staging", staging)):
        table.add("latency", params(pair="gpu-gpu", path=path, size_bytes=32, hops=1),
                  "one_way_latency", v, "ns")
    report = compare_report(table, cal)
    ib = infiniband_latency_ns(cal)
    ok = abs(p2p - 8200) <= 0.05 * 8200 and abs(staging - 16800) <= 0.05 * 16800 \
        and ib == 17400 and "17.40 us" in report and "holds" in report
    verdict(4, "GPU latency fixed points", ok,
            f"P2P {p2p} ns (8200 +/- 5%), staging {staging} ns (16800 +/- 5%), "
            f"report shows InfiniBand {ib / 1000:.2f} us", 5)


def test_05_gpu_roundtrip_penalty(verdict, platform):
    worst = 0.0
    for size in (4, 8, 16, 32, 64, 128):
        base = roundtrip(platform, HOST, HOST, size)
        for src, dst in ((HOST, GPU), (GPU, HOST), (GPU, GPU)):
            ratio = roundtrip(platform, src, dst, size) / base
            worst = max(worst, abs(ratio - 1.30))
    verdict(5, "GPU roundtrip penalty", worst <= 0.05,
            f"largest |ratio - 1.30| over 4-128 B and all GPU pairs = {worst:.4f} (<= 0.05)", 5)


def test_06_lofamo_timing(verdict, platform, lofamo_cfg):
    wds = [w * MS for w in (1, 10, 100, 500, 1000)]
    rows, _ = time_to_awareness(platform, lofamo_cfg, wds, samples=1000, seed=0, kind=HOST_CRASH)
    at500 = next(r for r in rows if r.wd_ns == 500 * MS)
    slope, intercept, r2 = affine_fit([r.wd_ns for r in rows], [r.mean_ns for r in rows])
    ok = at500.samples >= 1000 and abs(at500.mean_ns - 0.9e9) <= 0.1e9 and r2 >= 0.999 \
        and all(r.undetected == 0 for r in rows)
    verdict(6, "LO|FA|MO time to awareness", ok,
            f"mean Ta at WD 500 ms = {at500.mean_ns / 1e9:.4f} s over {at500.samples} samples "
            f"(0.9 +/- 0.1 s); fit slope {slope:.3f}, R^2 {r2:.6f} (>= 0.999)", 30)


def test_07_zero_data_plane_cost(verdict, platform, lofamo_cfg):
    # a short watchdog period so diagnostics hit busy channels many times during the traffic
    cfg = replace(lofamo_cfg, wd_ns=20 * US)
    off = mixed_workload(platform, None, messages=10_000, seed=0)
    on = mixed_workload(platform, cfg, messages=10_000, seed=0)
    ok = on.latencies == off.latencies and None not in on.latencies \
        and on.diag_piggybacked > 0 and on.diag_control > 0
    verdict(7, "zero data-plane cost", ok,
            f"{sum(a == b for a, b in zip(on.latencies, off.latencies))}/10000 latencies "
            f"bit-identical; {on.diag_piggybacked} piggybacked and {on.diag_control} control "
            f"diagnostics", 10)


def test_08_no_undetected_faults(verdict, platform, lofamo_cfg):
    torus = TorusSpec((4, 4, 1))
    cfg = replace(lofamo_cfg, wd_ns=1 * MS)
    plat = replace(platform, torus=torus)
    covered = scenarios = failures = 0
    worst = 0
    bound = None
    for faults, orbit in fault_set_orbits(torus, cfg.wd_ns + 1, max_size=3):
        if not reachable(faults, torus):
            continue
        lf = run_faults(lambda: Fabric(plat, data_plane=False), cfg, faults)
        bound = lf.detection_bound()
        keys = {f.key(torus) for f in faults}
        reported = set(lf.master_collect().reports)
        late = [t for t in lf.traces.values() if t.ta is None or t.ta > bound]
        if late or not keys <= reported or lf.false_positive:
            failures += 1
        else:
            worst = max(worst, max(t.ta for t in lf.traces.values()))
        scenarios += 1
        covered += orbit
    verdict(8, "no undetected fault, |F| <= 3 on 4x4x1", failures == 0,
            f"{covered} reachable fault sets ({scenarios} translation classes), {failures} "
            f"missed; worst Ta {worst} ns vs bound {bound} ns at WD 1 ms", 120)


def _bfs(dims, src):
    X, Y, Z = dims
    dist = {src: 0}
    q = deque([src])
    while q:
        n = q.popleft()
        x, y, z = n % X, (n // X) % Y, n // (X * Y)
        for dx, dy, dz in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            m = (x + dx) % X + ((y + dy) % Y) * X + ((z + dz) % Z) * X * Y
            if m not in dist:
                dist[m] = dist[n] + 1
                q.append(m)
    return dist


def test_09_codec_and_routing_oracles(verdict, platform):
    rng = random.Random(9)
    msgs = [rng.randbytes(rng.choice((0, 1, 15, 16, 17, rng.randrange(4097), rng.randrange(20000))))
            for _ in range(10_000)]
    codec_bad = 0
    for start in range(0, len(msgs), 1000):
        batch = msgs[start:start + 1000]
        words = encode_words([f for i, m in enumerate(batch)
                              for f in frame(m, platform.framing, msg_id=i)], platform.framing)
        out = deframe(words, platform.framing)
        codec_bad += [d.payload for d in out] != batch
    route_bad = pairs = 0
    for dims in product(range(1, 6), repeat=3):
        spec = TorusSpec(dims)
        for src in range(spec.nodes):
            ref = _bfs(dims, src)
            for dst in range(spec.nodes):
                r = route(src, dst, spec)
                route_bad += len(r) != ref[dst] or follow(src, r, spec) != dst \
                    or distance(src, dst, spec) != ref[dst]
                pairs += 1
    verdict(9, "codec and routing oracles", codec_bad == 0 and route_bad == 0,
            f"10000 random messages, {codec_bad} bad batches; {pairs} routed pairs on all tori "
            f"up to 5x5x5, {route_bad} differ from BFS", 30)


@pytest.mark.slow
def test_10_repro_determinism(verdict, tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    codes = [main(["repro-paper", "--out", str(d), "--seed", "0"]) for d in (a, b)]
    capsys.readouterr()
    names = sorted(p.name for p in a.iterdir())
    same = names == sorted(p.name for p in b.iterdir()) and \
        all((a / n).read_bytes() == (b / n).read_bytes() for n in names)
    verdict(10, "repro-paper determinism", same and codes == [0, 0],
            f"{len(names)} CSVs byte-identical across two runs: {same}; exit codes {codes}")
