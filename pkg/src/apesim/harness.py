"""Experiment runner: scenario in, metrics table out.

Every experiment kind turns a :class:`~apesim.config.ScenarioConfig` into
rows of ``(experiment, parameters, metric, value, unit)``. Parameters are
``key=value`` pairs joined with ``;`` in a fixed order so that tables from
the same scenario and seed compare byte for byte.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, NamedTuple, Optional

from apesim.calibration import infiniband_latency_ns, load_calibration
from apesim.config import ScenarioConfig
from apesim.engine import MS
from apesim.errors import ConfigError
from apesim.fabric import Fabric, rdma_put, roundtrip, stream_bandwidth
from apesim.lofamo import Lofamo, affine_fit, time_to_awareness
from apesim.nic import GPU, HOST, DmaConfig, dma_schedule

COLUMNS = ("experiment", "parameters", "metric", "value", "unit")
AWARENESS_COLUMNS = ("wd_ms", "node", "kind", "t_fault_ns", "t_local_ns", "t_master_ns", "ta_ns")


class Row(NamedTuple):
    experiment: str
    parameters: str
    metric: str
    value: object
    unit: str


def params(**kw) -> str:
    return ";".join(f"{k}={v}" for k, v in kw.items())


def parse_params(text: str) -> dict[str, str]:
    return dict(item.split("=", 1) for item in text.split(";") if item)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class MetricsTable:
    rows: list[Row] = field(default_factory=list)
    traces: list = field(default_factory=list)  # (wd_ns, AwarenessTrace) for fault runs

    def add(self, experiment: str, parameters: str, metric: str, value, unit: str) -> None:
        if not unit:
            raise ValueError(f"metric {metric} needs an explicit unit")
        self.rows.append(Row(experiment, parameters, metric, value, unit))

    def extend(self, other: "MetricsTable", extra: str = "") -> None:
        for r in other.rows:
            p = f"{extra};{r.parameters}" if extra and r.parameters else extra or r.parameters
            self.rows.append(r._replace(parameters=p))
        self.traces.extend(other.traces)

    def select(self, metric: Optional[str] = None, **match) -> list[Row]:
        out = []
        for r in self.rows:
            if metric is not None and r.metric != metric:
                continue
            p = parse_params(r.parameters)
            if all(p.get(k) == str(v) for k, v in match.items()):
                out.append(r)
        return out

    def value(self, metric: str, **match):
        rows = self.select(metric, **match)
        if len(rows) != 1:
            raise KeyError(f"{len(rows)} rows match {metric} {match}")
        return rows[0].value

    def __len__(self):
        return len(self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            w.writerow([r.experiment, r.parameters, r.metric, _fmt(r.value), r.unit])
        return buf.getvalue()

    def render(self) -> str:
        """Aligned plain-text view for the terminal."""
        cells = [COLUMNS] + [(r.experiment, r.parameters, r.metric, _fmt(r.value), r.unit)
                             for r in self.rows]
        widths = [max(len(c[i]) for c in cells) for i in range(len(COLUMNS))]
        return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip()
                         for row in cells) + "\n"


def export_csv(table: MetricsTable, path: str) -> None:
    if not table.rows:
        raise ValueError("refusing to export an empty table")
    _write(path, table.to_csv())


def awareness_csv(traces) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(AWARENESS_COLUMNS)
    for wd_ns, tr in traces:
        w.writerow([_fmt(Fraction(wd_ns, MS)), tr.fault.node, tr.fault.kind, tr.fault.at,
                    _fmt(tr.t_local_detect), _fmt(tr.t_master_aware), _fmt(tr.ta)])
    return buf.getvalue()


def export_awareness_csv(traces, path: str) -> None:
    if not traces:
        raise ValueError("refusing to export an empty trace list")
    _write(path, awareness_csv(traces))


def _write(path: str, text: str) -> None:
    try:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise ConfigError(f"cannot write {path}: {exc}") from None


# -- experiments -----------------------------------------------------------------

def _kinds(pair: str) -> tuple[str, str]:
    src, dst = pair.split("-")
    return src, dst


def _latency(cfg: ScenarioConfig, table: MetricsTable) -> None:
    exp, platform = cfg.experiment, cfg.platform()
    for size in exp["sizes"]:
        for pair in exp["pairs"]:
            src, dst = _kinds(pair)
            gpu_involved = GPU in (src, dst)
            for path in exp["paths"]:
                if not gpu_involved:
                    if path != exp["paths"][0]:
                        continue
                    label = "host"
                elif path == "p2p" and not platform.gpu.p2p_enabled:
                    continue  # no P2P path to measure
                else:
                    label = path
                rec = rdma_put(platform, src, dst, size, p2p=path == "p2p", hops=exp["hops"])
                if rec.status != "ok":
                    raise ConfigError(f"latency put {pair} {size} B ended with {rec.status}")
                p = params(pair=pair, path=label, size_bytes=size, hops=exp["hops"])
                table.add("latency", p, "one_way_latency", rec.latency_ns, "ns")


def _roundtrip(cfg: ScenarioConfig, table: MetricsTable) -> None:
    exp, platform = cfg.experiment, cfg.platform()
    for size in exp["sizes"]:
        host_rt = None
        results = []
        for pair in exp["pairs"]:
            src, dst = _kinds(pair)
            rt = roundtrip(platform, src, dst, size, p2p=exp["p2p"], hops=exp["hops"])
            results.append((pair, rt))
            if pair == "host-host":
                host_rt = rt
        for pair, rt in results:
            p = params(pair=pair, size_bytes=size, hops=exp["hops"])
            table.add("roundtrip", p, "roundtrip_latency", rt, "ns")
            if host_rt is not None and pair != "host-host":
                table.add("roundtrip", p, "ratio_to_host_host", rt / host_rt, "1")


def _bandwidth(cfg: ScenarioConfig, table: MetricsTable) -> None:
    exp, platform = cfg.experiment, cfg.platform()
    for pair in exp["pairs"]:
        src, dst = _kinds(pair)
        for size in exp["sizes"]:
            bw = stream_bandwidth(platform, src, dst, size, count=exp["repetitions"],
                                  p2p=exp["p2p"], hops=exp["hops"])
            table.add("bandwidth", params(pair=pair, size_bytes=size, hops=exp["hops"]),
                      "bandwidth", bw, "B/s")


def _dma(cfg: ScenarioConfig, table: MetricsTable) -> None:
    exp, platform = cfg.experiment, cfg.platform()
    base = platform.nic.dma
    for size in exp["sizes"]:
        totals = {}
        for k in exp["engines"]:
            total, _ = dma_schedule(exp["repetitions"], size, replace(base, engines=k),
                                    platform.host_bus)
            totals[k] = total
            p = params(engines=k, size_bytes=size, transactions=exp["repetitions"])
            table.add("dma", p, "total_time", total, "ns")
        ref = exp["engines"][0]
        for k in exp["engines"][1:]:
            p = params(engines=k, size_bytes=size, transactions=exp["repetitions"])
            table.add("dma", p, f"time_reduction_vs_{ref}_engine", 1 - totals[k] / totals[ref], "1")


def tlb_bandwidths(platform, size: int, count: Optional[int] = None) -> tuple[float, float]:
    """Receive bandwidth with every page cached vs every page missing.

    Messages must be large enough for the link to drain them back to back;
    small ones are bound by per-message software overhead instead.
    """
    hit = stream_bandwidth(platform, HOST, HOST, size, count=count)
    miss = stream_bandwidth(platform, HOST, HOST, size, count=count, distinct_pages=True)
    return hit, miss


def _tlb(cfg: ScenarioConfig, table: MetricsTable) -> None:
    exp, platform = cfg.experiment, cfg.platform()
    for size in exp["sizes"]:
        hit, miss = tlb_bandwidths(platform, size, exp["repetitions"])
        p = params(size_bytes=size, messages=exp["repetitions"] or "auto")
        table.add("tlb", params(hit_rate=1, **parse_params(p)), "bandwidth", hit, "B/s")
        table.add("tlb", params(hit_rate=0, **parse_params(p)), "bandwidth", miss, "B/s")
        table.add("tlb", p, "hit_over_miss_bandwidth", hit / miss, "1")


def _fault(cfg: ScenarioConfig, table: MetricsTable) -> None:
    exp, platform, base = cfg.experiment, cfg.platform(), cfg.lofamo()
    wds = [round(Fraction(w) * MS) for w in exp["wd_ms"]]
    rows, traces = time_to_awareness(platform, base, wds, samples=exp["samples"], seed=cfg.seed,
                                     kind=exp["fault_kind"])
    table.traces.extend(traces)
    for r in rows:
        p = params(wd_ms=_fmt(Fraction(r.wd_ns, MS)), fault=exp["fault_kind"], samples=r.samples)
        table.add("fault", p, "mean_ta", r.mean_ns, "ns")
        table.add("fault", p, "max_ta", r.max_ns, "ns")
        table.add("fault", p, "undetected", r.undetected, "count")
    if len(rows) >= 2:
        slope, intercept, r2 = affine_fit([r.wd_ns for r in rows], [r.mean_ns for r in rows])
        p = params(fit="mean_ta_vs_wd", fault=exp["fault_kind"])
        table.add("fault", p, "slope", slope, "1")
        table.add("fault", p, "intercept", intercept, "ns")
        table.add("fault", p, "r_squared", r2, "1")
    scheduled = cfg.faults()
    if scheduled:
        fabric = Fabric(platform, seed=cfg.seed, data_plane=False)
        lf = Lofamo(fabric, base, scheduled)
        horizon = max(f.at for f in scheduled) + lf.detection_bound()
        fabric.engine.run_until(horizon)
        for tr in lf.traces.values():
            table.traces.append((base.wd_ns, tr))
            f = tr.fault
            p = params(scheduled=str(f), at_ns=f.at)
            table.add("fault", p, "t_local_detect", tr.t_local_detect, "ns")
            table.add("fault", p, "t_master_aware", tr.t_master_aware, "ns")
            table.add("fault", p, "ta", tr.ta, "ns")


EXPERIMENTS = {"latency": _latency, "roundtrip": _roundtrip, "bandwidth": _bandwidth,
               "dma": _dma, "tlb": _tlb, "fault": _fault}


def run_scenario(cfg: ScenarioConfig) -> MetricsTable:
    table = MetricsTable()
    EXPERIMENTS[cfg.experiment["kind"]](cfg, table)
    return table


# -- reporting ---------------------------------------------------------------------

def compare_report(table: MetricsTable, cal: Optional[dict] = None) -> str:
    """GPU-to-GPU one-way latency: P2P, host staging and the InfiniBand reference."""
    rows = table.select("one_way_latency")
    if not rows:
        raise ValueError("compare_report needs a latency experiment")
    size = min(int(parse_params(r.parameters)["size_bytes"]) for r in rows)

    def pick(path):
        hits = table.select("one_way_latency", pair="gpu-gpu", path=path, size_bytes=size)
        return hits[0].value if hits else None

    ib = infiniband_latency_ns(cal)
    p2p, staging = pick("p2p"), pick("staging")
    lines = [f"GPU-to-GPU one-way latency, {size} B messages"]
    for label, v in (("APEnet+ P2P", p2p), ("APEnet+ staging", staging),
                     ("InfiniBand (reference)", ib)):
        lines.append(f"  {label:<24}{'absent' if v is None else f'{v / 1000:8.2f} us'}")
    if p2p is not None and staging is not None:
        ok = p2p < staging < ib
        lines.append(f"  ordering P2P < staging < InfiniBand: {'holds' if ok else 'VIOLATED'}")
    return "\n".join(lines) + "\n"


# -- reference suites ------------------------------------------------------------------

@dataclass(frozen=True)
class Check:
    name: str
    ok: bool
    detail: str


REPRO_SUITES = {
    "roundtrip": {"kind": "roundtrip", "sizes": [2 ** k for k in range(2, 13)]},
    "latency": {"kind": "latency", "sizes": [2 ** k for k in range(2, 13)]},
    "bandwidth": {"kind": "bandwidth", "sizes": [2 ** k for k in range(5, 21)]},
    "awareness": {"kind": "fault", "wd_ms": ["1", "10", "100", "500", "1000"], "samples": 1000},
}

REPRO_FILES = {"roundtrip": "roundtrip.csv", "latency": "latency.csv",
               "bandwidth": "bandwidth.csv", "awareness": "awareness.csv"}


def repro_suites(seed: int = 0, samples: Optional[int] = None, cal: Optional[dict] = None
                 ) -> dict[str, MetricsTable]:
    from apesim.config import normalize

    out = {}
    for name, exp in REPRO_SUITES.items():
        exp = dict(exp)
        if samples is not None and exp["kind"] == "fault":
            exp["samples"] = samples
        cfg = normalize({"name": name, "seed": seed, "experiment": exp}, cal=cal)
        out[name] = run_scenario(cfg)
    return out


def repro_checks(tables: dict[str, MetricsTable], cal: Optional[dict] = None) -> list[Check]:
    """Tolerance checks on the reference suites."""
    cal = cal or load_calibration()
    t = cal["targets"]
    checks = []

    def within(name, value, target, tol, unit=""):
        ok = abs(value - target) <= tol
        checks.append(Check(name, ok, f"{value:.6g}{unit} vs {target:.6g}{unit} +/- {tol:.3g}{unit}"))

    lat = tables["latency"]
    p2p = lat.value("one_way_latency", pair="gpu-gpu", path="p2p", size_bytes=32)
    staging = lat.value("one_way_latency", pair="gpu-gpu", path="staging", size_bytes=32)
    within("gpu-gpu p2p latency", p2p, t["gpu_p2p_latency_ns"], 0.05 * t["gpu_p2p_latency_ns"], " ns")
    within("gpu-gpu staging latency", staging, t["gpu_staging_latency_ns"],
           0.05 * t["gpu_staging_latency_ns"], " ns")
    factor = float(Fraction(str(t["gpu_roundtrip_factor"])))
    for r in tables["roundtrip"].select("ratio_to_host_host"):
        p = parse_params(r.parameters)
        if int(p["size_bytes"]) <= 128:
            within(f"roundtrip ratio {p['pair']} {p['size_bytes']} B", r.value, factor, 0.05)
    bw = tables["bandwidth"]
    from apesim.apelink import goodput
    from apesim.calibration import default_platform
    platform = default_platform(cal)
    plateau = goodput(platform.link, platform.framing)
    top = max(int(parse_params(r.parameters)["size_bytes"]) for r in bw.select("bandwidth"))
    within("host-host bandwidth plateau", bw.value("bandwidth", pair="host-host", size_bytes=top),
           plateau, 0.01 * plateau, " B/s")
    for pair in ("host-host", "gpu-gpu"):
        series = [r.value for r in bw.select("bandwidth", pair=pair)]
        checks.append(Check(f"{pair} bandwidth non-decreasing in size",
                            all(b >= a * (1 - 1e-9) for a, b in zip(series, series[1:])),
                            f"{len(series)} sizes"))
    aw = tables["awareness"]
    mean = aw.value("mean_ta", wd_ms="500")
    within("mean Ta at WD 500 ms", mean, t["ta_ns"], 100 * MS, " ns")
    r2 = aw.value("r_squared", fit="mean_ta_vs_wd")
    checks.append(Check("Ta affine in WD", r2 >= 0.999, f"R^2 = {r2:.6f} (need >= 0.999)"))
    undetected = sum(r.value for r in aw.select("undetected"))
    checks.append(Check("no undetected faults", undetected == 0, f"{undetected} undetected"))
    return checks


def write_repro(tables: dict[str, MetricsTable], out_dir: str) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for name, table in tables.items():
        path = os.path.join(out_dir, REPRO_FILES[name])
        export_csv(table, path)
        paths.append(path)
    traces = tables["awareness"].traces
    path = os.path.join(out_dir, "awareness_traces.csv")
    export_awareness_csv(traces, path)
    paths.append(path)
    return paths


def summarize(checks: Iterable[Check]) -> str:
    return "".join(f"{'PASS' if c.ok else 'FAIL'}  {c.name}: {c.detail}\n" for c in checks)
