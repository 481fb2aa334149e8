"""Scenario files: YAML in, validated and fully defaulted tree out.

A scenario names the platform (torus, link, framing, host bus, NIC,
endpoints), the LO|FA|MO settings with an optional fault schedule, one
experiment and a seed. Anything left out is filled from the calibration
file, so the normalized dump is a complete, self-describing scenario.
Errors carry the line of the offending key.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Optional

import yaml

from apesim.apelink import LINK_PRESETS, FramingParams, LinkProfile
from apesim.calibration import load_calibration, platform_kwargs
from apesim.errors import ConfigError
from apesim.fabric import PlatformConfig
from apesim.lofamo import FAULT_KINDS, LINK_FAIL, FaultEvent, LofamoConfig
from apesim.nic import (
    GPU,
    HOST,
    HOST_BUS_PRESETS,
    DmaConfig,
    EndpointProfile,
    NicConfig,
    TlbConfig,
)
from apesim.topology import Direction, TorusSpec

PAIRS = ("host-host", "host-gpu", "gpu-host", "gpu-gpu")
EXPERIMENT_KINDS = ("latency", "roundtrip", "bandwidth", "dma", "tlb", "fault")


# -- leaf validators -----------------------------------------------------------

def _int(lo: Optional[int] = None, hi: Optional[int] = None):
    def check(v):
        if isinstance(v, bool) or not isinstance(v, int):
            raise ValueError(f"expected an integer, got {v!r}")
        if lo is not None and v < lo:
            raise ValueError(f"must be >= {lo}, got {v}")
        if hi is not None and v > hi:
            raise ValueError(f"must be <= {hi}, got {v}")
        return v
    return check


def _number(positive: bool = True):
    def check(v):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ValueError(f"expected a number, got {v!r}")
        if positive and v <= 0:
            raise ValueError(f"must be > 0, got {v}")
        return float(v)
    return check


def _fraction(lo=None, hi=None, hi_open=False):
    def check(v):
        if isinstance(v, bool):
            raise ValueError(f"expected a number or fraction string, got {v!r}")
        try:
            f = Fraction(str(v))
        except (ValueError, ZeroDivisionError):
            raise ValueError(f"expected a number or fraction string, got {v!r}") from None
        if lo is not None and f < lo:
            raise ValueError(f"must be >= {lo}, got {f}")
        if hi is not None and (f >= hi if hi_open else f > hi):
            raise ValueError(f"must be {'<' if hi_open else '<='} {hi}, got {f}")
        return str(f)
    return check


def _bool(v):
    if not isinstance(v, bool):
        raise ValueError(f"expected true or false, got {v!r}")
    return v


def _choice(options):
    def check(v):
        if v not in options:
            raise ValueError(f"expected one of {sorted(options)}, got {v!r}")
        return v
    return check


def _optional(inner):
    def check(v):
        return None if v is None else inner(v)
    return check


def _list(inner, ascending=False, min_len=1):
    def check(v):
        if not isinstance(v, list) or len(v) < min_len:
            raise ValueError(f"expected a list with at least {min_len} item(s), got {v!r}")
        out = [inner(x) for x in v]
        if ascending and out != sorted(out):
            raise ValueError(f"must be ascending, got {out}")
        if ascending and len(set(out)) != len(out):
            raise ValueError(f"must not repeat values, got {out}")
        return out
    return check


def _dims(v):
    if not isinstance(v, list) or len(v) != 3:
        raise ValueError(f"expected three dimensions [x, y, z], got {v!r}")
    return [_int(1, 64)(x) for x in v]


def _fault(v):
    if not isinstance(v, dict):
        raise ValueError(f"expected a mapping with node, kind, at_ns, got {v!r}")
    unknown = set(v) - {"node", "kind", "at_ns", "direction"}
    if unknown:
        raise ValueError(f"unknown fault keys {sorted(unknown)}")
    for key in ("node", "kind", "at_ns"):
        if key not in v:
            raise ValueError(f"fault is missing {key!r}")
    out = {"node": _int(0)(v["node"]), "kind": _choice(FAULT_KINDS)(v["kind"]),
           "at_ns": _int(0)(v["at_ns"])}
    if out["kind"] == LINK_FAIL:
        if "direction" not in v:
            raise ValueError("link-fail needs a direction such as +x")
        out["direction"] = Direction.parse(str(v["direction"])).value
    elif "direction" in v:
        raise ValueError("only link-fail takes a direction")
    return out


# -- schema ------------------------------------------------------------------

def _platform_schema() -> dict:
    return {
        "torus": _dims,
        "link": {
            "preset": _optional(_choice(LINK_PRESETS)),
            "lane_rate_gbps": _fraction(lo=Fraction(1, 1000)),
            "lanes": _int(1, 64),
            "encoding": _fraction(lo=Fraction(1, 1000), hi=1),
            "hop_latency_ns": _int(0),
        },
        "framing": {
            "header_words": _int(1),
            "footer_words": _int(1),
            "control_words": _fraction(lo=0),
            "max_payload_words": _int(1),
            "buffer_bytes": _int(16),
        },
        "host_bus": _choice(HOST_BUS_PRESETS),
        "nic": {
            "dma_engines": _int(1, 64),
            "dma_completion_latency_ns": _int(0),
            "tlb_entries": _int(1),
            "tlb_page_bytes": _int(1),
            "tlb_hit_latency_ns": _int(0),
            "tlb_miss_latency_ns": _int(0),
            "delivery_overhead_ns": _int(0),
            "small_message_bytes": _int(0),
        },
        "endpoints": {
            "host": {
                "injection_overhead_ns": _int(0),
                "staging_copy_bandwidth": _number(),
                "staging_copy_latency_ns": _int(0),
            },
            "gpu": {
                "injection_overhead_ns": _int(0),
                "staging_copy_bandwidth": _number(),
                "staging_copy_latency_ns": _int(0),
                "gpu_extra_small_msg_ns": _int(0),
                "gpu_read_bandwidth_cap": _optional(_number()),
                "p2p_enabled": _bool,
            },
        },
        "lofamo": {
            "wd_ns": _int(1),
            "host_update_phase": _fraction(lo=0, hi=1, hi_open=True),
            "nic_check_phase": _fraction(lo=0, hi=1, hi_open=True),
            "neighbor_poll_phase": _fraction(lo=0, hi=1, hi_open=True),
            "service_net_latency_ns": _int(0),
            "master": _int(0),
            "phase_jitter": _fraction(lo=0, hi=1, hi_open=True),
            "faults": _list(_fault, min_len=0),
        },
    }


_SIZES = _list(_int(1), ascending=True)
_PAIRS = _list(_choice(PAIRS))

EXPERIMENT_SCHEMA = {
    "latency": {"sizes": _SIZES, "pairs": _PAIRS, "paths": _list(_choice(("p2p", "staging"))),
                "hops": _int(1)},
    "roundtrip": {"sizes": _SIZES, "pairs": _PAIRS, "p2p": _bool, "hops": _int(1)},
    "bandwidth": {"sizes": _SIZES, "pairs": _PAIRS, "p2p": _bool, "hops": _int(1),
                  "repetitions": _optional(_int(2))},
    "dma": {"sizes": _SIZES, "engines": _list(_int(1, 64), ascending=True),
            "repetitions": _int(1)},
    "tlb": {"sizes": _SIZES, "repetitions": _optional(_int(2))},
    "fault": {"wd_ms": _list(_fraction(lo=Fraction(1, 1000)), min_len=1),
              "samples": _int(1), "fault_kind": _choice(FAULT_KINDS)},
}

EXPERIMENT_DEFAULTS = {
    "latency": {"sizes": [32], "pairs": list(PAIRS), "paths": ["p2p", "staging"], "hops": 1},
    "roundtrip": {"sizes": [32], "pairs": list(PAIRS), "p2p": True, "hops": 1},
    "bandwidth": {"sizes": [2 ** k for k in range(5, 21)], "pairs": list(PAIRS), "p2p": True,
                  "hops": 1, "repetitions": None},
    "dma": {"sizes": [4096], "engines": [1, 2], "repetitions": 256},
    "tlb": {"sizes": [65536, 1048576], "repetitions": None},
    "fault": {"wd_ms": ["1", "10", "100", "500", "1000"], "samples": 1000,
              "fault_kind": "host-crash"},
}


def platform_defaults(cal: Optional[dict] = None) -> dict:
    """The calibrated platform as a scenario tree."""
    cal = cal or load_calibration()
    kw = platform_kwargs(cal)
    link: LinkProfile = kw["link"]
    fr: FramingParams = kw["framing"]
    nic: NicConfig = kw["nic"]
    host: EndpointProfile = kw["host"]
    gpu: EndpointProfile = kw["gpu"]
    c, d, t = cal["chosen"], cal["derived"], cal["targets"]
    return {
        "torus": [4, 4, 1],
        "link": {"preset": c["link_preset"], "lane_rate_gbps": str(link.lane_rate_gbps),
                 "lanes": link.lanes, "encoding": str(link.encoding),
                 "hop_latency_ns": link.hop_latency_ns},
        "framing": {"header_words": fr.header_words, "footer_words": fr.footer_words,
                    "control_words": str(fr.control_words),
                    "max_payload_words": fr.max_payload_words, "buffer_bytes": fr.buffer_bytes},
        "host_bus": c["host_bus"],
        "nic": {"dma_engines": nic.dma.engines,
                "dma_completion_latency_ns": nic.dma.completion_latency_ns,
                "tlb_entries": nic.tlb.entries, "tlb_page_bytes": nic.tlb.page_bytes,
                "tlb_hit_latency_ns": nic.tlb.hit_latency_ns,
                "tlb_miss_latency_ns": nic.tlb.miss_latency_ns,
                "delivery_overhead_ns": nic.delivery_overhead_ns,
                "small_message_bytes": nic.small_message_bytes},
        "endpoints": {
            "host": {"injection_overhead_ns": host.injection_overhead_ns,
                     "staging_copy_bandwidth": float(host.staging_copy_bandwidth),
                     "staging_copy_latency_ns": host.staging_copy_latency_ns},
            "gpu": {"injection_overhead_ns": gpu.injection_overhead_ns,
                    "staging_copy_bandwidth": float(gpu.staging_copy_bandwidth),
                    "staging_copy_latency_ns": gpu.staging_copy_latency_ns,
                    "gpu_extra_small_msg_ns": gpu.gpu_extra_small_msg_ns,
                    "gpu_read_bandwidth_cap": gpu.gpu_read_bandwidth_cap,
                    "p2p_enabled": gpu.p2p_enabled},
        },
        "lofamo": {"wd_ns": t["ta_wd_ns"], "host_update_phase": str(c["host_update_phase"]),
                   "nic_check_phase": str(c["nic_check_phase"]),
                   "neighbor_poll_phase": str(d["neighbor_poll_phase"]),
                   "service_net_latency_ns": c["service_net_latency_ns"], "master": 0,
                   "phase_jitter": "0", "faults": []},
    }


# -- parsing with line numbers -------------------------------------------------

def _to_python(node, loader, path, lines):
    if isinstance(node, yaml.MappingNode):
        out = {}
        for key_node, value_node in node.value:
            key = loader.construct_object(key_node, deep=True)
            if not isinstance(key, str):
                raise ConfigError(f"keys must be strings, got {key!r}", key_node.start_mark.line + 1)
            if key in out:
                raise ConfigError(f"duplicate key {'.'.join(path + (key,))}",
                                  key_node.start_mark.line + 1)
            lines[path + (key,)] = key_node.start_mark.line + 1
            out[key] = _to_python(value_node, loader, path + (key,), lines)
        return out
    if isinstance(node, yaml.SequenceNode):
        items = []
        for i, item in enumerate(node.value):
            lines[path + (i,)] = item.start_mark.line + 1
            items.append(_to_python(item, loader, path + (i,), lines))
        return items
    return loader.construct_object(node, deep=True)


def parse_yaml(text: str) -> tuple[Any, dict]:
    """YAML text to plain Python plus a map from key path to 1-based line."""
    loader = yaml.SafeLoader(text)
    try:
        node = loader.get_single_node()
        lines: dict = {}
        data = {} if node is None else _to_python(node, loader, (), lines)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        raise ConfigError(f"invalid YAML: {exc.problem or exc}",
                          mark.line + 1 if mark else None) from None
    finally:
        loader.dispose()
    return data, lines


def _merge(schema: dict, defaults: dict, given: Any, path: tuple, lines: dict) -> dict:
    where = ".".join(map(str, path)) or "top level"
    if not isinstance(given, dict):
        raise ConfigError(f"{where}: expected a mapping", lines.get(path))
    unknown = sorted(set(given) - set(schema))
    if unknown:
        key = unknown[0]
        raise ConfigError(f"unknown key {'.'.join(map(str, path + (key,)))!s}; "
                          f"allowed here: {sorted(schema)}", lines.get(path + (key,)))
    out = {}
    for key, rule in schema.items():
        sub = path + (key,)
        if isinstance(rule, dict):
            out[key] = _merge(rule, defaults[key], given.get(key, {}), sub, lines)
            continue
        value = given[key] if key in given else copy.deepcopy(defaults[key])
        try:
            out[key] = rule(value)
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"{'.'.join(map(str, sub))}: {exc}", lines.get(sub)) from None
    return out


@dataclass
class ScenarioConfig:
    """A validated scenario; ``tree`` is the normalized nested mapping."""

    tree: dict
    source: Optional[str] = None

    @property
    def seed(self) -> int:
        return self.tree["seed"]

    @property
    def experiment(self) -> dict:
        return self.tree["experiment"]

    @property
    def name(self) -> str:
        return self.tree["name"]

    @property
    def torus(self) -> TorusSpec:
        return TorusSpec(tuple(self.tree["platform"]["torus"]))

    def platform(self) -> PlatformConfig:
        p = self.tree["platform"]
        lk, fr, nic, ep = p["link"], p["framing"], p["nic"], p["endpoints"]
        framing = FramingParams(fr["header_words"], fr["footer_words"],
                                Fraction(fr["control_words"]), fr["max_payload_words"],
                                fr["buffer_bytes"])
        return PlatformConfig(
            torus=self.torus,
            link=LinkProfile(lk["preset"] or "custom", Fraction(lk["lane_rate_gbps"]), lk["lanes"],
                             Fraction(lk["encoding"]), lk["hop_latency_ns"]),
            framing=framing,
            host_bus=HOST_BUS_PRESETS[p["host_bus"]],
            nic=NicConfig(
                dma=DmaConfig(nic["dma_engines"], nic["dma_completion_latency_ns"],
                              framing.max_payload_bytes),
                tlb=TlbConfig(nic["tlb_entries"], nic["tlb_page_bytes"],
                              nic["tlb_hit_latency_ns"], nic["tlb_miss_latency_ns"]),
                delivery_overhead_ns=nic["delivery_overhead_ns"],
                small_message_bytes=nic["small_message_bytes"]),
            host=EndpointProfile(HOST, **ep["host"]),
            gpu=EndpointProfile(GPU, **ep["gpu"]),
        )

    def lofamo(self) -> LofamoConfig:
        lf = dict(self.tree["platform"]["lofamo"])
        lf.pop("faults")
        return LofamoConfig(**{k: Fraction(v) if isinstance(v, str) else v for k, v in lf.items()})

    def faults(self) -> list[FaultEvent]:
        return [FaultEvent(f["node"], f["kind"], f["at_ns"],
                           Direction.parse(f["direction"]) if "direction" in f else None)
                for f in self.tree["platform"]["lofamo"]["faults"]]

    def dump(self) -> str:
        return yaml.safe_dump(self.tree, sort_keys=False, default_flow_style=None, width=100)

    def with_value(self, dotted: str, value) -> "ScenarioConfig":
        """Copy with one leaf replaced, re-validated."""
        tree = copy.deepcopy(self.tree)
        node = tree
        parts = dotted.split(".")
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"unknown parameter path {dotted!r}")
            node = node[part]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigError(f"unknown parameter path {dotted!r}")
        node[parts[-1]] = value
        return normalize(tree)


def normalize(data: Any, lines: Optional[dict] = None, cal: Optional[dict] = None,
              source: Optional[str] = None) -> ScenarioConfig:
    lines = lines or {}
    if not isinstance(data, dict):
        raise ConfigError("scenario must be a mapping", 1)
    allowed = {"name", "seed", "platform", "experiment"}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]}; allowed at top level: {sorted(allowed)}",
                          lines.get((unknown[0],)))
    if "seed" not in data:
        raise ConfigError("missing required key 'seed' (runs are never seeded from the clock)", 1)
    try:
        seed = _int(0)(data["seed"])
    except ValueError as exc:
        raise ConfigError(f"seed: {exc}", lines.get(("seed",))) from None
    name = data.get("name", "scenario")
    if not isinstance(name, str) or not name:
        raise ConfigError("name must be a non-empty string", lines.get(("name",)))

    defaults = platform_defaults(cal)
    given_platform = data.get("platform", {})
    if isinstance(given_platform, dict):
        preset = (given_platform.get("link") or {}).get("preset", defaults["link"]["preset"]) \
            if isinstance(given_platform.get("link", {}), dict) else None
        if preset in LINK_PRESETS:
            p = LINK_PRESETS[preset]
            defaults["link"].update(preset=preset, lane_rate_gbps=str(p.lane_rate_gbps),
                                    lanes=p.lanes, encoding=str(p.encoding))
        elif preset is None:
            defaults["link"]["preset"] = None
    platform = _merge(_platform_schema(), defaults, given_platform, ("platform",), lines)
    link = platform["link"]
    if link["preset"] is not None:
        p = LINK_PRESETS[link["preset"]]
        expected = {"lane_rate_gbps": p.lane_rate_gbps, "lanes": p.lanes, "encoding": p.encoding}
        clash = [k for k, v in expected.items() if Fraction(link[k]) != v]
        if clash:
            k = clash[0]
            raise ConfigError(f"platform.link.{k}: {link[k]} contradicts preset {link['preset']} "
                              f"({expected[k]}); set preset: null for a custom link",
                              lines.get(("platform", "link", k), lines.get(("platform", "link"))))
    nodes = TorusSpec(tuple(platform["torus"])).nodes
    lf = platform["lofamo"]
    if lf["master"] >= nodes:
        raise ConfigError(f"platform.lofamo.master: node {lf['master']} outside the "
                          f"{nodes}-node torus", lines.get(("platform", "lofamo", "master")))
    for i, f in enumerate(lf["faults"]):
        if f["node"] >= nodes:
            raise ConfigError(f"platform.lofamo.faults[{i}]: node {f['node']} outside the torus",
                              lines.get(("platform", "lofamo", "faults", i)))

    exp = data.get("experiment")
    if not isinstance(exp, dict) or "kind" not in exp:
        raise ConfigError("missing experiment with a kind, one of " + ", ".join(EXPERIMENT_KINDS),
                          lines.get(("experiment",)))
    kind = exp["kind"]
    if kind not in EXPERIMENT_KINDS:
        raise ConfigError(f"experiment.kind: unknown kind {kind!r}; expected one of "
                          f"{list(EXPERIMENT_KINDS)}", lines.get(("experiment", "kind")))
    rest = {k: v for k, v in exp.items() if k != "kind"}
    merged = _merge(EXPERIMENT_SCHEMA[kind], EXPERIMENT_DEFAULTS[kind], rest, ("experiment",), lines)
    tree = {"name": name, "seed": seed, "platform": platform,
            "experiment": {"kind": kind, **merged}}
    try:
        cfg = ScenarioConfig(tree, source)
        cfg.platform()
        cfg.lofamo()
    except ConfigError as exc:
        raise ConfigError(str(exc), lines.get(("platform",))) from None
    return cfg


def loads(text: str, cal: Optional[dict] = None, source: Optional[str] = None) -> ScenarioConfig:
    data, lines = parse_yaml(text)
    return normalize(data, lines, cal, source)


def load_config(path: str, cal: Optional[dict] = None) -> ScenarioConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read scenario {path}: {exc}") from None
    try:
        return loads(text, cal, path)
    except ConfigError as exc:
        err = ConfigError(f"{path}: {exc}")
        err.line = exc.line
        raise err from None
