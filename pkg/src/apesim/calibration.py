"""Calibration defaults: measured fixed points in, model constants out.

The defaults file keeps three blocks. ``targets`` are the reference
measurements the model must reproduce, ``chosen`` are free constants picked
by hand, and ``derived`` are solved from the other two by :func:`derive`.
The file is versioned; ``APESIM_CALIBRATION`` points at an alternative.
"""

from __future__ import annotations

import os
from dataclasses import replace
from fractions import Fraction
from importlib import resources
from typing import Any, Optional

import yaml

from apesim.apelink import (
    FramingParams,
    control_words_for,
    link_preset,
    payload_words,
    serialization_ns,
)
from apesim.errors import ConfigError
from apesim.nic import (
    GPU,
    HOST,
    DmaConfig,
    EndpointProfile,
    NicConfig,
    TlbConfig,
    host_bus_preset,
    rate_bytes_per_ns,
    transfer_ns,
)

ENV_VAR = "APESIM_CALIBRATION"
SUPPORTED_VERSION = 1

TARGET_KEYS = {"link_efficiency", "dma_gain", "tlb_bandwidth_ratio", "gpu_p2p_latency_ns",
               "gpu_staging_latency_ns", "gpu_roundtrip_factor", "ta_ns", "ta_wd_ns",
               "infiniband_latency_ns"}
CHOSEN_KEYS = {"link_preset", "hop_latency_ns", "host_bus", "max_payload_words",
               "header_words", "footer_words", "buffer_bytes", "dma_engines",
               "dma_reference_bytes", "tlb_entries", "tlb_page_bytes", "tlb_hit_latency_ns",
               "delivery_overhead_ns", "latency_reference_bytes", "small_message_bytes",
               "gpu_read_bandwidth_cap", "staging_copy_bandwidth", "service_net_latency_ns",
               "host_update_phase", "nic_check_phase"}
DERIVED_KEYS = {"control_words", "dma_completion_latency_ns", "tlb_miss_latency_ns",
                "injection_overhead_ns", "gpu_extra_small_msg_ns", "staging_copy_latency_ns",
                "neighbor_poll_phase"}


def default_path() -> str:
    return os.environ.get(ENV_VAR) or str(resources.files("apesim") / "data" / "calibration.yaml")


def load_calibration(path: Optional[str] = None) -> dict[str, Any]:
    path = path or default_path()
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read calibration file {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"calibration file {path} is not valid YAML: {exc}") from None
    if not isinstance(data, dict) or data.get("version") != SUPPORTED_VERSION:
        raise ConfigError(f"calibration file {path}: expected version {SUPPORTED_VERSION}")
    for block, keys in (("targets", TARGET_KEYS), ("chosen", CHOSEN_KEYS),
                        ("derived", DERIVED_KEYS)):
        got = set(data.get(block) or {})
        if got != keys:
            missing, extra = sorted(keys - got), sorted(got - keys)
            raise ConfigError(f"calibration block {block!r}: missing {missing}, unknown {extra}")
    data["path"] = path
    return data


def derive(targets: dict, chosen: dict) -> dict[str, Any]:
    """Solve the model constants that reproduce ``targets``.

    Every formula mirrors a stage of the simulated put path; the simulator
    is then checked against the targets independently.
    """
    eff = Fraction(str(targets["link_efficiency"]))
    control = control_words_for(eff, chosen["max_payload_words"])
    framing = FramingParams(chosen["header_words"], chosen["footer_words"], control,
                            chosen["max_payload_words"], chosen["buffer_bytes"])
    link = link_preset(chosen["link_preset"], hop_latency_ns=chosen["hop_latency_ns"])
    bus = host_bus_preset(chosen["host_bus"]).bytes_per_ns

    # dual DMA: asymptotic gain equals L / (L + T_x) at the reference size
    gain = Fraction(str(targets["dma_gain"]))
    t_ref = transfer_ns(chosen["dma_reference_bytes"], bus)
    dma_latency = round(t_ref * gain / (1 - gain))

    # TLB: the receive period with every page missing is ratio x the hit period
    page = chosen["tlb_page_bytes"]
    t_link = serialization_ns(framing.wire_words(payload_words(page)), link)
    write = transfer_ns(page, bus)
    hit_period = max(t_link, chosen["tlb_hit_latency_ns"] + write)
    ratio = Fraction(str(targets["tlb_bandwidth_ratio"]))
    miss = round(ratio * hit_period) - write

    # one-way host->host latency at the reference size, without injection overhead
    size = chosen["latency_reference_bytes"]
    fixed = (dma_latency + transfer_ns(size, bus)
             + serialization_ns(framing.wire_words(payload_words(size)), link) + link.hop_latency_ns
             + chosen["tlb_hit_latency_ns"] + transfer_ns(size, bus)
             + chosen["delivery_overhead_ns"])
    factor = Fraction(str(targets["gpu_roundtrip_factor"]))
    host_one_way = round(targets["gpu_p2p_latency_ns"] / factor)
    injection = host_one_way - fixed
    gpu_rate = min(bus, rate_bytes_per_ns(chosen["gpu_read_bandwidth_cap"]))
    gpu_read_extra = transfer_ns(size, gpu_rate) - transfer_ns(size, bus)
    gpu_extra = targets["gpu_p2p_latency_ns"] - host_one_way - gpu_read_extra
    per_copy = (targets["gpu_staging_latency_ns"] - host_one_way) // 2
    staging = per_copy - transfer_ns(size, rate_bytes_per_ns(chosen["staging_copy_bandwidth"]))

    # host crash: detection after 1.5 WD on average, then the next neighbour poll
    poll_phase = Fraction(targets["ta_ns"], targets["ta_wd_ns"]) - Fraction(3, 2)

    derived = {
        "control_words": str(control),
        "dma_completion_latency_ns": dma_latency,
        "tlb_miss_latency_ns": miss,
        "injection_overhead_ns": injection,
        "gpu_extra_small_msg_ns": gpu_extra,
        "staging_copy_latency_ns": staging,
        "neighbor_poll_phase": str(poll_phase),
    }
    for key, value in derived.items():
        if not isinstance(value, str) and value < 0:
            raise ConfigError(f"calibration yields negative {key} = {value}; adjust chosen constants")
    if not 0 <= poll_phase < 1:
        raise ConfigError(f"calibration yields neighbour poll phase {poll_phase} outside [0, 1)")
    return derived


def platform_kwargs(cal: dict) -> dict[str, Any]:
    """Constructor arguments for the default :class:`~apesim.fabric.PlatformConfig`."""
    c, d = cal["chosen"], cal["derived"]
    framing = FramingParams(c["header_words"], c["footer_words"], Fraction(d["control_words"]),
                            c["max_payload_words"], c["buffer_bytes"])
    nic = NicConfig(
        dma=DmaConfig(engines=c["dma_engines"], completion_latency_ns=d["dma_completion_latency_ns"],
                      request_bytes=framing.max_payload_bytes),
        tlb=TlbConfig(entries=c["tlb_entries"], page_bytes=c["tlb_page_bytes"],
                      hit_latency_ns=c["tlb_hit_latency_ns"],
                      miss_latency_ns=d["tlb_miss_latency_ns"]),
        delivery_overhead_ns=c["delivery_overhead_ns"],
        small_message_bytes=c["small_message_bytes"],
    )
    common = dict(injection_overhead_ns=d["injection_overhead_ns"],
                  staging_copy_bandwidth=float(c["staging_copy_bandwidth"]),
                  staging_copy_latency_ns=d["staging_copy_latency_ns"])
    return dict(
        link=link_preset(c["link_preset"], hop_latency_ns=c["hop_latency_ns"]),
        framing=framing,
        host_bus=host_bus_preset(c["host_bus"]),
        nic=nic,
        host=EndpointProfile(HOST, **common),
        gpu=EndpointProfile(GPU, gpu_extra_small_msg_ns=d["gpu_extra_small_msg_ns"],
                            gpu_read_bandwidth_cap=float(c["gpu_read_bandwidth_cap"]), **common),
    )


def default_platform(cal: Optional[dict] = None, **overrides):
    from apesim.fabric import PlatformConfig
    cal = cal or load_calibration()
    kwargs = platform_kwargs(cal)
    kwargs.update(overrides)
    return PlatformConfig(**kwargs)


def default_lofamo(cal: Optional[dict] = None, **overrides):
    from apesim.lofamo import LofamoConfig
    cal = cal or load_calibration()
    c, d = cal["chosen"], cal["derived"]
    cfg = LofamoConfig(wd_ns=cal["targets"]["ta_wd_ns"],
                       host_update_phase=Fraction(str(c["host_update_phase"])),
                       nic_check_phase=Fraction(str(c["nic_check_phase"])),
                       neighbor_poll_phase=Fraction(d["neighbor_poll_phase"]),
                       service_net_latency_ns=c["service_net_latency_ns"])
    return replace(cfg, **overrides) if overrides else cfg


def infiniband_latency_ns(cal: Optional[dict] = None) -> int:
    cal = cal or load_calibration()
    return cal["targets"]["infiniband_latency_ns"]
