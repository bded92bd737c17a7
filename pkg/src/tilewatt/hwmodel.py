"""GPU architecture and power operating-point descriptors.

Config files are YAML, one document per GPU, with human units (GB/s, TFLOPS,
MHz). Everything in memory is SI: bytes/s, FLOP/s, Hz, volts, watts.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Mapping

import numpy as np
import yaml

from .validation import check_positive

MHZ = 1e6
GB = 1e9
TERA = 1e12

SHIPPED_CONFIGS = {
    "A100-PCIE": "a100_pcie.yaml",
    "A100-SXM": "a100_sxm.yaml",
    "A10": "a10.yaml",
    "H100": "h100.yaml",
    "L40S": "l40s.yaml",
}


class ConfigError(ValueError):
    """Raised for invalid hardware or power configuration."""


@dataclass(frozen=True)
class GpuConfig:
    name: str
    num_sms: int
    dram_bandwidth: float
    l2_bandwidth: float
    shared_bandwidth_per_sm: float
    tensor_core_flops: Mapping[str, float]
    cuda_core_flops: Mapping[str, float]
    sfu_ops: float
    reference_core_freq: float
    dram_freq: float
    dram_voltage: float
    smsps_per_sm: int = 4
    max_concurrent_tbs_per_sm_default: int = 1

    def __post_init__(self):
        try:
            check_positive(self.num_sms, "num_sms")
            check_positive(self.smsps_per_sm, "smsps_per_sm")
            check_positive(self.max_concurrent_tbs_per_sm_default, "max_concurrent_tbs_per_sm_default")
            for name in ("dram_bandwidth", "l2_bandwidth", "shared_bandwidth_per_sm", "sfu_ops",
                         "reference_core_freq", "dram_freq", "dram_voltage"):
                check_positive(getattr(self, name), name)
            for table in ("tensor_core_flops", "cuda_core_flops"):
                for prec, value in getattr(self, table).items():
                    check_positive(value, f"{table}[{prec}]")
        except ValueError as exc:
            raise ConfigError(f"{self.name}: {exc}") from None
        # freeze the mappings so the dataclass stays hashable-in-spirit
        object.__setattr__(self, "tensor_core_flops", dict(self.tensor_core_flops))
        object.__setattr__(self, "cuda_core_flops", dict(self.cuda_core_flops))

    def with_changes(self, **changes) -> "GpuConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class PowerConfig:
    """Operating point: core V/f, idle power vs. frequency, optional V(f) curve."""

    core_freq: float
    core_voltage: float
    idle_power_table: tuple[tuple[float, float], ...]
    dram_energy_scale: float = 1.0
    vf_table: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        if not self.core_freq > 0:
            raise ConfigError(f"core_freq must be > 0, got {self.core_freq}")
        if not self.core_voltage > 0:
            raise ConfigError(f"core_voltage must be > 0, got {self.core_voltage}")
        if self.dram_energy_scale < 0:
            raise ConfigError("dram_energy_scale must be >= 0")
        table = tuple((float(f), float(p)) for f, p in self.idle_power_table)
        if not table:
            raise ConfigError("idle_power_table needs at least one entry")
        freqs = [f for f, _ in table]
        if any(b <= a for a, b in zip(freqs, freqs[1:])):
            raise ConfigError("idle_power_table frequencies must be strictly increasing")
        if any(p < 0 for _, p in table):
            raise ConfigError("idle powers must be >= 0")
        vf = tuple((float(f), float(v)) for f, v in self.vf_table)
        if any(b[0] <= a[0] for a, b in zip(vf, vf[1:])):
            raise ConfigError("vf_table frequencies must be strictly increasing")
        object.__setattr__(self, "idle_power_table", table)
        object.__setattr__(self, "vf_table", vf)

    def voltage_at(self, freq: float) -> float:
        """Core voltage for ``freq`` from the V(f) table, or the fixed voltage without one."""
        if not self.vf_table:
            return self.core_voltage
        fs, vs = zip(*self.vf_table)
        if len(fs) > 1 and not fs[0] <= freq <= fs[-1]:
            raise ConfigError(f"frequency {freq / MHZ:g} MHz outside V(f) table "
                              f"[{fs[0] / MHZ:g}, {fs[-1] / MHZ:g}] MHz")
        return float(np.interp(freq, fs, vs))

    def at_frequency(self, freq: float, voltage: float | None = None) -> "PowerConfig":
        if voltage is None:
            voltage = self.voltage_at(freq)
        return replace(self, core_freq=float(freq), core_voltage=float(voltage))


@dataclass(frozen=True)
class EffectiveThroughputs:
    """Device-total throughputs at an operating point."""

    dram: float
    l2: float
    shared_per_sm: float
    tensor: Mapping[str, float] = field(default_factory=dict)
    cuda: Mapping[str, float] = field(default_factory=dict)
    sfu: float = 0.0


def scaled_throughputs(gpu: GpuConfig, power: PowerConfig) -> EffectiveThroughputs:
    """On-chip throughputs scale with core_freq / reference_core_freq; DRAM does not."""
    if not power.core_freq > 0:
        raise ConfigError("core_freq must be > 0")
    s = power.core_freq / gpu.reference_core_freq
    return EffectiveThroughputs(
        dram=gpu.dram_bandwidth,
        l2=gpu.l2_bandwidth * s,
        shared_per_sm=gpu.shared_bandwidth_per_sm * s,
        tensor={k: v * s for k, v in gpu.tensor_core_flops.items()},
        cuda={k: v * s for k, v in gpu.cuda_core_flops.items()},
        sfu=gpu.sfu_ops * s,
    )


def idle_power_at(power: PowerConfig, freq: float) -> float:
    """Idle watts at ``freq``, linearly interpolated from the measured table."""
    fs = [f for f, _ in power.idle_power_table]
    ps = [p for _, p in power.idle_power_table]
    if len(fs) == 1:
        return ps[0]
    if not fs[0] <= freq <= fs[-1]:
        raise ConfigError(f"frequency {freq / MHZ:g} MHz outside idle power table "
                          f"[{fs[0] / MHZ:g}, {fs[-1] / MHZ:g}] MHz")
    return float(np.interp(freq, fs, ps))


# -- serialization ----------------------------------------------------------

def _pairs(rows, xscale=1.0, yscale=1.0):
    return tuple((float(a) * xscale, float(b) * yscale) for a, b in rows)


def gpu_from_dict(doc: dict) -> GpuConfig:
    try:
        return GpuConfig(
            name=str(doc["name"]),
            num_sms=int(doc["num_sms"]),
            smsps_per_sm=int(doc.get("smsps_per_sm", 4)),
            max_concurrent_tbs_per_sm_default=int(doc.get("max_concurrent_tbs_per_sm_default", 1)),
            dram_bandwidth=float(doc["dram_bandwidth_gbps"]) * GB,
            l2_bandwidth=float(doc["l2_bandwidth_gbps"]) * GB,
            shared_bandwidth_per_sm=float(doc["shared_bandwidth_per_sm_gbps"]) * GB,
            tensor_core_flops={k: float(v) * TERA for k, v in doc.get("tensor_core_tflops", {}).items()},
            cuda_core_flops={k: float(v) * TERA for k, v in doc.get("cuda_core_tflops", {}).items()},
            sfu_ops=float(doc["sfu_tops"]) * TERA,
            reference_core_freq=float(doc["reference_core_freq_mhz"]) * MHZ,
            dram_freq=float(doc["dram_freq_mhz"]) * MHZ,
            dram_voltage=float(doc["dram_voltage"]),
        )
    except KeyError as exc:
        raise ConfigError(f"missing GPU config field {exc}") from None


def power_from_dict(doc: dict) -> PowerConfig:
    try:
        return PowerConfig(
            core_freq=float(doc["core_freq_mhz"]) * MHZ,
            core_voltage=float(doc["core_voltage"]),
            idle_power_table=_pairs(doc["idle_power"], xscale=MHZ),
            dram_energy_scale=float(doc.get("dram_energy_scale", 1.0)),
            vf_table=_pairs(doc.get("vf_table", ()), xscale=MHZ),
        )
    except KeyError as exc:
        raise ConfigError(f"missing power config field {exc}") from None


def gpu_to_dict(gpu: GpuConfig) -> dict:
    return {
        "name": gpu.name,
        "num_sms": gpu.num_sms,
        "smsps_per_sm": gpu.smsps_per_sm,
        "max_concurrent_tbs_per_sm_default": gpu.max_concurrent_tbs_per_sm_default,
        "reference_core_freq_mhz": gpu.reference_core_freq / MHZ,
        "dram_bandwidth_gbps": gpu.dram_bandwidth / GB,
        "dram_freq_mhz": gpu.dram_freq / MHZ,
        "dram_voltage": gpu.dram_voltage,
        "l2_bandwidth_gbps": gpu.l2_bandwidth / GB,
        "shared_bandwidth_per_sm_gbps": gpu.shared_bandwidth_per_sm / GB,
        "tensor_core_tflops": {k: v / TERA for k, v in gpu.tensor_core_flops.items()},
        "cuda_core_tflops": {k: v / TERA for k, v in gpu.cuda_core_flops.items()},
        "sfu_tops": gpu.sfu_ops / TERA,
    }


def power_to_dict(power: PowerConfig) -> dict:
    doc = {
        "core_freq_mhz": power.core_freq / MHZ,
        "core_voltage": power.core_voltage,
        "idle_power": [[f / MHZ, p] for f, p in power.idle_power_table],
        "dram_energy_scale": power.dram_energy_scale,
    }
    if power.vf_table:
        doc["vf_table"] = [[f / MHZ, v] for f, v in power.vf_table]
    return doc


def load_config(path) -> tuple[GpuConfig, PowerConfig | None]:
    """Read a GPU config file. ``path`` may also be a shipped name such as ``A100-PCIE``."""
    if str(path) in SHIPPED_CONFIGS:
        text = resources.files("tilewatt.configs").joinpath(SHIPPED_CONFIGS[str(path)]).read_text()
    else:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"no such GPU config: {path} (shipped: {', '.join(SHIPPED_CONFIGS)})")
        text = p.read_text()
    doc = yaml.safe_load(text)
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    gpu = gpu_from_dict(doc)
    power = power_from_dict(doc["power"]) if "power" in doc else None
    return gpu, power


def save_config(path, gpu: GpuConfig, power: PowerConfig | None = None) -> None:
    doc = gpu_to_dict(gpu)
    if power is not None:
        doc["power"] = power_to_dict(power)
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=False))
