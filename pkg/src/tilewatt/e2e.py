"""End-to-end prediction for operator sequences, plus DVFS/architecture exploration.

Kernels run back to back: latencies and energies add up and the average power
is total energy over total latency.

Workload file (YAML)::

    name: bert-layer
    operators:
      - {kind: gemm, precision: bf16, shape: {m: 512, n: 2304, k: 768}, repeat: 12, label: qkv}
      - {kind: softmax, precision: fp32, shape: [6144, 512]}
      - {kind: gemm, shape: [1, 512, 768, 768], tile: 128x128x32_s3_w2x2_i16x8x16_er_c1}

Trace file (one operator per line, whitespace separated, ``#`` comments)::

    <op> <dims joined by x> <dtype> [repeat]
    matmul 512x768x3072 bf16 12
    gelu   1572864       bf16
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from .frontend import PredictedTile, predict_tile_config
from .hwmodel import MHZ, GpuConfig, PowerConfig, idle_power_at
from .kernels import SHAPE_FIELDS, KernelGroupKey, OperatorSpec, OpKind, Precision, TileConfig
from .power import PredictionResult, dynamic_power
from .refine import IDENTITY, correct_latency
from .store import CoefficientStore, Lookup
from .timeline import build_timeline
from .traffic import kernel_traffic


class WorkloadError(ValueError):
    """Bad workload content; the message names the operator index where relevant."""


@dataclass(frozen=True)
class WorkloadOp:
    op: OperatorSpec
    repeat: int = 1
    tile: TileConfig | None = None
    label: str = ""

    def __post_init__(self):
        if int(self.repeat) != self.repeat or self.repeat < 1:
            raise WorkloadError(f"repeat must be an integer >= 1, got {self.repeat}")
        object.__setattr__(self, "repeat", int(self.repeat))
        if self.tile is not None:
            self.tile.check_for(self.op.kind)


@dataclass(frozen=True)
class Workload:
    name: str
    ops: tuple

    def __post_init__(self):
        ops = tuple(o if isinstance(o, WorkloadOp) else WorkloadOp(o) for o in self.ops)
        if not ops:
            raise WorkloadError(f"workload {self.name!r} has no operators")
        object.__setattr__(self, "ops", ops)

    def __len__(self):
        return len(self.ops)

    @property
    def n_kernels(self) -> int:
        return sum(o.repeat for o in self.ops)


# -- parsing -------------------------------------------------------------------------

def _shape_from_doc(kind: OpKind, shape):
    names = SHAPE_FIELDS[kind]
    if isinstance(shape, dict):
        defaults = {"batch": 1, "n_in": 1, "n_out": 1, "flops_per_element": 1, "sfu": 0}
        unknown = set(shape) - set(names)
        if unknown:
            raise ValueError(f"unknown {kind.value} dims {sorted(unknown)}; expected {list(names)}")
        missing = [n for n in names if n not in shape and n not in defaults]
        if missing:
            raise ValueError(f"{kind.value} shape missing {missing}")
        return tuple(int(shape.get(n, defaults.get(n))) for n in names)
    dims = [int(v) for v in shape]
    if kind in (OpKind.GEMM,) and len(dims) == 3:
        dims = [1] + dims
    if kind is OpKind.ELEMENTWISE and len(dims) < 5:
        dims = dims + [1, 1, 1, 0][len(dims) - 1:]
    return tuple(dims)


def workload_from_dict(doc) -> Workload:
    if not isinstance(doc, dict) or "operators" not in doc:
        raise WorkloadError("workload must be a mapping with an 'operators' list")
    items = doc["operators"]
    if not isinstance(items, list):
        raise WorkloadError("'operators' must be a list")
    ops = []
    for i, item in enumerate(items):
        try:
            if not isinstance(item, dict):
                raise ValueError("operator entry must be a mapping")
            kind_text = str(item.get("kind", ""))
            try:
                kind = OpKind(kind_text)
            except ValueError:
                raise ValueError(f"unsupported operator kind {kind_text!r}") from None
            prec = Precision(str(item.get("precision", "bf16")))
            op = OperatorSpec(kind, prec, _shape_from_doc(kind, item.get("shape", ())))
            tile = TileConfig.from_id(str(item["tile"])) if item.get("tile") else None
            ops.append(WorkloadOp(op, item.get("repeat", 1), tile, str(item.get("label", ""))))
        except (ValueError, TypeError) as exc:
            raise WorkloadError(f"operator {i}: {exc}") from None
    return Workload(str(doc.get("name", "workload")), tuple(ops))


def workload_to_dict(w: Workload) -> dict:
    out = []
    for o in w.ops:
        d = {"kind": o.op.kind.value, "precision": o.op.precision.value,
             "shape": dict(zip(SHAPE_FIELDS[o.op.kind], o.op.shape))}
        if o.repeat != 1:
            d["repeat"] = o.repeat
        if o.tile is not None:
            d["tile"] = o.tile.config_id
        if o.label:
            d["label"] = o.label
        out.append(d)
    return {"name": w.name, "operators": out}


def load_workload(path) -> Workload:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise WorkloadError(f"cannot read workload {path}: {exc}") from None
    if p.suffix in (".txt", ".trace"):
        return workload_from_trace(text, name=p.stem)
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise WorkloadError(f"{path}: not valid YAML: {exc}") from None
    return workload_from_dict(doc)


def save_workload(path, w: Workload) -> None:
    Path(path).write_text(yaml.safe_dump(workload_to_dict(w), sort_keys=False), encoding="utf-8")


# elementwise op names -> (n_in, n_out, flops per element, uses SFU)
ELEMENTWISE_ALIASES = {
    "relu": (1, 1, 1, False),
    "gelu": (1, 1, 8, True),
    "silu": (1, 1, 4, True),
    "exp": (1, 1, 1, True),
    "tanh": (1, 1, 1, True),
    "add": (2, 1, 1, False),
    "mul": (2, 1, 1, False),
    "residual": (2, 1, 1, False),
    "scale": (1, 1, 1, False),
    "dropout": (1, 1, 2, False),
    "cast": (1, 1, 0, False),
}
KIND_ALIASES = {
    "matmul": OpKind.GEMM, "linear": OpKind.GEMM, "bmm": OpKind.GEMM, "gemm": OpKind.GEMM,
    "softmax": OpKind.SOFTMAX, "layernorm": OpKind.LAYERNORM, "layer_norm": OpKind.LAYERNORM,
    "flash_attention": OpKind.FLASH_ATTENTION, "sdpa": OpKind.FLASH_ATTENTION, "attention": OpKind.FLASH_ATTENTION,
    "elementwise": OpKind.ELEMENTWISE,
}
DTYPE_ALIASES = {"bf16": "bf16", "bfloat16": "bf16", "fp32": "fp32", "float32": "fp32", "f32": "fp32"}


def op_from_trace(name: str, dims: str, dtype: str) -> OperatorSpec:
    """One trace entry to an operator. GEMM dims are ``MxNxK`` or ``BxMxNxK``."""
    name = name.lower()
    prec = DTYPE_ALIASES.get(dtype.lower())
    if prec is None:
        raise ValueError(f"unknown dtype {dtype!r}")
    try:
        values = [int(v) for v in dims.lower().split("x")]
    except ValueError:
        raise ValueError(f"bad dims {dims!r}") from None
    if name in ELEMENTWISE_ALIASES:
        if len(values) != 1:
            values = [math.prod(values)]
        n_in, n_out, flops, sfu = ELEMENTWISE_ALIASES[name]
        return OperatorSpec.elementwise(values[0], n_in, n_out, flops, sfu, precision=prec)
    kind = KIND_ALIASES.get(name)
    if kind is None:
        raise ValueError(f"unsupported operator {name!r}")
    return OperatorSpec(kind, prec, _shape_from_doc(kind, values))


def workload_from_trace(text: str, name: str = "trace") -> Workload:
    ops = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if len(parts) not in (3, 4):
                raise ValueError("expected '<op> <dims> <dtype> [repeat]'")
            op = op_from_trace(*parts[:3])
            repeat = int(parts[3]) if len(parts) == 4 else 1
            ops.append(WorkloadOp(op, repeat, label=parts[0]))
        except (ValueError, TypeError) as exc:
            raise WorkloadError(f"operator {len(ops)} (line {lineno}): {exc}") from None
    return Workload(name, tuple(ops))


# -- prediction ---------------------------------------------------------------------

@dataclass(frozen=True)
class OperatorResult:
    index: int
    label: str
    op: OperatorSpec
    tile: TileConfig
    tile_source: str  # "override", "tree", "rule" or "default"
    repeat: int
    kernel: PredictionResult
    overhead: float = 0.0  # launch gap per call, seconds, spent at idle power
    dram_bytes: int = 0

    @property
    def latency(self) -> float:
        """Seconds per call including launch overhead."""
        return self.kernel.latency + self.overhead

    @property
    def energy(self) -> float:
        return self.kernel.energy + self.kernel.idle_power * self.overhead

    @property
    def total_power(self) -> float:
        return self.energy / self.latency if self.latency > 0 else self.kernel.idle_power

    @property
    def flags(self) -> tuple:
        return self.kernel.flags

    def as_dict(self) -> dict:
        return {
            "index": self.index, "label": self.label, "kind": self.op.kind.value,
            "precision": self.op.precision.value, "shape": list(self.op.shape), "tile": self.tile.config_id,
            "tile_source": self.tile_source, "repeat": self.repeat, "latency_s": self.latency,
            "energy_j": self.energy, "total_power_w": self.total_power, "dram_bytes": self.dram_bytes,
            "kernel": self.kernel.as_dict(),
        }


@dataclass(frozen=True)
class WorkloadResult:
    name: str
    gpu: str
    core_freq: float
    core_voltage: float
    operators: tuple
    latency: float
    energy: float
    dram_bytes: int
    coverage: dict = field(default_factory=dict)

    @property
    def average_power(self) -> float:
        return self.energy / self.latency

    def as_dict(self) -> dict:
        return {
            "workload": self.name, "gpu": self.gpu, "core_freq_mhz": self.core_freq / MHZ,
            "core_voltage": self.core_voltage, "latency_s": self.latency, "energy_j": self.energy,
            "average_power_w": self.average_power, "dram_bytes": self.dram_bytes,
            "coverage": self.coverage, "operators": [o.as_dict() for o in self.operators],
        }


CSV_HEADER = ("index", "label", "kind", "precision", "shape", "tile", "tile_source", "repeat",
              "latency_s", "dynamic_power_w", "idle_power_w", "total_power_w", "energy_j", "flags")


def result_csv_rows(result: WorkloadResult):
    yield CSV_HEADER
    for o in result.operators:
        k = o.kernel
        yield (o.index, o.label, o.op.kind.value, o.op.precision.value, o.op.token(), o.tile.config_id,
               o.tile_source, o.repeat, repr(o.latency), repr(k.dynamic_power), repr(k.idle_power),
               repr(o.total_power), repr(o.energy), ";".join(o.flags))


class WorkloadPredictor:
    """Predicts kernels and workloads for one GPU at one operating point.

    ``store`` supplies fitted coefficients and the tile predictor. Without a
    store, ``allow_defaults=True`` runs with identity latency correction and
    no dynamic power (every kernel flagged).
    """

    def __init__(self, gpu: GpuConfig, power: PowerConfig, store: CoefficientStore | None = None,
                 allow_defaults: bool = False, launch_overhead: float = 0.0):
        if store is None and not allow_defaults:
            raise WorkloadError("no coefficient store given; pass allow_defaults=True to use identity coefficients")
        if not (launch_overhead >= 0 and math.isfinite(launch_overhead)):
            raise WorkloadError("launch_overhead must be a finite value >= 0")
        self.gpu = gpu
        self.power = power
        self.store = store
        self.launch_overhead = float(launch_overhead)
        self._idle = idle_power_at(power, power.core_freq)
        self._cache = {}

    def _lookup(self, key: KernelGroupKey) -> Lookup:
        if self.store is None:
            return Lookup(IDENTITY, None, "default", "missing")
        return self.store.lookup(key)

    def tile_for(self, op: OperatorSpec) -> PredictedTile:
        pred = self.store.config_predictor if self.store is not None else None
        return predict_tile_config(pred, op)

    def predict_kernel(self, op: OperatorSpec, tile: TileConfig) -> PredictionResult:
        key = (op, tile)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        lk = self._lookup(KernelGroupKey.of(op, tile))
        ck = correct_latency(build_timeline(op, tile, self.gpu, self.power), lk.latency)
        dyn = 0.0 if lk.power is None else dynamic_power(ck.utilization, lk.power, self.gpu, self.power)
        res = PredictionResult(ck.latency, dyn, self._idle, ck.utilization, ck.t_p, ck.t_m, ck.t_e, lk.flags)
        self._cache[key] = res
        return res

    def predict(self, w: Workload) -> WorkloadResult:
        results = []
        for i, wop in enumerate(w.ops):
            if wop.tile is not None:
                tile, src = wop.tile, "override"
            else:
                pt = self.tile_for(wop.op)
                tile, src = pt.tile, pt.source
            try:
                kernel = self.predict_kernel(wop.op, tile)
                dram = kernel_traffic(wop.op, tile).dram_total
            except ValueError as exc:
                raise WorkloadError(f"operator {i}: {exc}") from None
            if src == "default":
                kernel = _with_flag(kernel, "tile:default")
            results.append(OperatorResult(i, wop.label, wop.op, tile, src, wop.repeat, kernel,
                                          self.launch_overhead, dram))
        latency = math.fsum(o.latency * o.repeat for o in results)
        energy = math.fsum(o.energy * o.repeat for o in results)
        dram = sum(o.dram_bytes * o.repeat for o in results)
        coverage = {
            "operators": len(results),
            "tile_sources": _count(o.tile_source for o in results),
            "flagged": [o.index for o in results if o.flags],
            "latency_fallback": sum(any(f.startswith("latency:") for f in o.flags) for o in results),
            "power_fallback": sum(any(f.startswith("power:") for f in o.flags) for o in results),
        }
        return WorkloadResult(w.name, self.gpu.name, self.power.core_freq, self.power.core_voltage,
                              tuple(results), latency, energy, dram, coverage)


def _with_flag(res: PredictionResult, flag: str) -> PredictionResult:
    return replace(res, flags=res.flags + (flag,))


def _count(items) -> dict:
    out = {}
    for x in items:
        out[x] = out.get(x, 0) + 1
    return dict(sorted(out.items()))


def predict_workload(w: Workload, gpu: GpuConfig, power: PowerConfig, store: CoefficientStore | None = None,
                     allow_defaults: bool = False, launch_overhead: float = 0.0) -> WorkloadResult:
    return WorkloadPredictor(gpu, power, store, allow_defaults, launch_overhead).predict(w)


def explore_dvfs(w: Workload, gpu: GpuConfig, power_base: PowerConfig, freqs_mhz, store=None,
                 voltage: float | None = None, **kwargs) -> list:
    """``[(freq_mhz, WorkloadResult)]``: same coefficients, operating point swept.

    Voltage comes from the config's V(f) table (or stays fixed without one)
    unless ``voltage`` pins it; idle power is looked up at each frequency.
    """
    out = []
    for f in freqs_mhz:
        pc = power_base.at_frequency(float(f) * MHZ, voltage)
        out.append((float(f), predict_workload(w, gpu, pc, store, **kwargs)))
    return out


def explore_arch(w: Workload, gpu_variant: GpuConfig, power: PowerConfig, store=None, **kwargs) -> WorkloadResult:
    """Predict on a different GPU description with coefficients fitted elsewhere."""
    return predict_workload(w, gpu_variant, power, store, **kwargs)


@dataclass(frozen=True)
class Comparison:
    base: WorkloadResult
    variant: WorkloadResult

    @property
    def speedup(self) -> float:
        return self.base.latency / self.variant.latency

    @property
    def power_delta(self) -> float:
        return self.variant.average_power - self.base.average_power

    @property
    def energy_ratio(self) -> float:
        return self.variant.energy / self.base.energy

    @property
    def dram_ratio(self) -> float:
        return self.variant.dram_bytes / self.base.dram_bytes if self.base.dram_bytes else math.nan

    def as_dict(self) -> dict:
        return {
            "base": self.base.name, "variant": self.variant.name, "speedup": self.speedup,
            "base_latency_s": self.base.latency, "variant_latency_s": self.variant.latency,
            "base_average_power_w": self.base.average_power, "variant_average_power_w": self.variant.average_power,
            "power_delta_w": self.power_delta, "energy_ratio": self.energy_ratio,
            "base_dram_bytes": self.base.dram_bytes, "variant_dram_bytes": self.variant.dram_bytes,
        }


def compare_variants(base: Workload, variant: Workload, gpu: GpuConfig, power: PowerConfig, store=None,
                     **kwargs) -> Comparison:
    p = WorkloadPredictor(gpu, power, store, **kwargs)
    return Comparison(p.predict(base), p.predict(variant))
