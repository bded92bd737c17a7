"""Coefficient store: per-group latency and power coefficients plus the config predictor.

Serialized as versioned JSON::

    {"format": "tilewatt-store", "version": 1, "gpu": ..., "metadata": {...},
     "groups": {"<group key>": {"latency": {...}, "power": {...} | null, ...}},
     "config_predictor": {...} | null}
"""
from __future__ import annotations

import datetime as _dt
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

from .db import group_records, resolve_tile
from .frontend import TileConfigPredictor
from .hwmodel import GpuConfig, PowerConfig
from .kernels import KernelGroupKey, OpKind
from .power import N_COEFFS, PowerCoeffs, fit_power_coeffs
from .refine import IDENTITY, CorrectionCoeffs, FitError, correct_latency, fit_latency_coeffs, nearest_group
from .timeline import build_timeline

STORE_FORMAT = "tilewatt-store"
STORE_VERSION = 1
MIN_POWER_SAMPLES = N_COEFFS + 1


class StoreError(ValueError):
    pass


@dataclass(frozen=True)
class GroupEntry:
    key: KernelGroupKey
    latency: CorrectionCoeffs
    power: PowerCoeffs | None
    n_samples: int
    latency_rmse: float
    n_power_samples: int = 0
    power_rmse: float | None = None
    notes: tuple = ()

    def to_dict(self) -> dict:
        return {
            "latency": self.latency.as_dict(),
            "power": None if self.power is None else {**self.power.as_dict(),
                                                      "merged": [list(g) for g in self.power.merged]},
            "n_samples": self.n_samples, "latency_rmse": self.latency_rmse,
            "n_power_samples": self.n_power_samples, "power_rmse": self.power_rmse,
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, key: KernelGroupKey, doc: dict) -> "GroupEntry":
        p = doc.get("power")
        power = None
        if p is not None:
            power = PowerCoeffs(**{f"c_{m}": p[m] for m in ("dram", "l2", "shared", "tensor", "cuda", "sfu")},
                                merged=tuple(tuple(g) for g in p.get("merged", ())))
        return cls(key, CorrectionCoeffs(**doc["latency"]), power, int(doc["n_samples"]),
                   float(doc["latency_rmse"]), int(doc.get("n_power_samples", 0)), doc.get("power_rmse"),
                   tuple(doc.get("notes", ())))


@dataclass(frozen=True)
class Lookup:
    """Coefficients for one key and where they came from."""

    latency: CorrectionCoeffs
    power: PowerCoeffs | None
    latency_source: str  # "exact", "nearest" or "default"
    power_source: str  # "exact", "nearest" or "missing"
    latency_key: KernelGroupKey | None = None
    power_key: KernelGroupKey | None = None

    @property
    def flags(self) -> tuple:
        out = []
        if self.latency_source != "exact":
            out.append(f"latency:{self.latency_source}" + (f"={self.latency_key}" if self.latency_key else ""))
        if self.power_source != "exact":
            out.append(f"power:{self.power_source}" + (f"={self.power_key}" if self.power_key else ""))
        return tuple(out)


@dataclass
class CoefficientStore:
    gpu: str
    groups: dict = field(default_factory=dict)  # KernelGroupKey -> GroupEntry
    config_predictor: TileConfigPredictor | None = None
    metadata: dict = field(default_factory=dict)

    def lookup(self, key: KernelGroupKey) -> Lookup:
        entry = self.groups.get(key)
        if entry is not None:
            lat, lat_src, lat_key = entry.latency, "exact", key
        else:
            near = nearest_group(key, self.groups)
            if near is None:
                lat, lat_src, lat_key = IDENTITY, "default", None
            else:
                lat, lat_src, lat_key = self.groups[near].latency, "nearest", near
        if entry is not None and entry.power is not None:
            pw, pw_src, pw_key = entry.power, "exact", key
        else:
            with_power = [k for k, e in self.groups.items() if e.power is not None and k != key]
            near = nearest_group(key, with_power)
            if near is None:
                pw, pw_src, pw_key = None, "missing", None
            else:
                pw, pw_src, pw_key = self.groups[near].power, "nearest", near
        return Lookup(lat, pw, lat_src, pw_src, lat_key, pw_key)

    def to_dict(self) -> dict:
        return {
            "format": STORE_FORMAT, "version": STORE_VERSION, "gpu": self.gpu,
            "metadata": dict(self.metadata),
            "groups": {str(k): self.groups[k].to_dict() for k in sorted(self.groups, key=str)},
            "config_predictor": None if self.config_predictor is None else self.config_predictor.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CoefficientStore":
        if doc.get("format") != STORE_FORMAT:
            raise StoreError(f"not a coefficient store (format={doc.get('format')!r})")
        if doc.get("version") != STORE_VERSION:
            raise StoreError(f"unsupported store version {doc.get('version')!r}, expected {STORE_VERSION}")
        try:
            groups = {}
            for text, g in doc["groups"].items():
                key = KernelGroupKey.parse(text)
                groups[key] = GroupEntry.from_dict(key, g)
            cp = doc.get("config_predictor")
            pred = TileConfigPredictor.from_dict(cp) if cp else None
            return cls(doc["gpu"], groups, pred, dict(doc.get("metadata", {})))
        except (KeyError, TypeError, ValueError) as exc:
            raise StoreError(f"malformed coefficient store: {exc}") from None

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=False)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps() + "\n", encoding="utf-8")

    @classmethod
    def loads(cls, text: str) -> "CoefficientStore":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise StoreError(f"store is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise StoreError("store must be a JSON object")
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path) -> "CoefficientStore":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


# -- fitting a whole database ----------------------------------------------------

@dataclass
class FitReport:
    store: CoefficientStore
    skipped: dict  # KernelGroupKey -> reason
    unresolved: list  # (record, reason)
    notes: list


class TimelineCache:
    """Memoizes timelines per (operator, tile, frequency, voltage) across fits."""

    def __init__(self, gpu: GpuConfig):
        self.gpu = gpu
        self._cache = {}

    def get(self, op, tile, pc: PowerConfig):
        k = (op, tile, pc.core_freq, pc.core_voltage)
        pt = self._cache.get(k)
        if pt is None:
            pt = self._cache[k] = build_timeline(op, tile, self.gpu, pc)
        return pt


def fit_group(items, gpu: GpuConfig, power: PowerConfig, key=None, cache: TimelineCache | None = None) -> GroupEntry:
    """Fit latency then power coefficients for one group of ``(record, TileConfig)``."""
    cache = cache or TimelineCache(gpu)
    rows = []
    for r, tile in items:
        pc = power.at_frequency(r.core_freq)
        rows.append((r, cache.get(r.op, tile, pc), pc))
    lat = fit_latency_coeffs([(pt, r.latency) for r, pt, _ in rows], key)
    notes = list(lat.notes)
    pw_samples = [(correct_latency(pt, lat.coeffs).utilization, pc, r.power, r.idle_power)
                  for r, pt, pc in rows if r.power is not None]
    pcoeffs, prmse = None, None
    if len(pw_samples) >= MIN_POWER_SAMPLES:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            pf = fit_power_coeffs(pw_samples, gpu, key)
        pcoeffs, prmse = pf.coeffs, pf.rmse
        notes += list(pf.notes)
    elif pw_samples:
        notes.append(f"{len(pw_samples)} power samples, need {MIN_POWER_SAMPLES}: power taken from nearest group")
    return GroupEntry(key, lat.coeffs, pcoeffs, len(rows), lat.rmse, len(pw_samples), prmse, tuple(notes))


def fit_store(records, gpu: GpuConfig, power: PowerConfig, cache: TimelineCache | None = None,
              train_predictor: bool = True) -> FitReport:
    """Fit every group of a measurement database into a :class:`CoefficientStore`.

    ``power`` supplies the voltage curve and idle table; each record is
    evaluated at its own core frequency.
    """
    records = list(records)
    if not records:
        raise FitError("empty database")
    cache = cache or TimelineCache(gpu)
    grouping = group_records(records)
    groups, skipped, notes = {}, {}, []
    for key in sorted(grouping.groups, key=str):
        items = grouping.groups[key]
        try:
            groups[key] = fit_group(items, gpu, power, key, cache)
        except FitError as exc:
            skipped[key] = str(exc)
    if not groups:
        raise FitError("no group could be fitted: " + "; ".join(skipped.values()))
    predictor = None
    if train_predictor:
        ops, tiles = [], []
        for r in records:
            if r.op.kind not in (OpKind.GEMM, OpKind.FLASH_ATTENTION):
                continue
            tile, src = resolve_tile(r)
            if src != "default":
                ops.append(r.op)
                tiles.append(tile)
        if ops:
            predictor = TileConfigPredictor().fit(ops, tiles)
    meta = {
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "n_records": len(records),
        "n_groups": len(groups),
        "unresolved": len(grouping.unresolved),
        "frequencies_mhz": sorted({round(r.core_freq / 1e6, 3) for r in records}),
    }
    for key, why in skipped.items():
        notes.append(f"group {key} not fitted: {why}")
    store = CoefficientStore(gpu.name, groups, predictor, meta)
    return FitReport(store, skipped, grouping.unresolved, notes)


def records_gpu(records) -> str | None:
    names = {r.gpu for r in records}
    return names.pop() if len(names) == 1 else None


__all__ = [
    "CoefficientStore", "GroupEntry", "Lookup", "FitReport", "StoreError", "TimelineCache",
    "fit_group", "fit_store", "records_gpu", "STORE_VERSION",
]
