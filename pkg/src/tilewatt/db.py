"""Offline measurement database: CSV I/O, grouping, and a synthetic ground-truth generator.

File format (UTF-8, comma separated)::

    # tilewatt-db v1
    id,gpu,precision,shape,kernel_name,tile,grid,block,concurrency,core_freq_hz,latency_s,power_w,idle_w
    ...

``shape`` is an operator token such as ``gemm:1.128.128.128``; ``tile`` an
optional config id; ``grid``/``block`` are ``x``-joined dims. Empty cells mean
"not recorded". Floats are written with ``repr`` so files round-trip exactly.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .frontend import default_tile, parse_kernel_name, tile_from_parsed
from .hwmodel import MHZ, GpuConfig, PowerConfig, idle_power_at
from .kernels import KernelGroupKey, OperatorSpec, OpKind, Precision, TileConfig, threadblock_grid
from .power import PowerCoeffs, dynamic_power
from .refine import CorrectionCoeffs, correct_latency
from .timeline import build_timeline

DB_MAGIC = "# tilewatt-db v1"
COLUMNS = ("id", "gpu", "precision", "shape", "kernel_name", "tile", "grid", "block", "concurrency",
           "core_freq_hz", "latency_s", "power_w", "idle_w")


class DatabaseError(ValueError):
    pass


@dataclass(frozen=True)
class MeasurementRecord:
    record_id: str
    gpu: str
    op: OperatorSpec
    core_freq: float
    latency: float
    kernel_name: str | None = None
    tile_id: str | None = None
    grid: tuple | None = None
    block: tuple | None = None
    concurrency: int | None = None
    power: float | None = None
    idle_power: float | None = None

    def __post_init__(self):
        if not (math.isfinite(self.latency) and self.latency > 0):
            raise DatabaseError(f"latency must be > 0, got {self.latency}")
        if not (math.isfinite(self.core_freq) and self.core_freq > 0):
            raise DatabaseError(f"core_freq must be > 0, got {self.core_freq}")
        if self.concurrency is not None and self.concurrency < 1:
            raise DatabaseError(f"concurrency must be >= 1, got {self.concurrency}")
        for name in ("power", "idle_power"):
            v = getattr(self, name)
            if v is not None and not (math.isfinite(v) and v >= 0):
                raise DatabaseError(f"{name} must be >= 0, got {v}")
        if self.power is not None and self.idle_power is not None and self.power < self.idle_power:
            raise DatabaseError(f"power {self.power} W below idle {self.idle_power} W")
        if self.tile_id is not None:
            TileConfig.from_id(self.tile_id).check_for(self.op.kind)


# -- I/O ---------------------------------------------------------------------------

def _dims(text):
    return tuple(int(v) for v in text.split("x")) if text else None


def _opt(text, conv):
    return conv(text) if text != "" else None


def _row_to_record(row: dict) -> MeasurementRecord:
    prec = Precision(row["precision"])
    return MeasurementRecord(
        record_id=row["id"],
        gpu=row["gpu"],
        op=OperatorSpec.from_token(row["shape"], prec),
        core_freq=float(row["core_freq_hz"]),
        latency=float(row["latency_s"]),
        kernel_name=row["kernel_name"] or None,
        tile_id=row["tile"] or None,
        grid=_dims(row["grid"]),
        block=_dims(row["block"]),
        concurrency=_opt(row["concurrency"], int),
        power=_opt(row["power_w"], float),
        idle_power=_opt(row["idle_w"], float),
    )


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return "x".join(str(x) for x in v)
    return str(v)


def _record_to_row(r: MeasurementRecord) -> list:
    return [r.record_id, r.gpu, r.op.precision.value, r.op.token(), r.kernel_name or "", r.tile_id or "",
            _fmt(r.grid), _fmt(r.block), _fmt(r.concurrency), _fmt(float(r.core_freq)), _fmt(float(r.latency)),
            _fmt(None if r.power is None else float(r.power)),
            _fmt(None if r.idle_power is None else float(r.idle_power))]


def dumps_database(records) -> str:
    buf = io.StringIO()
    buf.write(DB_MAGIC + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in records:
        w.writerow(_record_to_row(r))
    return buf.getvalue()


def save_database(path, records) -> None:
    Path(path).write_text(dumps_database(records), encoding="utf-8")


@dataclass
class LoadResult:
    records: list
    diagnostics: list = field(default_factory=list)  # (line number, message)

    @property
    def accepted(self) -> int:
        return len(self.records)

    @property
    def rejected(self) -> int:
        return len(self.diagnostics)


def loads_database(text: str, strict: bool = False) -> LoadResult:
    lines = text.splitlines()
    if not lines or lines[0].strip() != DB_MAGIC:
        raise DatabaseError(f"line 1: expected header {DB_MAGIC!r}")
    if len(lines) < 2:
        raise DatabaseError("line 2: missing column header")
    header = next(csv.reader([lines[1]]))
    if tuple(header) != COLUMNS:
        raise DatabaseError(f"line 2: column header {header} does not match {list(COLUMNS)}")
    result = LoadResult([])
    reader = csv.reader(lines[2:])
    for offset, row in enumerate(reader):
        lineno = offset + 3
        if not row or all(not c.strip() for c in row):
            continue
        try:
            if len(row) != len(COLUMNS):
                raise DatabaseError(f"expected {len(COLUMNS)} fields, got {len(row)}")
            result.records.append(_row_to_record(dict(zip(COLUMNS, row))))
        except (ValueError, KeyError) as exc:
            msg = f"line {lineno}: {exc}"
            if strict:
                raise DatabaseError(msg) from None
            result.diagnostics.append((lineno, str(exc)))
    return result


def load_database(path, strict: bool = False) -> LoadResult:
    p = Path(path)
    if not p.exists():
        raise DatabaseError(f"no such database file: {path}")
    return loads_database(p.read_text(encoding="utf-8"), strict=strict)


# -- grouping ---------------------------------------------------------------------

def warp_grid_from_block(block) -> tuple | None:
    """Split a threadblock's warps into (wm, wn) with wm >= wn, both powers of two when possible."""
    if not block:
        return None
    threads = math.prod(block)
    warps = max(1, threads // 32)
    wm = 1 << math.ceil(math.log2(warps) / 2) if warps > 1 else 1
    wm = min(wm, warps)
    return (wm, max(1, warps // wm))


def resolve_tile(r: MeasurementRecord):
    """TileConfig for a record plus where it came from: tile column, kernel name, or default."""
    c = r.concurrency or 1
    if r.tile_id:
        t = TileConfig.from_id(r.tile_id)
        if r.concurrency and t.concurrent_tbs_per_sm != r.concurrency:
            t = _with(t, concurrent_tbs_per_sm=r.concurrency)
        return t, "tile"
    base = default_tile(r.op)
    wg = warp_grid_from_block(r.block)
    base = _with(base, concurrent_tbs_per_sm=c, **({"warp_grid": wg} if wg else {}))
    if r.kernel_name:
        parsed = parse_kernel_name(r.kernel_name)
        t = tile_from_parsed(parsed, r.op.kind, base)
        if t is not None:
            return t, "name"
    return base, "default"


def _with(tile: TileConfig, **changes) -> TileConfig:
    from dataclasses import replace
    return replace(tile, **changes)


@dataclass
class Grouping:
    groups: dict  # KernelGroupKey -> list of (record, TileConfig)
    unresolved: list  # (record, reason)
    sources: dict  # record_id -> "tile" | "name" | "default"


def group_records(records) -> Grouping:
    groups, unresolved, sources = {}, [], {}
    for r in records:
        try:
            tile, src = resolve_tile(r)
            tile.check_for(r.op.kind)
        except ValueError as exc:
            unresolved.append((r, str(exc)))
            continue
        sources[r.record_id] = src
        groups.setdefault(KernelGroupKey.of(r.op, tile), []).append((r, tile))
    return Grouping(groups, unresolved, sources)


# -- synthetic ground truth ------------------------------------------------------------

TRAINING_FREQS_MHZ = (510, 810, 1110, 1410)

DEFAULT_HIDDEN_LATENCY = CorrectionCoeffs(lam_p=1.3, lam_m=1.1, lam_e=1.5, eps=2e-6)
DEFAULT_HIDDEN_POWER = PowerCoeffs(c_dram=3.0e-8, c_l2=2.0e-8, c_shared=1.5e-8,
                                   c_tensor=6.0e-8, c_cuda=4.0e-8, c_sfu=1.0e-8)

DEFAULT_SYNTH_TILES = (
    (OpKind.GEMM, Precision.BF16, TileConfig((128, 128, 32), (2, 2), (16, 8, 16), 3)),
    (OpKind.GEMM, Precision.BF16, TileConfig((128, 64, 64), (2, 2), (16, 8, 16), 4, epilogue_via_shared=True)),
    (OpKind.GEMM, Precision.FP32, TileConfig((128, 128, 8), (2, 4), (1, 1, 1), 3)),
    (OpKind.SOFTMAX, Precision.FP32, None),
    (OpKind.LAYERNORM, Precision.BF16, None),
    (OpKind.FLASH_ATTENTION, Precision.BF16, TileConfig((128, 64), (4, 1), (16, 8, 16), 2)),
    (OpKind.ELEMENTWISE, Precision.BF16, None),
)


@dataclass(frozen=True)
class SyntheticTruth:
    """Hidden coefficients of the generator; per-group overrides fall back to the defaults."""

    latency: CorrectionCoeffs = DEFAULT_HIDDEN_LATENCY
    power: PowerCoeffs = DEFAULT_HIDDEN_POWER
    per_group_latency: dict = field(default_factory=dict)
    per_group_power: dict = field(default_factory=dict)

    def latency_for(self, key) -> CorrectionCoeffs:
        return self.per_group_latency.get(key, self.latency)

    def power_for(self, key) -> PowerCoeffs:
        return self.per_group_power.get(key, self.power)


def _log_uniform_int(rng, lo, hi):
    return int(round(math.exp(rng.uniform(math.log(lo), math.log(hi)))))


# Log-uniform shape ranges per (kind, precision). Chosen so every phase carries
# a measurable share of latency in some samples: small K keeps the prologue
# visible next to the mainloop, small grids keep eps visible.
SHAPE_RANGES = {
    (OpKind.GEMM, Precision.BF16): {"mn": (64, 1024), "k": (8, 256)},
    (OpKind.GEMM, Precision.FP32): {"mn": (16, 256), "k": (8, 24)},
    OpKind.GEMM: {"mn": (64, 1024), "k": (8, 256)},
    OpKind.SOFTMAX: {"rows": (16, 1024), "cols": (1024, 8192)},
    OpKind.LAYERNORM: {"rows": (16, 1024), "cols": (1024, 8192)},
    OpKind.ELEMENTWISE: {"n": (1 << 12, 1 << 24)},
    OpKind.FLASH_ATTENTION: {"q": (256, 2048), "kv": (64, 256)},
}


def shape_ranges(kind: OpKind, precision) -> dict:
    return SHAPE_RANGES.get((kind, Precision(precision)), SHAPE_RANGES[kind])


def random_shape(rng, kind: OpKind, precision) -> OperatorSpec:
    r = shape_ranges(kind, precision)
    if kind is OpKind.GEMM:
        return OperatorSpec.gemm(_log_uniform_int(rng, *r["mn"]), _log_uniform_int(rng, *r["mn"]),
                                 _log_uniform_int(rng, *r["k"]), batch=int(rng.choice([1, 1, 2])),
                                 precision=precision)
    if kind.is_reduction:
        return OperatorSpec(kind, precision, (_log_uniform_int(rng, *r["rows"]), _log_uniform_int(rng, *r["cols"])))
    if kind is OpKind.ELEMENTWISE:
        return OperatorSpec.elementwise(_log_uniform_int(rng, *r["n"]), n_in=int(rng.integers(1, 3)),
                                        n_out=1, flops_per_element=int(rng.integers(1, 9)),
                                        sfu=bool(rng.random() < 0.3), precision=precision)
    return OperatorSpec.flash_attention(int(rng.choice([1, 2])), int(rng.choice([4, 8, 16])),
                                        _log_uniform_int(rng, *r["q"]), _log_uniform_int(rng, *r["kv"]),
                                        int(rng.choice([64, 128])), precision=precision)


def synthetic_kernel_name(op: OperatorSpec, tile: TileConfig) -> str:
    """CUTLASS-style name encoding the tile so the parser can recover it."""
    if op.kind is OpKind.GEMM:
        bm, bn, bk = tile.tb_tile
        mma = "s{}{}{}gemm".format(*tile.instr_tile) if tile.instr_tile != (1, 1, 1) else "simt_sgemm"
        return f"cutlass_80_tensorop_{op.precision.value}_{mma}_{op.precision.value}_{bm}x{bn}_{bk}x{tile.pipeline_stages}_tn_align8"
    if op.kind is OpKind.FLASH_ATTENTION:
        return f"flash_fwd_kernel_{op.precision.value}_q{tile.tb_tile[0]}_kv{tile.tb_tile[1]}"
    return f"{op.kind.value}_kernel_{op.precision.value}"


def generate_synthetic_database(seed: int, gpu: GpuConfig, power: PowerConfig, truth: SyntheticTruth | None = None,
                                shapes_per_group=50, freqs_mhz=TRAINING_FREQS_MHZ,
                                sigma_latency: float = 0.02, sigma_power: float = 0.02,
                                groups=DEFAULT_SYNTH_TILES) -> list:
    """Records whose latency/power come from the analytic model with hidden coefficients.

    Each random shape is measured at every frequency in ``freqs_mhz``; noise is
    multiplicative Gaussian ``(1 + sigma * z)`` on latency and on total power.
    ``shapes_per_group`` is an int or one count per entry of ``groups``.
    """
    truth = truth or SyntheticTruth()
    groups = tuple(groups)
    counts = [shapes_per_group] * len(groups) if isinstance(shapes_per_group, int) else list(shapes_per_group)
    if len(counts) != len(groups):
        raise ValueError(f"{len(counts)} shape counts for {len(groups)} groups")
    rng = np.random.default_rng(seed)
    records = []
    for gi, (kind, prec, tile) in enumerate(groups):
        prec = Precision(prec)
        for si in range(counts[gi]):
            op = random_shape(rng, kind, prec)
            t = tile if tile is not None else default_tile(op)
            key = KernelGroupKey.of(op, t)
            lat_c, pow_c = truth.latency_for(key), truth.power_for(key)
            for f in freqs_mhz:
                pc = power.at_frequency(f * MHZ)
                ck = correct_latency(build_timeline(op, t, gpu, pc), lat_c)
                idle = idle_power_at(pc, pc.core_freq)
                total = dynamic_power(ck.utilization, pow_c, gpu, pc) + idle
                latency = ck.latency * (1.0 + sigma_latency * rng.standard_normal())
                watts = max(idle, total * (1.0 + sigma_power * rng.standard_normal()))
                grid = threadblock_grid(op, t)
                records.append(MeasurementRecord(
                    record_id=f"s{seed}-g{gi}-{si}-{f}", gpu=gpu.name, op=op, core_freq=pc.core_freq,
                    latency=max(latency, 1e-12), kernel_name=synthetic_kernel_name(op, t), tile_id=t.config_id,
                    grid=(grid, 1, 1), block=(32 * t.warp_grid[0] * t.warp_grid[1], 1, 1),
                    concurrency=t.concurrent_tbs_per_sm, power=watts, idle_power=idle,
                ))
    return records


def design_relative_se(seed: int, gpu: GpuConfig, power: PowerConfig, group, n_shapes: int,
                       sigma: float = 0.02, truth: SyntheticTruth | None = None,
                       freqs_mhz=TRAINING_FREQS_MHZ) -> np.ndarray:
    """A-priori relative standard errors of the latency fit for one generator group.

    Least-squares covariance under multiplicative noise of size ``sigma``,
    evaluated on the noiseless design; order (lam_p, lam_m, lam_e, eps) or
    (lam_m, eps) for monolithic kernels.
    """
    truth = truth or SyntheticTruth()
    kind, prec, tile = group
    rng = np.random.default_rng(seed)
    rows, coeffs = [], None
    for _ in range(n_shapes):
        op = random_shape(rng, kind, Precision(prec))
        t = tile if tile is not None else default_tile(op)
        coeffs = truth.latency_for(KernelGroupKey.of(op, t))
        for f in freqs_mhz:
            rows.append(build_timeline(op, t, gpu, power.at_frequency(f * MHZ)).phase_features())
    X = np.asarray(rows, dtype=float)
    X = np.hstack([X, np.ones((len(X), 1))])
    c = coeffs
    beta = np.array([c.lam_p, c.lam_m, c.lam_e, c.eps] if X.shape[1] == 4 else [c.lam_m, c.eps])
    s = sigma * (X @ beta)
    inv = np.linalg.pinv(X.T @ X)
    cov = inv @ (X.T * s ** 2) @ X @ inv
    return np.sqrt(np.diag(cov)) / beta


def shapes_for_target_se(seed: int, gpu: GpuConfig, power: PowerConfig, group, target: float,
                         pilot: int = 200, minimum: int = 25, **kwargs) -> int:
    """Shape count at which every latency coefficient reaches relative SE <= ``target``.

    SE falls as 1/sqrt(n), so the pilot estimate is scaled accordingly.
    """
    se = float(np.max(design_relative_se(seed, gpu, power, group, pilot, **kwargs)))
    return max(minimum, int(math.ceil(pilot * (se / target) ** 2)))
