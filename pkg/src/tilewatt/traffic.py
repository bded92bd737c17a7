"""Closed-form memory traffic per hierarchy level under ideal threadblock swizzling.

Every distinct operand tile is fetched from DRAM once for the kernel's lifetime;
all other requests for it hit L2. Padded (ceil) dims are used for DRAM loads
because out-of-bounds tiles are still fetched whole by predicated loads.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from .kernels import OperatorSpec, OpKind, TileConfig, threadblock_grid

FIELDS = ("dram_load", "dram_store", "l2_load", "l2_store", "shared_load", "shared_store")

# shared-memory re-read passes after the initial load, per reduction kind
REDUCTION_REUSE = {OpKind.SOFTMAX: 2, OpKind.LAYERNORM: 1}


@dataclass(frozen=True)
class TrafficBreakdown:
    """Bytes moved at each level. Loads and stores are kept separate."""

    dram_load: int = 0
    dram_store: int = 0
    l2_load: int = 0
    l2_store: int = 0
    shared_load: int = 0
    shared_store: int = 0

    def __post_init__(self):
        for name in FIELDS:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def dram_total(self) -> int:
        return self.dram_load + self.dram_store

    def as_dict(self) -> dict:
        return asdict(self)


def _padded(x: int, b: int) -> int:
    return math.ceil(x / b) * b


def gemm_traffic(op: OperatorSpec, tile: TileConfig) -> TrafficBreakdown:
    tile.check_for(OpKind.GEMM)
    e = op.elem_bytes
    bm, bn, bk = tile.tb_tile
    wm, wn = tile.warp_grid
    g = threadblock_grid(op, tile)
    t = math.ceil(op.k / bk)
    kp = _padded(op.k, bk)
    l2_load = g * t * (bm + bn) * bk * e
    dram_load = op.batch * (_padded(op.m, bm) * kp + kp * _padded(op.n, bn)) * e
    shared_load = g * t * bk * (bm * wn + bn * wm) * e
    shared_store = l2_load
    if tile.epilogue_via_shared:
        shared_store += g * bm * bn * e
        shared_load += g * bm * bn * e
    out = op.batch * op.m * op.n * e
    return TrafficBreakdown(dram_load, out, l2_load, out, shared_load, shared_store)


def reduction_traffic(op: OperatorSpec, tile: TileConfig) -> TrafficBreakdown:
    if not op.kind.is_reduction:
        raise ValueError(f"not a reduction: {op.kind.value}")
    size = op.rows * op.cols * op.elem_bytes
    return TrafficBreakdown(
        dram_load=size, dram_store=size, l2_load=size, l2_store=size,
        shared_load=REDUCTION_REUSE[op.kind] * size, shared_store=size,
    )


def flashattention_traffic(op: OperatorSpec, tile: TileConfig) -> TrafficBreakdown:
    tile.check_for(OpKind.FLASH_ATTENTION)
    e = op.elem_bytes
    bq, bk = tile.tb_tile
    wm, wn = tile.warp_grid
    d = op.head_dim
    bh = op.batch * op.heads
    tq = math.ceil(op.q_len / bq)
    tk = math.ceil(op.kv_len / bk)
    g = bh * tq
    l2_load = bh * tq * (bq * d + tk * 2 * bk * d) * e
    dram_load = bh * (_padded(op.q_len, bq) * d + 2 * _padded(op.kv_len, bk) * d) * e
    # Q.K^T re-reads both operands; P.V reads only V since P stays in registers
    per_step = d * (bq * wn + bk * wm) + bk * d * wm
    shared_load = g * tk * per_step * e
    shared_store = l2_load
    if tile.epilogue_via_shared:
        shared_store += g * bq * d * e
        shared_load += g * bq * d * e
    out = bh * op.q_len * d * e
    return TrafficBreakdown(dram_load, out, l2_load, out, shared_load, shared_store)


def elementwise_traffic(op: OperatorSpec, tile: TileConfig) -> TrafficBreakdown:
    if op.kind is not OpKind.ELEMENTWISE:
        raise ValueError(f"not elementwise: {op.kind.value}")
    e = op.elem_bytes
    load = op.n_in * op.elements * e
    store = op.n_out * op.elements * e
    return TrafficBreakdown(dram_load=load, dram_store=store, l2_load=load, l2_store=store)


def kernel_traffic(op: OperatorSpec, tile: TileConfig) -> TrafficBreakdown:
    if op.kind is OpKind.GEMM:
        return gemm_traffic(op, tile)
    if op.kind.is_reduction:
        return reduction_traffic(op, tile)
    if op.kind is OpKind.ELEMENTWISE:
        return elementwise_traffic(op, tile)
    return flashattention_traffic(op, tile)


def oracle_traffic(op: OperatorSpec, tile: TileConfig, work_budget: int | None = None) -> TrafficBreakdown:
    """Brute-force tile enumeration; must equal :func:`kernel_traffic` exactly."""
    from . import oracles

    budget = oracles.DEFAULT_WORK_BUDGET if work_budget is None else work_budget
    return oracles.oracle_traffic(op, tile, budget)
