"""Brute-force reference models.

These replay kernels tile by tile (traffic) or event by event (GEMM pipeline)
and share no arithmetic with the closed forms they check.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field

from .kernels import OperatorSpec, OpKind, TileConfig

DEFAULT_WORK_BUDGET = 2_000_000


class WorkBudgetExceeded(RuntimeError):
    pass


class _Counter:
    def __init__(self, budget):
        self.budget = budget
        self.work = 0
        self.loaded = set()
        self.dram_load = self.dram_store = 0
        self.l2_load = self.l2_store = 0
        self.shared_load = self.shared_store = 0

    def tick(self, n=1):
        self.work += n
        if self.work > self.budget:
            raise WorkBudgetExceeded(f"oracle enumeration exceeds work budget {self.budget}")

    def global_to_shared(self, tile_id, nbytes):
        """One G->S tile request: always an L2 request, DRAM only on first touch."""
        self.tick()
        self.l2_load += nbytes
        self.shared_store += nbytes
        if tile_id not in self.loaded:
            self.loaded.add(tile_id)
            self.dram_load += nbytes

    def global_to_reg(self, tile_id, nbytes):
        self.tick()
        self.l2_load += nbytes
        if tile_id not in self.loaded:
            self.loaded.add(tile_id)
            self.dram_load += nbytes

    def store_global(self, nbytes):
        self.l2_store += nbytes
        self.dram_store += nbytes

    def result(self):
        from .traffic import TrafficBreakdown

        return TrafficBreakdown(self.dram_load, self.dram_store, self.l2_load, self.l2_store,
                                self.shared_load, self.shared_store)


def _split(extent, parts):
    """Sizes of ``parts`` contiguous chunks covering ``extent`` rows."""
    return [(i + 1) * extent // parts - i * extent // parts for i in range(parts)]


def _warp_fragment_reads(cnt, rows, cols, depth, wm, wn, e, a_in_shared=True):
    """Per-warp shared reads for one MMA step of a rows x cols x depth tile."""
    for wr in _split(rows, wm):
        for wc in _split(cols, wn):
            cnt.tick()
            if a_in_shared:
                cnt.shared_load += wr * depth * e
            cnt.shared_load += depth * wc * e


def _oracle_gemm(op, tile, cnt):
    e = op.elem_bytes
    bm, bn, bk = tile.tb_tile
    wm, wn = tile.warp_grid
    tiles_m = -(-op.m // bm)
    tiles_n = -(-op.n // bn)
    tiles_k = -(-op.k // bk)
    for b in range(op.batch):
        for i in range(tiles_m):
            for j in range(tiles_n):
                for kk in range(tiles_k):
                    cnt.global_to_shared(("A", b, i, kk), bm * bk * e)
                    cnt.global_to_shared(("B", b, kk, j), bk * bn * e)
                    _warp_fragment_reads(cnt, bm, bn, bk, wm, wn, e)
                if tile.epilogue_via_shared:
                    cnt.shared_store += bm * bn * e
                    cnt.shared_load += bm * bn * e
                rows = min(bm, op.m - i * bm)
                cols = min(bn, op.n - j * bn)
                cnt.store_global(rows * cols * e)


REDUCTION_STEPS = {
    # (loads from global, re-reads from shared, stores to global) per step
    OpKind.SOFTMAX: [("load",), ("reread",), ("reread", "store")],
    OpKind.LAYERNORM: [("load",), ("reread", "store")],
}


def _oracle_reduction(op, tile, cnt):
    e = op.elem_bytes
    for r in range(op.rows):
        for step in REDUCTION_STEPS[op.kind]:
            if "load" in step:
                cnt.global_to_reg(("row", r), op.cols * e)
                cnt.shared_store += op.cols * e
            if "reread" in step:
                cnt.tick()
                cnt.shared_load += op.cols * e
            if "store" in step:
                cnt.store_global(op.cols * e)


def _oracle_elementwise(op, tile, cnt):
    e = op.elem_bytes
    per_tb = tile.tb_tile[0]
    start = 0
    while start < op.elements:
        n = min(per_tb, op.elements - start)
        for src in range(op.n_in):
            cnt.global_to_reg(("in", src, start), n * e)
        for _ in range(op.n_out):
            cnt.store_global(n * e)
        start += n
    cnt.tick()


def _oracle_flashattention(op, tile, cnt):
    e = op.elem_bytes
    bq, bk = tile.tb_tile
    wm, wn = tile.warp_grid
    d = op.head_dim
    tq = -(-op.q_len // bq)
    tk = -(-op.kv_len // bk)
    for b in range(op.batch):
        for h in range(op.heads):
            for qi in range(tq):
                cnt.global_to_shared(("Q", b, h, qi), bq * d * e)
                for kj in range(tk):
                    cnt.global_to_shared(("K", b, h, kj), bk * d * e)
                    cnt.global_to_shared(("V", b, h, kj), bk * d * e)
                    _warp_fragment_reads(cnt, bq, bk, d, wm, wn, e)  # S = Q K^T
                    _warp_fragment_reads(cnt, bq, d, bk, wm, wn, e, a_in_shared=False)  # O += P V
                if tile.epilogue_via_shared:
                    cnt.shared_store += bq * d * e
                    cnt.shared_load += bq * d * e
                rows = min(bq, op.q_len - qi * bq)
                cnt.store_global(rows * d * e)


def oracle_traffic(op: OperatorSpec, tile: TileConfig, work_budget: int = DEFAULT_WORK_BUDGET):
    """Enumerate every threadblock and tile access; count bytes per hierarchy level."""
    tile.check_for(op.kind)
    cnt = _Counter(work_budget)
    if op.kind is OpKind.GEMM:
        _oracle_gemm(op, tile, cnt)
    elif op.kind.is_reduction:
        _oracle_reduction(op, tile, cnt)
    elif op.kind is OpKind.ELEMENTWISE:
        _oracle_elementwise(op, tile, cnt)
    else:
        _oracle_flashattention(op, tile, cnt)
    return cnt.result()


# -- GEMM pipeline event replay ----------------------------------------------

@dataclass(order=True)
class _Event:
    time: float
    seq: int
    kind: str = field(compare=False)
    arg: int = field(compare=False, default=0)


@dataclass
class PipelineTrace:
    prologue_end: float
    mainloop_end: float
    end: float
    events: list = field(default_factory=list)


def replay_gemm_pipeline(t_gs, t_sr, t_mma, k_tiles, stages, epilogue=(), trace=False):
    """Event-queue replay of one threadblock's multistage GEMM mainloop.

    Semantics:
      * prologue: the copy engine fills ``max(1, stages-1)`` buffers one after another;
      * mainloop: at the start of iteration i the load for tile i + (stages-1) is issued
        (tail loads past the last tile are issued predicated-off but still waited on);
        up to stages-1 loads are in flight, each taking ``t_gs``;
      * S->R for iteration i overlaps its MMAs (double-buffered fragments), so the
        compute part of an iteration lasts max(t_sr, t_mma);
      * iteration i+1 starts once iteration i computed and tile i+1 has landed;
      * epilogue actions run back to back after the mainloop.
    """
    depth = max(1, stages - 1)
    queue = []
    seq = 0

    def push(t, kind, arg=0):
        nonlocal seq
        heapq.heappush(queue, _Event(t, seq, kind, arg))
        seq += 1

    log = []
    landed = {}
    # prologue
    t = 0.0
    for j in range(depth):
        t += t_gs
        landed[j] = t
        log.append(("load_done", j, t))
    prologue_end = t
    compute_done = {}
    started = {}
    push(prologue_end, "start", 0)
    while queue:
        ev = heapq.heappop(queue)
        if ev.kind == "start":
            i = ev.arg
            started[i] = ev.time
            log.append(("iter_start", i, ev.time))
            push(ev.time + t_gs, "land", i + depth)
            push(ev.time + max(t_sr, t_mma), "computed", i)
        elif ev.kind == "land":
            landed[ev.arg] = ev.time
            log.append(("load_done", ev.arg, ev.time))
            _maybe_start(ev.arg - 1, landed, compute_done, started, k_tiles, push, ev.time)
        elif ev.kind == "computed":
            compute_done[ev.arg] = ev.time
            log.append(("iter_done", ev.arg, ev.time))
            _maybe_start(ev.arg, landed, compute_done, started, k_tiles, push, ev.time)
    mainloop_end = max(max(compute_done[k_tiles - 1], landed[k_tiles]), prologue_end)
    end = mainloop_end
    for dt in epilogue:
        end += dt
    return PipelineTrace(prologue_end, mainloop_end, end, log if trace else [])


def _maybe_start(i, landed, compute_done, started, k_tiles, push, now):
    """Start iteration i+1 when iteration i is computed and tile i+1 has landed."""
    nxt = i + 1
    if i < 0 or nxt >= k_tiles or nxt in started:
        return
    if i in compute_done and nxt in landed:
        started[nxt] = now
        push(max(compute_done[i], landed[nxt]), "start", nxt)
