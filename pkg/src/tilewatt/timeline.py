"""Per-kernel execution timelines: the analytical scaffold.

Each kernel is expanded into coarse actions (tile loads, MMA steps, stores).
An action's latency is set by its slowest engaged module (work / per-TB
throughput); phases compose those latencies according to the kernel's
pipelining. Per-module active times fall out of the same actions and feed the
utilization estimate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

from .hwmodel import ConfigError, EffectiveThroughputs, GpuConfig, PowerConfig, scaled_throughputs
from .kernels import Distribution, OperatorSpec, OpKind, Precision, TileConfig, distribute, threadblock_grid
from .modules import MODULES, Module, Phase, Utilization
from .traffic import kernel_traffic

# CUDA-core FLOPs per element for the reduction steps
SOFTMAX_STEP_FLOPS = (1, 1, 1)  # max, running sum, divide
LAYERNORM_STEP_FLOPS = (3, 4)  # sum + sum of squares, normalize with affine
ONLINE_SOFTMAX_FLOPS = 4  # per score element: max, subtract, sum, rescale


@dataclass(frozen=True)
class Action:
    label: str
    phase: Phase
    work: Mapping[Module, float]
    repeat: float = 1.0  # real occurrences per threadblock, for active-time accounting

    def __post_init__(self):
        work = {Module(m): float(w) for m, w in self.work.items()}
        if any(w < 0 for w in work.values()):
            raise ValueError(f"{self.label}: negative work")
        if not any(w > 0 for w in work.values()):
            raise ValueError(f"{self.label}: action engages no module")
        object.__setattr__(self, "work", work)


def compute_module(precision: Precision) -> Module:
    """bf16 matrix math runs on Tensor Cores, fp32 on CUDA cores."""
    return Module.TENSOR if Precision(precision) is Precision.BF16 else Module.CUDA


def module_rates(eff: EffectiveThroughputs, precision) -> dict:
    """Device-level throughput per module; SHARED is per SM."""
    prec = Precision(precision).value
    return {
        Module.DRAM: eff.dram,
        Module.L2: eff.l2,
        Module.SHARED: eff.shared_per_sm,
        Module.TENSOR: eff.tensor.get(prec, 0.0),
        Module.CUDA: eff.cuda.get(prec, 0.0),
        Module.SFU: eff.sfu,
    }


def action_latency(action: Action, rates: Mapping[Module, float], share=1.0):
    """Latency of one action and each engaged module's own time.

    ``share`` is the fraction of each module's throughput one threadblock gets,
    either a scalar or a per-module mapping.
    """
    times = {}
    for m, w in action.work.items():
        if w == 0:
            continue
        s = share[m] if isinstance(share, Mapping) else share
        if not 0 < s <= 1:
            raise ValueError(f"share for {m.value} must be in (0, 1], got {s}")
        rate = rates.get(m, 0.0) * s
        if rate <= 0:
            raise ConfigError(f"{action.label}: module {m.value} engaged but has zero throughput")
        times[m] = w / rate
    return max(times.values()), times


@dataclass(frozen=True)
class PhaseTimeline:
    """Ideal timeline of one kernel.

    ``wave`` holds per-wave phase latencies of the busy SM; ``tb_active`` holds
    each module's active seconds per threadblock and phase. Busy-SM totals are
    exposed as ``t_p``, ``t_m`` and ``t_e``.
    """

    op: OperatorSpec
    tile: TileConfig
    distribution: Distribution
    wave: Mapping[Phase, float]
    tb_active: Mapping[Phase, Mapping[Module, float]]
    actions: tuple = field(default_factory=tuple)

    def _total(self, *phases):
        return self.distribution.waves * sum(self.wave.get(p, 0.0) for p in phases)

    @property
    def t_p(self) -> float:
        return self._total(Phase.PROLOGUE)

    @property
    def t_m(self) -> float:
        return self._total(Phase.MAINLOOP, Phase.MONOLITHIC)

    @property
    def t_e(self) -> float:
        return self._total(Phase.EPILOGUE)

    @property
    def monolithic(self) -> bool:
        return Phase.MONOLITHIC in self.wave

    @property
    def ideal_latency(self) -> float:
        return self.t_p + self.t_m + self.t_e

    def phase_features(self):
        """Regression columns for latency correction."""
        return (self.t_m,) if self.monolithic else (self.t_p, self.t_m, self.t_e)

    def sm_active(self, n_tbs: int, phase_scale=None) -> dict:
        """Active seconds per module on an SM that runs ``n_tbs`` threadblocks."""
        c = self.distribution.concurrent_tbs
        out = dict.fromkeys(MODULES, 0.0)
        for phase, per_module in self.tb_active.items():
            scale = 1.0 if phase_scale is None else phase_scale(phase)
            for m, t in per_module.items():
                out[m] += scale * t * n_tbs / c
        return out


def utilization_for(pt: PhaseTimeline, latency: float, phase_scale=None) -> Utilization:
    """Busy/lazy weighted activity factors against a common kernel latency."""
    if not latency > 0:
        raise ValueError("kernel latency must be > 0")
    d = pt.distribution
    busy = pt.sm_active(d.tbs_on_busy, phase_scale)
    lazy = pt.sm_active(d.tbs_on_lazy, phase_scale)
    alpha = {}
    for m in MODULES:
        a_busy = busy[m] / latency
        a_lazy = lazy[m] / latency
        alpha[m] = (d.busy_sm_count * a_busy + d.lazy_sm_count * a_lazy) / d.num_sms
    return Utilization.clamped(alpha)


def device_aggregate(pt: PhaseTimeline):
    """Ideal latency (busy SM, all waves) and ideal utilization."""
    latency = pt.ideal_latency
    return latency, utilization_for(pt, latency)


def mainloop_time(t_gs: float, t_sr: float, t_mma: float, k_tiles: int, stages: int) -> float:
    """Exact mainloop duration of the multistage pipeline.

    With ``depth = max(1, S-1)`` loads in flight and per-iteration compute
    ``q = max(t_sr, t_mma)``, iteration starts obey
    ``s_i = max(s_{i-1} + q, s_{i-depth} + t_gs)``, which solves to the
    expression below. When ``depth`` divides ``k_tiles`` it equals
    ``k_tiles * max(t_gs / depth, q)``.
    """
    depth = max(1, stages - 1)
    q = max(t_sr, t_mma)
    return max(k_tiles * q, (k_tiles // depth) * t_gs + (k_tiles % depth) * q)


# -- builders -------------------------------------------------------------------

class _Builder:
    """Shared plumbing: per-TB shares and action bookkeeping."""

    def __init__(self, op, tile, gpu, power):
        tile.check_for(op.kind)
        self.op, self.tile, self.gpu = op, tile, gpu
        self.eff = scaled_throughputs(gpu, power)
        self.rates = module_rates(self.eff, op.precision)
        self.grid = threadblock_grid(op, tile)
        # an SM never hosts more TBs at once than the kernel gives it
        c = min(tile.concurrent_tbs_per_sm, -(-self.grid // gpu.num_sms))
        self.dist = distribute(self.grid, gpu.num_sms, c)
        # device-wide modules are split among all TBs of a full wave, per-SM modules
        # among the c TBs sharing an SM
        self.concurrent = min(self.grid, gpu.num_sms * c)
        per_sm = 1.0 / (gpu.num_sms * c)
        self.share = {
            Module.DRAM: 1.0 / self.concurrent,
            Module.L2: 1.0 / self.concurrent,
            Module.SHARED: 1.0 / c,
            Module.TENSOR: per_sm,
            Module.CUDA: per_sm,
            Module.SFU: per_sm,
        }
        # active time is booked against one nominal SM slot's share, so that
        # averaging over SMs yields device-level activity for DRAM and L2 too
        self.booking = {m: self.share[m] / (1.0 / c if m is Module.SHARED else per_sm) for m in MODULES}
        self.actions = []
        self.active = {}

    def action(self, label, phase, work, repeat=1.0, booked=None):
        """Add an action; ``booked`` overrides the work charged to active time."""
        act = Action(label, phase, work, repeat)
        lat, times = action_latency(act, self.rates, self.share)
        self.actions.append(act)
        if repeat:
            if booked is not None:
                _, times = action_latency(Action(label, phase, booked, repeat), self.rates, self.share)
            bucket = self.active.setdefault(phase, dict.fromkeys(MODULES, 0.0))
            for m, t in times.items():
                bucket[m] += repeat * t * self.booking[m]
        return lat, times

    def load_work(self, nbytes, dram_bytes):
        """Latency work and booked work of one TB's tile load.

        ``dram_bytes`` is the cold DRAM traffic this load carries summed over
        the kernel. Latency spreads it evenly over waves; active time books
        each TB's average share.
        """
        work = {Module.DRAM: dram_bytes / (self.dist.waves * self.concurrent),
                Module.L2: nbytes, Module.SHARED: nbytes}
        booked = dict(work)
        booked[Module.DRAM] = dram_bytes / self.grid
        return work, booked

    def finish(self, wave):
        return PhaseTimeline(self.op, self.tile, self.dist, dict(wave), self.active, tuple(self.actions))


def _store_actions(b, nbytes_tile, out_bytes, via_shared):
    """Epilogue chain. Latency charges the full output tile, active time the real bytes."""
    out = {Module.L2: nbytes_tile, Module.DRAM: nbytes_tile}
    real = {Module.L2: out_bytes, Module.DRAM: out_bytes}
    if via_shared:
        t1, _ = b.action("R->S", Phase.EPILOGUE, {Module.SHARED: nbytes_tile})
        t2, _ = b.action("S->G", Phase.EPILOGUE, {Module.SHARED: nbytes_tile, **out},
                         booked={Module.SHARED: nbytes_tile, **real})
        return t1 + t2
    t, _ = b.action("R->G", Phase.EPILOGUE, out, booked=real)
    return t


def build_gemm_timeline(op: OperatorSpec, tile: TileConfig, gpu: GpuConfig, power: PowerConfig) -> PhaseTimeline:
    if op.kind is not OpKind.GEMM:
        raise ValueError(f"not a GEMM: {op.kind.value}")
    b = _Builder(op, tile, gpu, power)
    e = op.elem_bytes
    bm, bn, bk = tile.tb_tile
    wm, wn = tile.warp_grid
    k_tiles = math.ceil(op.k / bk)
    depth = max(1, tile.pipeline_stages - 1)
    traffic = kernel_traffic(op, tile)
    load, booked = b.load_work((bm + bn) * bk * e, traffic.dram_load / k_tiles)
    fill = min(depth, k_tiles)

    t_gs, _ = b.action("G->S", Phase.PROLOGUE, load, repeat=fill, booked=booked)
    b.action("G->S", Phase.MAINLOOP, load, repeat=k_tiles - fill, booked=booked)
    t_sr, _ = b.action("S->R", Phase.MAINLOOP, {Module.SHARED: bk * (bm * wn + bn * wm) * e}, repeat=k_tiles)
    t_mma, _ = b.action("MMA", Phase.MAINLOOP, {compute_module(op.precision): 2 * bm * bn * bk}, repeat=k_tiles)
    t_e = _store_actions(b, bm * bn * e, traffic.dram_store / b.grid, tile.epilogue_via_shared)
    return b.finish({
        Phase.PROLOGUE: depth * t_gs,
        Phase.MAINLOOP: mainloop_time(t_gs, t_sr, t_mma, k_tiles, tile.pipeline_stages),
        Phase.EPILOGUE: t_e,
    })


def build_reduction_timeline(op: OperatorSpec, tile: TileConfig, gpu: GpuConfig, power: PowerConfig) -> PhaseTimeline:
    if not op.kind.is_reduction:
        raise ValueError(f"not a reduction: {op.kind.value}")
    b = _Builder(op, tile, gpu, power)
    row = op.cols * op.elem_bytes
    mono = Phase.MONOLITHIC
    if op.kind is OpKind.SOFTMAX:
        f_max, f_sum, f_div = SOFTMAX_STEP_FLOPS
        t1, _ = b.action("G->R+R->S+max", mono,
                         {Module.DRAM: row, Module.L2: row, Module.SHARED: row, Module.CUDA: f_max * op.cols})
        t2, _ = b.action("S->R+exp+sum", mono,
                         {Module.SHARED: row, Module.SFU: op.cols, Module.CUDA: f_sum * op.cols})
        t3, _ = b.action("S->R+exp+div+R->G", mono,
                         {Module.SHARED: row, Module.SFU: op.cols, Module.CUDA: f_div * op.cols,
                          Module.L2: row, Module.DRAM: row})
        steps = t1 + t2 + t3
    else:
        f_stats, f_norm = LAYERNORM_STEP_FLOPS
        t1, _ = b.action("G->R+R->S+stats", mono,
                         {Module.DRAM: row, Module.L2: row, Module.SHARED: row, Module.CUDA: f_stats * op.cols})
        t2, _ = b.action("S->R+normalize+R->G", mono,
                         {Module.SHARED: row, Module.CUDA: f_norm * op.cols, Module.L2: row, Module.DRAM: row})
        steps = t1 + t2
    return b.finish({mono: steps})


def build_elementwise_timeline(op: OperatorSpec, tile: TileConfig, gpu: GpuConfig, power: PowerConfig) -> PhaseTimeline:
    if op.kind is not OpKind.ELEMENTWISE:
        raise ValueError(f"not elementwise: {op.kind.value}")
    b = _Builder(op, tile, gpu, power)
    traffic = kernel_traffic(op, tile)
    per_tb = tile.tb_tile[0]
    engine = Module.SFU if op.sfu else Module.CUDA
    # latency charges a full tile per TB (the last partial TB runs a whole slot),
    # active time books the real bytes and FLOPs
    moved = (op.n_in + op.n_out) * per_tb * op.elem_bytes
    work = {Module.DRAM: moved, Module.L2: moved, engine: op.flops_per_element * per_tb}
    real = (traffic.dram_load + traffic.dram_store) / b.grid
    booked = {Module.DRAM: real, Module.L2: real, engine: op.flops_per_element * op.elements / b.grid}
    if not any(work.values()):
        return b.finish({Phase.MONOLITHIC: 0.0})
    # load, math and store stream through registers together; DRAM and L2 carry both directions
    t, _ = b.action("G->R+math+R->G", Phase.MONOLITHIC, work, booked=booked)
    return b.finish({Phase.MONOLITHIC: t})


def build_flashattention_timeline(op: OperatorSpec, tile: TileConfig, gpu: GpuConfig, power: PowerConfig) -> PhaseTimeline:
    if op.kind is not OpKind.FLASH_ATTENTION:
        raise ValueError(f"not FlashAttention: {op.kind.value}")
    b = _Builder(op, tile, gpu, power)
    e = op.elem_bytes
    bq, bk = tile.tb_tile
    wm, wn = tile.warp_grid
    d = op.head_dim
    kv_tiles = math.ceil(op.kv_len / bk)
    traffic = kernel_traffic(op, tile)
    engine = compute_module(op.precision)
    bh = op.batch * op.heads
    q_dram = bh * math.ceil(op.q_len / bq) * bq * d * e
    kv_dram = traffic.dram_load - q_dram
    load_q, booked_q = b.load_work((bq + bk) * d * e, q_dram + kv_dram / (2 * kv_tiles))
    load_kv, booked_kv = b.load_work(2 * bk * d * e, kv_dram / kv_tiles)

    t_p, _ = b.action("G->S Q+K0", Phase.PROLOGUE, load_q, booked=booked_q)
    # K0 already landed in the prologue, so the loop moves 2*Tk - 1 tiles of real data
    t_kv, _ = b.action("G->S K+V", Phase.MAINLOOP, load_kv, repeat=kv_tiles - 0.5, booked=booked_kv)
    t_qk, _ = b.action("S->R+MMA QK", Phase.MAINLOOP,
                       {Module.SHARED: d * (bq * wn + bk * wm) * e, engine: 2 * bq * bk * d}, repeat=kv_tiles)
    t_sm, _ = b.action("online softmax", Phase.MAINLOOP,
                       {Module.SFU: bq * bk, Module.CUDA: ONLINE_SOFTMAX_FLOPS * bq * bk}, repeat=kv_tiles)
    t_pv, _ = b.action("S->R+MMA PV", Phase.MAINLOOP,
                       {Module.SHARED: bk * d * wm * e, engine: 2 * bq * bk * d}, repeat=kv_tiles)
    t_inner = t_qk + t_sm + t_pv
    t_e = _store_actions(b, bq * d * e, traffic.dram_store / b.grid, tile.epilogue_via_shared)
    return b.finish({
        Phase.PROLOGUE: t_p,
        Phase.MAINLOOP: kv_tiles * max(t_kv, t_inner),
        Phase.EPILOGUE: t_e,
    })


_BUILDERS = {
    OpKind.GEMM: build_gemm_timeline,
    OpKind.SOFTMAX: build_reduction_timeline,
    OpKind.LAYERNORM: build_reduction_timeline,
    OpKind.ELEMENTWISE: build_elementwise_timeline,
    OpKind.FLASH_ATTENTION: build_flashattention_timeline,
}


def build_timeline(op: OperatorSpec, tile: TileConfig, gpu: GpuConfig, power: PowerConfig) -> PhaseTimeline:
    return _BUILDERS[op.kind](op, tile, gpu, power)


def format_trace(pt: PhaseTimeline) -> str:
    """Action list as ``key=value`` text lines, one per action."""
    lines = [f"kernel={pt.op.token()} precision={pt.op.precision.value} tile={pt.tile.config_id} "
             f"grid={pt.distribution.total_tbs} waves={pt.distribution.waves}"]
    for act in pt.actions:
        work = " ".join(f"{m.value}={w:.6g}" for m, w in act.work.items() if w)
        lines.append(f"action={act.label.replace(' ', '_')} phase={act.phase.value} repeat={act.repeat:g} {work}")
    for phase, t in pt.wave.items():
        lines.append(f"phase={phase.value} wave_seconds={t:.9g}")
    return "\n".join(lines)
