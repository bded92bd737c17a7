"""Kernel descriptions: operator shapes plus the tiling/pipelining choice."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import NamedTuple

from .validation import check_int_at_least


class OpKind(str, enum.Enum):
    GEMM = "gemm"
    SOFTMAX = "softmax"
    LAYERNORM = "layernorm"
    ELEMENTWISE = "elementwise"
    FLASH_ATTENTION = "flash_attention"

    @property
    def is_reduction(self) -> bool:
        return self in (OpKind.SOFTMAX, OpKind.LAYERNORM)

    @property
    def is_monolithic(self) -> bool:
        """Kinds without an explicit prologue/mainloop/epilogue split."""
        return self.is_reduction or self is OpKind.ELEMENTWISE


class Precision(str, enum.Enum):
    BF16 = "bf16"
    FP32 = "fp32"

    @property
    def nbytes(self) -> int:
        return 2 if self is Precision.BF16 else 4


SHAPE_FIELDS = {
    OpKind.GEMM: ("batch", "m", "n", "k"),
    OpKind.SOFTMAX: ("rows", "cols"),
    OpKind.LAYERNORM: ("rows", "cols"),
    OpKind.ELEMENTWISE: ("elements", "n_in", "n_out", "flops_per_element", "sfu"),
    OpKind.FLASH_ATTENTION: ("batch", "heads", "q_len", "kv_len", "head_dim"),
}

# fields allowed to be zero
_ZERO_OK = {"n_in", "n_out", "flops_per_element", "sfu"}


@dataclass(frozen=True)
class OperatorSpec:
    """One operator: its kind, precision and integer shape tuple (see SHAPE_FIELDS)."""

    kind: OpKind
    precision: Precision
    shape: tuple[int, ...]

    def __post_init__(self):
        kind = OpKind(self.kind)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "precision", Precision(self.precision))
        names = SHAPE_FIELDS[kind]
        shape = tuple(self.shape)
        if kind is OpKind.ELEMENTWISE and len(shape) == 4:
            shape = shape + (0,)
        if len(shape) != len(names):
            raise ValueError(f"{kind.value} shape needs {len(names)} dims {names}, got {shape}")
        for name, v in zip(names, shape):
            check_int_at_least(v, 0 if name in _ZERO_OK else 1, f"{kind.value}.{name}")
        if kind is OpKind.ELEMENTWISE and shape[4] not in (0, 1):
            raise ValueError("elementwise sfu flag must be 0 or 1")
        object.__setattr__(self, "shape", tuple(int(v) for v in shape))

    def __getattr__(self, name):
        # named access to shape dims, e.g. spec.m or spec.head_dim
        try:
            names = SHAPE_FIELDS[object.__getattribute__(self, "kind")]
        except AttributeError:
            raise AttributeError(name) from None
        if name in names:
            return self.shape[names.index(name)]
        raise AttributeError(name)

    @property
    def elem_bytes(self) -> int:
        return self.precision.nbytes

    @classmethod
    def gemm(cls, m, n, k, batch=1, precision="bf16"):
        return cls(OpKind.GEMM, precision, (batch, m, n, k))

    @classmethod
    def softmax(cls, rows, cols, precision="bf16"):
        return cls(OpKind.SOFTMAX, precision, (rows, cols))

    @classmethod
    def layernorm(cls, rows, cols, precision="bf16"):
        return cls(OpKind.LAYERNORM, precision, (rows, cols))

    @classmethod
    def elementwise(cls, elements, n_in=1, n_out=1, flops_per_element=1, sfu=False, precision="bf16"):
        return cls(OpKind.ELEMENTWISE, precision, (elements, n_in, n_out, flops_per_element, int(sfu)))

    @classmethod
    def flash_attention(cls, batch, heads, q_len, kv_len, head_dim, precision="bf16"):
        return cls(OpKind.FLASH_ATTENTION, precision, (batch, heads, q_len, kv_len, head_dim))

    def token(self) -> str:
        """Compact shape token used in database files, e.g. ``gemm:1.128.128.128``."""
        return f"{self.kind.value}:" + ".".join(str(v) for v in self.shape)

    @classmethod
    def from_token(cls, token: str, precision) -> "OperatorSpec":
        kind, _, dims = token.partition(":")
        if not dims:
            raise ValueError(f"bad shape token {token!r}")
        try:
            shape = tuple(int(d) for d in dims.split("."))
        except ValueError:
            raise ValueError(f"bad shape token {token!r}") from None
        return cls(OpKind(kind), precision, shape)


@dataclass(frozen=True)
class TileConfig:
    """Optimization choice of a kernel.

    ``tb_tile`` is (BM, BN, BK) for GEMM, (Bq, Bk) for FlashAttention and
    (E_tb,) elements per threadblock for reductions and elementwise kernels.
    """

    tb_tile: tuple[int, ...]
    warp_grid: tuple[int, int] = (2, 2)
    instr_tile: tuple[int, int, int] = (16, 8, 16)
    pipeline_stages: int = 1
    epilogue_via_shared: bool = False
    concurrent_tbs_per_sm: int = 1

    def __post_init__(self):
        tb = tuple(int(v) for v in self.tb_tile)
        if not 1 <= len(tb) <= 3:
            raise ValueError(f"tb_tile must have 1-3 dims, got {self.tb_tile}")
        for v in tb:
            check_int_at_least(v, 1, "tb_tile")
        wg = tuple(int(v) for v in self.warp_grid)
        if len(wg) != 2 or min(wg) < 1:
            raise ValueError(f"warp_grid must be two positive ints, got {self.warp_grid}")
        it = tuple(int(v) for v in self.instr_tile)
        if len(it) != 3 or min(it) < 1:
            raise ValueError(f"instr_tile must be three positive ints, got {self.instr_tile}")
        check_int_at_least(self.pipeline_stages, 1, "pipeline_stages")
        check_int_at_least(self.concurrent_tbs_per_sm, 1, "concurrent_tbs_per_sm")
        object.__setattr__(self, "tb_tile", tb)
        object.__setattr__(self, "warp_grid", wg)
        object.__setattr__(self, "instr_tile", it)
        object.__setattr__(self, "epilogue_via_shared", bool(self.epilogue_via_shared))

    def check_for(self, kind: OpKind) -> None:
        want = {OpKind.GEMM: 3, OpKind.FLASH_ATTENTION: 2}.get(kind, 1)
        if len(self.tb_tile) != want:
            raise ValueError(f"{kind.value} needs a {want}-dim tb_tile, got {self.tb_tile}")

    @property
    def config_id(self) -> str:
        """Stable string identity, also the classification label in the config predictor."""
        tile = "x".join(map(str, self.tb_tile))
        wg = "x".join(map(str, self.warp_grid))
        it = "x".join(map(str, self.instr_tile))
        ep = "s" if self.epilogue_via_shared else "r"
        return f"{tile}_s{self.pipeline_stages}_w{wg}_i{it}_e{ep}_c{self.concurrent_tbs_per_sm}"

    @classmethod
    def from_id(cls, config_id: str) -> "TileConfig":
        try:
            tile, s, w, i, e, c = config_id.split("_")
            dims = lambda t: tuple(int(v) for v in t.split("x"))  # noqa: E731
            return cls(dims(tile), dims(w[1:]), dims(i[1:]), int(s[1:]), e[1:] == "s", int(c[1:]))
        except (ValueError, IndexError):
            raise ValueError(f"bad tile config id {config_id!r}") from None


class KernelGroupKey(NamedTuple):
    """Kernels with equal keys share latency and power coefficients."""

    kind: OpKind
    precision: Precision
    tb_tile: tuple[int, ...]
    pipeline_stages: int
    epilogue_via_shared: bool

    @classmethod
    def of(cls, op: OperatorSpec, tile: TileConfig) -> "KernelGroupKey":
        return cls(op.kind, op.precision, tile.tb_tile, tile.pipeline_stages, tile.epilogue_via_shared)

    def __str__(self):
        tile = "x".join(map(str, self.tb_tile))
        return f"{self.kind.value}/{self.precision.value}/{tile}/s{self.pipeline_stages}/e{int(self.epilogue_via_shared)}"

    @classmethod
    def parse(cls, text: str) -> "KernelGroupKey":
        try:
            kind, prec, tile, s, e = text.split("/")
            return cls(OpKind(kind), Precision(prec), tuple(int(v) for v in tile.split("x")),
                       int(s[1:]), bool(int(e[1:])))
        except ValueError:
            raise ValueError(f"bad kernel group key {text!r}") from None


def threadblock_grid(op: OperatorSpec, tile: TileConfig) -> int:
    tile.check_for(op.kind)
    if op.kind is OpKind.GEMM:
        bm, bn, _ = tile.tb_tile
        return op.batch * math.ceil(op.m / bm) * math.ceil(op.n / bn)
    if op.kind.is_reduction:
        return op.rows
    if op.kind is OpKind.ELEMENTWISE:
        return max(1, math.ceil(op.elements / tile.tb_tile[0]))
    bq, _ = tile.tb_tile
    return op.batch * op.heads * math.ceil(op.q_len / bq)


@dataclass(frozen=True)
class Distribution:
    """Threadblock split across SMs: busy SMs carry one more TB than lazy ones."""

    total_tbs: int
    num_sms: int
    concurrent_tbs: int
    waves: int
    busy_sm_count: int
    lazy_sm_count: int
    tbs_on_busy: int
    tbs_on_lazy: int


def distribute(total_tbs: int, num_sms: int, concurrent_tbs: int = 1) -> Distribution:
    check_int_at_least(total_tbs, 1, "total_tbs")
    check_int_at_least(num_sms, 1, "num_sms")
    check_int_at_least(concurrent_tbs, 1, "concurrent_tbs")
    n_busy = -(-total_tbs // num_sms)
    n_lazy = total_tbs // num_sms
    extra = total_tbs % num_sms
    busy = extra if extra else num_sms
    return Distribution(
        total_tbs=total_tbs,
        num_sms=num_sms,
        concurrent_tbs=concurrent_tbs,
        waves=-(-n_busy // concurrent_tbs),
        busy_sm_count=busy,
        lazy_sm_count=num_sms - busy,
        tbs_on_busy=n_busy,
        tbs_on_lazy=n_lazy if extra else 0,
    )
