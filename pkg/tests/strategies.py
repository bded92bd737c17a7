"""Hypothesis strategies for operators and tiles, kept small enough for the brute-force oracles."""
from hypothesis import strategies as st

from tilewatt.kernels import OperatorSpec, OpKind, TileConfig

precisions = st.sampled_from(["bf16", "fp32"])
pow2 = lambda lo, hi: st.sampled_from([1 << i for i in range(lo, hi + 1)])  # noqa: E731
warp_grids = st.tuples(st.sampled_from([1, 2, 4]), st.sampled_from([1, 2, 4]))


@st.composite
def gemm_cases(draw, max_dim=600, max_k=400):
    op = OperatorSpec.gemm(draw(st.integers(1, max_dim)), draw(st.integers(1, max_dim)), draw(st.integers(1, max_k)),
                           batch=draw(st.integers(1, 3)), precision=draw(precisions))
    tile = TileConfig((draw(pow2(4, 8)), draw(pow2(4, 8)), draw(pow2(3, 6))), draw(warp_grids),
                      pipeline_stages=draw(st.integers(1, 5)), epilogue_via_shared=draw(st.booleans()),
                      concurrent_tbs_per_sm=draw(st.integers(1, 3)))
    return op, tile


@st.composite
def reduction_cases(draw, kind=None):
    kind = kind or draw(st.sampled_from([OpKind.SOFTMAX, OpKind.LAYERNORM]))
    op = OperatorSpec(kind, draw(precisions), (draw(st.integers(1, 300)), draw(st.integers(1, 5000))))
    return op, TileConfig((min(op.cols, 1024),))


@st.composite
def elementwise_cases(draw):
    op = OperatorSpec.elementwise(draw(st.integers(1, 200_000)), n_in=draw(st.integers(0, 3)),
                                  n_out=draw(st.integers(1, 2)), flops_per_element=draw(st.integers(0, 8)),
                                  sfu=draw(st.booleans()), precision=draw(precisions))
    return op, TileConfig((draw(pow2(6, 12)),))


@st.composite
def fa_cases(draw):
    op = OperatorSpec.flash_attention(draw(st.integers(1, 2)), draw(st.integers(1, 4)), draw(st.integers(1, 700)),
                                      draw(st.integers(1, 700)), draw(st.sampled_from([32, 64, 128])),
                                      precision=draw(precisions))
    tile = TileConfig((draw(pow2(5, 7)), draw(pow2(5, 7))), draw(warp_grids),
                      pipeline_stages=draw(st.integers(1, 3)), epilogue_via_shared=draw(st.booleans()))
    return op, tile


any_case = st.one_of(gemm_cases(), reduction_cases(), elementwise_cases(), fa_cases())
