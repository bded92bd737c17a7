import pytest
from hypothesis import given, strategies as st

from tilewatt.kernels import KernelGroupKey, OperatorSpec, OpKind, TileConfig, distribute, threadblock_grid

GEMM_TILE = TileConfig((128, 128, 32), (2, 2), (16, 8, 16), 3)


def brute_grid(op, tile):
    """Count threadblocks by stepping over every tile origin."""
    if op.kind is OpKind.GEMM:
        bm, bn, _ = tile.tb_tile
        return sum(1 for _ in range(op.batch) for _ in range(0, op.m, bm) for _ in range(0, op.n, bn))
    bq, _ = tile.tb_tile
    return sum(1 for _ in range(op.batch * op.heads) for _ in range(0, op.q_len, bq))


def round_robin(g, num_sms):
    per = [0] * num_sms
    for i in range(g):
        per[i % num_sms] += 1
    return per


def test_grid_examples():
    assert threadblock_grid(OperatorSpec.gemm(128, 128, 128), GEMM_TILE) == 1
    op = OperatorSpec.gemm(256, 384, 64, batch=2)
    assert threadblock_grid(op, GEMM_TILE) == brute_grid(op, GEMM_TILE) == 12
    fa = OperatorSpec.flash_attention(4, 8, 1024, 512, 64)
    t = TileConfig((128, 64))
    assert threadblock_grid(fa, t) == brute_grid(fa, t) == 256
    assert threadblock_grid(OperatorSpec.softmax(77, 1000), TileConfig((1000,))) == 77
    assert threadblock_grid(OperatorSpec.elementwise(1025), TileConfig((1024,))) == 2


@given(st.integers(1, 3), st.integers(1, 700), st.integers(1, 700), st.sampled_from([32, 64, 128, 256]),
       st.sampled_from([32, 64, 128, 256]))
def test_grid_matches_enumeration(b, m, n, bm, bn):
    op = OperatorSpec.gemm(m, n, 8, batch=b)
    tile = TileConfig((bm, bn, 32))
    assert threadblock_grid(op, tile) == brute_grid(op, tile)


def test_distribute_examples():
    d = distribute(108, 108, 1)
    assert (d.busy_sm_count, d.tbs_on_busy, d.waves, d.lazy_sm_count) == (108, 1, 1, 0)
    d = distribute(109, 108, 1)
    assert (d.busy_sm_count, d.tbs_on_busy, d.lazy_sm_count, d.tbs_on_lazy) == (1, 2, 107, 1)
    d = distribute(400, 108, 2)
    per = round_robin(400, 108)
    assert d.tbs_on_busy == max(per) == 4
    assert d.busy_sm_count == per.count(4) == 76
    assert d.lazy_sm_count == per.count(3) == 32
    assert d.waves == 2
    d = distribute(5, 108, 1)
    assert (d.busy_sm_count, d.tbs_on_busy, d.lazy_sm_count, d.tbs_on_lazy) == (5, 1, 103, 0)


@given(st.integers(1, 5000), st.integers(1, 200), st.integers(1, 8))
def test_distribute_conservation(g, sms, c):
    d = distribute(g, sms, c)
    assert d.busy_sm_count * d.tbs_on_busy + d.lazy_sm_count * d.tbs_on_lazy == g
    assert d.busy_sm_count + d.lazy_sm_count == sms
    per = round_robin(g, sms)
    assert d.tbs_on_busy == max(per)
    assert d.busy_sm_count == per.count(max(per))
    if g % sms == 0:
        assert d.lazy_sm_count == 0


@given(st.integers(1, 5000), st.integers(1, 200), st.integers(1, 8))
def test_waves_monotone(g, sms, c):
    d = distribute(g, sms, c)
    assert distribute(g + 1, sms, c).waves >= d.waves
    assert distribute(g, sms, c + 1).waves <= d.waves


def test_validation():
    with pytest.raises(ValueError):
        OperatorSpec.gemm(0, 1, 1)
    with pytest.raises(ValueError):
        TileConfig((128, 128, 32), pipeline_stages=0)
    with pytest.raises(ValueError):
        TileConfig((128, 128, 32), concurrent_tbs_per_sm=0)
    with pytest.raises(ValueError):
        threadblock_grid(OperatorSpec.gemm(1, 1, 1), TileConfig((128, 64)))
    OperatorSpec.elementwise(10, n_in=0, flops_per_element=0)


def test_identifiers_round_trip():
    t = TileConfig((256, 128, 64), (4, 2), (16, 8, 16), 4, True, 2)
    assert TileConfig.from_id(t.config_id) == t
    op = OperatorSpec.gemm(100, 200, 300, batch=2, precision="fp32")
    assert OperatorSpec.from_token(op.token(), "fp32") == op
    key = KernelGroupKey.of(op, t)
    assert KernelGroupKey.parse(str(key)) == key
    with pytest.raises(ValueError):
        KernelGroupKey.parse("gemm/bf16")
    with pytest.raises(ValueError):
        TileConfig.from_id("nonsense")
