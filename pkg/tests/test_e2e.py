import builtins
import math
import time
from pathlib import Path

import pytest
from hypothesis import given, settings

from conftest import FIXTURES
from strategies import any_case
from tilewatt.e2e import (Workload, WorkloadError, WorkloadOp, WorkloadPredictor, compare_variants, explore_arch,
                          explore_dvfs, load_workload, predict_workload, result_csv_rows, save_workload,
                          workload_from_dict, workload_from_trace, workload_to_dict)
from tilewatt.hwmodel import MHZ, load_config
from tilewatt.kernels import OperatorSpec, TileConfig

GEMM = OperatorSpec.gemm(4096, 4096, 4096)
TILE = TileConfig((128, 128, 32), pipeline_stages=3)


def test_repeat_is_linear(gpu, power, store):
    one = predict_workload(Workload("one", (WorkloadOp(GEMM, tile=TILE),)), gpu, power, store)
    two = predict_workload(Workload("two", (WorkloadOp(GEMM, 2, TILE),)), gpu, power, store)
    assert two.latency == 2 * one.latency
    assert two.energy == 2 * one.energy
    assert two.average_power == pytest.approx(one.average_power, rel=1e-15)
    assert one.average_power == pytest.approx(one.operators[0].kernel.total_power, rel=1e-12)


def test_average_power_is_convex(gpu, power, store):
    ops = (WorkloadOp(GEMM, tile=TILE), WorkloadOp(OperatorSpec.elementwise(1 << 24, 2, 1, 1)))
    res = predict_workload(Workload("mix", ops), gpu, power, store)
    p = sorted(o.total_power for o in res.operators)
    assert p[0] < p[1]
    assert p[0] < res.average_power < p[1]
    # time weighting, not the plain mean
    weights = [o.latency * o.repeat for o in res.operators]
    expect = sum(w * o.total_power for w, o in zip(weights, res.operators)) / sum(weights)
    assert res.average_power == pytest.approx(expect, rel=1e-12)


def test_accumulation_identities(gpu, power, store):
    res = predict_workload(load_workload(FIXTURES / "bert_layer_bf16.yaml"), gpu, power, store)
    assert res.latency == math.fsum(o.latency * o.repeat for o in res.operators)
    assert res.energy == math.fsum(o.energy * o.repeat for o in res.operators)
    powers = [o.total_power for o in res.operators]
    assert min(powers) <= res.average_power <= max(powers)


def test_transformer_500_time_budget(gpu, power, store):
    t0 = time.perf_counter()
    w = load_workload(FIXTURES / "transformer_500.yaml")
    res = predict_workload(w, gpu, power, store)
    elapsed = time.perf_counter() - t0
    assert len(res.operators) == 500
    assert elapsed < 2.0


def test_launch_overhead(gpu, power, store):
    w = Workload("one", (WorkloadOp(GEMM, 3, TILE),))
    base = predict_workload(w, gpu, power, store)
    gap = predict_workload(w, gpu, power, store, launch_overhead=5e-6)
    k = base.operators[0].kernel
    assert gap.latency == pytest.approx(base.latency + 3 * 5e-6, rel=1e-14)
    assert gap.energy == pytest.approx(base.energy + 3 * 5e-6 * k.idle_power, rel=1e-14)
    with pytest.raises(WorkloadError):
        predict_workload(w, gpu, power, store, launch_overhead=-1)


def test_defaults_need_flag(gpu, power):
    w = Workload("one", (WorkloadOp(GEMM, tile=TILE),))
    with pytest.raises(WorkloadError):
        predict_workload(w, gpu, power)
    res = predict_workload(w, gpu, power, allow_defaults=True)
    assert res.operators[0].kernel.dynamic_power == 0.0
    assert res.coverage["flagged"] == [0]


def test_coverage_reports_fallbacks(gpu, power, store):
    w = Workload("fa", (WorkloadOp(OperatorSpec.flash_attention(1, 4, 256, 256, 64, "fp32")),))
    res = predict_workload(w, gpu, power, store)
    assert res.operators[0].tile_source == "default"
    assert "tile:default" in res.operators[0].flags


def test_predictions_deterministic(gpu, power, store):
    w = load_workload(FIXTURES / "bert_layer_bf16.yaml")
    a = predict_workload(w, gpu, power, store).as_dict()
    b = predict_workload(w, gpu, power, store).as_dict()
    assert a == b


def test_inference_writes_no_files(gpu, power, store, monkeypatch, tmp_path):
    w = load_workload(FIXTURES / "bert_layer_bf16.yaml")
    real_open = builtins.open

    def guarded(file, mode="r", *a, **k):
        if any(c in mode for c in "wax+"):
            raise AssertionError(f"write to {file}")
        return real_open(file, mode, *a, **k)

    monkeypatch.setattr(builtins, "open", guarded)
    monkeypatch.chdir(tmp_path)
    predict_workload(w, gpu, power, store)
    explore_dvfs(w, gpu, power, [810, 1410], store)
    assert list(tmp_path.iterdir()) == []


# -- DVFS ---------------------------------------------------------------------------

def test_dvfs_reference_reproduces_base(gpu, power, store):
    w = load_workload(FIXTURES / "bert_layer_bf16.yaml")
    base = predict_workload(w, gpu, power, store)
    (f, res), = explore_dvfs(w, gpu, power, [power.core_freq / MHZ], store)
    assert res.as_dict() == base.as_dict()


def test_dvfs_dynamic_power_monotone(gpu, power, store):
    w = Workload("g", (WorkloadOp(GEMM, tile=TILE),))
    table = explore_dvfs(w, gpu, power, [510, 710, 910, 1110, 1410], store)
    dyn = [r.operators[0].kernel.dynamic_power for _, r in table]
    lat = [r.latency for _, r in table]
    assert all(a < b for a, b in zip(dyn, dyn[1:]))
    assert all(a > b for a, b in zip(lat, lat[1:]))
    assert [r.core_voltage for _, r in table][-1] == power.voltage_at(1410 * MHZ)


def test_dvfs_compute_bound_dynamic_energy_flat(gpu, power, store):
    # with voltage pinned, dynamic power grows like f while latency shrinks like 1/f
    w = Workload("g", (WorkloadOp(OperatorSpec.gemm(8192, 8192, 8192), tile=TILE),))
    table = explore_dvfs(w, gpu, power, [810, 1110, 1410], store, voltage=1.0)
    dyn_energy = [r.operators[0].kernel.dynamic_power * r.latency for _, r in table]
    assert max(dyn_energy) / min(dyn_energy) < 1.05


# -- architecture ------------------------------------------------------------------

def test_doubling_sms_halves_compute_bound_latency(gpu, power):
    # 27 x 32 = 864 threadblocks: 8 full waves on 108 SMs, 4 on 216
    op = OperatorSpec.gemm(128 * 27, 128 * 32, 16384)
    w = Workload("g", (WorkloadOp(op, tile=TILE),))
    big = gpu.with_changes(num_sms=216, tensor_core_flops={k: 2 * v for k, v in gpu.tensor_core_flops.items()},
                           cuda_core_flops={k: 2 * v for k, v in gpu.cuda_core_flops.items()},
                           sfu_ops=2 * gpu.sfu_ops)
    a = predict_workload(w, gpu, power, allow_defaults=True)
    b = explore_arch(w, big, power, allow_defaults=True)
    assert b.latency == pytest.approx(a.latency / 2, rel=0.02)


@settings(max_examples=40)
@given(case=any_case)
def test_sxm_never_slower_than_pcie(gpu, power, store, case):
    op, tile = case
    sxm, _ = load_config("A100-SXM")
    w = Workload("x", (WorkloadOp(op, tile=tile),))
    assert explore_arch(w, sxm, power, store).latency <= predict_workload(w, gpu, power, store).latency


def test_sxm_fixture_workloads(gpu, power, store):
    sxm, _ = load_config("A100-SXM")
    for name in ("bert_layer_bf16.yaml", "bert_layer_fp32.yaml", "attention_fa.yaml"):
        w = load_workload(FIXTURES / name)
        assert explore_arch(w, sxm, power, store).latency <= predict_workload(w, gpu, power, store).latency


def test_l40s_smoke(store):
    l40s, l40s_power = load_config("L40S")
    res = explore_arch(load_workload(FIXTURES / "bert_layer_bf16.yaml"), l40s, l40s_power, store)
    assert res.gpu == "L40S" and res.latency > 0 and math.isfinite(res.energy)
    assert res.average_power > min(t[1] for t in l40s_power.idle_power_table)


# -- variants ----------------------------------------------------------------------

def test_identical_variants(gpu, power, store):
    w = load_workload(FIXTURES / "bert_layer_bf16.yaml")
    cmp = compare_variants(w, w, gpu, power, store)
    assert cmp.speedup == 1.0 and cmp.power_delta == 0.0 and cmp.energy_ratio == 1.0


def test_bf16_faster_than_fp32(gpu, power, store):
    cmp = compare_variants(load_workload(FIXTURES / "bert_layer_fp32.yaml"),
                           load_workload(FIXTURES / "bert_layer_bf16.yaml"), gpu, power, store)
    assert cmp.speedup > 1


def test_flash_attention_cuts_dram_traffic(gpu, power, store):
    cmp = compare_variants(load_workload(FIXTURES / "attention_unfused.yaml"),
                           load_workload(FIXTURES / "attention_fa.yaml"), gpu, power, store)
    assert cmp.dram_ratio < 1
    assert set(cmp.as_dict()) >= {"speedup", "power_delta_w", "energy_ratio"}


# -- workload files ----------------------------------------------------------------

def test_workload_yaml_round_trip(tmp_path):
    w = load_workload(FIXTURES / "bert_layer_bf16_fa.yaml")
    path = tmp_path / "w.yaml"
    save_workload(path, w)
    assert load_workload(path) == w


def test_workload_forms():
    w = workload_from_dict({"name": "x", "operators": [
        {"kind": "gemm", "shape": {"m": 64, "n": 32, "k": 16}, "repeat": 2},
        {"kind": "gemm", "precision": "fp32", "shape": [64, 32, 16]},
        {"kind": "elementwise", "shape": [1000]},
        {"kind": "softmax", "shape": [8, 128], "tile": "128_s1_w2x2_i16x8x16_er_c1"},
    ]})
    assert w.ops[0].op == OperatorSpec.gemm(64, 32, 16) and w.n_kernels == 5
    assert w.ops[1].op == OperatorSpec.gemm(64, 32, 16, precision="fp32")
    assert w.ops[2].op == OperatorSpec.elementwise(1000)
    assert w.ops[3].tile.tb_tile == (128,)
    assert workload_from_dict(workload_to_dict(w)) == w


@pytest.mark.parametrize("doc,where", [
    ({"operators": []}, "no operators"),
    ({"operators": [{"kind": "gemm", "shape": [1, 2, 3]}, {"kind": "conv2d", "shape": [1]}]}, "operator 1"),
    ({"operators": [{"kind": "gemm", "shape": [1, 2, 3], "repeat": 0}]}, "operator 0"),
    ({"operators": [{"kind": "softmax", "shape": {"rows": 2}}]}, "operator 0"),
    ({"ops": []}, "operators"),
])
def test_workload_errors(doc, where):
    with pytest.raises(WorkloadError, match=where):
        workload_from_dict(doc)


def test_unreadable_workload(tmp_path):
    with pytest.raises(WorkloadError):
        load_workload(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("operators: [\n")
    with pytest.raises(WorkloadError):
        load_workload(bad)


def test_trace_conversion():
    w = workload_from_trace("# bert ffn\nmatmul 512x768x3072 bf16 12\ngelu 512x3072 bfloat16\n"
                            "softmax 96x512 fp32\nbmm 12x512x512x64 bf16\n", name="ffn")
    assert w.ops[0].op == OperatorSpec.gemm(512, 768, 3072) and w.ops[0].repeat == 12
    assert w.ops[1].op == OperatorSpec.elementwise(512 * 3072, 1, 1, 8, True)
    assert w.ops[2].op == OperatorSpec.softmax(96, 512, "fp32")
    assert w.ops[3].op == OperatorSpec.gemm(512, 512, 64, batch=12)
    with pytest.raises(WorkloadError, match="line 2"):
        workload_from_trace("relu 10 bf16\nconv 1x2 bf16\n")
    with pytest.raises(WorkloadError):
        workload_from_trace("relu 10 int8\n")


def test_csv_rows(gpu, power, store):
    res = predict_workload(load_workload(FIXTURES / "bert_layer_bf16.yaml"), gpu, power, store)
    rows = list(result_csv_rows(res))
    assert len(rows) == len(res.operators) + 1 and len(set(map(len, rows))) == 1


def test_predictor_caches_kernels(gpu, power, store):
    p = WorkloadPredictor(gpu, power, store)
    assert p.predict_kernel(GEMM, TILE) is p.predict_kernel(GEMM, TILE)
