import json

import pytest

from tilewatt.db import DEFAULT_SYNTH_TILES, SyntheticTruth, generate_synthetic_database, group_records
from tilewatt.kernels import KernelGroupKey, OpKind, Precision
from tilewatt.power import PowerCoeffs
from tilewatt.refine import IDENTITY, CollinearityWarning, CorrectionCoeffs, FitError
from tilewatt.store import (STORE_VERSION, CoefficientStore, GroupEntry, StoreError, TimelineCache, fit_group,
                            fit_store)

GEMM_KEY = KernelGroupKey(OpKind.GEMM, Precision.BF16, (128, 128, 32), 3, False)
NEAR_KEY = KernelGroupKey(OpKind.GEMM, Precision.BF16, (128, 256, 32), 3, False)
SOFTMAX_KEY = KernelGroupKey(OpKind.SOFTMAX, Precision.FP32, (1024,), 1, False)


def entry(key, lam=1.2, power=True):
    pc = PowerCoeffs(1e-8, 2e-8, 3e-8, 4e-8, 5e-8, 6e-8, merged=(("l2", "shared"),)) if power else None
    return GroupEntry(key, CorrectionCoeffs(lam, lam, lam, 1e-6), pc, 40, 1e-6, 40 if power else 0,
                      0.5 if power else None, ("a note",))


def test_round_trip(tmp_path):
    store = CoefficientStore("A100-PCIE", {GEMM_KEY: entry(GEMM_KEY), SOFTMAX_KEY: entry(SOFTMAX_KEY, power=False)},
                             metadata={"n_records": 3})
    path = tmp_path / "store.json"
    store.save(path)
    back = CoefficientStore.load(path)
    assert back.groups == store.groups and back.gpu == store.gpu and back.metadata == store.metadata
    assert back.dumps() == store.dumps()


def test_version_and_format_checks():
    doc = CoefficientStore("g").to_dict()
    bad = dict(doc, version=STORE_VERSION + 1)
    with pytest.raises(StoreError, match="version"):
        CoefficientStore.from_dict(bad)
    with pytest.raises(StoreError, match="format"):
        CoefficientStore.from_dict(dict(doc, format="other"))
    with pytest.raises(StoreError):
        CoefficientStore.loads("{not json")
    with pytest.raises(StoreError):
        CoefficientStore.loads("[]")
    with pytest.raises(StoreError, match="malformed"):
        CoefficientStore.loads(json.dumps(dict(doc, groups={"gemm/bf16/128x128x32/s3/e0": {}})))


def test_lookup_sources():
    store = CoefficientStore("g", {GEMM_KEY: entry(GEMM_KEY, 1.5), SOFTMAX_KEY: entry(SOFTMAX_KEY, power=False)})
    hit = store.lookup(GEMM_KEY)
    assert (hit.latency_source, hit.power_source, hit.flags) == ("exact", "exact", ())
    near = store.lookup(NEAR_KEY)
    assert near.latency_source == "nearest" and near.latency_key == GEMM_KEY and near.latency.lam_m == 1.5
    assert near.power_source == "nearest"
    fa = store.lookup(KernelGroupKey(OpKind.FLASH_ATTENTION, Precision.BF16, (128, 64), 2, False))
    assert fa.latency is IDENTITY and fa.latency_source == "default" and fa.power is None
    assert fa.flags == ("latency:default", "power:missing")
    sm = store.lookup(SOFTMAX_KEY)
    assert sm.latency_source == "exact" and sm.power_source == "missing"


def test_fit_store_recovers_truth(gpu, power):
    groups = [g for g in DEFAULT_SYNTH_TILES if g[0] in (OpKind.LAYERNORM, OpKind.SOFTMAX)]
    recs = generate_synthetic_database(5, gpu, power, shapes_per_group=10, sigma_latency=0, sigma_power=0,
                                       groups=groups)
    report = fit_store(recs, gpu, power)
    assert not report.skipped and not report.unresolved
    truth = SyntheticTruth().latency
    for key, e in report.store.groups.items():
        assert e.latency.lam_m == pytest.approx(truth.lam_m, rel=1e-9)
        assert e.latency.eps == pytest.approx(truth.eps, rel=1e-9)
        assert e.power is not None and e.power_rmse < 1e-6
    assert report.store.config_predictor is None  # no GEMM/FA records
    assert report.store.metadata["frequencies_mhz"] == [510.0, 810.0, 1110.0, 1410.0]


def test_fit_store_trains_predictor(gpu, power):
    recs = generate_synthetic_database(1, gpu, power, shapes_per_group=6, groups=DEFAULT_SYNTH_TILES[:2])
    store = fit_store(recs, gpu, power).store
    assert store.config_predictor is not None
    back = CoefficientStore.loads(store.dumps())
    ops = [r.op for r in recs]
    assert back.config_predictor.predict(ops) == store.config_predictor.predict(ops)


def test_fit_group_few_power_samples(gpu, power):
    recs = generate_synthetic_database(0, gpu, power, shapes_per_group=1, groups=[DEFAULT_SYNTH_TILES[4]])
    items = next(iter(group_records(recs).groups.values()))
    with pytest.warns(CollinearityWarning):  # one shape cannot separate eps from the phase term
        e = fit_group(items, gpu, power)
    assert e.power is None and e.n_power_samples == 4
    assert any("nearest group" in n for n in e.notes)


def test_fit_store_skips_unfittable(gpu, power):
    recs = generate_synthetic_database(0, gpu, power, shapes_per_group=[1, 10], freqs_mhz=(1410,),
                                       groups=[DEFAULT_SYNTH_TILES[0], DEFAULT_SYNTH_TILES[4]])
    report = fit_store(recs, gpu, power, train_predictor=False)
    assert len(report.store.groups) == 1 and len(report.skipped) == 1
    assert any("not fitted" in n for n in report.notes)
    with pytest.raises(FitError):
        fit_store([], gpu, power)
    with pytest.raises(FitError):
        fit_store(recs[:1], gpu, power)


def test_fit_store_deterministic(gpu, power):
    recs = generate_synthetic_database(2, gpu, power, shapes_per_group=8, groups=DEFAULT_SYNTH_TILES[3:5])
    a = fit_store(recs, gpu, power).store.to_dict()
    b = fit_store(recs, gpu, power).store.to_dict()
    a["metadata"].pop("created"), b["metadata"].pop("created")
    assert json.dumps(a) == json.dumps(b)


def test_timeline_cache_reuses(gpu, power):
    from tilewatt.kernels import OperatorSpec, TileConfig
    cache = TimelineCache(gpu)
    op, tile = OperatorSpec.gemm(256, 256, 256), TileConfig((128, 128, 32), pipeline_stages=3)
    assert cache.get(op, tile, power) is cache.get(op, tile, power)
    assert cache.get(op, tile, power.at_frequency(810e6)) is not cache.get(op, tile, power)
