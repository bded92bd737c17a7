import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone

from strategies import any_case, gemm_cases
from tilewatt.db import DEFAULT_SYNTH_TILES, random_shape
from tilewatt.frontend import default_tile
from tilewatt.hwmodel import MHZ
from tilewatt.kernels import KernelGroupKey, OperatorSpec, OpKind, Precision, TileConfig
from tilewatt.modules import MODULES
from tilewatt.refine import (IDENTITY, CollinearityWarning, CorrectionCoeffs, FitError, LatencyCorrector,
                             correct_latency, fit_latency_coeffs, mape, nearest_group, tile_distance)
from tilewatt.timeline import build_timeline, device_aggregate

BASE = TileConfig((128, 128, 32), (2, 2), (16, 8, 16), 3)
TRUTH = CorrectionCoeffs(1.3, 1.1, 1.5, 2e-6)


def gemm_timelines(gpu, power, n, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        op = random_shape(rng, OpKind.GEMM, Precision.BF16)
        f = float(rng.choice([510, 810, 1110, 1410]))
        out.append(build_timeline(op, BASE, gpu, power.at_frequency(f * MHZ)))
    return out


def test_identity_correction(gpu, power):
    pt = build_timeline(OperatorSpec.gemm(1000, 700, 900), BASE, gpu, power)
    ck = correct_latency(pt, IDENTITY)
    lat, u = device_aggregate(pt)
    assert ck.latency == lat
    assert ck.utilization == u


def test_uniform_lambda_keeps_alpha(gpu, power):
    pt = build_timeline(OperatorSpec.softmax(512, 4096), TileConfig((1024,)), gpu, power)
    assert pt.t_p == pt.t_e == 0
    base = correct_latency(pt)
    doubled = correct_latency(pt, CorrectionCoeffs(lam_m=2.0))
    assert doubled.latency == pytest.approx(2 * base.latency, rel=1e-15)
    for m in MODULES:
        assert doubled.utilization[m] == pytest.approx(base.utilization[m], rel=1e-12)


def test_eps_equal_to_ideal_halves_alpha(gpu, power):
    pt = build_timeline(OperatorSpec.gemm(2048, 2048, 512), BASE, gpu, power)
    ideal = pt.ideal_latency
    ck = correct_latency(pt, CorrectionCoeffs(eps=ideal))
    d = pt.distribution
    busy = pt.sm_active(d.tbs_on_busy)
    lazy = pt.sm_active(d.tbs_on_lazy)
    for m in MODULES:
        expect = (d.busy_sm_count * busy[m] + d.lazy_sm_count * lazy[m]) / d.num_sms / (2 * ideal)
        assert ck.utilization[m] == pytest.approx(min(1.0, expect), rel=1e-12)
        assert ck.utilization[m] == pytest.approx(correct_latency(pt).utilization[m] / 2, rel=1e-12)


def test_phase_specific_scaling(gpu, power):
    pt = build_timeline(OperatorSpec.gemm(512, 512, 64), BASE, gpu, power)
    c = CorrectionCoeffs(2.0, 1.0, 3.0, 0.0)
    ck = correct_latency(pt, c)
    assert ck.latency == pytest.approx(2 * pt.t_p + pt.t_m + 3 * pt.t_e, rel=1e-15)
    assert (ck.t_p, ck.t_m, ck.t_e) == (2 * pt.t_p, pt.t_m, 3 * pt.t_e)


def test_noiseless_recovery(gpu, power):
    pts = gemm_timelines(gpu, power, 40)
    samples = [(pt, correct_latency(pt, TRUTH).latency) for pt in pts]
    fit = fit_latency_coeffs(samples)
    for name in ("lam_p", "lam_m", "lam_e", "eps"):
        assert getattr(fit.coeffs, name) == pytest.approx(getattr(TRUTH, name), rel=1e-9)


def test_measured_equals_ideal(gpu, power):
    pts = gemm_timelines(gpu, power, 30, seed=1)
    fit = fit_latency_coeffs([(pt, pt.ideal_latency) for pt in pts])
    c = fit.coeffs
    assert (c.lam_p, c.lam_m, c.lam_e) == pytest.approx((1, 1, 1), abs=1e-10)
    assert c.eps == pytest.approx(0, abs=1e-10 * max(pt.ideal_latency for pt in pts))


def test_noisy_monolithic_hundred_samples(gpu, power):
    # 25 layernorm shapes at 4 frequencies; held-out shapes from the same stream
    kind, prec, _ = next(g for g in DEFAULT_SYNTH_TILES if g[0] is OpKind.LAYERNORM)
    rng = np.random.default_rng(0)

    def draw(n):
        out = []
        for _ in range(n):
            op = random_shape(rng, kind, prec)
            for f in (510, 810, 1110, 1410):
                pt = build_timeline(op, default_tile(op), gpu, power.at_frequency(f * MHZ))
                out.append((pt, correct_latency(pt, TRUTH).latency * (1 + 0.02 * rng.standard_normal())))
        return out

    train, test = draw(25), draw(25)
    assert len(train) == 100
    c = fit_latency_coeffs(train).coeffs
    assert c.lam_m == pytest.approx(TRUTH.lam_m, rel=0.05)
    assert c.eps == pytest.approx(TRUTH.eps, rel=0.05)
    pred = [correct_latency(pt, c).latency for pt, _ in test]
    assert mape(pred, [t for _, t in test]) < 0.03


def test_underdetermined(gpu, power):
    pts = gemm_timelines(gpu, power, 3)
    with pytest.raises(FitError, match="3 samples"):
        fit_latency_coeffs([(pt, 1e-3) for pt in pts])
    with pytest.raises(FitError):
        fit_latency_coeffs([])


def test_collinear_epilogue_dropped(gpu, power):
    # one full wave at a fixed grid: only K varies, so prologue and epilogue times
    # are constant and duplicate the eps column
    pts = [build_timeline(OperatorSpec.gemm(128 * 12, 128 * 9, k), BASE, gpu, power) for k in (64, 96, 256, 512, 1024)]
    assert len({pt.t_e for pt in pts}) == 1 and len({pt.t_p for pt in pts}) == 1
    samples = [(pt, correct_latency(pt, TRUTH).latency) for pt in pts]
    with pytest.warns(CollinearityWarning):
        fit = fit_latency_coeffs(samples)
    assert fit.coeffs.lam_p == fit.coeffs.lam_e == 1.0
    assert set(fit.dropped) == {0, 2}
    assert fit.coeffs.lam_m == pytest.approx(TRUTH.lam_m, rel=1e-9)


def test_mixed_layouts_rejected(gpu, power):
    a = build_timeline(OperatorSpec.gemm(128, 128, 128), BASE, gpu, power)
    b = build_timeline(OperatorSpec.softmax(8, 128), TileConfig((128,)), gpu, power)
    with pytest.raises(FitError, match="mix"):
        fit_latency_coeffs([(a, 1e-5)] * 3 + [(b, 1e-5)] * 3)


@settings(max_examples=40)
@given(st.integers(0, 10_000), st.floats(0.0, 0.3))
def test_fit_beats_default_and_is_deterministic(gpu, power, seed, sigma):
    rng = np.random.default_rng(seed)
    pts = gemm_timelines(gpu, power, 12, seed=seed)
    y = np.array([correct_latency(pt, TRUTH).latency * (1 + sigma * rng.standard_normal()) for pt in pts])
    y = np.abs(y) + 1e-9
    samples = list(zip(pts, y))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CollinearityWarning)
        f1 = fit_latency_coeffs(samples)
        f2 = fit_latency_coeffs(samples)
    assert f1.coeffs == f2.coeffs
    default = np.sqrt(np.mean((np.array([pt.ideal_latency for pt in pts]) - y) ** 2))
    assert f1.rmse <= default * (1 + 1e-9)


@given(any_case, st.floats(0, 5), st.floats(0, 5), st.floats(0, 5), st.floats(0, 1e-3))
def test_corrected_latency_floor(gpu, power, case, lp, lm, le, eps):
    op, tile = case
    ck = correct_latency(build_timeline(op, tile, gpu, power), CorrectionCoeffs(lp, lm, le, eps))
    assert ck.latency >= eps >= 0
    for m in MODULES:
        assert 0 <= ck.utilization[m] <= 1


def test_coeff_validation():
    with pytest.raises(ValueError):
        CorrectionCoeffs(lam_p=-1.0)
    with pytest.raises(ValueError):
        CorrectionCoeffs(eps=-1e-6)


def test_nearest_group():
    k = lambda tile, s=3, prec="bf16": KernelGroupKey(OpKind.GEMM, Precision(prec), tile, s, False)  # noqa: E731
    groups = [k((128, 128, 32)), k((256, 128, 64)), k((64, 64, 32), prec="fp32")]
    assert nearest_group(k((128, 128, 64)), groups) == k((128, 128, 32))
    assert nearest_group(k((256, 256, 64)), groups) == k((256, 128, 64))
    assert nearest_group(k((128, 128, 32), prec="fp32"), groups) == k((64, 64, 32), prec="fp32")
    assert nearest_group(KernelGroupKey(OpKind.SOFTMAX, Precision.BF16, (1024,), 1, False), groups) is None
    assert tile_distance(k((128, 128, 32)), k((128, 128, 32), s=4)) < tile_distance(k((128, 128, 32)), k((64, 128, 32)))


def test_estimator_api():
    X = np.array([[1.0, 2.0, 0.5], [2.0, 1.0, 0.5], [0.5, 3.0, 1.0], [1.5, 1.5, 2.0], [3.0, 0.5, 0.25]])
    y = X @ np.array([1.3, 1.1, 1.5]) + 0.2
    est = LatencyCorrector().fit(X, y)
    assert est.predict(X) == pytest.approx(y, rel=1e-9)
    assert est.intercept_ == pytest.approx(0.2, rel=1e-9)
    assert clone(est).get_params() == est.get_params()
    with pytest.raises(FitError):
        LatencyCorrector().fit(X[:3], y[:3])
    mono = LatencyCorrector().fit(X[:, 1:2], 2 * X[:, 1] + 0.1)
    assert mono.to_coeffs().lam_m == pytest.approx(2.0) and mono.to_coeffs().lam_p == 1.0
