"""Empirical latency correction: per-phase lambda scaling plus a fixed offset epsilon."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .kernels import KernelGroupKey
from .modules import MODULES, Phase, Utilization
from .nnls import nnls
from .timeline import PhaseTimeline, utilization_for
from .validation import check_design, check_nonneg


class FitError(ValueError):
    """Raised when a group cannot be fitted (too few samples, bad data)."""


class CollinearityWarning(UserWarning):
    pass


@dataclass(frozen=True)
class CorrectionCoeffs:
    """Per-group lambda (dimensionless) and epsilon (seconds)."""

    lam_p: float = 1.0
    lam_m: float = 1.0
    lam_e: float = 1.0
    eps: float = 0.0

    def __post_init__(self):
        for name in ("lam_p", "lam_m", "lam_e", "eps"):
            check_nonneg(getattr(self, name), name)
            object.__setattr__(self, name, float(getattr(self, name)))

    def phase_scale(self, phase: Phase) -> float:
        return {Phase.PROLOGUE: self.lam_p, Phase.EPILOGUE: self.lam_e}.get(Phase(phase), self.lam_m)

    def as_dict(self) -> dict:
        return {"lam_p": self.lam_p, "lam_m": self.lam_m, "lam_e": self.lam_e, "eps": self.eps}


IDENTITY = CorrectionCoeffs()


@dataclass(frozen=True)
class CorrectedKernel:
    latency: float
    t_p: float
    t_m: float
    t_e: float
    active: dict  # busy-SM active seconds per module after lambda scaling
    utilization: Utilization


def correct_latency(pt: PhaseTimeline, coeffs: CorrectionCoeffs = IDENTITY) -> CorrectedKernel:
    t_p = coeffs.lam_p * pt.t_p
    t_m = coeffs.lam_m * pt.t_m
    t_e = coeffs.lam_e * pt.t_e
    latency = t_p + t_m + t_e + coeffs.eps
    d = pt.distribution
    active = pt.sm_active(d.tbs_on_busy, coeffs.phase_scale)
    util = utilization_for(pt, latency, coeffs.phase_scale) if latency > 0 else Utilization()
    return CorrectedKernel(latency, t_p, t_m, t_e, active, util)


# -- fitting ---------------------------------------------------------------------

def _independent_columns(X, priority, rtol=1e-9):
    """Greedy pick of linearly independent columns in ``priority`` order."""
    norms = np.linalg.norm(X, axis=0)
    keep = []
    for j in priority:
        if norms[j] == 0:
            continue
        trial = keep + [j]
        Z = X[:, trial] / norms[trial]
        s = np.linalg.svd(Z, compute_uv=False)
        if s[-1] > rtol * s[0]:
            keep = trial
    return sorted(keep)


class LatencyCorrector(RegressorMixin, BaseEstimator):
    """NNLS fit of ``latency = X @ lambda + eps`` with all coefficients >= 0.

    ``X`` holds phase latencies, one column per phase (three for pipelined
    kernels, one for monolithic ones). Columns that are collinear with
    higher-priority ones are dropped and their lambda fixed at 1.

    Attributes after fit: ``coef_`` (lambdas), ``intercept_`` (eps),
    ``rmse_``, ``dropped_`` (column indices held at 1), ``n_samples_``.
    """

    def __init__(self, min_samples=None, fit_intercept=True):
        self.min_samples = min_samples
        self.fit_intercept = fit_intercept

    def fit(self, X, y):
        X, y = check_design(X, y)
        n, k = X.shape
        need = self.min_samples if self.min_samples is not None else k + int(self.fit_intercept)
        if n < need:
            raise FitError(f"need at least {need} samples to fit, got {n}")
        if np.any(X < 0):
            raise FitError("phase latencies must be non-negative")
        cols = np.hstack([X, np.ones((n, 1))]) if self.fit_intercept else X
        # t_m first, then eps, then t_p and t_e
        mid = 1 if k == 3 else 0
        priority = [mid] + ([k] if self.fit_intercept else []) + [j for j in range(k) if j != mid]
        keep = _independent_columns(cols, priority)
        dropped = [j for j in range(cols.shape[1]) if j not in keep]
        if dropped:
            warnings.warn(f"collinear design columns {dropped} held at lambda=1 / eps=0",
                          CollinearityWarning, stacklevel=2)
        fixed = np.zeros(cols.shape[1])
        fixed[[j for j in dropped if j < k]] = 1.0
        target = y - cols @ fixed
        A = cols[:, keep]
        scale = np.linalg.norm(A, axis=0)
        sol = nnls(A / scale, target).x / scale if keep else np.zeros(0)
        coef = fixed.copy()
        coef[keep] = sol
        self.coef_ = coef[:k]
        self.intercept_ = float(coef[k]) if self.fit_intercept else 0.0
        self.dropped_ = tuple(dropped)
        self.n_samples_ = n
        self.n_features_in_ = k
        self.rmse_ = float(np.sqrt(np.mean((self._raw_predict(X) - y) ** 2)))
        return self

    def _raw_predict(self, X):
        return X @ self.coef_ + self.intercept_

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_design(X, n_columns=self.n_features_in_)
        return self._raw_predict(X)

    def to_coeffs(self) -> CorrectionCoeffs:
        check_is_fitted(self, "coef_")
        c = [float(v) for v in self.coef_]
        if len(c) == 1:
            return CorrectionCoeffs(lam_m=c[0], eps=self.intercept_)
        return CorrectionCoeffs(c[0], c[1], c[2], self.intercept_)


@dataclass(frozen=True)
class LatencyFit:
    key: KernelGroupKey | None
    coeffs: CorrectionCoeffs
    n_samples: int
    rmse: float
    dropped: tuple = ()
    notes: tuple = field(default_factory=tuple)


def latency_design(timelines) -> np.ndarray:
    """Phase-latency design matrix; all timelines must share the same phase layout."""
    rows = [pt.phase_features() for pt in timelines]
    widths = {len(r) for r in rows}
    if len(widths) > 1:
        raise FitError("cannot mix monolithic and pipelined kernels in one group")
    return np.asarray(rows, dtype=float)


def fit_latency_coeffs(samples, key: KernelGroupKey | None = None) -> LatencyFit:
    """Fit one group's coefficients from ``(PhaseTimeline, measured_seconds)`` pairs."""
    samples = list(samples)
    if not samples:
        raise FitError(f"group {key}: no samples")
    X = latency_design([pt for pt, _ in samples])
    y = np.asarray([t for _, t in samples], dtype=float)
    if np.any(~np.isfinite(y)) or np.any(y <= 0):
        raise FitError(f"group {key}: measured latencies must be finite and > 0")
    need = X.shape[1] + 1
    if len(samples) < need:
        raise FitError(f"group {key}: {len(samples)} samples, need at least {need}")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", CollinearityWarning)
        est = LatencyCorrector().fit(X, y)
    for w in caught:
        warnings.warn(f"group {key}: {w.message}", CollinearityWarning, stacklevel=2)
    notes = tuple(str(w.message) for w in caught)
    return LatencyFit(key, est.to_coeffs(), len(samples), est.rmse_, est.dropped_, notes)


def tile_distance(a: KernelGroupKey, b: KernelGroupKey) -> float:
    """L1 distance on log2 tile dims; infinite across kind/precision/tile rank."""
    if a.kind != b.kind or a.precision != b.precision or len(a.tb_tile) != len(b.tb_tile):
        return math.inf
    d = sum(abs(math.log2(x) - math.log2(y)) for x, y in zip(a.tb_tile, b.tb_tile))
    d += abs(a.pipeline_stages - b.pipeline_stages) * 1e-3 + (a.epilogue_via_shared != b.epilogue_via_shared) * 1e-3
    return d


def nearest_group(key: KernelGroupKey, candidates):
    """Closest candidate key, ties broken by the key's text form; None if none comparable."""
    best = None
    for cand in sorted(candidates, key=str):
        d = tile_distance(key, cand)
        if math.isfinite(d) and (best is None or d < best[0]):
            best = (d, cand)
    return None if best is None else best[1]


def mape(pred, true) -> float:
    pred = np.asarray(pred, dtype=float)
    true = np.asarray(true, dtype=float)
    return float(np.mean(np.abs(pred - true) / np.abs(true)))


__all__ = [
    "CorrectionCoeffs", "CorrectedKernel", "correct_latency", "LatencyCorrector", "LatencyFit",
    "fit_latency_coeffs", "latency_design", "nearest_group", "tile_distance", "FitError",
    "CollinearityWarning", "IDENTITY", "mape", "MODULES",
]
