"""Dynamic power from activity factors and its per-group coefficient fit.

    P_dyn = s * a_D * C_D * V_D^2 * f_D + sum_m a_m * C_m * V^2 * f

with ``s`` the DRAM energy scale. Coefficients are in W / (V^2 Hz).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .hwmodel import GpuConfig, PowerConfig, idle_power_at
from .kernels import KernelGroupKey
from .modules import MODULES, Module, Utilization
from .nnls import nnls
from .refine import FitError
from .validation import check_design, check_nonneg

N_COEFFS = len(MODULES)
# cosine above which two design columns count as proportional
MERGE_COSINE = 1.0 - 1e-10


class PowerFitWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PowerCoeffs:
    """Switched-capacitance coefficient per module, W/(V^2 Hz)."""

    c_dram: float = 0.0
    c_l2: float = 0.0
    c_shared: float = 0.0
    c_tensor: float = 0.0
    c_cuda: float = 0.0
    c_sfu: float = 0.0
    merged: tuple = ()  # groups of module names that share one fitted coefficient

    def __post_init__(self):
        for m in MODULES:
            name = f"c_{m.value}"
            check_nonneg(getattr(self, name), name)
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "merged", tuple(tuple(g) for g in self.merged))

    def __getitem__(self, module) -> float:
        return getattr(self, f"c_{Module(module).value}")

    def vector(self) -> np.ndarray:
        return np.array([self[m] for m in MODULES])

    @classmethod
    def from_vector(cls, values, merged=()) -> "PowerCoeffs":
        return cls(*(float(v) for v in values), merged=merged)

    def as_dict(self) -> dict:
        return {m.value: self[m] for m in MODULES}


def power_columns(u: Utilization, gpu: GpuConfig, power: PowerConfig) -> np.ndarray:
    """Design row: each module's activity times its V^2 f (DRAM on its own domain)."""
    core = power.core_voltage ** 2 * power.core_freq
    dram = power.dram_energy_scale * gpu.dram_voltage ** 2 * gpu.dram_freq
    return np.array([u[m] * (dram if m is Module.DRAM else core) for m in MODULES])


def dynamic_power(u: Utilization, coeffs: PowerCoeffs, gpu: GpuConfig, power: PowerConfig) -> float:
    return float(power_columns(u, gpu, power) @ coeffs.vector())


@dataclass(frozen=True)
class PowerBreakdown:
    dynamic: float
    idle: float

    @property
    def total(self) -> float:
        return self.dynamic + self.idle


def total_power(u: Utilization, coeffs: PowerCoeffs, gpu: GpuConfig, power: PowerConfig) -> PowerBreakdown:
    return PowerBreakdown(dynamic_power(u, coeffs, gpu, power), idle_power_at(power, power.core_freq))


@dataclass(frozen=True)
class PredictionResult:
    """One kernel's prediction at one operating point."""

    latency: float
    dynamic_power: float
    idle_power: float
    utilization: Utilization
    t_p: float = 0.0
    t_m: float = 0.0
    t_e: float = 0.0
    flags: tuple = ()

    @property
    def total_power(self) -> float:
        return self.dynamic_power + self.idle_power

    @property
    def energy(self) -> float:
        return self.total_power * self.latency

    def as_dict(self) -> dict:
        return {
            "latency_s": self.latency, "dynamic_power_w": self.dynamic_power,
            "idle_power_w": self.idle_power, "total_power_w": self.total_power,
            "energy_j": self.energy, "t_p_s": self.t_p, "t_m_s": self.t_m, "t_e_s": self.t_e,
            "utilization": self.utilization.as_dict(), "flags": list(self.flags),
        }


# -- fitting ---------------------------------------------------------------------

def _column_groups(X):
    """Partition non-zero columns into proportional groups; report all-zero ones."""
    norms = np.linalg.norm(X, axis=0)
    zero = [j for j in range(X.shape[1]) if norms[j] == 0]
    groups = []
    for j in range(X.shape[1]):
        if norms[j] == 0:
            continue
        for g in groups:
            rep = g[0]
            cos = X[:, rep] @ X[:, j] / (norms[rep] * norms[j])
            if cos >= MERGE_COSINE:
                g.append(j)
                break
        else:
            groups.append([j])
    return groups, zero


class PowerModel(RegressorMixin, BaseEstimator):
    """NNLS fit of dynamic power on the six activity columns of :func:`power_columns`.

    Proportional columns are merged into one shared coefficient; all-zero
    columns get coefficient 0. Attributes after fit: ``coef_``, ``merged_``,
    ``zero_``, ``dropped_``, ``rmse_``.
    """

    def __init__(self, min_samples=N_COEFFS + 1):
        self.min_samples = min_samples

    def fit(self, X, y):
        X, y = check_design(X, y, n_columns=N_COEFFS)
        if X.shape[0] < self.min_samples:
            raise FitError(f"need at least {self.min_samples} samples to fit power, got {X.shape[0]}")
        if np.any(X < 0):
            raise FitError("activity columns must be non-negative")
        groups, zero = _column_groups(X)
        G = np.column_stack([X[:, g].sum(axis=1) for g in groups]) if groups else np.zeros((len(y), 0))
        coef = np.zeros(N_COEFFS)
        dropped = []
        if groups:
            scale = np.linalg.norm(G, axis=0)
            Z = G / scale
            s = np.linalg.svd(Z, compute_uv=False)
            if s[-1] <= 1e-9 * s[0]:
                dropped = [groups[i] for i in _dependent(Z)]
                warnings.warn(f"linearly dependent power columns {dropped} fixed at C=0",
                              PowerFitWarning, stacklevel=2)
            keep = [i for i, g in enumerate(groups) if g not in dropped]
            sol = nnls(Z[:, keep], y).x / scale[keep]
            for i, c in zip(keep, sol):
                coef[groups[i]] = c
        self.coef_ = coef
        self.merged_ = tuple(tuple(MODULES[j].value for j in g) for g in groups if len(g) > 1)
        self.zero_ = tuple(MODULES[j].value for j in zero)
        self.dropped_ = tuple(MODULES[j].value for g in dropped for j in g)
        self.n_features_in_ = N_COEFFS
        self.n_samples_ = X.shape[0]
        self.rmse_ = float(np.sqrt(np.mean((X @ coef - y) ** 2)))
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        return check_design(X, n_columns=N_COEFFS) @ self.coef_

    def to_coeffs(self) -> PowerCoeffs:
        check_is_fitted(self, "coef_")
        return PowerCoeffs.from_vector(self.coef_, merged=self.merged_)


def _dependent(Z, rtol=1e-9):
    keep = []
    out = []
    for j in range(Z.shape[1]):
        s = np.linalg.svd(Z[:, keep + [j]], compute_uv=False)
        if s[-1] > rtol * s[0]:
            keep.append(j)
        else:
            out.append(j)
    return out


@dataclass(frozen=True)
class PowerFit:
    key: KernelGroupKey | None
    coeffs: PowerCoeffs
    n_samples: int
    rmse: float
    zero: tuple = ()
    notes: tuple = field(default_factory=tuple)


def _idle_of(sample) -> float:
    if len(sample) > 3 and sample[3] is not None:
        return float(sample[3])
    return idle_power_at(sample[1], sample[1].core_freq)


def power_design(samples, gpu: GpuConfig):
    """Design matrix and dynamic-power target.

    Samples are ``(Utilization, PowerConfig, watts)`` or ``(..., idle_watts)``;
    without a measured idle value the config's idle table is used.
    """
    X = np.array([power_columns(s[0], gpu, s[1]) for s in samples], dtype=float).reshape(-1, N_COEFFS)
    y = np.array([s[2] - _idle_of(s) for s in samples], dtype=float)
    return X, y


def fit_power_coeffs(samples, gpu: GpuConfig, key: KernelGroupKey | None = None) -> PowerFit:
    samples = list(samples)
    if len(samples) < N_COEFFS + 1:
        raise FitError(f"group {key}: {len(samples)} power samples, need at least {N_COEFFS + 1}")
    X, y = power_design(samples, gpu)
    notes = []
    if len({s[1].core_freq for s in samples}) < 2:
        msg = f"group {key}: power samples cover a single frequency"
        warnings.warn(msg, PowerFitWarning, stacklevel=2)
        notes.append(msg)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", PowerFitWarning)
        est = PowerModel().fit(X, y)
    notes += [str(w.message) for w in caught]
    if est.merged_:
        notes.append(f"merged columns {est.merged_}")
    return PowerFit(key, est.to_coeffs(), len(samples), est.rmse_, est.zero_, tuple(notes))
