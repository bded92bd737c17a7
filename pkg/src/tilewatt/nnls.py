"""Non-negative least squares by the Lawson-Hanson active-set method.

Solves ``min ||A x - b||_2`` subject to ``x >= 0``. Deterministic: ties in the
entering-variable choice go to the lowest column index.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NNLSError(RuntimeError):
    pass


@dataclass(frozen=True)
class NNLSResult:
    x: np.ndarray
    residual_norm: float
    iterations: int


def _ls_on(A, b, cols):
    sol, *_ = np.linalg.lstsq(A[:, cols], b, rcond=None)
    return sol


def nnls(A, b, max_iter=None, tol=None) -> NNLSResult:
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if A.ndim != 2 or b.ndim != 1 or A.shape[0] != b.shape[0]:
        raise ValueError(f"shape mismatch: A {A.shape}, b {b.shape}")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
        raise ValueError("A and b must be finite")
    m, n = A.shape
    eps = np.finfo(float).eps
    if tol is None:
        # gradient tolerance in the units of A.T @ b, so rescaling the problem rescales it too
        tol = 10 * max(m, n) * eps * np.abs(A).max(initial=0.0) * np.abs(b).max(initial=0.0)
    if max_iter is None:
        max_iter = 3 * n + 30
    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    blocked = np.zeros(n, dtype=bool)  # entered with a non-positive value; retried after progress
    w = A.T @ (b - A @ x)
    it = 0
    while True:
        cand = np.where(passive | blocked, -np.inf, w)
        if passive.all() or np.max(cand) <= tol:
            break
        it += 1
        if it > max_iter:
            raise NNLSError(f"no convergence after {max_iter} outer iterations")
        j = int(np.argmax(cand))  # argmax picks the lowest index on ties
        passive[j] = True
        cols = np.flatnonzero(passive)
        z = _ls_on(A, b, cols)
        if z[np.searchsorted(cols, j)] <= 0:
            # degenerate direction: the new variable cannot move off zero
            passive[j] = False
            blocked[j] = True
            continue
        # inner loop: step back until the passive solution is feasible
        while np.any(z <= 0):
            xp = x[cols]
            neg = z <= 0
            alpha = np.min(xp[neg] / (xp[neg] - z[neg]))
            x[cols] = xp + alpha * (z - xp)
            passive &= ~((x <= 10 * eps * np.abs(x).max()) & passive)
            x[~passive] = 0.0
            cols = np.flatnonzero(passive)
            if cols.size == 0:
                z = np.zeros(0)
                break
            z = _ls_on(A, b, cols)
        x[:] = 0.0
        x[cols] = z
        blocked[:] = False
        w = A.T @ (b - A @ x)
    return NNLSResult(x, float(np.linalg.norm(A @ x - b)), it)
