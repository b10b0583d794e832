"""Level-1 stacked ridge regression on masked level-0 predictions.

The feature matrix W has one column per (block, ridge-index) pair.  Within a
fold all of its columns carry the same row mask, so the server's fold-wise
Gram products cancel the masks exactly; the B*R x B*R system is solved by
plain conjugate gradients and the ridge parameter with the smallest total
out-of-fold residual wins.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ridge_l0 import RidgeSchedule, SolverError, training_folds


def column_index(block: int, ridge: int, ridge_params: int) -> int:
    """Column of W for (block, ridge) with blocks-major ordering."""
    return (block - 1) * ridge_params + (ridge - 1)


def masked_w_fold(level0_preds: dict, fold: int, blocks: int, ridge_params: int) -> np.ndarray:
    """Stack the masked out-of-fold predictions of one fold into the masked
    W slice; all columns share the fold's row mask."""
    cols = [
        level0_preds[(fold, b, r)]
        for b in range(1, blocks + 1)
        for r in range(1, ridge_params + 1)
    ]
    return np.stack(cols, axis=1)


def aggregate_pheno(payloads, fold: int) -> np.ndarray:
    """Masked global fold phenotype: the sum of party shares."""
    return sum(p.pheno[fold] for p in sorted(payloads, key=lambda p: p.party))


def assemble_gram(level0_preds: dict, payloads, fold: int, blocks: int,
                  ridge_params: int, folds: int):
    """Training-fold Gram and right-hand side for the level-1 solve at `fold`.

    Accumulated fold-blockwise: each term multiplies objects masked by the
    same per-fold row mask, so the result equals the plaintext W^T W and
    W^T y (up to the common phenotype scalar) with no approximation.
    """
    dim = blocks * ridge_params
    gram = np.zeros((dim, dim))
    rhs = np.zeros(dim)
    for j in training_folds(folds, fold):
        try:
            w_j = masked_w_fold(level0_preds, j, blocks, ridge_params)
        except KeyError as missing:
            raise SolverError(f"missing level-0 cell {missing}") from None
        gram += w_j.T @ w_j
        rhs += w_j.T @ aggregate_pheno(payloads, j)
    return gram, rhs


def cgd_solve(gram: np.ndarray, rhs: np.ndarray, omega: float,
              n_iters: int | None = None, tol: float = 1e-10) -> np.ndarray:
    """Conjugate gradients on (gram + omega I) eta = rhs.

    Starts from zero with direction and residual both set to the right-hand
    side; stops at the relative residual tolerance or after n iterations
    (default: the system dimension, capped at 200).
    """
    dim = rhs.shape[0]
    if n_iters is None:
        n_iters = min(dim, 200)
    a_diag = omega
    x = np.zeros(dim)
    z = rhs.astype(np.float64).copy()
    y = z.copy()
    rhs_norm = np.linalg.norm(rhs)
    if rhs_norm == 0:
        return x
    zz = z @ z
    for _ in range(n_iters):
        if np.sqrt(zz) <= tol * rhs_norm:
            break
        ay = gram @ y + a_diag * y
        denom = y @ ay
        if not np.isfinite(denom) or denom <= 0:
            raise SolverError("CG hit a non-positive curvature direction; system not SPD")
        gamma = zz / denom
        x = x + gamma * y
        z = z - gamma * ay
        zz_new = z @ z
        if not np.isfinite(zz_new):
            raise SolverError("CG iterates left the finite range; conditioning failure")
        y = z + (zz_new / zz) * y
        zz = zz_new
    return x


@dataclass
class Level1Result:
    rstar: int
    fold_predictions: dict           # k -> masked prediction at rstar
    rss: np.ndarray                  # K x R out-of-fold residual sums of squares
    eta: dict = field(default_factory=dict)  # (k, r) -> masked-space coefficients


def solve_level1(level0_preds: dict, payloads, schedule: RidgeSchedule,
                 folds: int) -> Level1Result:
    """Fit every (fold, ridge-index) cell, score out-of-fold residuals, and
    pick r* (ties go to the smallest index)."""
    blocks, ridge_params = schedule.blocks, schedule.ridge_params
    rss = np.zeros((folds, ridge_params))
    eta = {}
    preds = {}
    for k in range(1, folds + 1):
        gram, rhs = assemble_gram(level0_preds, payloads, k, blocks, ridge_params, folds)
        w_k = masked_w_fold(level0_preds, k, blocks, ridge_params)
        y_k = aggregate_pheno(payloads, k)
        for r in range(1, ridge_params + 1):
            coef = cgd_solve(gram, rhs, float(schedule.omega[r - 1]), schedule.n_cgd)
            eta[(k, r)] = coef
            pred = w_k @ coef
            preds[(k, r)] = pred
            rss[k - 1, r - 1] = float(np.sum((y_k - pred) ** 2))

    totals = rss.sum(axis=0)
    rstar = int(np.argmin(totals)) + 1
    fold_predictions = {k: preds[(k, rstar)] for k in range(1, folds + 1)}
    return Level1Result(rstar, fold_predictions, rss, eta)
