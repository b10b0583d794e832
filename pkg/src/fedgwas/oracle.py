"""Centralized plaintext reference pipeline.

Every stage the distributed protocol computes under masks is recomputed here
in the clear by an independent code path: closed-form SPD solves instead of
ADMM and CG, direct projection instead of the masking identity.  Block
tiling, fold assignment, and the ridge ladder are shared with the protocol
so that equivalence tests isolate exactly the masking and transport layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .assoc import AssocResultSet, AssocStat, chi2_to_p
from .config import SIGNIFICANCE_P
from .qc import AlleleCounts, QcReport, QcThresholds, apply_filters, local_counts
from .ridge_l0 import RidgeSchedule, training_folds
from .seedcraft import PartitionPlan
from .transform import genotype_stats_from_counts, mean_impute


@dataclass
class OracleResult:
    qc: QcReport
    x_tilde: np.ndarray          # N x M_kept projected standardized genotypes
    y_tilde: np.ndarray          # N projected standardized phenotype
    w: np.ndarray                # N x B*R out-of-fold level-0 predictions
    eta: dict                    # (k, r) -> level-1 coefficients
    rss: np.ndarray              # K x R
    rstar: int
    y_hat: np.ndarray            # N stacked-regression predictor
    stats: list = field(default_factory=list)


def centered_projection(covariates: np.ndarray, values: np.ndarray) -> np.ndarray:
    """(I - Z1 (Z1^T Z1)^-1 Z1^T) values with the appended ones column."""
    n = values.shape[0]
    z1 = np.concatenate([covariates.reshape(n, -1), np.ones((n, 1))], axis=1)
    coef, *_ = np.linalg.lstsq(z1, values, rcond=None)
    return values - z1 @ coef


def standardize_and_project(genotypes, covariates, phenotype, counts: AlleleCounts):
    """X_tilde = P1 X_imputed diag(1/sd), y_tilde = P1 y / s_y, population sd."""
    n = genotypes.shape[0]
    mean, sd = genotype_stats_from_counts(counts, n)
    x_imp = mean_impute(genotypes, mean)
    x_tilde = centered_projection(covariates, x_imp) / sd
    y = np.asarray(phenotype, dtype=np.float64).ravel()
    s_y = float(y.std())
    if s_y <= 0:
        raise ValueError("constant phenotype")
    y_tilde = centered_projection(covariates, y.reshape(-1, 1)).ravel() / s_y
    return x_tilde, y_tilde


def fold_indices(plan: PartitionPlan) -> dict:
    """Global row indices per fold under the concatenated party ordering."""
    labels = plan.global_fold_labels()
    return {k: np.flatnonzero(labels == k) for k in range(1, plan.folds + 1)}


def ridge_solve(x: np.ndarray, y: np.ndarray, lam: float) -> np.ndarray:
    gram = x.T @ x + lam * np.eye(x.shape[1])
    return cho_solve(cho_factor(gram), x.T @ y)


def oracle_level0(x_tilde: np.ndarray, y_tilde: np.ndarray, plan: PartitionPlan,
                  schedule: RidgeSchedule) -> np.ndarray:
    """Closed-form per-(fold, block, ridge) fits; out-of-fold predictions land
    in the W column for (block, ridge)."""
    n = x_tilde.shape[0]
    folds = fold_indices(plan)
    w = np.zeros((n, schedule.blocks * schedule.ridge_params))
    edges = np.concatenate([[0], np.cumsum(_widths(schedule))]).astype(int)
    for b in range(1, schedule.blocks + 1):
        x_b = x_tilde[:, edges[b - 1]:edges[b]]
        for k in range(1, plan.folds + 1):
            train = np.concatenate([folds[j] for j in training_folds(plan.folds, k)])
            test = folds[k]
            for r in range(1, schedule.ridge_params + 1):
                beta = ridge_solve(x_b[train], y_tilde[train], float(schedule.lam[r - 1]))
                col = (b - 1) * schedule.ridge_params + (r - 1)
                w[test, col] = x_b[test] @ beta
    return w


def _widths(schedule: RidgeSchedule) -> list:
    from .ridge_l0 import block_widths

    return block_widths(schedule.snps, schedule.blocks)


def oracle_level1(w: np.ndarray, y_tilde: np.ndarray, plan: PartitionPlan,
                  schedule: RidgeSchedule):
    """Cross-validated level-1 ridge over the full W, r* by total out-of-fold
    RSS (ties to the smallest index), and the assembled global predictor."""
    folds = fold_indices(plan)
    dim = w.shape[1]
    eta = {}
    rss = np.zeros((plan.folds, schedule.ridge_params))
    for k in range(1, plan.folds + 1):
        train = np.concatenate([folds[j] for j in training_folds(plan.folds, k)])
        for r in range(1, schedule.ridge_params + 1):
            gram = w[train].T @ w[train] + float(schedule.omega[r - 1]) * np.eye(dim)
            coef = cho_solve(cho_factor(gram), w[train].T @ y_tilde[train])
            eta[(k, r)] = coef
            resid = y_tilde[folds[k]] - w[folds[k]] @ coef
            rss[k - 1, r - 1] = float(resid @ resid)

    rstar = int(np.argmin(rss.sum(axis=0))) + 1
    y_hat = np.zeros_like(y_tilde)
    for k in range(1, plan.folds + 1):
        y_hat[folds[k]] = w[folds[k]] @ eta[(k, rstar)]
    return eta, rss, rstar, y_hat


def oracle_test(x_tilde: np.ndarray, y_tilde: np.ndarray, y_hat: np.ndarray,
                n_total: int, covariates: int) -> list:
    """chi2 = (x^T r)^2 / (sigma^2 |x|^2) with sigma^2 = |r|^2 / (N - C)."""
    resid = y_tilde - y_hat
    sigma2 = float(resid @ resid) / (n_total - covariates)
    stats = []
    xnorm = np.sum(x_tilde**2, axis=0)
    nums = x_tilde.T @ resid
    for m in range(x_tilde.shape[1]):
        if sigma2 <= 0 or xnorm[m] <= 0:
            stats.append(AssocStat(m, 0.0, 1.0, False, True))
            continue
        chi2 = float(nums[m] ** 2 / (sigma2 * xnorm[m]))
        p = max(float(chi2_to_p(chi2)), 1e-300)
        stats.append(AssocStat(m, chi2, p, p < SIGNIFICANCE_P))
    return stats


def run_oracle(genotypes, covariates, phenotype, plan: PartitionPlan,
               schedule: RidgeSchedule,
               thresholds: QcThresholds = QcThresholds()) -> OracleResult:
    """QC, projection, both regression levels, and per-SNP tests in the clear.

    `plan` must be built over the post-QC SNP count; pass the same plan the
    distributed run derives so predictions are comparable column for column.
    """
    counts = local_counts(genotypes)
    report = apply_filters(counts, thresholds, genotypes.shape[0])
    kept = report.kept_indices
    if kept.size == 0:
        raise ValueError("QC removed every SNP")

    kept_counts = AlleleCounts(counts.table[kept])
    x_tilde, y_tilde = standardize_and_project(
        np.asarray(genotypes)[:, kept], covariates, phenotype, kept_counts
    )
    w = oracle_level0(x_tilde, y_tilde, plan, schedule)
    eta, rss, rstar, y_hat = oracle_level1(w, y_tilde, plan, schedule)
    stats = oracle_test(
        x_tilde, y_tilde, y_hat, genotypes.shape[0],
        np.asarray(covariates).reshape(genotypes.shape[0], -1).shape[1],
    )
    return OracleResult(report, x_tilde, y_tilde, w, eta, rss, rstar, y_hat, stats)


def oracle_result_set(result: OracleResult, n_total: int, covariates: int,
                      fingerprint: str = "") -> AssocResultSet:
    return AssocResultSet(
        result.stats,
        rstar=result.rstar,
        samples=n_total,
        snps=len(result.stats),
        covariates=covariates,
        seed_fingerprint=fingerprint,
    )
