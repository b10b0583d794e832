"""Distributed quality control over exact integer allele counts.

Each party tallies per-SNP genotype counts locally, pads them with a
zero-sum share, and ships the masked integers.  The wrapping sum across
parties recovers the global counts exactly, after which the missingness,
minor-allele-frequency, and Hardy-Weinberg filters are pure functions of
public totals and give the same answer everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blockstore import MISSING
from .seedcraft import ZeroSumShare

# columns of the counts matrix
HOM_REF, HET, HOM_ALT, MISS = 0, 1, 2, 3


@dataclass(frozen=True)
class QcThresholds:
    max_missing_rate: float = 0.1
    min_maf: float = 0.05
    max_hwe_chi2: float = 23.928  # 1-dof chi-square at p = 1e-6

    def __post_init__(self):
        if min(self.max_missing_rate, self.min_maf, self.max_hwe_chi2) <= 0:
            raise ValueError("thresholds must be positive")


@dataclass
class AlleleCounts:
    """Per-SNP genotype tallies as an M x 4 int64 matrix."""

    table: np.ndarray

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=np.int64)
        if self.table.ndim != 2 or self.table.shape[1] != 4:
            raise ValueError("counts table must be M x 4")

    @property
    def snps(self) -> int:
        return self.table.shape[0]

    @property
    def n_called(self) -> np.ndarray:
        return self.table[:, :3].sum(axis=1)

    def totals(self) -> np.ndarray:
        return self.table.sum(axis=1)


@dataclass
class QcReport:
    keep: np.ndarray
    missing_rate: np.ndarray
    maf: np.ndarray
    hwe_chi2: np.ndarray

    @property
    def kept_indices(self) -> np.ndarray:
        return np.flatnonzero(self.keep)

    def index_map(self) -> dict:
        """Original SNP index -> post-QC column index."""
        return {int(old): new for new, old in enumerate(self.kept_indices)}

    def to_tsv(self) -> str:
        lines = ["snp_index\tkeep\tmissing_rate\tmaf\thwe_chi2"]
        for i in range(len(self.keep)):
            lines.append(
                f"{i}\t{int(self.keep[i])}\t{self.missing_rate[i]:.10g}"
                f"\t{self.maf[i]:.10g}\t{self.hwe_chi2[i]:.10g}"
            )
        return "\n".join(lines) + "\n"


def local_counts(genotypes: np.ndarray) -> AlleleCounts:
    """Exact per-SNP tallies of one party's dosage matrix."""
    genotypes = np.asarray(genotypes)
    table = np.empty((genotypes.shape[1], 4), dtype=np.int64)
    table[:, HOM_REF] = (genotypes == 0).sum(axis=0)
    table[:, HET] = (genotypes == 1).sum(axis=0)
    table[:, HOM_ALT] = (genotypes == 2).sum(axis=0)
    table[:, MISS] = (genotypes == MISSING).sum(axis=0)
    return AlleleCounts(table)


def mask_counts(counts: AlleleCounts, share: ZeroSumShare) -> np.ndarray:
    """counts + pad with wrapping 64-bit arithmetic."""
    if share.payload.shape != counts.table.shape:
        raise ValueError("share shape must match the counts table")
    return (counts.table.view(np.uint64) + share.payload.view(np.uint64)).view(np.int64)


def unmask_sum(masked_tables) -> AlleleCounts:
    """Wrapping sum of all parties' masked tables; pads cancel exactly."""
    total = np.zeros_like(masked_tables[0], dtype=np.uint64)
    for table in masked_tables:
        total = total + np.asarray(table, dtype=np.int64).view(np.uint64)
    return AlleleCounts(total.view(np.int64))


def hwe_chi2(counts: AlleleCounts) -> np.ndarray:
    """Three-cell goodness-of-fit statistic against Hardy-Weinberg proportions.

    Expected cells use the allele frequency estimated from the observed
    genotypes.  A zero expected cell contributes nothing when the observed
    cell is also zero and infinity otherwise; SNPs with no called genotypes
    come out as NaN for the caller to drop.
    """
    table = counts.table.astype(np.float64)
    n = counts.n_called.astype(np.float64)
    out = np.full(counts.snps, np.nan)
    ok = n > 0
    if not ok.any():
        return out

    p_hat = (2 * table[ok, HOM_REF] + table[ok, HET]) / (2 * n[ok])
    expected = np.stack(
        [n[ok] * p_hat**2, n[ok] * 2 * p_hat * (1 - p_hat), n[ok] * (1 - p_hat) ** 2],
        axis=1,
    )
    observed = table[ok, :3]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = (observed - expected) ** 2 / expected
    terms = np.where(expected > 0, terms, np.where(observed > 0, np.inf, 0.0))
    out[ok] = terms.sum(axis=1)
    return out


def apply_filters(counts: AlleleCounts, thresholds: QcThresholds, n_total: int) -> QcReport:
    """Keep a SNP iff missing rate <= max, MAF strictly above min, and the
    HWE statistic at or below the cutoff."""
    table = counts.table
    if np.any(table.sum(axis=1) != n_total):
        raise ValueError("counts rows must each sum to the total sample count")

    missing_rate = table[:, MISS] / n_total
    n_called = counts.n_called.astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        freq = (2 * table[:, HOM_REF] + table[:, HET]) / (2 * n_called)
    maf = np.where(n_called > 0, np.minimum(freq, 1 - freq), 0.0)
    hwe = hwe_chi2(counts)

    hwe = np.where(np.isnan(hwe), np.inf, hwe)
    keep = (
        (missing_rate <= thresholds.max_missing_rate)
        & (maf > thresholds.min_maf)
        & (hwe <= thresholds.max_hwe_chi2)
    )
    return QcReport(keep, missing_rate, maf, hwe)
