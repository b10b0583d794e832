"""Distributed standardization and covariate projection.

Genotype moments fall out of the QC counts; phenotype moments go through one
round of fixed-point secure aggregation.  The projection itself is the
triple-masking protocol: parties upload O_Z Z1_p, O_Z X_p O_X^T and
k1 O_Z y_p, the server projects out the covariate column space entirely in
masked coordinates, and each party decodes only its own row slice.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blockstore import MISSING
from .config import FIXED_POINT_SCALE
from .qc import HET, HOM_ALT, HOM_REF, MISS, AlleleCounts
from .seedcraft import MaskSuite, ZeroSumShare


class TransformError(Exception):
    pass


class CollinearCovariatesError(TransformError):
    pass


@dataclass(frozen=True)
class Onboarding:
    """Per-party sample counts in joining order; parties know all of them,
    the server none."""

    party_sizes: tuple

    @property
    def n_total(self) -> int:
        return sum(self.party_sizes)

    @property
    def parties(self) -> int:
        return len(self.party_sizes)

    def offset(self, party: int) -> int:
        return sum(self.party_sizes[: party - 1])

    def span(self, party: int) -> slice:
        start = self.offset(party)
        return slice(start, start + self.party_sizes[party - 1])


@dataclass
class StdStats:
    snp_mean: np.ndarray
    snp_sd: np.ndarray
    pheno_mean: float
    pheno_sd: float


@dataclass
class EncodedBundle:
    """One party's projection-phase upload; every row dimension is N + pad."""

    party: int
    masked_covariates: np.ndarray   # (N+pad) x (C+1)
    masked_blocks: list             # per block: (N+pad) x (M_b+pad)
    masked_pheno: np.ndarray        # (N+pad,)


@dataclass
class MaskedProjection:
    """Server output for one party: its masked projected slices."""

    party: int
    blocks: list
    pheno: np.ndarray


def genotype_stats_from_counts(counts: AlleleCounts, n_total: int):
    """Post-imputation mean and population sd per SNP, straight from counts.

    Missing entries are imputed with the per-SNP mean of called genotypes,
    which leaves the mean unchanged and shrinks the second moment by the
    imputed cells.
    """
    table = counts.table.astype(np.float64)
    n_called = counts.n_called.astype(np.float64)
    if np.any(n_called <= 0):
        raise TransformError("SNP with no called genotypes survived QC")
    mean = (table[:, HET] + 2 * table[:, HOM_ALT]) / n_called
    sum_sq = table[:, HET] + 4 * table[:, HOM_ALT] + table[:, MISS] * mean**2
    var = sum_sq / n_total - mean**2
    sd = np.sqrt(np.maximum(var, 0.0))
    if np.any(sd <= 0):
        bad = int(np.flatnonzero(sd <= 0)[0])
        raise TransformError(f"zero-variance SNP {bad} (should have failed MAF)")
    return mean, sd


def fixed_point_encode(values) -> np.ndarray:
    scaled = np.asarray(values, dtype=np.float64) * FIXED_POINT_SCALE
    if np.any(np.abs(scaled) >= 2**62):
        raise TransformError("value too large for fixed-point aggregation")
    return np.round(scaled).astype(np.int64)


def fixed_point_decode(values) -> np.ndarray:
    return np.asarray(values, dtype=np.int64).astype(np.float64) / FIXED_POINT_SCALE


def pheno_moment_message(y: np.ndarray, share: ZeroSumShare) -> np.ndarray:
    """Masked fixed-point (sum, sum of squares) of one party's phenotype."""
    y = np.asarray(y, dtype=np.float64)
    sums = fixed_point_encode([y.sum(), np.sum(y * y)])
    return (sums.view(np.uint64) + share.payload.view(np.uint64)).view(np.int64)


def aggregate_pheno_sums(messages) -> np.ndarray:
    total = np.zeros(2, dtype=np.uint64)
    for msg in messages:
        total = total + np.asarray(msg, dtype=np.int64).view(np.uint64)
    return total.view(np.int64)


def aggregate_moments(pheno_sums: np.ndarray, counts: AlleleCounts, n_total: int) -> StdStats:
    """Global standardization statistics from aggregated sums."""
    mean, sd = genotype_stats_from_counts(counts, n_total)
    s, ss = fixed_point_decode(pheno_sums)
    y_mean = s / n_total
    y_var = ss / n_total - y_mean**2
    if y_var <= 0:
        raise TransformError("constant phenotype")
    return StdStats(mean, sd, y_mean, float(np.sqrt(y_var)))


def mean_impute(dosages: np.ndarray, means: np.ndarray) -> np.ndarray:
    """Replace missing dosages with the global per-SNP mean."""
    out = np.asarray(dosages, dtype=np.float64).copy()
    miss = out == MISSING
    if miss.any():
        out[miss] = np.broadcast_to(means, out.shape)[miss]
    return out


def encode_inputs(party: int, imputed_blocks, covariates, phenotype,
                  suite: MaskSuite, onboarding: Onboarding) -> EncodedBundle:
    """Build the triple-masked upload for one party.

    The party uses its own column slice of O_Z, so the sum of uploads over
    parties is the masked global matrix; covariates carry the appended ones
    column that turns projection into mean-centering as well.
    """
    n_p = onboarding.party_sizes[party - 1]
    covariates = np.asarray(covariates, dtype=np.float64).reshape(n_p, -1)
    phenotype = np.asarray(phenotype, dtype=np.float64).ravel()
    if phenotype.size != n_p:
        raise TransformError("phenotype length mismatch")

    ozp = suite.proj_row().entries[:, onboarding.span(party)]
    z1 = np.concatenate([covariates, np.ones((n_p, 1))], axis=1)
    k1 = suite.pheno_scalar()

    masked_blocks = []
    for b, block in enumerate(imputed_blocks):
        block = np.asarray(block, dtype=np.float64)
        if block.shape[0] != n_p or block.shape[1] != suite.block_widths[b]:
            raise TransformError(f"block {b} shape mismatch")
        masked_blocks.append((ozp @ block) @ suite.proj_col(b).entries.T)

    return EncodedBundle(
        party=party,
        masked_covariates=ozp @ z1,
        masked_blocks=masked_blocks,
        masked_pheno=k1 * (ozp @ phenotype),
    )


def server_project(bundles) -> dict:
    """Project the covariate column space out of every masked upload.

    Works entirely on masked objects: the inner Gram of the masked global
    covariates equals Z1^T Z1 exactly because the row mask has orthonormal
    columns.  Returns each party only its own slices.
    """
    bundles = sorted(bundles, key=lambda b: b.party)
    cov_sum = sum(b.masked_covariates for b in bundles)
    gram = cov_sum.T @ cov_sum
    # rank check before solving; a collinear Z1 has no unique projection
    if np.linalg.matrix_rank(gram) < gram.shape[0]:
        raise CollinearCovariatesError("collinear covariates")

    n_blocks = len(bundles[0].masked_blocks)
    block_sums = [sum(b.masked_blocks[i] for b in bundles) for i in range(n_blocks)]
    pheno_sum = sum(b.masked_pheno for b in bundles)

    block_h = [np.linalg.solve(gram, cov_sum.T @ t) for t in block_sums]
    pheno_h = np.linalg.solve(gram, cov_sum.T @ pheno_sum)

    out = {}
    for b in bundles:
        blocks = [
            b.masked_blocks[i] - b.masked_covariates @ block_h[i]
            for i in range(n_blocks)
        ]
        pheno = b.masked_pheno - b.masked_covariates @ pheno_h
        out[b.party] = MaskedProjection(b.party, blocks, pheno)
    return out


def decode_projection(party: int, projected: MaskedProjection, suite: MaskSuite,
                      onboarding: Onboarding, stats: StdStats):
    """Undo the masks on this party's slice and apply the 1/sd column scaling
    (genotypes) and 1/s_y scaling (phenotype)."""
    ozp = suite.proj_row().entries[:, onboarding.span(party)]
    k1 = suite.pheno_scalar()

    blocks = []
    offset = 0
    for b, masked in enumerate(projected.blocks):
        width = suite.block_widths[b]
        plain = (ozp.T @ masked) @ suite.proj_col(b).entries
        blocks.append(plain / stats.snp_sd[offset:offset + width])
        offset += width

    pheno = (ozp.T @ projected.pheno) / k1 / stats.pheno_sd
    return blocks, pheno
