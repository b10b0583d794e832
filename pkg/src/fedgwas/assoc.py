"""Distributed single-SNP association testing.

Parties upload each projected SNP column once, fold-sliced, row-masked, and
scaled by a per-SNP shared scalar.  The server forms the chi-square ratio
from masked inner products; every mask factor and scalar cancels between
numerator and denominator, so the ratio equals the plaintext statistic.  The
degrees-of-freedom factor (N - C) is applied by the parties, who know N; the
server never does.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erfc

from .config import SIGNIFICANCE_P
from .seedcraft import MaskSuite, PartitionPlan


class AssocError(Exception):
    pass


@dataclass
class MaskedSnpUpload:
    """One party's association upload: per fold, a (N_k+pad) x M matrix whose
    columns are the masked, scalar-hidden SNP slices."""

    party: int
    per_fold: dict  # fold -> matrix


@dataclass(frozen=True)
class AssocStat:
    snp_index: int
    chi2: float
    p: float
    significant: bool
    degenerate: bool = False

    @property
    def neglog10p(self) -> float:
        return -math.log10(max(self.p, 1e-300))


@dataclass
class AssocResultSet:
    stats: list
    rstar: int = 0
    samples: int = 0
    snps: int = 0
    covariates: int = 0
    seed_fingerprint: str = ""

    def significant_count(self) -> int:
        return sum(s.significant for s in self.stats)


def party_mask_snps(party: int, x_blocks, plan: PartitionPlan, suite: MaskSuite,
                    snp_scalars: np.ndarray) -> MaskedSnpUpload:
    """Mask every projected standardized SNP column of this party, fold by fold."""
    x_all = np.concatenate([np.asarray(b, dtype=np.float64) for b in x_blocks], axis=1)
    if snp_scalars.shape[0] != x_all.shape[1]:
        raise AssocError("need one shared scalar per SNP")
    per_fold = {}
    for k in range(1, plan.folds + 1):
        rows = plan.party_fold_rows(party, k)
        off = plan.party_fold_offset(party, k)
        o_slice = suite.l0_row(k).entries[:, off:off + len(rows)]
        per_fold[k] = (o_slice @ x_all[rows]) * snp_scalars
    return MaskedSnpUpload(party, per_fold)


def snp_scalars(suite: MaskSuite, snps: int) -> np.ndarray:
    """The shared per-SNP non-zero constants, identical across parties."""
    return np.array([suite.assoc_scalar(m) for m in range(snps)])


def server_chi2_ratios(uploads, payloads, fold_predictions: dict, folds: int):
    """Mask-cancelled per-SNP ratio (x^T resid)^2 / (|resid|^2 |x|^2).

    Multiplying by (N - C) yields the chi-square statistic; that last step
    belongs to the parties.  Returns (ratios, degenerate flags).
    """
    uploads = sorted(uploads, key=lambda u: u.party)
    snps = uploads[0].per_fold[1].shape[1]

    num = np.zeros(snps)
    xnorm = np.zeros(snps)
    resid_norm = 0.0
    for k in range(1, folds + 1):
        masked_x = sum(u.per_fold[k] for u in uploads)
        resid = sum(p.pheno[k] for p in sorted(payloads, key=lambda p: p.party))
        resid = resid - fold_predictions[k]
        num += masked_x.T @ resid
        xnorm += np.sum(masked_x**2, axis=0)
        resid_norm += float(resid @ resid)

    degenerate = xnorm <= 0
    if resid_norm <= 0:
        return np.zeros(snps), np.ones(snps, dtype=bool)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(degenerate, 0.0, num**2 / (resid_norm * xnorm))
    return ratios, degenerate


def chi2_to_p(chi2) -> np.ndarray:
    """Upper-tail probability of the 1-dof chi-square law via erfc."""
    chi2 = np.asarray(chi2, dtype=np.float64)
    if np.any(chi2 < 0):
        raise AssocError("chi-square statistic cannot be negative")
    return erfc(np.sqrt(chi2 / 2.0))


def finalize_stats(ratios: np.ndarray, degenerate: np.ndarray, n_total: int,
                   covariates: int) -> list:
    """Party-side completion: chi2 = (N - C) * ratio, then p and the verdict."""
    dof_scale = n_total - covariates
    if dof_scale <= 0:
        raise AssocError("need more samples than covariates")
    stats = []
    chi2 = dof_scale * np.asarray(ratios, dtype=np.float64)
    pvals = chi2_to_p(np.where(degenerate, 0.0, chi2))
    for i in range(chi2.shape[0]):
        if degenerate[i]:
            stats.append(AssocStat(i, 0.0, 1.0, False, True))
        else:
            p = max(float(pvals[i]), 1e-300)
            stats.append(AssocStat(i, float(chi2[i]), p, p < SIGNIFICANCE_P))
    return stats


def server_chi2(uploads, payloads, level1_result, folds: int, n_total: int,
                covariates: int) -> list:
    """Library-level composition of the ratio computation and finalization.

    In the wire protocol the two halves run on different machines; this
    entry point exists for in-process use and tests.
    """
    ratios, degenerate = server_chi2_ratios(
        uploads, payloads, level1_result.fold_predictions, folds
    )
    return finalize_stats(ratios, degenerate, n_total, covariates)


RESULT_COLUMNS = ("snp_index", "chi2", "p", "neglog10p", "significant")


def write_results(results: AssocResultSet, path):
    """Tab-separated results, one row per retained SNP, sorted by index."""
    lines = [
        f"# rstar={results.rstar}",
        f"# samples={results.samples}",
        f"# snps={results.snps}",
        f"# covariates={results.covariates}",
        f"# seed_fingerprint={results.seed_fingerprint}",
        "\t".join(RESULT_COLUMNS),
    ]
    for s in sorted(results.stats, key=lambda s: s.snp_index):
        lines.append(
            f"{s.snp_index}\t{s.chi2:.12g}\t{s.p:.12g}\t{s.neglog10p:.12g}\t{int(s.significant)}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_results(path) -> AssocResultSet:
    meta = {}
    stats = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key.strip()] = value.strip()
            continue
        if line.startswith(RESULT_COLUMNS[0]):
            continue
        idx, chi2, p, _neglog, sig = line.split("\t")
        stats.append(AssocStat(int(idx), float(chi2), float(p), sig == "1"))
    return AssocResultSet(
        stats,
        rstar=int(meta.get("rstar", 0)),
        samples=int(meta.get("samples", 0)),
        snps=int(meta.get("snps", 0)),
        covariates=int(meta.get("covariates", 0)),
        seed_fingerprint=meta.get("seed_fingerprint", ""),
    )
