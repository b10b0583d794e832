"""Level-0 blockwise ridge regression via consensus ADMM on masked payloads.

Per (fold, block, ridge-index) cell the parties upload three objects: the
masked inverse of their local training Gram, the masked held-out-fold design
slice, and the masked held-out-fold phenotype slice.  All masking uses
orthonormal-column rectangular matrices, so every Gram product the server
forms cancels the masks exactly and the masked iteration is the plaintext
iteration conjugated by the column mask.  The fixed point decodes to the
global training-fold ridge solution; the held-out prediction emitted per
cell decodes to the out-of-fold level-0 predictor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .seedcraft import MaskSuite, PartitionPlan
from .transform import Onboarding


class SolverError(Exception):
    pass


@dataclass(frozen=True)
class RidgeSchedule:
    """Ridge parameter ladder shared by both levels plus solver controls."""

    snps: int
    blocks: int
    h: np.ndarray
    lam: np.ndarray
    omega: np.ndarray
    rho: float | None = None     # ADMM penalty; None picks per-cell automatically
    n_admm: int = 300
    n_cgd: int | None = None

    @property
    def ridge_params(self) -> int:
        return len(self.lam)


def build_schedule(snps: int, blocks: int, ridge_params: int, rho: float | None = None,
                   n_admm: int = 300, n_cgd: int | None = None) -> RidgeSchedule:
    """Ladder h_r = (0.01(R-1) + 0.98(r-1))/(R-1), lambda_r = M(1-h^2)/h^2,
    omega_r = (B R / M) lambda_r."""
    if ridge_params < 2:
        raise SolverError("need at least two ridge parameters (h undefined at R=1)")
    r = np.arange(1, ridge_params + 1)
    h = (0.01 * (ridge_params - 1) + 0.98 * (r - 1)) / (ridge_params - 1)
    lam = snps * (1 - h**2) / h**2
    omega = (blocks * ridge_params / snps) * lam
    return RidgeSchedule(snps, blocks, h, lam, omega, rho, n_admm, n_cgd)


def admm_penalty(schedule: RidgeSchedule, lam_r: float, block_width: int,
                 parties: int) -> float:
    """Penalty for one cell.

    The automatic rule max(lambda/P, sqrt(lambda * M_b)) keeps the consensus
    shrinkage balanced on the heavily-regularized end of the ladder and
    tracks the data curvature on the light end.  It uses only quantities the
    server legitimately holds (lambda_r, P, block width), never sample
    counts.
    """
    if schedule.rho is not None:
        return schedule.rho
    return float(max(lam_r / parties, np.sqrt(lam_r * block_width)))


def training_folds(folds: int, fold: int) -> tuple:
    """Folds used to fit the predictor evaluated on `fold` (K=1 trains on itself)."""
    if folds == 1:
        return (1,)
    return tuple(k for k in range(1, folds + 1) if k != fold)


@dataclass
class Level0PartyPayload:
    """One party's upload for the whole level-0 phase."""

    party: int
    folds: int
    blocks: int
    ridge_params: int
    pheno: dict = field(default_factory=dict)       # k -> (N_k+pad,)
    inv_gram: dict = field(default_factory=dict)    # (k,b,r) -> (M_b+pad)^2
    design: dict = field(default_factory=dict)      # (k,b,r) -> (N_k+pad) x (M_b+pad)


def party_prepare_payload(party: int, x_blocks, phenotype, plan: PartitionPlan,
                          suite: MaskSuite, schedule: RidgeSchedule,
                          parties: int) -> Level0PartyPayload:
    """Mask this party's fold slices and local inverse Grams for every cell.

    The design and phenotype slices embed the party's fold members at their
    offsets in the global fold ordering by using the matching column slice
    of the fold's row mask.
    """
    phenotype = np.asarray(phenotype, dtype=np.float64).ravel()
    folds = plan.folds
    k_y = suite.l0_scalar()
    payload = Level0PartyPayload(party, folds, schedule.blocks, schedule.ridge_params)

    fold_rows = {k: plan.party_fold_rows(party, k) for k in range(1, folds + 1)}
    row_slices = {}
    for k in range(1, folds + 1):
        off = plan.party_fold_offset(party, k)
        row_slices[k] = suite.l0_row(k).entries[:, off:off + len(fold_rows[k])]
        payload.pheno[k] = k_y**2 * (row_slices[k] @ phenotype[fold_rows[k]])

    for b, block in enumerate(x_blocks):
        block = np.asarray(block, dtype=np.float64)
        for k in range(1, folds + 1):
            train = np.concatenate([fold_rows[j] for j in training_folds(folds, k)])
            x_train = block[train]
            x_fold = block[fold_rows[k]]
            gram = x_train.T @ x_train
            inv_cache = {}
            for r in range(1, schedule.ridge_params + 1):
                rho = admm_penalty(schedule, schedule.lam[r - 1], block.shape[1], parties)
                if rho not in inv_cache:
                    chol = cho_factor(gram + rho * np.eye(gram.shape[0]))
                    inv_cache[rho] = cho_solve(chol, np.eye(gram.shape[0]))
                o_col = suite.l0_col(b, r).entries
                payload.inv_gram[(k, b + 1, r)] = o_col @ inv_cache[rho] @ o_col.T
                payload.design[(k, b + 1, r)] = (
                    (row_slices[k] @ x_fold) @ o_col.T / k_y
                )
    return payload


@dataclass
class AdmmState:
    x_parts: np.ndarray     # P x dim
    z: np.ndarray
    y_parts: np.ndarray
    iterations: int
    converged: bool
    primal_history: list


def server_admm(payloads, cell, lam_r: float, rho: float, n_iters: int,
                tol: float = 1e-10) -> AdmmState:
    """Run consensus ADMM for one (fold, block, ridge-index) cell.

    Entirely in masked coordinates.  The per-party gram vector accumulates
    fold-blockwise (design^T pheno within one fold, then summed over training
    folds) so masks always cancel within a fold and never mix across folds.
    """
    k, b, r = cell
    payloads = sorted(payloads, key=lambda p: p.party)
    parties = len(payloads)
    folds = payloads[0].folds
    dim = payloads[0].inv_gram[cell].shape[0]

    gram_vec = []
    for p in payloads:
        g = np.zeros(dim)
        for j in training_folds(folds, k):
            g += p.design[(j, b, r)].T @ p.pheno[j]
        gram_vec.append(g)
    gram_vec = np.stack(gram_vec)
    inv = [p.inv_gram[cell] for p in payloads]

    z_bound = np.linalg.norm(gram_vec.sum(axis=0)) / lam_r + 1e-300
    shrink = rho / (lam_r / parties + rho)

    x = np.zeros((parties, dim))
    y = np.zeros((parties, dim))
    z = np.zeros(dim)
    primal_history = []
    converged = False
    it = 0
    for it in range(1, n_iters + 1):
        for p in range(parties):
            x[p] = inv[p] @ (gram_vec[p] + rho * z - y[p])
        z_prev = z
        z = shrink * (x.mean(axis=0) + y.mean(axis=0) / rho)
        y += rho * (x - z)

        if np.linalg.norm(z) > 1e6 * z_bound:
            raise SolverError(f"ADMM diverged at cell {cell}")
        primal = np.linalg.norm(x - z, axis=1).sum()
        dual = rho * np.linalg.norm(z - z_prev) * parties
        primal_history.append(primal)
        scale = max(float(np.linalg.norm(z)), float(np.abs(x).max()), 1e-300)
        if primal + dual <= tol * scale * parties:
            converged = True
            break

    return AdmmState(x, z, y, it, converged, primal_history)


def emit_masked_prediction(payloads, cell, state: AdmmState) -> np.ndarray:
    """Held-out prediction for the cell: sum_p design_p @ z.  The phenotype
    scalar cancels, leaving exactly the row-masked out-of-fold predictor."""
    return sum(p.design[cell] @ state.z for p in payloads)


def block_widths(snps: int, blocks: int) -> list:
    """Public tiling of the post-QC SNPs; both sides derive the same widths."""
    from .seedcraft import split_evenly

    return split_evenly(snps, blocks)


def solve_level0(payloads, schedule: RidgeSchedule, folds: int, parties: int,
                 tol: float = 1e-10) -> dict:
    """All cells; returns {(k, b, r): masked out-of-fold prediction}."""
    widths = block_widths(schedule.snps, schedule.blocks)
    out = {}
    for k in range(1, folds + 1):
        for b in range(1, schedule.blocks + 1):
            for r in range(1, schedule.ridge_params + 1):
                lam_r = float(schedule.lam[r - 1])
                rho = admm_penalty(schedule, lam_r, widths[b - 1], parties)
                state = server_admm(
                    payloads, (k, b, r), lam_r, rho, schedule.n_admm, tol
                )
                out[(k, b, r)] = emit_masked_prediction(payloads, (k, b, r), state)
    return out
