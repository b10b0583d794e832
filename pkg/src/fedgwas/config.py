"""Run-level configuration shared by parties, server, oracle, and CLI."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace


def pad_for(n: int, pad_min: int = 8, pad_frac: float = 0.1) -> int:
    """Row padding for a rectangular mask over an n-dimensional space.

    Masks must be strictly rectangular, so the pad is at least 1 no matter
    how the knobs are set.
    """
    return max(1, pad_min, math.ceil(pad_frac * n))


@dataclass(frozen=True)
class RunConfig:
    """Global parameters of one pipeline run.

    The server side only ever consumes the public subset (parties, blocks,
    ridge_params, folds, solver controls).  Sample counts stay with the
    parties; the server must never be handed N or any per-party count.
    """

    parties: int = 2
    blocks: int = 4
    ridge_params: int = 5
    folds: int = 5
    covariates: int = 0

    admm_rho: float | None = None  # None = per-cell automatic choice
    admm_iters: int = 300
    cgd_iters: int | None = None   # None = system dimension, capped at 200

    pad_min: int = 8
    pad_frac: float = 0.1

    seed: int = 0
    plan_seed: int | None = None   # defaults to `seed`; split out so masks can
                                   # be reseeded without moving fold boundaries

    port: int = 7421
    timeout_secs: float = 300.0

    def __post_init__(self):
        if self.parties < 2:
            raise ValueError("need at least 2 parties")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.blocks < 1:
            raise ValueError("blocks must be >= 1")
        if self.ridge_params < 2:
            raise ValueError("need at least 2 ridge parameters")

    @property
    def effective_plan_seed(self) -> int:
        return self.seed if self.plan_seed is None else self.plan_seed

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed)

    def public_fingerprint(self) -> bytes:
        """Digest of the public knobs every participant must agree on."""
        text = "|".join(
            str(v)
            for v in (
                self.parties, self.blocks, self.ridge_params, self.folds,
                self.covariates, self.admm_rho, self.admm_iters,
                self.cgd_iters, self.pad_min, self.pad_frac,
            )
        )
        return hashlib.blake2b(text.encode(), digest_size=16).digest()


# Fixed-point scale for exact secure aggregation of real-valued sums.
FIXED_POINT_SCALE = 1 << 40

# Genome-wide significance threshold on p-values.
SIGNIFICANCE_P = 5e-8
