"""Seeded synthetic genotype and phenotype generation.

Genotypes follow a Balding-Nichols draw: per-SNP ancestral frequencies,
subpopulation frequencies with drift controlled by F_st, binomial dosages,
and optional family relatedness realized by pairs of samples sharing one
parental haplotype.  Phenotypes follow an additive model with a causal SNP
subset, covariate effects, and Gaussian noise, with the genetic share of
variance pinned to the requested heritability.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .seedcraft import Phase, derive_key, key_from_int, rng_for


@dataclass(frozen=True)
class PopulationModel:
    fst: float = 0.1
    subpopulations: int = 3
    relatedness: float = 0.25
    maf_range: tuple = (0.05, 0.5)

    def __post_init__(self):
        if not (0.0 < self.fst < 1.0):
            raise ValueError("fst must lie in (0, 1)")
        if self.subpopulations < 1:
            raise ValueError("need at least one subpopulation")
        if not (0.0 <= self.relatedness < 1.0):
            raise ValueError("relatedness fraction must lie in [0, 1)")
        low, high = self.maf_range
        if not (0.0 < low <= high <= 0.5):
            raise ValueError("ancestral MAF range must sit inside (0, 0.5]")


@dataclass(frozen=True)
class TraitModel:
    causal_fraction: float = 0.1
    h2: float = 0.5
    alpha: tuple = ()
    noise_scale: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.causal_fraction <= 1.0):
            raise ValueError("causal fraction must lie in (0, 1]")
        if not (0.0 <= self.h2 < 1.0):
            raise ValueError("heritability must lie in [0, 1)")


def gen_genotypes(seed: int, n: int, m: int, model: PopulationModel) -> np.ndarray:
    """Draw an n x m dosage matrix in {0,1,2} under the population model."""
    if n < 1 or m < 1:
        raise ValueError("need n >= 1 and m >= 1")
    rng = rng_for(derive_key(key_from_int(seed), Phase.BLOCK_PLAN, (n, m)))

    low, high = model.maf_range
    ancestral = rng.uniform(low, high, size=m)
    fst = model.fst
    a = ancestral * (1 - fst) / fst
    b = (1 - ancestral) * (1 - fst) / fst
    # subpop x SNP allele frequencies, clipped away from the degenerate edges
    freqs = np.clip(rng.beta(a, b, size=(model.subpopulations, m)), 1e-6, 1 - 1e-6)

    assignment = rng.integers(0, model.subpopulations, size=n)
    p_sample = freqs[assignment]                       # n x m
    hap1 = (rng.random((n, m)) < p_sample).astype(np.int8)
    hap2 = (rng.random((n, m)) < p_sample).astype(np.int8)

    # Related pairs share hap1; pairs are drawn inside one subpopulation.
    n_pairs = int(round(model.relatedness * n / 2))
    if n_pairs:
        order = rng.permutation(n)
        used = 0
        for s in range(model.subpopulations):
            members = order[assignment[order] == s]
            while used < n_pairs and len(members) >= 2:
                i, j, members = members[0], members[1], members[2:]
                hap1[j] = hap1[i]
                used += 1
            if used >= n_pairs:
                break

    return (hap1 + hap2).astype(np.int8)


def gen_covariates(seed: int, n: int, c: int) -> np.ndarray:
    rng = rng_for(derive_key(key_from_int(seed), Phase.BLOCK_PLAN, (n, c, 2)))
    return rng.standard_normal((n, c))


def gen_phenotype(seed: int, genotypes: np.ndarray, covariates: np.ndarray,
                  model: TraitModel) -> np.ndarray:
    """y = X_std @ beta + Z @ alpha + e with Var(genetic)/Var(genetic+noise) = h2.

    The genetic and noise components are rescaled to their target sample
    variances so the realized heritability matches the request.
    """
    genotypes = np.asarray(genotypes)
    n, m = genotypes.shape
    covariates = np.asarray(covariates, dtype=np.float64).reshape(n, -1)
    alpha = np.asarray(model.alpha, dtype=np.float64)
    if alpha.size and alpha.size != covariates.shape[1]:
        raise ValueError("alpha length must match the covariate count")

    rng = rng_for(derive_key(key_from_int(seed), Phase.BLOCK_PLAN, (n, m, 3)))

    noise = rng.standard_normal(n)
    noise = noise / max(noise.std(), 1e-12) * np.sqrt(1.0 - model.h2) * model.noise_scale

    genetic = np.zeros(n)
    if model.h2 > 0.0:
        n_causal = max(1, int(round(model.causal_fraction * m)))
        causal = rng.choice(m, size=n_causal, replace=False)
        beta = rng.normal(0.0, np.sqrt(model.h2 / n_causal), size=n_causal)
        cols = genotypes[:, causal].astype(np.float64)
        sd = cols.std(axis=0)
        sd[sd == 0] = 1.0
        x_std = (cols - cols.mean(axis=0)) / sd
        genetic = x_std @ beta
        spread = genetic.std()
        if spread > 0:
            genetic = genetic / spread * np.sqrt(model.h2) * model.noise_scale

    y = genetic + noise
    if alpha.size:
        y = y + covariates @ alpha
    return y
