"""Federated GWAS pipeline: seeded masking, distributed QC, masked covariate
projection, two-level stacked ridge regression, and per-SNP association
testing, plus a centralized plaintext reference pipeline."""

__version__ = "0.1.0"
