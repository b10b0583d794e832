"""Blockwise on-disk dataset format and ingestion.

One directory per party:

    manifest.json      canonical JSON: shapes, block ranges, file checksums
    block_<i>.ppgb     genotype block, int8 dosages {0,1,2,-1}
    pheno.ppgv         phenotype vector, float64
    covar.ppgv         covariate matrix, float64

Binary layout (little-endian): magic "PPGB"/"PPGV", u8 version, u32 rows,
u32 cols, then the payload row-major (i8 for genotypes, f64 for reals).
The format is deliberately language-neutral and streamable per block.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seedcraft import Phase, derive_key, key_from_int, rng_for, split_evenly

GENO_MAGIC = b"PPGB"
REAL_MAGIC = b"PPGV"
FORMAT_VERSION = 1
MISSING = -1
VALID_DOSAGES = frozenset({-1, 0, 1, 2})


class BlockstoreError(Exception):
    pass


@dataclass
class Manifest:
    format_version: int
    party_id: int
    samples: int
    snps: int
    covariates: int
    block_ranges: list
    checksums: dict = field(default_factory=dict)

    @property
    def block_count(self) -> int:
        return len(self.block_ranges)

    def validate(self):
        if self.samples < 1:
            raise BlockstoreError("dataset must contain at least one sample")
        edges = [0] + [stop for _, stop in self.block_ranges]
        starts = [start for start, _ in self.block_ranges]
        if starts != edges[:-1] or edges[-1] != self.snps or any(
            stop <= start for start, stop in self.block_ranges
        ):
            raise BlockstoreError("block ranges must tile [0, M) with nonempty blocks")

    def to_json(self) -> str:
        return json.dumps(
            {
                "format_version": self.format_version,
                "party_id": self.party_id,
                "samples": self.samples,
                "snps": self.snps,
                "covariates": self.covariates,
                "block_ranges": [[int(a), int(b)] for a, b in self.block_ranges],
                "checksums": self.checksums,
            },
            sort_keys=True,
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, text: str) -> "Manifest":
        raw = json.loads(text)
        return cls(
            format_version=raw["format_version"],
            party_id=raw["party_id"],
            samples=raw["samples"],
            snps=raw["snps"],
            covariates=raw["covariates"],
            block_ranges=[tuple(r) for r in raw["block_ranges"]],
            checksums=raw["checksums"],
        )


@dataclass
class Dataset:
    manifest: Manifest
    blocks: list            # int8 arrays, samples x block width
    phenotype: np.ndarray   # float64, samples
    covariates: np.ndarray  # float64, samples x C

    @property
    def genotypes(self) -> np.ndarray:
        return np.concatenate(self.blocks, axis=1) if self.blocks else np.empty((self.manifest.samples, 0), np.int8)


def checksum64(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def _encode(magic: bytes, arr: np.ndarray) -> bytes:
    rows, cols = arr.shape
    head = magic + struct.pack("<BII", FORMAT_VERSION, rows, cols)
    return head + arr.tobytes(order="C")


def _decode(magic: bytes, data: bytes, dtype, path) -> np.ndarray:
    if len(data) < 13 or data[:4] != magic:
        raise BlockstoreError(f"{path}: bad magic")
    version, rows, cols = struct.unpack("<BII", data[4:13])
    if version != FORMAT_VERSION:
        raise BlockstoreError(f"{path}: unsupported version {version}")
    body = data[13:]
    expected = rows * cols * np.dtype(dtype).itemsize
    if len(body) != expected:
        raise BlockstoreError(f"{path}: payload size mismatch")
    return np.frombuffer(body, dtype=dtype).reshape(rows, cols).copy()


def _check_dosages(block: np.ndarray, where: str):
    bad = ~np.isin(block, list(VALID_DOSAGES))
    if bad.any():
        raise BlockstoreError(f"{where}: dosage outside {{-1,0,1,2}}")


def write_dataset(directory, dataset: Dataset):
    """Write manifest + blocks + phenotype + covariates, recording checksums."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    man = dataset.manifest
    man.validate()

    n = man.samples
    if len(dataset.blocks) != man.block_count:
        raise BlockstoreError("block count mismatch with manifest")
    checksums = {}
    for i, ((start, stop), block) in enumerate(zip(man.block_ranges, dataset.blocks)):
        block = np.asarray(block, dtype=np.int8)
        if block.shape != (n, stop - start):
            raise BlockstoreError(f"block {i} shape mismatch")
        _check_dosages(block, f"block {i}")
        data = _encode(GENO_MAGIC, block)
        (directory / f"block_{i}.ppgb").write_bytes(data)
        checksums[f"block_{i}.ppgb"] = checksum64(data)

    pheno = np.asarray(dataset.phenotype, dtype=np.float64).reshape(n, 1)
    if not np.isfinite(pheno).all():
        raise BlockstoreError("phenotype contains non-finite values")
    data = _encode(REAL_MAGIC, pheno)
    (directory / "pheno.ppgv").write_bytes(data)
    checksums["pheno.ppgv"] = checksum64(data)

    covar = np.asarray(dataset.covariates, dtype=np.float64).reshape(n, man.covariates)
    if not np.isfinite(covar).all():
        raise BlockstoreError("covariates contain non-finite values")
    data = _encode(REAL_MAGIC, covar)
    (directory / "covar.ppgv").write_bytes(data)
    checksums["covar.ppgv"] = checksum64(data)

    man.checksums = checksums
    (directory / "manifest.json").write_text(man.to_json())


def read_dataset(directory) -> Dataset:
    """Read and validate a dataset directory; any corruption raises."""
    directory = Path(directory)
    man_path = directory / "manifest.json"
    if not man_path.exists():
        raise BlockstoreError(f"missing manifest in {directory}")
    man = Manifest.from_json(man_path.read_text())
    man.validate()

    def load(name: str) -> bytes:
        path = directory / name
        if not path.exists():
            raise BlockstoreError(f"missing file {path}")
        data = path.read_bytes()
        if checksum64(data) != man.checksums.get(name):
            raise BlockstoreError(f"checksum mismatch for {path}")
        return data

    blocks = []
    for i, (start, stop) in enumerate(man.block_ranges):
        name = f"block_{i}.ppgb"
        block = _decode(GENO_MAGIC, load(name), np.int8, name)
        if block.shape != (man.samples, stop - start):
            raise BlockstoreError(f"{name}: shape disagrees with manifest")
        _check_dosages(block, name)
        blocks.append(block)

    pheno = _decode(REAL_MAGIC, load("pheno.ppgv"), np.float64, "pheno.ppgv")
    if pheno.shape != (man.samples, 1):
        raise BlockstoreError("pheno.ppgv: shape disagrees with manifest")
    covar = _decode(REAL_MAGIC, load("covar.ppgv"), np.float64, "covar.ppgv")
    if covar.shape != (man.samples, man.covariates):
        raise BlockstoreError("covar.ppgv: shape disagrees with manifest")

    return Dataset(man, blocks, pheno.ravel(), covar)


def build_dataset(genotypes, phenotype, covariates, blocks: int = 1, party_id: int = 0) -> Dataset:
    """Assemble an in-memory Dataset, tiling the SNPs into `blocks` storage blocks."""
    genotypes = np.asarray(genotypes, dtype=np.int8)
    n, m = genotypes.shape
    covariates = np.asarray(covariates, dtype=np.float64).reshape(n, -1)
    sizes = split_evenly(m, blocks)
    edges = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    ranges = [(int(edges[i]), int(edges[i + 1])) for i in range(blocks)]
    man = Manifest(FORMAT_VERSION, party_id, n, m, covariates.shape[1], ranges)
    parts = [genotypes[:, a:b] for a, b in ranges]
    return Dataset(man, parts, np.asarray(phenotype, dtype=np.float64).ravel(), covariates)


def horizontal_split(dataset: Dataset, parties: int, seed: int) -> list:
    """Partition samples into `parties` row-disjoint datasets of near-equal
    size after a seeded shuffle.  SNP columns are identical across parties."""
    if parties < 2:
        raise BlockstoreError("need at least 2 parties")
    n = dataset.manifest.samples
    if parties > n:
        raise BlockstoreError("more parties than samples")

    rng = rng_for(derive_key(key_from_int(seed), Phase.BLOCK_PLAN, (parties,)))
    order = rng.permutation(n)
    sizes = np.array(split_evenly(n, parties))
    edges = np.concatenate([[0], np.cumsum(sizes)])

    out = []
    geno = dataset.genotypes
    for p in range(parties):
        rows = np.sort(order[edges[p]:edges[p + 1]])
        sub = build_dataset(
            geno[rows],
            dataset.phenotype[rows],
            dataset.covariates[rows],
            blocks=dataset.manifest.block_count,
            party_id=p + 1,
        )
        out.append(sub)
    return out
