"""Deterministic shared-randomness fabric.

Every obfuscation object in the pipeline -- rectangular orthonormal masks,
scalar masks, zero-sum shares, block boundaries, fold assignments -- is a
pure function of a 32-byte root secret and a derivation path.  Parties that
hold the same root independently generate bit-identical objects; the server
holds no key and can generate none of them.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np


class Phase(IntEnum):
    """Registered derivation domains, one per protocol use of randomness."""

    QC_SHARES = 1
    MOMENT_SHARES = 2
    PROJ_ROW = 3        # O_Z
    PROJ_COL = 4        # per-block column mask at the projection stage
    PHENO_SCALAR = 5    # k1
    L0_ROW = 6          # per-fold row mask
    L0_COL = 7          # per-(block, ridge-index) column mask
    L0_SCALAR = 8       # k_y
    ASSOC_SCALAR = 9    # per-SNP k_x
    FOLD_PLAN = 10
    BLOCK_PLAN = 11
    NONCE = 12          # retry domain for degenerate draws


@dataclass(frozen=True)
class SeedKey:
    """A 32-byte key plus the path that produced it from the root."""

    root: bytes
    path: tuple = ()

    def __post_init__(self):
        if len(self.root) != 32:
            raise ValueError("key material must be exactly 32 bytes")

    def fingerprint(self) -> str:
        """Short public identifier of the key; safe to log and compare."""
        return hashlib.blake2b(b"fp" + self.root, digest_size=8).hexdigest()


def key_from_int(seed: int) -> SeedKey:
    """Stretch an integer seed into a root key (CLI convenience)."""
    material = hashlib.blake2b(
        seed.to_bytes(16, "little", signed=True), digest_size=32
    ).digest()
    return SeedKey(material)


def derive_key(key: SeedKey, phase: Phase, indices: tuple = ()) -> SeedKey:
    """Derive the child key for (phase, indices).

    Deterministic and order-independent: the child depends only on the
    parent material and the canonical encoding of the path element.
    """
    phase = Phase(phase)
    enc = phase.to_bytes(2, "little") + len(indices).to_bytes(2, "little")
    for ix in indices:
        enc += int(ix).to_bytes(8, "little", signed=True)
    child = hashlib.blake2b(enc, key=key.root, digest_size=32).digest()
    return SeedKey(child, key.path + ((int(phase), tuple(int(i) for i in indices)),))


def rng_for(key: SeedKey) -> np.random.Generator:
    """NumPy generator seeded from a derived key (same-binary determinism)."""
    return np.random.default_rng(np.random.SeedSequence(int.from_bytes(key.root, "little")))


@dataclass(frozen=True)
class OrthMask:
    """Rectangular (rows > cols) matrix with exactly orthonormal columns."""

    entries: np.ndarray

    @property
    def rows(self) -> int:
        return self.entries.shape[0]

    @property
    def cols(self) -> int:
        return self.entries.shape[1]


def gen_orth_mask(key: SeedKey, n: int, pad: int) -> OrthMask:
    """Orthonormalize a key-seeded Gaussian draw into an (n+pad) x n mask.

    The column sign is fixed by the R diagonal so the result is Haar
    distributed.  A rank-deficient draw (probability ~0) retries under an
    incremented nonce rather than failing.
    """
    if n < 1 or pad < 1:
        raise ValueError("mask needs n >= 1 and pad >= 1")
    nonce = 0
    while True:
        rng = rng_for(key if nonce == 0 else derive_key(key, Phase.NONCE, (nonce,)))
        raw = rng.standard_normal((n + pad, n))
        q, r = np.linalg.qr(raw)
        diag = np.diag(r)
        if np.all(np.abs(diag) > 1e-10):
            return OrthMask(q * np.sign(diag))
        nonce += 1


@dataclass(frozen=True)
class ScalarMask:
    value: float

    def __post_init__(self):
        if not (1.0 <= abs(self.value) <= 2.0):
            raise ValueError("scalar mask magnitude must lie in [1, 2]")


def gen_scalar_mask(key: SeedKey) -> ScalarMask:
    rng = rng_for(key)
    magnitude = rng.uniform(1.0, 2.0)
    sign = 1.0 if rng.integers(0, 2) == 1 else -1.0
    return ScalarMask(sign * magnitude)


@dataclass(frozen=True)
class ZeroSumShare:
    """One party's additive pad; all P pads wrap-sum to zero exactly."""

    party: int
    payload: np.ndarray  # int64, wrapping arithmetic


def _uniform_i64(key: SeedKey, shape) -> np.ndarray:
    rng = rng_for(key)
    return rng.integers(0, 1 << 64, size=shape, dtype=np.uint64).view(np.int64)


def gen_zero_sum_share(key: SeedKey, party: int, parties: int, shape) -> ZeroSumShare:
    """Share for `party` (1-based).  Parties 1..P-1 draw uniform pads; party P
    takes the wrapping negation of their sum.  Everything derives from the
    shared key, so any holder can reproduce any share."""
    if not (1 <= party <= parties):
        raise ValueError("party id out of range")
    if party < parties:
        return ZeroSumShare(party, _uniform_i64(derive_key(key, Phase.QC_SHARES, (party,)), shape))
    total = np.zeros(shape, dtype=np.uint64)
    for q in range(1, parties):
        total += _uniform_i64(derive_key(key, Phase.QC_SHARES, (q,)), shape).view(np.uint64)
    return ZeroSumShare(party, (-total).view(np.int64))


@dataclass(frozen=True)
class PartitionPlan:
    """Shared SNP-block boundaries and per-party fold labels."""

    block_ranges: tuple            # ((start, stop), ...) tiling [0, M)
    fold_labels: tuple             # per party: int array of labels in 1..K
    folds: int

    @property
    def blocks(self) -> int:
        return len(self.block_ranges)

    @property
    def parties(self) -> int:
        return len(self.fold_labels)

    def party_fold_rows(self, party: int, fold: int) -> np.ndarray:
        """Local row indices of `party` (1-based) landing in `fold`."""
        return np.flatnonzero(self.fold_labels[party - 1] == fold)

    def fold_size(self, fold: int) -> int:
        return sum(int(np.sum(lbl == fold)) for lbl in self.fold_labels)

    def fold_sizes(self) -> np.ndarray:
        return np.array([self.fold_size(k) for k in range(1, self.folds + 1)])

    def party_fold_offset(self, party: int, fold: int) -> int:
        """Start of the party's contiguous span in the global fold ordering.

        Global fold rows are ordered by global sample index, and party rows
        are contiguous in the global order, so each party occupies one slice
        of every fold.
        """
        return sum(
            int(np.sum(self.fold_labels[q] == fold)) for q in range(party - 1)
        )

    def training_folds(self, fold: int) -> tuple:
        """Folds the level-0/level-1 fits train on for held-out `fold`.

        K = 1 is the foldless test mode: the single fold trains and predicts
        on itself.
        """
        if self.folds == 1:
            return (1,)
        return tuple(k for k in range(1, self.folds + 1) if k != fold)

    def global_fold_labels(self) -> np.ndarray:
        return np.concatenate(self.fold_labels)


class MaskSuite:
    """Every obfuscation object of one run, derived on demand and cached.

    Dimensions are fixed at construction time (post-QC block widths, fold
    sizes, total sample count) so that all parties instantiate identical
    suites from the shared root.
    """

    def __init__(self, key: SeedKey, n_total: int, block_widths, fold_sizes,
                 pad_min: int = 8, pad_frac: float = 0.1):
        self.key = key
        self.n_total = int(n_total)
        self.block_widths = tuple(int(w) for w in block_widths)
        self.fold_sizes = tuple(int(s) for s in fold_sizes)
        self.pad_min = pad_min
        self.pad_frac = pad_frac
        self._cache = {}

    def _pad(self, n: int) -> int:
        from .config import pad_for

        return pad_for(n, self.pad_min, self.pad_frac)

    def _mask(self, tag, phase: Phase, indices: tuple, n: int) -> OrthMask:
        if tag not in self._cache:
            self._cache[tag] = gen_orth_mask(
                derive_key(self.key, phase, indices), n, self._pad(n)
            )
        return self._cache[tag]

    def proj_row(self) -> OrthMask:
        """O applied on the sample axis during projection; shared by all parties."""
        return self._mask(("pz",), Phase.PROJ_ROW, (), self.n_total)

    def proj_col(self, block: int) -> OrthMask:
        return self._mask(("px", block), Phase.PROJ_COL, (block,), self.block_widths[block])

    def pheno_scalar(self) -> float:
        return gen_scalar_mask(derive_key(self.key, Phase.PHENO_SCALAR)).value

    def l0_row(self, fold: int) -> OrthMask:
        """Per-fold row mask.  Indexed by fold only: level-1 Gram assembly
        multiplies prediction columns of different ridge indices within one
        fold, which only cancels when they share the row mask."""
        return self._mask(("ry", fold), Phase.L0_ROW, (fold,), self.fold_sizes[fold - 1])

    def l0_col(self, block: int, ridge: int) -> OrthMask:
        """Per-(block, ridge-index) column mask.  Fold-independent so the
        server can accumulate training-fold Gram vectors blockwise."""
        return self._mask(
            ("rx", block, ridge), Phase.L0_COL, (block, ridge), self.block_widths[block]
        )

    def l0_scalar(self) -> float:
        return gen_scalar_mask(derive_key(self.key, Phase.L0_SCALAR)).value

    def assoc_scalar(self, snp: int) -> float:
        return gen_scalar_mask(derive_key(self.key, Phase.ASSOC_SCALAR, (snp,))).value

    def digest(self) -> bytes:
        """Consistency checksum over derived-key headers and dimensions.

        Parties with different roots (or different post-QC dimensions) get
        different digests, which the server compares to fail fast.  The
        digest never exposes key material.
        """
        h = hashlib.blake2b(digest_size=32)
        for phase in (Phase.PROJ_ROW, Phase.L0_ROW, Phase.L0_SCALAR, Phase.ASSOC_SCALAR):
            h.update(derive_key(self.key, phase).fingerprint().encode())
        h.update(repr((self.n_total, self.block_widths, self.fold_sizes,
                       self.pad_min, self.pad_frac)).encode())
        return h.digest()


def split_evenly(total: int, parts: int) -> list:
    """Sizes of an as-even-as-possible split; remainder goes one to each of
    the earliest parts."""
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def plan_partition(key: SeedKey, snps: int, blocks: int, party_sizes, folds: int) -> PartitionPlan:
    """Derive the shared block tiling and seeded fold assignment.

    Every (party, fold) cell must be populated, so K may not exceed the
    smallest party's sample count.
    """
    if blocks > snps:
        raise ValueError("more blocks than SNPs")
    if folds > min(party_sizes):
        raise ValueError("folds exceed the smallest party's sample count")

    sizes = split_evenly(snps, blocks)
    edges = np.concatenate([[0], np.cumsum(sizes)])
    ranges = tuple((int(edges[i]), int(edges[i + 1])) for i in range(blocks))

    labels = []
    for p, n_p in enumerate(party_sizes, start=1):
        base = np.arange(n_p) % folds + 1
        rng = rng_for(derive_key(key, Phase.FOLD_PLAN, (p,)))
        labels.append(base[rng.permutation(n_p)])
    return PartitionPlan(ranges, tuple(labels), folds)
