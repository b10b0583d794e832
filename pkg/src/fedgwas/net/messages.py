"""Payload schemas for every protocol phase.

One pack/unpack pair per message keeps the wire format positional and
explicit; both transports (TCP and the in-process simulator) move exactly
these bytes.
"""

from __future__ import annotations

import numpy as np

from ..ridge_l0 import Level0PartyPayload
from ..transform import EncodedBundle, MaskedProjection
from .frames import Reader, Writer


def pack_hello(party: int, parties: int, fingerprint: bytes) -> bytes:
    return Writer().u32(party).u32(parties).raw(fingerprint).getvalue()


def unpack_hello(payload: bytes):
    r = Reader(payload)
    party, parties, fingerprint = r.u32(), r.u32(), r.raw()
    r.done()
    return party, parties, fingerprint


def pack_counts(masked: np.ndarray) -> bytes:
    return Writer().array(np.asarray(masked, dtype=np.int64)).getvalue()


def unpack_counts(payload: bytes) -> np.ndarray:
    r = Reader(payload)
    table = r.array()
    r.done()
    return table


def pack_moments(digest: bytes, masked_sums: np.ndarray) -> bytes:
    return Writer().raw(digest).array(np.asarray(masked_sums, dtype=np.int64)).getvalue()


def unpack_moments(payload: bytes):
    r = Reader(payload)
    digest, sums = r.raw(), r.array()
    r.done()
    return digest, sums


def pack_moment_totals(totals: np.ndarray) -> bytes:
    return Writer().array(np.asarray(totals, dtype=np.int64)).getvalue()


unpack_moment_totals = unpack_counts


def pack_proj_upload(bundle: EncodedBundle) -> bytes:
    w = Writer().u32(bundle.party)
    w.array(bundle.masked_covariates)
    w.array(bundle.masked_pheno)
    w.u32(len(bundle.masked_blocks))
    for block in bundle.masked_blocks:
        w.array(block)
    return w.getvalue()


def unpack_proj_upload(payload: bytes) -> EncodedBundle:
    r = Reader(payload)
    party = r.u32()
    cov = r.array()
    pheno = r.array()
    blocks = [r.array() for _ in range(r.u32())]
    r.done()
    return EncodedBundle(party, cov, blocks, pheno)


def pack_proj_result(proj: MaskedProjection) -> bytes:
    w = Writer().u32(proj.party)
    w.array(proj.pheno)
    w.u32(len(proj.blocks))
    for block in proj.blocks:
        w.array(block)
    return w.getvalue()


def unpack_proj_result(payload: bytes) -> MaskedProjection:
    r = Reader(payload)
    party = r.u32()
    pheno = r.array()
    blocks = [r.array() for _ in range(r.u32())]
    r.done()
    return MaskedProjection(party, blocks, pheno)


def pack_l0_payload(p: Level0PartyPayload) -> bytes:
    w = Writer().u32(p.party).u32(p.folds).u32(p.blocks).u32(p.ridge_params)
    for k in range(1, p.folds + 1):
        w.array(p.pheno[k])
    for k in range(1, p.folds + 1):
        for b in range(1, p.blocks + 1):
            for r in range(1, p.ridge_params + 1):
                w.array(p.inv_gram[(k, b, r)])
                w.array(p.design[(k, b, r)])
    return w.getvalue()


def unpack_l0_payload(payload: bytes) -> Level0PartyPayload:
    rd = Reader(payload)
    party, folds, blocks, ridge_params = rd.u32(), rd.u32(), rd.u32(), rd.u32()
    out = Level0PartyPayload(party, folds, blocks, ridge_params)
    for k in range(1, folds + 1):
        out.pheno[k] = rd.array()
    for k in range(1, folds + 1):
        for b in range(1, blocks + 1):
            for r in range(1, ridge_params + 1):
                out.inv_gram[(k, b, r)] = rd.array()
                out.design[(k, b, r)] = rd.array()
    rd.done()
    return out


def pack_rstar(rstar: int) -> bytes:
    return Writer().u32(rstar).getvalue()


def unpack_rstar(payload: bytes) -> int:
    r = Reader(payload)
    rstar = r.u32()
    r.done()
    return rstar


def pack_assoc_upload(party: int, per_fold: dict) -> bytes:
    w = Writer().u32(party).u32(len(per_fold))
    for k in sorted(per_fold):
        w.array(per_fold[k])
    return w.getvalue()


def unpack_assoc_upload(payload: bytes):
    r = Reader(payload)
    party = r.u32()
    per_fold = {k: r.array() for k in range(1, r.u32() + 1)}
    r.done()
    return party, per_fold


def pack_assoc_result(ratios: np.ndarray, degenerate: np.ndarray, rstar: int) -> bytes:
    return (
        Writer()
        .u32(rstar)
        .array(np.asarray(ratios, dtype=np.float64))
        .array(np.asarray(degenerate, dtype=np.int64))
        .getvalue()
    )


def unpack_assoc_result(payload: bytes):
    r = Reader(payload)
    rstar = r.u32()
    ratios = r.array()
    degenerate = r.array().astype(bool)
    r.done()
    return rstar, ratios, degenerate


def pack_abort(reason: str) -> bytes:
    return reason.encode()


def unpack_abort(payload: bytes) -> str:
    return payload.decode(errors="replace")
