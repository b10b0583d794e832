"""Transport-agnostic party and server runtimes.

Both the TCP wire mode and the in-process simulator move the exact same
frames through the exact same phase sequence; they differ only in the
channel object the runtimes hold.  The server computes strictly behind
barriers, in party-id order, so results are deterministic and identical
across transports.

The server side never touches the shared seed, any mask, or any sample
count: its inputs are masked matrices whose row dimensions are padded, and
its one scalar output per SNP is the mask-cancelled ratio that parties
rescale by (N - C) themselves.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .. import assoc, qc, ridge_l0, ridge_l1, transform
from ..blockstore import Dataset
from ..config import RunConfig
from ..qc import QcThresholds
from ..ridge_l0 import block_widths, build_schedule
from ..seedcraft import (MaskSuite, Phase, SeedKey, derive_key,
                         gen_zero_sum_share, plan_partition)
from ..transform import Onboarding
from .frames import PhaseTag
from . import messages


class ProtocolError(Exception):
    pass


class ProtocolAbort(ProtocolError):
    """Raised when the peer broadcast an ABORT."""


class PhaseTimeout(ProtocolError):
    pass


class Channel:
    """One logical party<->server link carrying whole frames.

    Concrete transports implement _send_bytes/_recv_frame; this base class
    adds per-message-type byte accounting on both directions.
    """

    def __init__(self):
        self.sent = {}
        self.received = {}

    def send(self, msg_type: int, payload: bytes):
        from .frames import encode_frame

        data = encode_frame(msg_type, payload)
        key = PhaseTag(msg_type).name
        self.sent[key] = self.sent.get(key, 0) + len(data)
        self._send_bytes(data)

    def recv(self, deadline: float):
        frame = self._recv_frame(deadline)
        key = PhaseTag(frame.msg_type).name
        self.received[key] = self.received.get(key, 0) + len(frame.payload) + 14
        return frame

    def _send_bytes(self, data: bytes):
        raise NotImplementedError

    def _recv_frame(self, deadline: float):
        raise NotImplementedError


def expect(frame, msg_type: PhaseTag):
    """Reject any message arriving out of phase; surface peer aborts."""
    if frame.msg_type == PhaseTag.ABORT:
        raise ProtocolAbort(messages.unpack_abort(frame.payload))
    if frame.msg_type != msg_type:
        raise ProtocolError(
            f"out-of-phase message: expected {msg_type.name}, "
            f"got {PhaseTag(frame.msg_type).name}"
        )
    return frame


@dataclass
class PartyResult:
    results: assoc.AssocResultSet
    channel: Channel


class PartyRuntime:
    """Executes every party-side phase over one channel."""

    def __init__(self, channel: Channel, dataset: Dataset, config: RunConfig,
                 onboarding: Onboarding, root: SeedKey,
                 thresholds: QcThresholds = QcThresholds()):
        self.channel = channel
        self.dataset = dataset
        self.config = config
        self.onboarding = onboarding
        self.root = root
        self.thresholds = thresholds
        self.party = dataset.manifest.party_id
        if onboarding.party_sizes[self.party - 1] != dataset.manifest.samples:
            raise ProtocolError("onboarding sizes disagree with the local dataset")

    def _deadline(self) -> float:
        return time.monotonic() + self.config.timeout_secs

    def _recv(self, msg_type: PhaseTag):
        return expect(self.channel.recv(self._deadline()), msg_type)

    def run(self) -> PartyResult:
        """All party phases; failures are announced to the server via ABORT."""
        try:
            return self._run()
        except ProtocolAbort:
            raise
        except Exception as exc:
            try:
                self.channel.send(PhaseTag.ABORT, messages.pack_abort(str(exc)))
            except Exception:
                pass
            raise

    def _run(self) -> PartyResult:
        cfg = self.config
        n_total = self.onboarding.n_total
        plan_root = self.root if cfg.plan_seed is None else _plan_root(cfg)

        # HELLO
        self.channel.send(
            PhaseTag.HELLO,
            messages.pack_hello(self.party, cfg.parties, cfg.public_fingerprint()),
        )
        self._recv(PhaseTag.HELLO)

        # QC: masked exact counts up, global counts back
        counts = qc.local_counts(self.dataset.genotypes)
        share = gen_zero_sum_share(
            derive_key(self.root, Phase.QC_SHARES), self.party, cfg.parties,
            counts.table.shape,
        )
        self.channel.send(PhaseTag.QC_COUNTS, messages.pack_counts(qc.mask_counts(counts, share)))
        global_counts = qc.AlleleCounts(
            messages.unpack_counts(self._recv(PhaseTag.QC_REPORT).payload)
        )
        report = qc.apply_filters(global_counts, self.thresholds, n_total)
        kept = report.kept_indices
        if kept.size < cfg.blocks:
            raise ProtocolError("QC left fewer SNPs than blocks")
        kept_counts = qc.AlleleCounts(global_counts.table[kept])

        # shared plan and mask suite over the post-QC dimensions
        widths = block_widths(kept.size, cfg.blocks)
        plan = plan_partition(plan_root, kept.size, cfg.blocks,
                              self.onboarding.party_sizes, cfg.folds)
        suite = MaskSuite(self.root, n_total, widths, plan.fold_sizes(),
                          cfg.pad_min, cfg.pad_frac)

        # MOMENTS: digest check plus fixed-point phenotype sums
        mshare = gen_zero_sum_share(
            derive_key(self.root, Phase.MOMENT_SHARES), self.party, cfg.parties, (2,)
        )
        self.channel.send(
            PhaseTag.MOMENTS,
            messages.pack_moments(
                suite.digest(), transform.pheno_moment_message(self.dataset.phenotype, mshare)
            ),
        )
        totals = messages.unpack_moment_totals(self._recv(PhaseTag.MOMENTS).payload)
        stats = transform.aggregate_moments(totals, kept_counts, n_total)

        # PROJECTION
        imputed = transform.mean_impute(self.dataset.genotypes[:, kept], stats.snp_mean)
        edges = np.concatenate([[0], np.cumsum(widths)]).astype(int)
        blocks = [imputed[:, edges[b]:edges[b + 1]] for b in range(cfg.blocks)]
        bundle = transform.encode_inputs(
            self.party, blocks, self.dataset.covariates, self.dataset.phenotype,
            suite, self.onboarding,
        )
        self.channel.send(PhaseTag.PROJ_UPLOAD, messages.pack_proj_upload(bundle))
        projected = messages.unpack_proj_result(self._recv(PhaseTag.PROJ_RESULT).payload)
        if projected.party != self.party or projected.pheno.shape != bundle.masked_pheno.shape:
            raise ProtocolError("projection result is not this party's slice")
        x_blocks, y_tilde = transform.decode_projection(
            self.party, projected, suite, self.onboarding, stats
        )

        # LEVEL 0
        schedule = build_schedule(kept.size, cfg.blocks, cfg.ridge_params,
                                  cfg.admm_rho, cfg.admm_iters, cfg.cgd_iters)
        payload = ridge_l0.party_prepare_payload(
            self.party, x_blocks, y_tilde, plan, suite, schedule, cfg.parties
        )
        self.channel.send(PhaseTag.L0_PAYLOAD, messages.pack_l0_payload(payload))
        self._recv(PhaseTag.L0_DONE)

        # LEVEL 1 outcome
        rstar = messages.unpack_rstar(self._recv(PhaseTag.L1_DONE_RSTAR).payload)

        # ASSOCIATION
        scalars = assoc.snp_scalars(suite, kept.size)
        upload = assoc.party_mask_snps(self.party, x_blocks, plan, suite, scalars)
        self.channel.send(
            PhaseTag.ASSOC_UPLOAD, messages.pack_assoc_upload(self.party, upload.per_fold)
        )
        rstar2, ratios, degenerate = messages.unpack_assoc_result(
            self._recv(PhaseTag.ASSOC_RESULT).payload
        )
        if rstar2 != rstar:
            raise ProtocolError("r* changed between phases")

        stats_list = assoc.finalize_stats(ratios, degenerate, n_total,
                                          self.dataset.manifest.covariates)
        results = assoc.AssocResultSet(
            stats_list,
            rstar=rstar,
            samples=n_total,
            snps=kept.size,
            covariates=self.dataset.manifest.covariates,
            seed_fingerprint=self.root.fingerprint(),
        )
        return PartyResult(results, self.channel)


def _plan_root(cfg: RunConfig):
    from ..seedcraft import key_from_int

    return key_from_int(cfg.effective_plan_seed)


def invert_padded(masked_width: int, pad_min: int, pad_frac: float) -> int:
    """Recover n from n + pad_for(n); well-defined because the padded width
    is strictly increasing in n."""
    from ..config import pad_for

    n = masked_width - pad_min
    while n > 0 and n + pad_for(n, pad_min, pad_frac) > masked_width:
        n -= 1
    if n <= 0 or n + pad_for(n, pad_min, pad_frac) != masked_width:
        raise ProtocolError(f"masked width {masked_width} matches no valid block width")
    return n


@dataclass
class ServerOutcome:
    rstar: int
    ratios: np.ndarray
    degenerate: np.ndarray
    global_counts: np.ndarray
    byte_report: list = field(default_factory=list)
    audit_shapes: list = field(default_factory=list)


class ServerRuntime:
    """Phase sequencer over per-party links; all computation happens here,
    behind all-party barriers, in party-id order."""

    def __init__(self, config: RunConfig, links: dict,
                 thresholds: QcThresholds = QcThresholds()):
        self.config = config
        self.links = dict(sorted(links.items()))
        self.thresholds = thresholds
        self.audit_shapes = []

    def _deadline(self) -> float:
        return time.monotonic() + self.config.timeout_secs

    def _audit(self, party: int, phase: str, obj):
        arrays = obj if isinstance(obj, (list, tuple)) else [obj]
        for arr in arrays:
            if hasattr(arr, "shape") and getattr(arr, "ndim", 0) >= 1:
                self.audit_shapes.append((phase, party, tuple(arr.shape)))

    def abort_all(self, reason: str):
        payload = messages.pack_abort(reason)
        for link in self.links.values():
            try:
                link.send(PhaseTag.ABORT, payload)
            except Exception:
                pass

    def _collect(self, msg_type: PhaseTag) -> dict:
        """Barrier: one message of the given type from every party."""
        deadline = self._deadline()
        out = {}
        for party, link in self.links.items():
            try:
                frame = expect(link.recv(deadline), msg_type)
            except ProtocolError:
                self.abort_all(f"phase {msg_type.name} failed for party {party}")
                raise
            out[party] = frame.payload
        return out

    def _broadcast(self, msg_type: PhaseTag, payloads):
        if isinstance(payloads, (bytes, bytearray)):
            payloads = {party: payloads for party in self.links}
        for party, link in self.links.items():
            link.send(msg_type, payloads[party])

    def run(self) -> ServerOutcome:
        cfg = self.config

        # HELLO barrier: ids already fixed by the link map; check agreement
        hellos = self._collect(PhaseTag.HELLO)
        fingerprints = set()
        for party, payload in hellos.items():
            pid, parties, fingerprint = messages.unpack_hello(payload)
            if pid != party:
                self.abort_all("HELLO party id does not match its link")
                raise ProtocolError("HELLO party id mismatch")
            if parties != cfg.parties:
                self.abort_all("party count disagreement")
                raise ProtocolError("party count disagreement")
            fingerprints.add(fingerprint)
        if len(fingerprints) != 1 or fingerprints != {cfg.public_fingerprint()}:
            self.abort_all("configuration fingerprint mismatch")
            raise ProtocolError("configuration fingerprint mismatch")
        self._broadcast(PhaseTag.HELLO, b"")

        # QC: aggregate and broadcast; the filter decision is the parties'
        # (it needs N, which the server does not hold)
        masked = self._collect(PhaseTag.QC_COUNTS)
        tables = []
        for party, payload in masked.items():
            table = messages.unpack_counts(payload)
            self._audit(party, "QC_COUNTS", table)
            tables.append(table)
        global_counts = qc.unmask_sum(tables)
        self._broadcast(PhaseTag.QC_REPORT, messages.pack_counts(global_counts.table))

        # MOMENTS: digest equality check, then exact fixed-point totals
        entries = self._collect(PhaseTag.MOMENTS)
        digests = set()
        sums = []
        for party, payload in entries.items():
            digest, masked_sums = messages.unpack_moments(payload)
            digests.add(digest)
            sums.append(masked_sums)
        if len(digests) != 1:
            self.abort_all("mask consistency checksum mismatch")
            raise ProtocolError("mask consistency checksum mismatch")
        totals = transform.aggregate_pheno_sums(sums)
        self._broadcast(PhaseTag.MOMENTS, messages.pack_moment_totals(totals))

        # PROJECTION
        uploads = self._collect(PhaseTag.PROJ_UPLOAD)
        bundles = []
        for party, payload in uploads.items():
            bundle = messages.unpack_proj_upload(payload)
            if bundle.party != party:
                self.abort_all("projection upload id mismatch")
                raise ProtocolError("projection upload id mismatch")
            self._audit(party, "PROJ_UPLOAD",
                        [bundle.masked_covariates, bundle.masked_pheno, *bundle.masked_blocks])
            bundles.append(bundle)
        try:
            projected = transform.server_project(bundles)
        except transform.TransformError as exc:
            self.abort_all(str(exc))
            raise
        self._broadcast(
            PhaseTag.PROJ_RESULT,
            {party: messages.pack_proj_result(projected[party]) for party in self.links},
        )

        # the post-QC SNP count is public: the column pad rule is strictly
        # monotone, so masked block widths invert to the true block widths
        kept_total = sum(
            invert_padded(block.shape[1], cfg.pad_min, cfg.pad_frac)
            for block in bundles[0].masked_blocks
        )

        # LEVEL 0
        schedule = build_schedule(kept_total, cfg.blocks, cfg.ridge_params,
                                  cfg.admm_rho, cfg.admm_iters, cfg.cgd_iters)
        raw = self._collect(PhaseTag.L0_PAYLOAD)
        payloads = []
        for party, payload in raw.items():
            parsed = messages.unpack_l0_payload(payload)
            if parsed.party != party:
                self.abort_all("level-0 upload id mismatch")
                raise ProtocolError("level-0 upload id mismatch")
            self._audit(party, "L0_PAYLOAD",
                        list(parsed.pheno.values()) + list(parsed.design.values())
                        + list(parsed.inv_gram.values()))
            payloads.append(parsed)
        try:
            level0 = ridge_l0.solve_level0(payloads, schedule, cfg.folds, cfg.parties)
        except ridge_l0.SolverError as exc:
            self.abort_all(str(exc))
            raise
        self._broadcast(PhaseTag.L0_DONE, b"")

        # LEVEL 1
        level1 = ridge_l1.solve_level1(level0, payloads, schedule, cfg.folds)
        self._broadcast(PhaseTag.L1_DONE_RSTAR, messages.pack_rstar(level1.rstar))

        # ASSOCIATION
        raw = self._collect(PhaseTag.ASSOC_UPLOAD)
        uploads = []
        for party, payload in raw.items():
            pid, per_fold = messages.unpack_assoc_upload(payload)
            if pid != party:
                self.abort_all("association upload id mismatch")
                raise ProtocolError("association upload id mismatch")
            self._audit(party, "ASSOC_UPLOAD", list(per_fold.values()))
            uploads.append(assoc.MaskedSnpUpload(pid, per_fold))
        ratios, degenerate = assoc.server_chi2_ratios(
            uploads, payloads, level1.fold_predictions, cfg.folds
        )
        self._broadcast(
            PhaseTag.ASSOC_RESULT,
            messages.pack_assoc_result(ratios, degenerate, level1.rstar),
        )

        return ServerOutcome(
            rstar=level1.rstar,
            ratios=ratios,
            degenerate=degenerate,
            global_counts=global_counts.table,
            byte_report=self.byte_report(),
            audit_shapes=self.audit_shapes,
        )

    def byte_report(self) -> list:
        """(phase, party, sent, received) from the server's perspective."""
        rows = []
        for party, link in self.links.items():
            phases = sorted(set(link.sent) | set(link.received),
                            key=lambda name: PhaseTag[name].value)
            for phase in phases:
                rows.append(
                    (phase, party, link.sent.get(phase, 0), link.received.get(phase, 0))
                )
        return rows
