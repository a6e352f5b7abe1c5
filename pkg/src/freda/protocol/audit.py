"""Structural privacy checks over a completed run transcript.

The audit re-reads what actually went over the wire and verifies that
every message respects the protocol's information-flow rules: kinds
appear only in their phase and between their legitimate parties, data
matrices reach the aggregator only in lifted (width d > P) form, seed
exchanges never touch the aggregator, and no payload contains a planted
sentinel value from a plaintext dataset.

These are confidentiality *shape* checks, not a cryptographic proof:
they catch protocol bugs and deliberate plaintext injection, which is
what the test harness exercises.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .messages import AGGREGATOR, TARGET, Message, Transcript

__all__ = ["AuditReport", "AuditViolation", "audit_transcript"]


@dataclass(frozen=True)
class AuditViolation:
    seq: int
    rule: str
    detail: str


@dataclass
class AuditReport:
    """Outcome of auditing one transcript."""

    violations: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    stats: dict = field(default_factory=dict)

    @property
    def clean(self) -> bool:
        return not self.violations

    def add(self, seq: int, rule: str, detail: str) -> None:
        self.violations.append(AuditViolation(seq, rule, detail))

    def to_text(self) -> str:
        lines = [f"audit: {'clean' if self.clean else 'VIOLATIONS FOUND'}"]
        for v in self.violations:
            lines.append(f"  seq={v.seq} rule={v.rule}: {v.detail}")
        for note in self.notes:
            lines.append(f"  note: {note}")
        for key in sorted(self.stats):
            lines.append(f"  stat {key}: {self.stats[key]}")
        return "\n".join(lines) + "\n"


def _role(party: int) -> str:
    if party == AGGREGATOR:
        return "agg"
    if party == TARGET:
        return "target"
    return "source"


# kind -> (phase name, allowed sender roles, allowed receiver roles)
_RULES = {
    "mask-seed": ("SETUP", {"source"}, {"source", "target"}),
    "pair-seed": ("SETUP", {"source"}, {"source"}),
    "stats-share": ("SETUP", {"source"}, {"agg"}),
    "label-stats-share": ("SETUP", {"source"}, {"agg"}),
    "drop-columns": ("SETUP", {"agg"}, {"source", "target"}),
    "pooled-stats": ("SETUP", {"agg"}, {"source", "target"}),
    "pooled-label-stats": ("SETUP", {"agg"}, {"source", "target"}),
    "hp-share": ("FEATURE_MODELS", {"source"}, {"agg"}),
    "hp-fallback": ("FEATURE_MODELS", {"source"}, {"agg"}),
    "masked-block": ("FEATURE_MODELS", {"source", "target"}, {"agg"}),
    "mean-operator-block": ("FEATURE_MODELS", {"agg"}, {"source"}),
    "encoding-inverse": ("FEATURE_MODELS", {"agg"}, {"target"}),
    "variance": ("FEATURE_MODELS", {"agg"}, {"target"}),
    "mean-share": ("FEATURE_MODELS", {"source"}, {"target"}),
    "weights": ("WEIGHTS", {"target"}, {"agg"}),
    "weights-broadcast": ("WEIGHTS", {"agg"}, {"source"}),
    "grid-share": ("LAMBDA_SEARCH", {"source"}, {"agg"}),
    "lambda-grid": ("LAMBDA_SEARCH", {"agg"}, {"source", "target"}),
    "model": (("LAMBDA_SEARCH", "FINAL_TRAINING"), {"agg"}, {"source"}),
    "model-share": (("LAMBDA_SEARCH", "FINAL_TRAINING"), {"source"}, {"agg"}),
    "grid-model": ("LAMBDA_SEARCH", {"agg"}, {"target"}),
    "lambda-pred": ("LAMBDA_SEARCH", {"target"}, {"agg"}),
    "lambda-broadcast": ("LAMBDA_SEARCH", {"agg"}, {"source"}),
    "final-model": ("FINAL_TRAINING", {"agg"}, {"target"}),
    "metrics": ("RESULTS", {"target"}, {"agg"}),
}


def _check_structure(msg: Message, report: AuditReport) -> None:
    rule = _RULES.get(msg.base_kind)
    if rule is None:
        report.add(msg.seq, "unknown-kind", f"kind {msg.kind!r} is not part of the protocol")
        return
    phases, senders, receivers = rule
    if isinstance(phases, str):
        phases = (phases,)
    if msg.phase.name not in phases:
        report.add(
            msg.seq,
            "wrong-phase",
            f"{msg.kind!r} sent in {msg.phase.name}, allowed in {'/'.join(phases)}",
        )
    if _role(msg.sender) not in senders:
        report.add(
            msg.seq,
            "bad-sender",
            f"{msg.kind!r} sent by {_role(msg.sender)} ({msg.sender})",
        )
    if _role(msg.receiver) not in receivers:
        report.add(
            msg.seq,
            "bad-receiver",
            f"{msg.kind!r} delivered to {_role(msg.receiver)} ({msg.receiver})",
        )


def audit_transcript(
    transcript: Transcript,
    sentinels: Sequence[float] = (),
    expected_d: Optional[int] = None,
    expected_p: Optional[int] = None,
) -> AuditReport:
    """Check a transcript against the protocol's information-flow rules.

    ``sentinels`` are magic values planted in plaintext test datasets; a
    payload containing any of them verbatim means raw data leaked.
    ``expected_d`` and ``expected_p`` default to the transcript metadata
    when present.  Transcripts loaded without inline payloads keep all
    structural checks; value scans are skipped with a note.
    """
    report = AuditReport()
    if expected_d is None:
        expected_d = transcript.meta.get("d")
    if expected_p is None:
        expected_p = transcript.meta.get("p")
    digest_only = set(transcript.meta.get("digest_only_seqs", ()))

    last_seq_by_sender = {}
    seen_seq = set()
    masked_widths = []
    agg_matrix_count = 0

    for msg in transcript.messages:
        if msg.seq in seen_seq:
            report.add(msg.seq, "duplicate-seq", "sequence number appears twice")
        seen_seq.add(msg.seq)
        prev = last_seq_by_sender.get(msg.sender)
        if prev is not None and msg.seq <= prev:
            report.add(
                msg.seq,
                "seq-order",
                f"sender {msg.sender} went from seq {prev} to {msg.seq}",
            )
        last_seq_by_sender[msg.sender] = msg.seq

        _check_structure(msg, report)

        if msg.receiver == AGGREGATOR and msg.base_kind in ("mask-seed", "pair-seed"):
            report.add(msg.seq, "seed-to-aggregator", f"{msg.kind!r} reached the aggregator")

        if msg.receiver == AGGREGATOR and msg.payload.ndim == 2:
            agg_matrix_count += 1
            if msg.base_kind != "masked-block":
                report.add(
                    msg.seq,
                    "plain-matrix-to-aggregator",
                    f"2-d payload of kind {msg.kind!r} sent to the aggregator",
                )
            width = msg.payload.shape[1]
            masked_widths.append(width)
            if expected_d is not None and width != expected_d:
                report.add(
                    msg.seq,
                    "masked-width",
                    f"aggregator-received matrix has width {width}, configured d={expected_d}",
                )
            if expected_p is not None and width <= expected_p:
                report.add(
                    msg.seq,
                    "unmasked-width",
                    f"aggregator-received matrix width {width} <= feature count {expected_p}",
                )

        if msg.receiver == TARGET and msg.phase.name == "FEATURE_MODELS":
            if msg.base_kind not in ("mean-share", "encoding-inverse", "variance"):
                report.add(
                    msg.seq,
                    "target-leak",
                    f"target received {msg.kind!r} during feature modeling",
                )

    values = np.asarray(list(sentinels), dtype=np.float64)
    if values.size:
        scannable = [m for m in transcript.messages if m.seq not in digest_only]
        if len(scannable) < len(transcript.messages):
            report.notes.append(
                f"sentinel scan skipped for {len(transcript.messages) - len(scannable)} "
                "digest-only message(s); rerun with inline payloads for full coverage"
            )
        for msg in scannable:
            hits = np.isin(msg.payload.ravel(), values)
            if hits.any():
                leaked = np.unique(msg.payload.ravel()[hits])
                report.add(
                    msg.seq,
                    "sentinel",
                    f"payload of kind {msg.kind!r} contains planted value(s) "
                    f"{leaked.tolist()}",
                )

    report.stats["messages"] = len(transcript.messages)
    report.stats["aggregator_matrices"] = agg_matrix_count
    if masked_widths:
        report.stats["masked_width_min"] = int(min(masked_widths))
        report.stats["masked_width_max"] = int(max(masked_widths))
    if expected_d is not None:
        report.stats["configured_d"] = int(expected_d)
    if expected_p is not None:
        report.stats["feature_count"] = int(expected_p)
    return report
