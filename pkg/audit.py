"""
Module: audit.py
Privacy audit of a pipeline transcript.

The audit checks three things per message: that it is one of the legal wire
variants, that none of its arrays has the shape of a center's raw feature or
covariate block (N_c x F, N_c x q), and that its serialized payload does not
exceed the size bound of its variant.
"""

from dataclasses import dataclass, field
from typing import Iterable, List, Mapping, Optional, Set, Tuple

import numpy as np

from constants import DEFAULT_SCORE_COLUMN_CAP
from messages import (
    AdmmLocalShare,
    ConsensusBroadcast,
    EigenpackShare,
    GlobalBasisBroadcast,
    GlobalStatsBroadcast,
    ScoresShare,
    StatsShare,
    encode_message,
    is_legal,
    payload_length,
)
from transports import Delivery


@dataclass(frozen=True)
class AuditEntry:
    index: int
    variant: str
    sender: str
    shapes: Tuple[Tuple[str, Tuple[int, ...]], ...]
    payload_bytes: Optional[int]
    bound_bytes: Optional[int]
    notes: Tuple[str, ...] = ()


@dataclass
class AuditReport:
    entries: List[AuditEntry] = field(default_factory=list)
    violations: List[str] = field(default_factory=list)
    subject_indexed_payloads: int = 0

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_text(self) -> str:
        lines = [
            f"passed = {str(self.passed).lower()}",
            f"messages = {len(self.entries)}",
            f"subject_indexed_payloads = {self.subject_indexed_payloads}",
        ]
        lines += [f"violation = {violation}" for violation in self.violations]
        for entry in self.entries:
            dims = " ".join(f"{name}={'x'.join(map(str, shape))}" for name, shape in entry.shapes)
            size = "" if entry.payload_bytes is None else f" bytes={entry.payload_bytes}/{entry.bound_bytes}"
            notes = "".join(f" note={note}" for note in entry.notes)
            lines.append(f"message[{entry.index}] = {entry.variant} from {entry.sender} {dims}{size}{notes}")
        return "\n".join(lines) + "\n"


def _text_bytes(text: str) -> int:
    return 4 + len(text.encode("utf-8"))


def payload_bound(
    message,
    n_features: int,
    n_covariates: int,
    center_sizes: Mapping[str, int],
    score_cap: int = DEFAULT_SCORE_COLUMN_CAP,
) -> int:
    """Largest payload, in bytes, the variant may legally occupy."""
    f, q = n_features, n_covariates
    if isinstance(message, StatsShare):
        return _text_bytes(message.center_id) + 16 + 16 * f
    if isinstance(message, GlobalStatsBroadcast):
        return 16 + 16 * f
    if isinstance(message, AdmmLocalShare):
        return _text_bytes(message.center_id) + 8 + 2 * (16 + 8 * q * f)
    if isinstance(message, ConsensusBroadcast):
        return 16 + 8 + 16 + 8 * q * f
    if isinstance(message, EigenpackShare):
        k = min(center_sizes.get(message.center_id, 0), f)
        return _text_bytes(message.center_id) + 24 + 8 * k + 8 * f * k + 8
    if isinstance(message, GlobalBasisBroadcast):
        m = min(f, sum(center_sizes.values()))
        return 16 + 16 * m + 8 * f * m
    if isinstance(message, ScoresShare):
        n = center_sizes.get(message.center_id, 0)
        labels = sum(_text_bytes(label) for label in (message.labels or ()))
        return _text_bytes(message.center_id) + 16 + 8 * n * score_cap + 8 + labels
    raise TypeError(f"no size bound for {type(message).__name__}")


def _raw_shapes(message) -> List[Tuple[str, Tuple[int, ...]]]:
    """Array shapes found on an arbitrary object, for reporting illegal variants."""
    attributes = getattr(message, "__dict__", {})
    return [(name, np.shape(value)) for name, value in attributes.items() if isinstance(value, np.ndarray)]


def audit_privacy(
    transcript: Iterable,
    center_sizes: Mapping[str, int],
    n_features: int,
    n_covariates: int,
    score_cap: int = DEFAULT_SCORE_COLUMN_CAP,
) -> AuditReport:
    """
    Audit a transcript of Delivery records (or bare messages). Report-only:
    problems are collected as violations, never raised.
    """
    forbidden: Set[Tuple[int, int]] = set()
    for n in center_sizes.values():
        forbidden.add((n, n_features))
        forbidden.add((n, n_covariates))

    report = AuditReport()
    for index, item in enumerate(transcript):
        message = item.message if isinstance(item, Delivery) else item
        variant = type(message).__name__
        sender = getattr(message, "center_id", None) or getattr(item, "sender", "?")

        if not is_legal(message):
            report.violations.append(f"message[{index}]: {variant} is not a legal wire variant")
            report.entries.append(AuditEntry(index, variant, str(sender), tuple(_raw_shapes(message)), None, None))
            continue

        sender = message.sender
        shapes = tuple(message.payload_shapes())
        notes: List[str] = []
        if isinstance(message, ScoresShare):
            report.subject_indexed_payloads += 1
            columns = message.scores.coords.shape[1]
            notes.append(f"derived {columns}-column projection of corrected data")
            if columns > score_cap:
                report.violations.append(
                    f"message[{index}]: scores from {sender} have {columns} columns (cap {score_cap})"
                )
        else:
            for name, shape in shapes:
                if len(shape) == 2 and tuple(shape) in forbidden:
                    report.violations.append(
                        f"message[{index}]: {variant}.{name} from {sender} has subject-level shape {shape}"
                    )

        data = item.data if isinstance(item, Delivery) else encode_message(message)
        size = payload_length(data)
        bound = payload_bound(message, n_features, n_covariates, center_sizes, score_cap)
        if size > bound:
            report.violations.append(
                f"message[{index}]: {variant} from {sender} is {size} bytes, bound {bound}"
            )
        report.entries.append(AuditEntry(index, variant, sender, shapes, size, bound, tuple(notes)))
    return report


def audit_result(result, n_covariates: int, score_cap: int = DEFAULT_SCORE_COLUMN_CAP) -> AuditReport:
    """Audit the transcript of an AnalysisResult against its own center sizes."""
    return audit_privacy(
        result.transcript,
        result.center_sizes,
        result.global_stats.n_features,
        n_covariates,
        score_cap,
    )
