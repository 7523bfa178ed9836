"""
Module: messages.py
The closed set of messages that may cross a center boundary, and their
versioned binary envelope:

    magic "FDCV" | version u16 | variant tag u16 | payload length u64 | payload

Only summaries travel: feature moments, q x F weight matrices, eigen-packs,
the global basis and low-dimensional scores. No variant has a field that can
hold per-subject raw features or covariates.
"""

import re
import struct
from dataclasses import dataclass
from typing import ClassVar, Dict, List, Optional, Sequence, Tuple, Type

import numpy as np

from codec import Reader, pack_floats, pack_matrix, pack_text, pack_u64
from confound_admm import ConsensusWeights
from constants import COORDINATOR_ID, WIRE_MAGIC, WIRE_VERSION
from exceptions import ProtocolError
from fpca import GlobalBasis, LocalEigenpack, Scores
from stats_core import FeatureMoments, GlobalStats

_ENVELOPE = struct.Struct("<4sHHQ")

PHASE_ORDER = {"stats": 0, "admm": 1, "pca": 2, "scores": 3}

MESSAGE_TYPES: Dict[int, Type["Message"]] = {}

Shape = Tuple[int, ...]


def register(tag: int):
    def decorate(cls):
        if tag in MESSAGE_TYPES:
            raise ValueError(f"variant tag {tag} registered twice")
        cls.TAG = tag
        MESSAGE_TYPES[tag] = cls
        return cls

    return decorate


def handler_name(message_type: Type["Message"]) -> str:
    """StatsShare -> on_stats_share"""
    return "on_" + re.sub(r"(?<!^)(?=[A-Z])", "_", message_type.__name__).lower()


class Message:
    TAG: ClassVar[int]
    PHASE: ClassVar[str]

    @property
    def sender(self) -> str:
        return getattr(self, "center_id", COORDINATOR_ID)

    @property
    def round(self) -> int:
        return 0

    def sort_key(self) -> Tuple[int, int, str]:
        return PHASE_ORDER[self.PHASE], self.round, self.sender

    def payload(self) -> bytes:
        raise NotImplementedError

    @classmethod
    def parse(cls, reader: Reader) -> "Message":
        raise NotImplementedError

    def payload_shapes(self) -> List[Tuple[str, Shape]]:
        """Dimensions of every array in the payload, for privacy audits."""
        raise NotImplementedError


@register(1)
@dataclass(frozen=True)
class StatsShare(Message):
    PHASE = "stats"

    center_id: str
    moments: FeatureMoments

    def payload(self) -> bytes:
        return pack_text(self.center_id) + self.moments.to_bytes()

    @classmethod
    def parse(cls, reader: Reader) -> "StatsShare":
        return cls(reader.text(), FeatureMoments.read(reader))

    def payload_shapes(self):
        return [("mean", self.moments.mean.shape), ("m2", self.moments.m2.shape)]


@register(2)
@dataclass(frozen=True)
class GlobalStatsBroadcast(Message):
    PHASE = "stats"

    stats: GlobalStats

    def payload(self) -> bytes:
        return self.stats.to_bytes()

    @classmethod
    def parse(cls, reader: Reader) -> "GlobalStatsBroadcast":
        return cls(GlobalStats.read(reader))

    def payload_shapes(self):
        return [("mean", self.stats.mean.shape), ("std", self.stats.std.shape)]


@register(3)
@dataclass(frozen=True)
class AdmmLocalShare(Message):
    PHASE = "admm"

    center_id: str
    admm_round: int
    w: np.ndarray
    alpha: np.ndarray

    @property
    def round(self) -> int:
        return self.admm_round

    def payload(self) -> bytes:
        return (
            pack_text(self.center_id)
            + pack_u64(self.admm_round)
            + pack_matrix(self.w)
            + pack_matrix(self.alpha)
        )

    @classmethod
    def parse(cls, reader: Reader) -> "AdmmLocalShare":
        return cls(reader.text(), reader.u64(), reader.matrix(), reader.matrix())

    def payload_shapes(self):
        return [("w", np.shape(self.w)), ("alpha", np.shape(self.alpha))]


@register(4)
@dataclass(frozen=True)
class ConsensusBroadcast(Message):
    PHASE = "admm"

    admm_round: int
    w_tilde: ConsensusWeights
    rho: float
    final: bool = False

    @property
    def round(self) -> int:
        return self.admm_round

    def payload(self) -> bytes:
        return (
            pack_u64(self.admm_round, int(self.final))
            + pack_floats(np.array([self.rho]))
            + self.w_tilde.to_bytes()
        )

    @classmethod
    def parse(cls, reader: Reader) -> "ConsensusBroadcast":
        admm_round, final = reader.u64(2)
        (rho,) = reader.floats(1)
        return cls(admm_round, ConsensusWeights(reader.matrix()), float(rho), bool(final))

    def payload_shapes(self):
        return [("w_tilde", self.w_tilde.w_tilde.shape)]


@register(5)
@dataclass(frozen=True)
class EigenpackShare(Message):
    PHASE = "pca"

    center_id: str
    pack: LocalEigenpack

    def payload(self) -> bytes:
        return pack_text(self.center_id) + self.pack.to_bytes()

    @classmethod
    def parse(cls, reader: Reader) -> "EigenpackShare":
        return cls(reader.text(), LocalEigenpack.read(reader))

    def payload_shapes(self):
        return [
            ("basis", self.pack.basis.shape),
            ("singular_values", self.pack.singular_values.shape),
        ]


@register(6)
@dataclass(frozen=True)
class GlobalBasisBroadcast(Message):
    PHASE = "pca"

    basis: GlobalBasis

    def payload(self) -> bytes:
        return self.basis.to_bytes()

    @classmethod
    def parse(cls, reader: Reader) -> "GlobalBasisBroadcast":
        return cls(GlobalBasis.read(reader))

    def payload_shapes(self):
        return [
            ("components", self.basis.components.shape),
            ("eigenvalues", self.basis.eigenvalues.shape),
        ]


@register(7)
@dataclass(frozen=True)
class ScoresShare(Message):
    PHASE = "scores"

    center_id: str
    scores: Scores
    labels: Optional[Sequence[str]] = None

    def payload(self) -> bytes:
        labels = list(self.labels) if self.labels is not None else []
        return (
            pack_text(self.center_id)
            + pack_matrix(self.scores.coords)
            + pack_u64(len(labels))
            + b"".join(pack_text(label) for label in labels)
        )

    @classmethod
    def parse(cls, reader: Reader) -> "ScoresShare":
        center_id = reader.text()
        coords = reader.matrix()
        labels = [reader.text() for _ in range(reader.u64())]
        return cls(center_id, Scores(coords), tuple(labels) or None)

    def payload_shapes(self):
        return [("coords", self.scores.coords.shape)]


def is_legal(message: object) -> bool:
    return type(message) in MESSAGE_TYPES.values()


def encode_message(message: Message) -> bytes:
    if not is_legal(message):
        raise ProtocolError(f"{type(message).__name__} is not a wire message")
    payload = message.payload()
    return _ENVELOPE.pack(WIRE_MAGIC, WIRE_VERSION, message.TAG, len(payload)) + payload


def decode_message(data: bytes) -> Message:
    if len(data) < _ENVELOPE.size:
        raise ProtocolError(f"envelope needs {_ENVELOPE.size} bytes, got {len(data)}")
    magic, version, tag, length = _ENVELOPE.unpack_from(data)
    if magic != WIRE_MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != WIRE_VERSION:
        raise ProtocolError(f"unsupported wire version {version}")
    if tag not in MESSAGE_TYPES:
        raise ProtocolError(f"unknown variant tag {tag}")
    payload = data[_ENVELOPE.size :]
    if len(payload) != length:
        raise ProtocolError(f"payload length {len(payload)} does not match header {length}")
    reader = Reader(payload)
    message = MESSAGE_TYPES[tag].parse(reader)
    reader.finish()
    return message


def payload_length(data: bytes) -> int:
    return len(data) - _ENVELOPE.size
