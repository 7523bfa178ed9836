"""
Module: federation.py
Coordinator and center state machines for the three-phase pipeline
(standardization, confound correction, federated PCA) and the drivers that
run them over a transport.

Topology is a star: centers send summaries to the coordinator, the coordinator
broadcasts global quantities back. Every phase is a barrier, and every
reduction orders the contributions by their content, so neither delivery order
nor the assignment of center ids changes a result.
"""

import hashlib
import logging
import time
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from codec import pack_floats, pack_matrix, pack_text, pack_u64
from confound_admm import (
    AdmmConfig,
    AdmmDiagnostics,
    ConsensusWeights,
    LocalAdmmState,
    LocalSolver,
    balance_rho,
    check_finite,
    consensus_update,
    correct,
    dual_update,
    primal_residuals,
    weights_mse,
)
from constants import (
    BROADCAST,
    COORDINATOR_ID,
    DEFAULT_SCORE_COLUMN_CAP,
    DEFAULT_VARIANCE_THRESHOLD,
)
from covariates import derive_covariates
from exceptions import (
    ConfigError,
    DuplicateSender,
    NoCenters,
    PhaseTimeout,
    ProtocolError,
    ShapeMismatch,
    UnexpectedPhase,
)
from fpca import GlobalBasis, Scores, aggregate, local_eigendecomposition, project
from message_router import MessageRouter
from messages import (
    AdmmLocalShare,
    ConsensusBroadcast,
    EigenpackShare,
    GlobalBasisBroadcast,
    GlobalStatsBroadcast,
    Message,
    ScoresShare,
    StatsShare,
    encode_message,
)
from stats_core import CenterData, GlobalStats, accumulate_local, finalize, merge_all, standardize
from transports import Delivery, InProcessTransport, Transport

logger = logging.getLogger(__name__)

Outbound = Tuple[str, Message]
Truth = Union[np.ndarray, Callable[[GlobalStats], np.ndarray]]


class PipelineConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    admm: AdmmConfig = Field(default_factory=AdmmConfig)
    variance_threshold: float = Field(DEFAULT_VARIANCE_THRESHOLD, gt=0, le=1)
    global_variance_threshold: float = Field(DEFAULT_VARIANCE_THRESHOLD, gt=0, le=1)
    m_components: Optional[int] = Field(None, ge=1)
    covariate_spec: Tuple[str, ...] = ()
    share_scores: bool = False
    score_column_cap: int = Field(DEFAULT_SCORE_COLUMN_CAP, ge=1)

    @field_validator("covariate_spec", mode="before")
    @classmethod
    def _split_terms(cls, value):
        if isinstance(value, str):
            return tuple(term.strip() for term in value.split(",") if term.strip())
        return value

    @model_validator(mode="after")
    def _scores_fit_cap(self):
        if self.share_scores and self.m_components and self.m_components > self.score_column_cap:
            raise ValueError(
                f"m_components={self.m_components} exceeds the score column cap "
                f"{self.score_column_cap}"
            )
        return self


class Phase(str, Enum):
    STANDARDIZE = "standardize"
    ADMM = "admm"
    PCA = "pca"
    SCORES = "scores"
    DONE = "done"


@dataclass
class NodeState:
    phase: Phase = Phase.STANDARDIZE
    admm_round: int = 0
    received: Counter = field(default_factory=Counter)

    @property
    def label(self) -> str:
        if self.phase is Phase.ADMM:
            return f"admm({self.admm_round})"
        return self.phase.value


class CoordinatorState(NodeState):
    pass


class CenterState(NodeState):
    pass


@dataclass
class AnalysisResult:
    global_stats: GlobalStats
    w_tilde: ConsensusWeights
    trace: List[AdmmDiagnostics]
    basis: GlobalBasis
    center_sizes: Dict[str, int]
    scores: Dict[str, Scores] = field(default_factory=dict)
    labels: Dict[str, Optional[Tuple[str, ...]]] = field(default_factory=dict)
    transcript: List[Delivery] = field(default_factory=list)

    @property
    def admm_rounds(self) -> int:
        return len(self.trace)

    def to_bytes(self) -> bytes:
        """Canonical encoding of every numeric result (transcript excluded)."""
        trace = np.array(
            [
                [d.iteration, d.max_primal_residual, np.nan if d.mse_vs_truth is None else d.mse_vs_truth, d.rho]
                for d in self.trace
            ]
        ).reshape(-1, 4)
        parts = [
            self.global_stats.to_bytes(),
            self.w_tilde.to_bytes(),
            pack_matrix(trace),
            self.basis.to_bytes(),
            pack_u64(len(self.scores)),
        ]
        for center_id in sorted(self.scores):
            labels = self.labels.get(center_id) or ()
            parts.append(pack_text(center_id) + pack_matrix(self.scores[center_id].coords))
            parts.append(pack_u64(len(labels)) + b"".join(pack_text(label) for label in labels))
        return b"".join(parts)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def transcript_digest(self) -> str:
        sha = hashlib.sha256()
        for delivery in self.transcript:
            sha.update(delivery.data)
        return sha.hexdigest()

    def pooled_scores(self) -> Tuple[List[str], np.ndarray, List[Optional[str]]]:
        """Scores stacked in center-id order, with the owning center and label per row."""
        owners, rows, labels = [], [], []
        for center_id in sorted(self.scores):
            coords = self.scores[center_id].coords
            rows.append(coords)
            owners.extend([center_id] * coords.shape[0])
            tags = self.labels.get(center_id)
            labels.extend(tags if tags else [None] * coords.shape[0])
        pooled = np.vstack(rows) if rows else np.zeros((0, self.basis.n_components))
        return owners, pooled, labels


class CoordinatorNode:
    """The aggregation point: merges statistics, averages ADMM states and eigen-packs."""

    def __init__(
        self,
        center_ids: Sequence[str],
        config: PipelineConfig,
        w_truth: Optional[Truth] = None,
    ):
        if not center_ids:
            raise NoCenters("the coordinator needs at least one center")
        if len(set(center_ids)) != len(center_ids):
            raise ConfigError(f"center ids are not unique: {list(center_ids)}")
        self.node_id = COORDINATOR_ID
        self.center_ids = sorted(center_ids)
        self.config = config
        self.w_truth = w_truth
        self.state = CoordinatorState()
        self.rho = config.admm.rho
        self._inbox: Dict[str, Message] = {}

        self.global_stats: Optional[GlobalStats] = None
        self.center_sizes: Dict[str, int] = {}
        self.consensus: Optional[ConsensusWeights] = None
        self.trace: List[AdmmDiagnostics] = []
        self.basis: Optional[GlobalBasis] = None
        self.scores: Dict[str, Scores] = {}
        self.labels: Dict[str, Optional[Tuple[str, ...]]] = {}
        self.router = MessageRouter(self)

    @property
    def done(self) -> bool:
        return self.state.phase is Phase.DONE

    def missing(self) -> List[str]:
        return [c for c in self.center_ids if c not in self._inbox]

    def start(self) -> List[Outbound]:
        return []

    def _accept(self, sender: str, message: Message, phase: Phase, admm_round: Optional[int] = None) -> None:
        """Validate a contribution for the current barrier; leaves state untouched on error."""
        if sender not in self.center_ids:
            raise ProtocolError(f"message from unknown center '{sender}'")
        if message.sender != sender:
            raise ProtocolError(f"'{sender}' delivered a message signed by '{message.sender}'")
        if self.state.phase is not phase or (admm_round is not None and message.round != admm_round):
            raise UnexpectedPhase(
                f"{type(message).__name__} (round {message.round}) from '{sender}' "
                f"while coordinator is in {self.state.label}"
            )
        if sender in self._inbox:
            raise DuplicateSender(
                f"second {type(message).__name__} from '{sender}' in {self.state.label}"
            )
        self._inbox[sender] = message
        self.state.received[phase.value] += 1

    def _barrier(self) -> Optional[List[Message]]:
        """All contributions in center-id order once every center has reported."""
        if self.missing():
            return None
        contributions = [self._inbox[c] for c in self.center_ids]
        self._inbox = {}
        return contributions

    def _advance(self, phase: Phase, admm_round: int = 0) -> None:
        logger.info("coordinator: %s -> %s", self.state.label, phase.value)
        self.state.phase = phase
        self.state.admm_round = admm_round

    def on_stats_share(self, sender: str, message: StatsShare) -> List[Outbound]:
        self._accept(sender, message, Phase.STANDARDIZE)
        shares = self._barrier()
        if shares is None:
            return []
        self.center_sizes = {share.center_id: share.moments.count for share in shares}
        self.global_stats = finalize(merge_all(share.moments for share in shares))
        if callable(self.w_truth):
            self.w_truth = self.w_truth(self.global_stats)
        self._advance(Phase.ADMM, 1)
        return [(BROADCAST, GlobalStatsBroadcast(self.global_stats))]

    def on_admm_local_share(self, sender: str, message: AdmmLocalShare) -> List[Outbound]:
        self._accept(sender, message, Phase.ADMM, self.state.admm_round)
        shares = self._barrier()
        if shares is None:
            return []
        admm = self.config.admm
        k = self.state.admm_round
        states = [LocalAdmmState(share.w, share.alpha) for share in shares]
        previous = self.consensus
        self.consensus = consensus_update(states, self.rho)
        check_finite(self.consensus, k, self.rho)

        residuals = primal_residuals(states, self.consensus)
        mse = weights_mse(self.w_truth, self.consensus.w_tilde) if self.w_truth is not None else None
        self.trace.append(AdmmDiagnostics(k, float(residuals.max()), mse, self.rho))
        logger.info("admm round %d: max primal residual %.3e", k, residuals.max())

        final = k >= admm.iterations
        if not final and admm.tolerance is not None and residuals.max() < admm.tolerance:
            logger.warning("admm stopped early at round %d (tolerance %.1e)", k, admm.tolerance)
            final = True

        next_rho = self.rho
        if admm.adaptive_rho and not final:
            before = previous.w_tilde if previous is not None else np.zeros_like(self.consensus.w_tilde)
            dual = self.rho * np.sqrt(len(states)) * np.linalg.norm(self.consensus.w_tilde - before)
            next_rho = balance_rho(self.rho, float(np.linalg.norm(np.sort(residuals))), float(dual))

        broadcast = ConsensusBroadcast(k, self.consensus, next_rho, final)
        self.rho = next_rho
        if final:
            self._advance(Phase.PCA)
        else:
            self._advance(Phase.ADMM, k + 1)
        return [(BROADCAST, broadcast)]

    def on_eigenpack_share(self, sender: str, message: EigenpackShare) -> List[Outbound]:
        self._accept(sender, message, Phase.PCA)
        shares = self._barrier()
        if shares is None:
            return []
        self.basis = aggregate(
            [share.pack for share in shares],
            m=self.config.m_components,
            variance_threshold=self.config.global_variance_threshold,
        )
        logger.info("global basis: %d components", self.basis.n_components)
        self._advance(Phase.SCORES if self.config.share_scores else Phase.DONE)
        return [(BROADCAST, GlobalBasisBroadcast(self.basis))]

    def on_scores_share(self, sender: str, message: ScoresShare) -> List[Outbound]:
        columns = message.scores.coords.shape[1]
        if columns > self.config.score_column_cap:
            raise ProtocolError(
                f"scores from '{sender}' have {columns} columns, cap is {self.config.score_column_cap}"
            )
        self._accept(sender, message, Phase.SCORES)
        shares = self._barrier()
        if shares is None:
            return []
        for share in shares:
            self.scores[share.center_id] = share.scores
            self.labels[share.center_id] = tuple(share.labels) if share.labels else None
        self._advance(Phase.DONE)
        return []

    def result(self, transcript: Sequence[Delivery] = ()) -> AnalysisResult:
        if not self.done:
            raise UnexpectedPhase(f"no result yet; coordinator is in {self.state.label}")
        return AnalysisResult(
            global_stats=self.global_stats,
            w_tilde=self.consensus,
            trace=list(self.trace),
            basis=self.basis,
            center_sizes=dict(self.center_sizes),
            scores=dict(self.scores),
            labels=dict(self.labels),
            transcript=list(transcript),
        )


def center_covariates(data: CenterData, config: PipelineConfig) -> np.ndarray:
    if not config.covariate_spec:
        return data.y
    if data.covariate_table is None:
        raise ConfigError("covariate_spec is set but the center has no covariate table")
    return derive_covariates(data.covariate_table, config.covariate_spec)


class CenterNode:
    """A data-holding site. Its rows never leave this object."""

    def __init__(self, center_id: str, data: CenterData, config: PipelineConfig):
        self.node_id = center_id
        self.data = data
        self.config = config
        self.y = center_covariates(data, config)
        if self.y.shape[0] != data.n_subjects:
            raise ShapeMismatch(
                f"center '{center_id}': {self.y.shape[0]} covariate rows for {data.n_subjects} subjects"
            )
        self.state = CenterState()
        self.solver: Optional[LocalSolver] = None
        self.w: Optional[np.ndarray] = None
        self.alpha: Optional[np.ndarray] = None
        self.corrected: Optional[np.ndarray] = None
        self.basis: Optional[GlobalBasis] = None
        self.router = MessageRouter(self)

    @property
    def done(self) -> bool:
        return self.state.phase is Phase.DONE

    def missing(self) -> List[str]:
        return [] if self.done else [COORDINATOR_ID]

    def _expect(self, sender: str, message: Message, phase: Phase) -> None:
        if sender != COORDINATOR_ID:
            raise ProtocolError(f"center '{self.node_id}' got a broadcast from '{sender}'")
        if self.state.phase is not phase:
            raise UnexpectedPhase(
                f"{type(message).__name__} while center '{self.node_id}' is in {self.state.label}"
            )
        if phase is Phase.ADMM and message.round != self.state.admm_round:
            raise UnexpectedPhase(
                f"consensus for round {message.round} while center '{self.node_id}' "
                f"is in round {self.state.admm_round}"
            )
        self.state.received[phase.value] += 1

    def _share_local(self) -> List[Outbound]:
        share = AdmmLocalShare(self.node_id, self.state.admm_round, self.w, self.alpha)
        return [(COORDINATOR_ID, share)]

    def start(self) -> List[Outbound]:
        if self.state.received or self.state.phase is not Phase.STANDARDIZE:
            raise UnexpectedPhase(f"center '{self.node_id}' already started")
        return [(COORDINATOR_ID, StatsShare(self.node_id, accumulate_local(self.data.x)))]

    def on_global_stats_broadcast(self, sender: str, message: GlobalStatsBroadcast) -> List[Outbound]:
        self._expect(sender, message, Phase.STANDARDIZE)
        xhat = standardize(self.data.x, message.stats)
        self.solver = LocalSolver(xhat, self.y, self.config.admm.rho)
        self.alpha = np.zeros(self.solver.shape)
        self.w = self.solver.solve(np.zeros(self.solver.shape), self.alpha)
        self.state.phase, self.state.admm_round = Phase.ADMM, 1
        return self._share_local()

    def on_consensus_broadcast(self, sender: str, message: ConsensusBroadcast) -> List[Outbound]:
        self._expect(sender, message, Phase.ADMM)
        consensus = message.w_tilde
        self.alpha = dual_update(self.alpha, self.w, consensus, self.solver.rho)

        if message.final:
            self.corrected = correct(self.solver.xhat, self.y, consensus).e
            pack = local_eigendecomposition(self.corrected, self.config.variance_threshold)
            self.state.phase = Phase.PCA
            return [(COORDINATOR_ID, EigenpackShare(self.node_id, pack))]

        self.solver.set_rho(message.rho)
        self.state.admm_round += 1
        self.w = self.solver.solve(consensus.w_tilde, self.alpha)
        return self._share_local()

    def on_global_basis_broadcast(self, sender: str, message: GlobalBasisBroadcast) -> List[Outbound]:
        self._expect(sender, message, Phase.PCA)
        self.basis = message.basis
        self.state.phase = Phase.DONE
        if not self.config.share_scores:
            return []
        cap = self.config.score_column_cap
        if self.basis.n_components > cap:
            logger.warning(
                "%s: global basis has %d components, sharing scores for the first %d only",
                self.node_id,
                self.basis.n_components,
                cap,
            )
        coords = project(self.corrected, self.basis).coords[:, :cap]
        labels = tuple(self.data.labels) if self.data.labels is not None else None
        return [(COORDINATOR_ID, ScoresShare(self.node_id, Scores(coords), labels))]


def handle_message(node, sender: str, message: Message):
    """Apply one message to a node; returns (node, outbound messages)."""
    outbound = node.router.dispatch(sender, message)
    return node, outbound


def expected_message_count(n_centers: int, admm_rounds: int, share_scores: bool) -> int:
    per_phase = n_centers + 1
    return per_phase + admm_rounds * per_phase + per_phase + (n_centers if share_scores else 0)


def default_center_ids(n_centers: int) -> List[str]:
    return [f"center-{index:03d}" for index in range(n_centers)]


def _check_dimensions(nodes: Dict[str, CenterNode]) -> None:
    shapes = {cid: (node.data.x.shape[1], node.y.shape[1]) for cid, node in nodes.items()}
    if len(set(shapes.values())) > 1:
        raise ShapeMismatch(f"centers disagree on (features, covariates): {shapes}")


def _deliver(
    delivery: Delivery,
    coordinator: CoordinatorNode,
    centers: Dict[str, CenterNode],
) -> List[Outbound]:
    if delivery.recipient == COORDINATOR_ID:
        targets = [coordinator]
    elif delivery.recipient == BROADCAST:
        targets = [centers[cid] for cid in sorted(centers)]
    else:
        targets = [centers[delivery.recipient]]
    outbound = []
    for node in targets:
        _, produced = handle_message(node, delivery.sender, delivery.message)
        outbound.extend(produced)
    return outbound


def run_pipeline(
    centers: Sequence[CenterData],
    config: PipelineConfig,
    transport: Optional[Transport] = None,
    center_ids: Optional[Sequence[str]] = None,
    w_truth: Optional[Truth] = None,
) -> AnalysisResult:
    """
    Simulate the whole federation in one process: every center and the
    coordinator exchange encoded messages through `transport`.
    """
    if not centers:
        raise NoCenters("run_pipeline needs at least one center")
    center_ids = list(center_ids) if center_ids is not None else default_center_ids(len(centers))
    if len(center_ids) != len(centers):
        raise ConfigError(f"{len(center_ids)} center ids for {len(centers)} centers")
    transport = transport if transport is not None else InProcessTransport()

    coordinator = CoordinatorNode(center_ids, config, w_truth)
    nodes = {cid: CenterNode(cid, data, config) for cid, data in zip(center_ids, centers)}
    _check_dimensions(nodes)

    for cid in sorted(nodes):
        for to, message in nodes[cid].start():
            transport.send(to, message)

    transcript: List[Delivery] = []
    while True:
        batch = transport.receive()
        if not batch:
            if coordinator.done:
                break
            raise PhaseTimeout(coordinator.state.label, coordinator.missing())
        for delivery in sorted(batch, key=Delivery.sort_key):
            transcript.append(delivery)
            for to, message in _deliver(delivery, coordinator, nodes):
                transport.send(to, message)

    return coordinator.result(transcript)


def run_node(
    node,
    transport: Transport,
    timeout: float = 600.0,
    poll_interval: float = 0.5,
) -> List[Delivery]:
    """
    Drive a single node against a shared transport until it is done, polling
    for new messages. Returns the deliveries the node received and sent.
    """
    transcript: List[Delivery] = []

    def send_all(outbound: List[Outbound]) -> None:
        for to, message in outbound:
            transport.send(to, message)
            transcript.append(Delivery(message.sender, to, message, encode_message(message)))

    send_all(node.start())
    deadline = time.monotonic() + timeout
    while not node.done:
        batch = transport.receive()
        if not batch:
            if time.monotonic() > deadline:
                raise PhaseTimeout(node.state.label, node.missing())
            time.sleep(poll_interval)
            continue
        deadline = time.monotonic() + timeout
        for delivery in sorted(batch, key=Delivery.sort_key):
            transcript.append(delivery)
            _, outbound = handle_message(node, delivery.sender, delivery.message)
            send_all(outbound)
    return transcript
