"""
Module: transports.py
Message transports for the federation: an in-process queue for simulation and
a file-exchange transport for running centers as separate processes or on
separate machines that share a directory.

Both transports move encoded envelopes, never Python objects, so a run behaves
the same whichever transport carries it.
"""

import logging
import os
from abc import ABC, abstractmethod
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Deque, Dict, List, Optional, Set, Tuple

from constants import BROADCAST, COORDINATOR_ID
from exceptions import ProtocolError
from messages import PHASE_ORDER, Message, decode_message, encode_message

logger = logging.getLogger(__name__)

MESSAGE_SUFFIX = ".msg"


@dataclass(frozen=True)
class Delivery:
    sender: str
    recipient: str
    message: Message
    data: bytes

    def sort_key(self):
        return self.message.sort_key()


def _check_topology(sender: str, recipient: str) -> None:
    """Star topology: centers talk to the coordinator, the coordinator broadcasts."""
    if sender == COORDINATOR_ID and recipient != BROADCAST:
        raise ProtocolError(f"coordinator may only broadcast, not send to '{recipient}'")
    if sender != COORDINATOR_ID and recipient != COORDINATOR_ID:
        raise ProtocolError(f"center '{sender}' may only send to the coordinator")


class Transport(ABC):
    @abstractmethod
    def send(self, to: str, message: Message) -> None:
        """Queue a message for `to` (a node id or BROADCAST)."""

    @abstractmethod
    def receive(self) -> List[Delivery]:
        """Return every delivery that has arrived since the last call."""


class InProcessTransport(Transport):
    def __init__(self):
        self._queue: Deque[Tuple[str, str, bytes]] = deque()

    def send(self, to: str, message: Message) -> None:
        _check_topology(message.sender, to)
        self._queue.append((message.sender, to, encode_message(message)))

    def receive(self) -> List[Delivery]:
        deliveries = []
        while self._queue:
            sender, recipient, data = self._queue.popleft()
            deliveries.append(Delivery(sender, recipient, decode_message(data), data))
        return deliveries


class FileExchangeTransport(Transport):
    """
    Shared-directory transport.
    Layout: one directory per phase round, one file per message:

        <root>/admm_0003/admm_3_site-a.msg

    Files are written under a temporary name and renamed, so readers never
    see a partial message. `node_id` restricts what `receive` returns to the
    messages addressed to that node; None sees everything.
    """

    def __init__(self, root, node_id: Optional[str] = None):
        self.root = Path(root)
        self.node_id = node_id
        self.root.mkdir(parents=True, exist_ok=True)
        self._seen: Set[Path] = set()
        self._messages: List[Dict[str, Any]] = []

    @staticmethod
    def _message_name(phase: str, round_: int, sender: str) -> str:
        return f"{phase}_{round_}_{sender}{MESSAGE_SUFFIX}"

    @staticmethod
    def _parse_message_name(name: str) -> Tuple[Optional[str], Optional[int], Optional[str]]:
        """
        Parse a message file name.
        Returns: (phase, round, sender), or Nones if the name is not a message.

        Examples:
        - stats_0_site-a.msg -> ('stats', 0, 'site-a')
        - admm_3_coordinator.msg -> ('admm', 3, 'coordinator')
        - notes.txt -> (None, None, None)
        """
        if not name.endswith(MESSAGE_SUFFIX) or name.startswith("__"):
            return None, None, None
        parts = name[: -len(MESSAGE_SUFFIX)].split("_", 2)
        if len(parts) != 3 or parts[0] not in PHASE_ORDER or not parts[1].isdigit():
            return None, None, None
        return parts[0], int(parts[1]), parts[2]

    def _round_dir(self, phase: str, round_: int) -> Path:
        return self.root / f"{phase}_{round_:04d}"

    def _recipient(self, sender: str) -> str:
        return BROADCAST if sender == COORDINATOR_ID else COORDINATOR_ID

    def _visible(self, sender: str) -> bool:
        if self.node_id is None:
            return True
        if self.node_id == COORDINATOR_ID:
            return sender != COORDINATOR_ID
        return sender == COORDINATOR_ID

    def send(self, to: str, message: Message) -> None:
        _check_topology(message.sender, to)
        directory = self._round_dir(message.PHASE, message.round)
        directory.mkdir(parents=True, exist_ok=True)
        name = self._message_name(message.PHASE, message.round, message.sender)
        target = directory / name
        if target.exists():
            raise ProtocolError(f"message file {target} already exists")
        staging = directory / f"__{name}.tmp"
        staging.write_bytes(encode_message(message))
        os.replace(staging, target)
        logger.debug("wrote %s", target)

    def scan_messages(self) -> List[Tuple[Path, str, int, str]]:
        """List message files under the exchange root, sorted by path."""
        found = []
        for file_path in sorted(self.root.rglob(f"*{MESSAGE_SUFFIX}")):
            phase, round_, sender = self._parse_message_name(file_path.name)
            if phase is None:
                continue
            found.append((file_path, phase, round_, sender))
        return found

    def receive(self) -> List[Delivery]:
        deliveries = []
        for file_path, phase, round_, sender in self.scan_messages():
            if file_path in self._seen or not self._visible(sender):
                continue
            self._seen.add(file_path)
            try:
                data = file_path.read_bytes()
                message = decode_message(data)
            except (OSError, ProtocolError) as e:
                logger.warning("Skipping unreadable message %s: %s", file_path, e)
                continue
            if message.sender != sender or message.PHASE != phase or message.round != round_:
                logger.warning("Skipping %s: contents do not match its file name", file_path)
                continue
            deliveries.append(Delivery(sender, self._recipient(sender), message, data))
            self._messages.append(
                {"file_path": str(file_path), "phase": phase, "round": round_, "sender": sender}
            )
        return deliveries

    def get_messages(self) -> List[Dict[str, Any]]:
        """Get information about every message received so far."""
        return self._messages.copy()
