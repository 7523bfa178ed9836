"""
Module: message_router.py
Routes incoming messages to the handler methods of a federation node.

A node declares what it accepts by defining `on_<variant>` methods, e.g.
`on_stats_share` for StatsShare. The router discovers them once, warns about
`on_*` methods that match no message variant, and dispatches by message type.
"""

import inspect
import logging
from typing import Any, Callable, Dict, List, Type

from constants import HANDLERS_TO_SKIP
from exceptions import UnexpectedPhase
from messages import MESSAGE_TYPES, Message, handler_name

logger = logging.getLogger(__name__)


class MessageRouter:
    """
    Per-node dispatcher.
    This class handles:
    - Discovering handler methods by naming convention
    - Warning about handler-like methods that match no variant
    - Dispatching messages and rejecting variants the node does not accept
    - Providing a summary of the registered handlers
    """

    def __init__(self, node: Any):
        self.node = node
        self._handlers: Dict[Type[Message], Callable] = {}
        self._extract_handlers()

    def _extract_handlers(self) -> None:
        known = {handler_name(message_type): message_type for message_type in MESSAGE_TYPES.values()}

        for name, message_type in known.items():
            handler = getattr(self.node, name, None)
            if callable(handler):
                self._handlers[message_type] = handler

        for name, attr in inspect.getmembers(type(self.node), inspect.isfunction):
            if not name.startswith("on_") or name in known or name in HANDLERS_TO_SKIP:
                continue
            logger.warning(
                "Method '%s' on %s does not match any message variant",
                name,
                type(self.node).__name__,
            )

    def accepts(self, message: Message) -> bool:
        return type(message) in self._handlers

    def dispatch(self, sender: str, message: Message):
        handler = self._handlers.get(type(message))
        if handler is None:
            raise UnexpectedPhase(
                f"{type(self.node).__name__} does not accept {type(message).__name__} "
                f"(from {sender})"
            )
        logger.debug(
            "%s <- %s from %s", type(self.node).__name__, type(message).__name__, sender
        )
        return handler(sender, message)

    def get_handlers(self) -> List[Dict[str, Any]]:
        """Get information about all registered handlers."""
        return [
            {"variant": message_type.__name__, "tag": message_type.TAG, "handler": fn.__name__}
            for message_type, fn in sorted(self._handlers.items(), key=lambda item: item[0].TAG)
        ]
