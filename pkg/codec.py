"""Little-endian binary primitives shared by every wire layout."""

import struct
from typing import Callable, Iterable, List, TypeVar

import numpy as np

from exceptions import ProtocolError

_F8 = np.dtype("<f8")
T = TypeVar("T")


def pack_u64(*values: int) -> bytes:
    return struct.pack(f"<{len(values)}Q", *values)


def pack_floats(array: np.ndarray, order: str = "C") -> bytes:
    return np.asarray(array, dtype=_F8).tobytes(order=order)


def pack_matrix(matrix: np.ndarray) -> bytes:
    """Header (rows: u64, cols: u64) followed by row-major f64 entries."""
    matrix = np.atleast_2d(np.asarray(matrix))
    return pack_u64(*matrix.shape) + pack_floats(matrix)


def pack_text(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


class Reader:
    """Sequential reader over a payload; raises ProtocolError on truncation."""

    def __init__(self, payload: bytes):
        self._view = memoryview(payload)
        self._offset = 0

    def _take(self, size: int) -> memoryview:
        if self._offset + size > len(self._view):
            raise ProtocolError(
                f"payload truncated: wanted {size} bytes at offset {self._offset}, "
                f"have {len(self._view) - self._offset}"
            )
        chunk = self._view[self._offset : self._offset + size]
        self._offset += size
        return chunk

    def u64(self, count: int = 1):
        values = struct.unpack(f"<{count}Q", self._take(8 * count))
        return values[0] if count == 1 else values

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self._take(8 * count), dtype=_F8).astype(np.float64)

    def matrix(self) -> np.ndarray:
        rows, cols = self.u64(2)
        return self.floats(rows * cols).reshape(rows, cols)

    def text(self) -> str:
        raw = bytes(self._take(self.u32()))
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolError(f"text field is not valid UTF-8: {exc}") from exc

    def remaining(self) -> int:
        return len(self._view) - self._offset

    def finish(self) -> None:
        if self.remaining():
            raise ProtocolError(f"{self.remaining()} trailing bytes in payload")


def content_sorted(items: Iterable[T], to_bytes: Callable[[T], bytes]) -> List[T]:
    """Items ordered by their serialized bytes, independent of arrival or registration order."""
    return sorted(items, key=to_bytes)
