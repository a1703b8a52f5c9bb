"""Sliding 4-frame ID windows and their (2, 2, 11) bit tensors.

Four consecutive 11-bit IDs are expanded MSB-first into a (4, 11) bit
block; rows 0-1 become channel 0 and rows 2-3 channel 1, so element
``(c, h, k)`` is bit ``k`` of row ``2c + h``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Sequence, TextIO

import numpy as np

from .canbus import MAX_ID, FrameLog
from .errors import DomainError, WarmupError

WINDOW = 4
ID_BITS = 11
TENSOR_SHAPE = (2, 2, ID_BITS)

_SHIFTS = np.arange(ID_BITS - 1, -1, -1)


def id_to_bits(can_id: int) -> np.ndarray:
    if not 0 <= can_id <= MAX_ID:
        raise DomainError(f"CAN id {can_id} outside 11-bit range")
    return ((can_id >> _SHIFTS) & 1).astype(np.float32)


class IdWindow:
    """FIFO of the four most recent CAN IDs, oldest first."""

    __slots__ = ("_ids",)

    def __init__(self, ids: Sequence[int] = ()):
        self._ids: deque[int] = deque(maxlen=WINDOW)
        for i in ids:
            self.push(i)

    def push(self, can_id: int) -> None:
        if not 0 <= can_id <= MAX_ID:
            raise DomainError(f"CAN id {can_id} outside 11-bit range")
        self._ids.append(can_id)

    @property
    def full(self) -> bool:
        return len(self._ids) == WINDOW

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(self._ids)

    def clear(self) -> None:
        self._ids.clear()


def window_to_tensor(window: IdWindow) -> np.ndarray:
    if not window.full:
        raise WarmupError(f"window holds {len(window.ids)} of {WINDOW} ids")
    ids = np.asarray(window.ids, dtype=np.int64)
    return ((ids[:, None] >> _SHIFTS) & 1).astype(np.float32).reshape(TENSOR_SHAPE)


@dataclass(frozen=True)
class LabeledWindow:
    tensor: np.ndarray
    label: int
    newest_timestamp: float


@dataclass(frozen=True)
class WindowSet:
    """Column-oriented batch of labeled windows (what training consumes)."""

    x: np.ndarray           # (N, 2, 2, 11) float32
    y: np.ndarray           # (N,) uint8
    timestamps: np.ndarray  # (N,) float64
    ids: np.ndarray | None = None  # (N,) newest id, for verdict output

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "WindowSet":
        return WindowSet(self.x[idx], self.y[idx], self.timestamps[idx],
                         None if self.ids is None else self.ids[idx])

    def windows(self) -> list[LabeledWindow]:
        return [LabeledWindow(self.x[i], int(self.y[i]), float(self.timestamps[i]))
                for i in range(len(self))]

    @staticmethod
    def concat(sets: Sequence["WindowSet"]) -> "WindowSet":
        ids = None
        if all(s.ids is not None for s in sets):
            ids = np.concatenate([s.ids for s in sets])
        return WindowSet(np.concatenate([s.x for s in sets]),
                         np.concatenate([s.y for s in sets]),
                         np.concatenate([s.timestamps for s in sets]), ids)


def window_set(log: FrameLog) -> WindowSet:
    """Vectorised stride-1 windowing; row ``i`` ends at frame ``i + 3``."""
    n = max(0, len(log) - WINDOW + 1)
    if n == 0:
        return WindowSet(np.zeros((0,) + TENSOR_SHAPE, np.float32), np.zeros(0, np.uint8),
                         np.zeros(0), np.zeros(0, np.int64))
    ids = log.ids()
    bits = ((ids[:, None] >> _SHIFTS) & 1).astype(np.float32)
    x = np.stack([bits[j:j + n] for j in range(WINDOW)], axis=1).reshape((n,) + TENSOR_SHAPE)
    y = log.attack_mask()[WINDOW - 1:].astype(np.uint8)
    t = log.timestamps()[WINDOW - 1:]
    return WindowSet(x, y, t, ids[WINDOW - 1:].copy())


def stream_windows(log: FrameLog) -> list[LabeledWindow]:
    """One labeled window per frame from the 4th on; label is the newest frame's."""
    window = IdWindow()
    out = []
    for frame in log:
        window.push(frame.id)
        if window.full:
            out.append(LabeledWindow(window_to_tensor(window), int(frame.label.is_attack),
                                     frame.timestamp))
    return out


def dump_tensors(windows: Sequence[LabeledWindow] | WindowSet, sink: TextIO) -> None:
    """Debug dump: 44 flattened bits then the label, one window per line."""
    if isinstance(windows, WindowSet):
        windows = windows.windows()
    for w in windows:
        bits = ",".join(str(int(b)) for b in w.tensor.reshape(-1))
        sink.write(f"{bits},{w.label}\n")
