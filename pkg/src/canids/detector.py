"""Per-frame intrusion detector: window push, tensorise, forward, threshold."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, TextIO

import numpy as np

from . import nn, quant
from .canbus import CanFrame
from .features import IdWindow, window_to_tensor
from .metrics import DEFAULT_THRESHOLD

VERDICT_HEADER = "timestamp,id,score,verdict"


@dataclass(frozen=True)
class Verdict:
    timestamp: float
    id: int
    score: float
    attack: bool

    def csv_row(self) -> str:
        return f"{self.timestamp:.6f},{self.id:04x},{self.score:.6f},{int(self.attack)}"


class Detector:
    """Stateful per-frame classifier around a float or int8 model."""

    def __init__(self, engine, threshold: float = DEFAULT_THRESHOLD):
        if isinstance(engine, quant.QuantModel):
            self.kind = "quant"
            self._score = lambda x: float(quant.qmodel_predict(engine, x)[0])
        elif isinstance(engine, nn.CnnModel):
            self.kind = "float"
            self._score = lambda x: float(nn.model_forward(engine, x, "infer")[0])
        elif callable(engine):
            self.kind = "callable"
            self._score = lambda x: float(np.asarray(engine(x)).reshape(-1)[0])
        else:
            raise TypeError(f"unsupported engine {type(engine).__name__}")
        self.engine = engine
        self.threshold = threshold
        self.window = IdWindow()

    def reset(self) -> None:
        self.window.clear()

    def score_id(self, can_id: int) -> float | None:
        self.window.push(can_id)
        if not self.window.full:
            return None
        return self._score(window_to_tensor(self.window)[None])

    def push(self, frame: CanFrame) -> Verdict | None:
        score = self.score_id(frame.id)
        if score is None:
            return None
        return Verdict(frame.timestamp, frame.id, score, score >= self.threshold)

    def run(self, frames: Iterable[CanFrame]) -> Iterator[Verdict]:
        for frame in frames:
            v = self.push(frame)
            if v is not None:
                yield v


def write_verdicts(verdicts: Iterable[Verdict], sink: TextIO) -> int:
    sink.write(VERDICT_HEADER + "\n")
    n = 0
    for v in verdicts:
        sink.write(v.csv_row() + "\n")
        n += 1
    return n
