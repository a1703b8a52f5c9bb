"""Per-frame latency measurement and CAN line-rate budget."""

from __future__ import annotations

import os
import platform
import time
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .canbus import frame_bit_length
from .detector import Detector
from .errors import DomainError

MIN_REPS = 30


@dataclass(frozen=True)
class LatencyStats:
    count: int
    mean: float
    median: float
    p99: float
    max: float
    warmup: int = 0

    @classmethod
    def from_samples(cls, samples: Sequence[float], warmup: int = 0) -> "LatencyStats":
        s = np.asarray(samples, dtype=np.float64)
        if s.size == 0:
            raise DomainError("no latency samples")
        # p99 uses linear interpolation between order statistics
        return cls(int(s.size), float(s.mean()), float(np.median(s)),
                   float(np.percentile(s, 99)), float(s.max()), warmup)


@dataclass(frozen=True)
class LineRateBudget:
    bitrate: float
    dlc: int
    stuffed: bool
    frame_time: float
    headroom: float

    @property
    def below_line_rate(self) -> bool:
        return self.headroom < 1

    def block_time(self, frames: int) -> float:
        """Time for ``frames`` back-to-back frames to arrive."""
        return frames * self.frame_time

    def to_dict(self) -> dict:
        return {**asdict(self), "below_line_rate": self.below_line_rate}


def measure_latency(detector: Detector, ids: Sequence[int], reps: int, warmup: int = 0,
                    clock: Callable[[], float] = time.perf_counter,
                    hook: Callable[[int, Detector], None] | None = None) -> LatencyStats:
    """Time ``reps`` full per-message iterations; the first ``warmup`` are discarded.

    Each iteration pushes the next ID (cycling through ``ids``), builds the
    tensor, runs the model and applies the threshold.  The detector window
    is pre-filled so every timed iteration produces a verdict.
    """
    if reps < MIN_REPS:
        raise DomainError(f"need at least {MIN_REPS} repetitions, got {reps}")
    if not 0 <= warmup < reps:
        raise DomainError(f"warmup {warmup} must be in [0, reps)")
    if len(ids) == 0:
        raise DomainError("no ids to replay")
    detector.reset()
    for i in range(3):
        detector.window.push(ids[i % len(ids)])
    samples = []
    for it in range(reps):
        can_id = ids[(it + 3) % len(ids)]
        t0 = clock()
        score = detector.score_id(can_id)
        _ = score >= detector.threshold
        t1 = clock()
        if hook is not None:
            hook(it, detector)
        if it >= warmup:
            samples.append(t1 - t0)
    return LatencyStats.from_samples(samples, warmup)


def line_rate_budget(latency: LatencyStats, bitrate: float = 1e6, dlc: int = 8,
                     stuffed: bool = True) -> LineRateBudget:
    if not bitrate > 0:
        raise DomainError("bitrate must be positive")
    ft = frame_bit_length(dlc, stuffed) / bitrate
    if not latency.mean > 0:
        raise DomainError("latency mean must be positive")
    return LineRateBudget(bitrate, dlc, stuffed, ft, ft / latency.mean)


def host_description() -> dict:
    import numpy

    return {"platform": platform.platform(), "machine": platform.machine(),
            "python": platform.python_version(), "numpy": numpy.__version__,
            "cpus": os.cpu_count()}


def bench_report(kind: str, stats: LatencyStats, budget: LineRateBudget,
                 host: dict | None = None) -> dict:
    return {"engine": kind, "stats": asdict(stats), "budget": budget.to_dict(),
            "host": host if host is not None else host_description()}
