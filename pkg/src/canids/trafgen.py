"""Synthetic benign CAN traffic and DoS / fuzzing injection.

All randomness comes from numpy's ``default_rng`` (PCG64) seeded from the
profile or params seed, so a given (input, params, seed) triple always
produces the same log.  Timestamps are rounded to whole microseconds so
logs survive a CSV roundtrip unchanged.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .canbus import MAX_ID, CanFrame, FrameLog, Label
from .errors import ConfigError, DomainError

PAYLOAD_MODES = ("constant", "counter", "random")
_EPS = 1e-9


@dataclass(frozen=True)
class EcuSpec:
    id: int
    period: float
    jitter_fraction: float = 0.0
    payload_mode: str = "constant"
    dlc: int = 8

    def __post_init__(self):
        if not 0 <= self.id <= MAX_ID:
            raise DomainError(f"ecu id {self.id} outside 11-bit range")
        if not self.period > 0:
            raise DomainError(f"ecu 0x{self.id:03x}: period must be positive")
        if not 0 <= self.jitter_fraction < 0.5:
            raise DomainError(f"ecu 0x{self.id:03x}: jitter_fraction must be in [0, 0.5)")
        if self.payload_mode not in PAYLOAD_MODES:
            raise DomainError(f"unknown payload_mode {self.payload_mode!r}")
        if not 0 <= self.dlc <= 8:
            raise DomainError("dlc outside 0..8")


@dataclass(frozen=True)
class BenignProfile:
    ecus: tuple[EcuSpec, ...]
    duration: float
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ecus", tuple(self.ecus))
        ids = [e.id for e in self.ecus]
        if len(set(ids)) != len(ids):
            raise DomainError("ecu ids must be distinct")
        if not self.duration > 0:
            raise DomainError("duration must be positive")


@dataclass(frozen=True)
class DosParams:
    interval: float
    burst_windows: tuple[tuple[float, float], ...] = ()
    flood_id: int = 0
    seed: int = 0  # the flood is deterministic; kept for config symmetry

    def __post_init__(self):
        object.__setattr__(self, "burst_windows", _check_windows(self.burst_windows))
        if not self.interval > 0:
            raise DomainError("DoS interval must be positive")
        if not 0 <= self.flood_id <= MAX_ID:
            raise DomainError("flood_id outside 11-bit range")


@dataclass(frozen=True)
class FuzzParams:
    interval_min: float
    interval_max: float
    burst_windows: tuple[tuple[float, float], ...] = ()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "burst_windows", _check_windows(self.burst_windows))
        if not self.interval_min > 0:
            raise DomainError("fuzzing interval_min must be positive")
        if self.interval_max < self.interval_min:
            raise DomainError("fuzzing interval_max below interval_min")


def _check_windows(windows) -> tuple[tuple[float, float], ...]:
    out = []
    for w in windows:
        start, end = (float(v) for v in w)
        if not (0 <= start < end):
            raise DomainError(f"burst window {w!r} must satisfy 0 <= start < end")
        out.append((start, end))
    return tuple(out)


def _usec(t: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(t, dtype=np.float64), 6)


def _payloads(ecu: EcuSpec, n: int, rng: np.random.Generator) -> list[bytes]:
    base = rng.integers(0, 256, ecu.dlc, dtype=np.uint8)
    if ecu.payload_mode == "constant":
        b = base.tobytes()
        return [b] * n
    if ecu.payload_mode == "counter":
        rows = np.tile(base, (n, 1))
        if ecu.dlc:
            rows[:, -1] = np.arange(n) % 256
        return [r.tobytes() for r in rows]
    rows = rng.integers(0, 256, (n, ecu.dlc), dtype=np.uint8)
    return [r.tobytes() for r in rows]


def _merge(existing: Sequence[CanFrame], injected: list[CanFrame], source: str) -> FrameLog:
    # stable merge: at equal timestamps pre-existing frames come first
    keyed = [(f.timestamp, 0, i, f) for i, f in enumerate(existing)]
    keyed += [(f.timestamp, 1, i, f) for i, f in enumerate(injected)]
    keyed.sort(key=lambda k: k[:3])
    return FrameLog(tuple(k[3] for k in keyed), source)


def gen_benign(profile: BenignProfile) -> FrameLog:
    """Periodic benign traffic: ECU ``e`` sends at ``period * (k + u_k * jitter)``."""
    if not profile.ecus:
        raise DomainError("benign profile has no ECUs")
    rng = np.random.default_rng(profile.seed)
    frames: list[CanFrame] = []
    for ecu in profile.ecus:
        n = math.ceil(profile.duration / ecu.period - _EPS)
        k = np.arange(n, dtype=np.float64)
        u = rng.uniform(-1.0, 1.0, n)
        t = _usec(np.maximum(ecu.period * (k + u * ecu.jitter_fraction), 0.0))
        payloads = _payloads(ecu, n, rng)
        for ti, data in zip(t, payloads):
            if ti < profile.duration:
                frames.append(CanFrame(float(ti), ecu.id, ecu.dlc, data, Label.NORMAL))
    frames.sort(key=lambda f: f.timestamp)
    return FrameLog(tuple(frames), f"benign(seed={profile.seed})")


def inject_dos(log: FrameLog, params: DosParams) -> FrameLog:
    """Flood ``flood_id`` with zero payloads every ``interval`` inside each window."""
    benign_ids = [f.id for f in log if f.label is Label.NORMAL]
    if benign_ids and params.flood_id >= min(benign_ids):
        raise DomainError(
            f"flood id 0x{params.flood_id:03x} does not outrank benign id 0x{min(benign_ids):03x}")
    if not params.burst_windows:
        return log
    injected = []
    zeros = bytes(8)
    for start, end in params.burst_windows:
        n = math.floor((end - start) / params.interval + _EPS)
        for t in _usec(start + params.interval * np.arange(n)):
            injected.append(CanFrame(float(t), params.flood_id, 8, zeros, Label.DOS))
    return _merge(log.frames, injected, log.source + "+dos")


def inject_fuzzing(log: FrameLog, params: FuzzParams) -> FrameLog:
    """Random IDs and payloads at uniformly random gaps inside each window."""
    if not params.burst_windows:
        return log
    rng = np.random.default_rng(params.seed)
    injected = []
    for start, end in params.burst_windows:
        # draw gaps in chunks until the window is covered
        times: list[np.ndarray] = []
        t = start
        expected = max(16, int((end - start) / params.interval_min) + 1)
        while True:
            gaps = rng.uniform(params.interval_min, params.interval_max, expected)
            offs = t + np.concatenate(([0.0], np.cumsum(gaps[:-1])))
            keep = offs < end - _EPS
            times.append(offs[keep])
            if not keep.all():
                break
            t = offs[-1] + gaps[-1]
            if t >= end - _EPS:
                break
        ts = _usec(np.concatenate(times))
        ids = rng.integers(0, MAX_ID + 1, len(ts))
        payloads = rng.integers(0, 256, (len(ts), 8), dtype=np.uint8)
        for ti, cid, p in zip(ts, ids, payloads):
            injected.append(CanFrame(float(ti), int(cid), 8, p.tobytes(), Label.FUZZING))
    return _merge(log.frames, injected, log.source + "+fuzz")


# Arbitration IDs seen in the public Car-Hacking captures, with their
# approximate transmission periods.
_CAR_ECUS = [
    (0x02B0, 0.010), (0x0316, 0.010), (0x018F, 0.010), (0x0260, 0.010),
    (0x02A0, 0.010), (0x0329, 0.010), (0x0545, 0.010), (0x0370, 0.010),
    (0x0350, 0.020), (0x043F, 0.010), (0x0440, 0.010), (0x04F0, 0.010),
    (0x0153, 0.010), (0x0164, 0.010), (0x01F1, 0.020), (0x0220, 0.010),
    (0x02C0, 0.010), (0x04B1, 0.010), (0x0130, 0.010), (0x0131, 0.010),
    (0x0140, 0.010), (0x0080, 0.010), (0x0081, 0.010), (0x00A0, 0.100),
    (0x00A1, 0.100), (0x0165, 0.010), (0x0587, 0.100), (0x059B, 0.100),
    (0x05A0, 0.100), (0x0690, 0.100), (0x04F1, 0.100), (0x05F0, 0.200),
    (0x0018, 0.200), (0x034F, 1.000), (0x0517, 0.200), (0x051A, 0.200),
]


def default_profile(duration: float = 30.0, seed: int = 0,
                    jitter_fraction: float = 0.05) -> BenignProfile:
    modes = ("counter", "constant", "random")
    ecus = tuple(EcuSpec(cid, period, jitter_fraction, modes[i % 3])
                 for i, (cid, period) in enumerate(_CAR_ECUS))
    return BenignProfile(ecus, duration, seed)


def _as_id(v) -> int:
    return int(v, 0) if isinstance(v, str) else int(v)


def profile_from_dict(d: dict) -> BenignProfile:
    try:
        if "ecus" not in d:
            return default_profile(float(d.get("duration", 30.0)), int(d.get("seed", 0)),
                                   float(d.get("jitter_fraction", 0.05)))
        ecus = tuple(EcuSpec(_as_id(e["id"]), float(e["period"]),
                             float(e.get("jitter_fraction", 0.0)),
                             e.get("payload_mode", "constant"), int(e.get("dlc", 8)))
                     for e in d["ecus"])
        return BenignProfile(ecus, float(d["duration"]), int(d.get("seed", 0)))
    except DomainError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad benign profile: {exc}") from None


def dos_from_dict(d: dict) -> DosParams:
    try:
        return DosParams(float(d["interval"]), tuple(map(tuple, d.get("burst_windows", ()))),
                         _as_id(d.get("flood_id", 0)), int(d.get("seed", 0)))
    except DomainError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad dos params: {exc}") from None


def fuzz_from_dict(d: dict) -> FuzzParams:
    try:
        return FuzzParams(float(d["interval_min"]), float(d["interval_max"]),
                          tuple(map(tuple, d.get("burst_windows", ()))), int(d.get("seed", 0)))
    except DomainError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad fuzzing params: {exc}") from None


def load_config(path) -> dict:
    """Read a JSON config document (see README for the schema)."""
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    return cfg
