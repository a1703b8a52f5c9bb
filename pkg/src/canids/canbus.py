"""CAN 2.0A frame model, CSV log format and bit-time arithmetic.

Log rows look like::

    1478198376.389427,0316,8,05,21,68,09,21,21,00,6f,R

timestamp, 11-bit ID in hex, DLC, ``dlc`` data bytes in hex, then a flag:
``R`` (normal), ``T-dos`` or ``T-fuzz``.  A bare ``T`` (as in the public
Car-Hacking captures) is accepted when the caller says which attack the
file contains.
"""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass, field
from typing import Iterable, TextIO

import numpy as np

from .errors import DomainError, LogValidationError, ParseError

MAX_ID = 0x7FF
MAX_DLC = 8


class Label(enum.Enum):
    NORMAL = "Normal"
    DOS = "DosAttack"
    FUZZING = "FuzzingAttack"

    @property
    def is_attack(self) -> bool:
        return self is not Label.NORMAL

    @property
    def flag(self) -> str:
        return _LABEL_TO_FLAG[self]

    @classmethod
    def parse(cls, value: "str | Label") -> "Label":
        """Accept a Label, its value, a flag, or a short attack name."""
        if isinstance(value, Label):
            return value
        key = str(value).strip().lower()
        for alias, label in _ALIASES.items():
            if key == alias:
                return label
        raise DomainError(f"unknown label {value!r}")


_LABEL_TO_FLAG = {Label.NORMAL: "R", Label.DOS: "T-dos", Label.FUZZING: "T-fuzz"}
_FLAG_TO_LABEL = {v: k for k, v in _LABEL_TO_FLAG.items()}
_ALIASES = {
    "normal": Label.NORMAL, "r": Label.NORMAL,
    "dosattack": Label.DOS, "dos": Label.DOS, "t-dos": Label.DOS,
    "fuzzingattack": Label.FUZZING, "fuzzing": Label.FUZZING,
    "fuzzy": Label.FUZZING, "fuzz": Label.FUZZING, "t-fuzz": Label.FUZZING,
}


@dataclass(frozen=True, slots=True)
class CanFrame:
    timestamp: float
    id: int
    dlc: int
    data: bytes = b""
    label: Label = Label.NORMAL

    def __post_init__(self):
        if not 0 <= self.id <= MAX_ID:
            raise DomainError(f"CAN id {self.id} outside 11-bit range")
        if not 0 <= self.dlc <= MAX_DLC:
            raise DomainError(f"dlc {self.dlc} outside 0..8")
        if len(self.data) != self.dlc:
            raise DomainError(f"dlc {self.dlc} but {len(self.data)} data bytes")
        if not self.timestamp >= 0:
            raise DomainError(f"negative or NaN timestamp {self.timestamp}")


@dataclass(frozen=True)
class FrameLog:
    frames: tuple[CanFrame, ...] = ()
    source: str = ""
    _ids: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        frames = tuple(self.frames)
        object.__setattr__(self, "frames", frames)
        for i in range(1, len(frames)):
            if frames[i].timestamp < frames[i - 1].timestamp:
                raise LogValidationError(i + 1, "timestamp decreases")

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def __getitem__(self, idx):
        return self.frames[idx]

    def ids(self) -> np.ndarray:
        if self._ids is None:
            object.__setattr__(self, "_ids", np.fromiter(
                (f.id for f in self.frames), dtype=np.int64, count=len(self.frames)))
        return self._ids

    def attack_mask(self) -> np.ndarray:
        return np.fromiter((f.label.is_attack for f in self.frames),
                           dtype=bool, count=len(self.frames))

    def timestamps(self) -> np.ndarray:
        return np.fromiter((f.timestamp for f in self.frames),
                           dtype=np.float64, count=len(self.frames))

    def count(self, label: Label) -> int:
        return sum(1 for f in self.frames if f.label is label)


def _parse_hex(token: str, line: int, what: str) -> int:
    try:
        return int(token, 16)
    except ValueError:
        raise ParseError(line, f"{what} {token!r} is not hex") from None


def parse_log(stream: TextIO | str, attack_hint: "Label | str | None" = None,
              source: str = "", labeled: bool = True) -> FrameLog:
    """Parse a CSV log into a FrameLog.

    With ``labeled=False`` the trailing flag column is optional and frames
    without one are tagged Normal; this is how unlabeled captures are fed
    to the detector.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    hint = Label.parse(attack_hint) if attack_hint is not None else None
    frames: list[CanFrame] = []
    prev_t = None
    for lineno, row in enumerate(csv.reader(stream), start=1):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        row = [c.strip() for c in row]
        if len(row) < 3:
            raise ParseError(lineno, f"expected at least 3 columns, got {len(row)}")
        try:
            t = float(row[0])
        except ValueError:
            raise ParseError(lineno, f"bad timestamp {row[0]!r}") from None
        can_id = _parse_hex(row[1], lineno, "id")
        try:
            dlc = int(row[2])
        except ValueError:
            raise ParseError(lineno, f"bad dlc {row[2]!r}") from None
        if not 0 <= dlc <= MAX_DLC:
            raise ParseError(lineno, f"dlc {dlc} outside 0..8")
        n_cols = 3 + dlc + 1
        if len(row) == n_cols:
            flag = row[-1]
        elif not labeled and len(row) == n_cols - 1:
            flag = "R"
        else:
            raise ParseError(lineno, f"dlc {dlc} needs {n_cols} columns, got {len(row)}")
        byte_tokens = row[3:3 + dlc]
        if any(not 1 <= len(b) <= 2 for b in byte_tokens):
            raise ParseError(lineno, "data byte must be 1-2 hex digits")
        data = bytes(_parse_hex(b, lineno, "data byte") for b in byte_tokens)
        if flag in _FLAG_TO_LABEL:
            label = _FLAG_TO_LABEL[flag]
        elif flag == "T":
            if hint is None or not hint.is_attack:
                raise ParseError(lineno, "plain 'T' flag needs an attack-kind hint")
            label = hint
        else:
            raise ParseError(lineno, f"unknown flag {flag!r}")
        try:
            frame = CanFrame(t, can_id, dlc, data, label)
        except DomainError as exc:
            raise ParseError(lineno, str(exc)) from None
        if prev_t is not None and t < prev_t:
            raise LogValidationError(lineno, f"timestamp {row[0]} earlier than previous row")
        prev_t = t
        frames.append(frame)
    return FrameLog(tuple(frames), source)


def format_frame(frame: CanFrame) -> str:
    parts = [f"{frame.timestamp:.6f}", f"{frame.id:04x}", str(frame.dlc)]
    parts.extend(f"{b:02x}" for b in frame.data)
    parts.append(frame.label.flag)
    return ",".join(parts)


def write_log(log: FrameLog | Iterable[CanFrame], destination: TextIO) -> None:
    for frame in log:
        destination.write(format_frame(frame))
        destination.write("\n")


def read_log_file(path, attack_hint=None, labeled: bool = True) -> FrameLog:
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_log(fh, attack_hint=attack_hint, source=str(path), labeled=labeled)


def write_log_file(log: FrameLog, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        write_log(log, fh)


def frame_bit_length(dlc: int, stuffed: bool = False) -> int:
    """Bits on the wire for a CAN 2.0A data frame, including 3-bit IFS.

    ``stuffed=True`` adds the worst-case number of stuff bits over the
    34 + 8*dlc bits that are subject to stuffing (SOF through CRC).
    """
    if not 0 <= dlc <= MAX_DLC:
        raise DomainError(f"dlc {dlc} outside 0..8")
    # SOF 1, ID 11, RTR 1, IDE 1, r0 1, DLC 4, CRC 15, CRC delim 1,
    # ACK 2, EOF 7, IFS 3
    nominal = 47 + 8 * dlc
    if not stuffed:
        return nominal
    return nominal + (34 + 8 * dlc - 1) // 4


def frame_time(dlc: int, bitrate: float, stuffed: bool = False) -> float:
    if bitrate <= 0:
        raise DomainError("bitrate must be positive")
    return frame_bit_length(dlc, stuffed) / bitrate
