"""Reading and writing CAN traffic: dataset CSV and candump text."""
from __future__ import annotations

import csv
import io
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

log = logging.getLogger(__name__)

STANDARD_ID_MAX = 0x7FF
EXTENDED_ID_MAX = 0x1FFFFFFF


class Label(str, Enum):
    NORMAL = "Normal"
    ATTACK = "Attack"
    UNLABELED = "Unlabeled"


@dataclass(frozen=True, slots=True)
class CanFrame:
    timestamp: float
    can_id: int
    dlc: int
    payload: bytes = b""
    label: Label = Label.UNLABELED
    extended: bool = False

    def __post_init__(self):
        if not self.timestamp >= 0.0:
            raise ValueError(f"timestamp must be non-negative, got {self.timestamp}")
        limit = EXTENDED_ID_MAX if self.extended else STANDARD_ID_MAX
        if not 0 <= self.can_id <= limit:
            width = 29 if self.extended else 11
            raise ValueError(f"id 0x{self.can_id:X} outside {width}-bit range")
        if not 0 <= self.dlc <= 8:
            raise ValueError(f"dlc must be 0..8, got {self.dlc}")
        if len(self.payload) != self.dlc:
            raise ValueError(f"payload has {len(self.payload)} bytes but dlc={self.dlc}")

    @property
    def is_attack(self) -> bool:
        return self.label is Label.ATTACK


@dataclass
class FrameStreamMeta:
    source: str
    address_width: int
    frame_count: int
    label_coverage: float
    attack_count: int = 0

    @classmethod
    def of(cls, frames: Sequence[CanFrame], source: str) -> "FrameStreamMeta":
        n = len(frames)
        labeled = sum(f.label is not Label.UNLABELED for f in frames)
        attacks = sum(f.label is Label.ATTACK for f in frames)
        width = 29 if any(f.extended for f in frames) else 11
        return cls(source, width, n, labeled / n if n else 0.0, attacks)


DEFAULT_LABEL_ALIASES = {
    "R": Label.NORMAL, "Normal": Label.NORMAL, "0": Label.NORMAL,
    "T": Label.ATTACK, "Attack": Label.ATTACK, "1": Label.ATTACK,
}


@dataclass
class ColumnMapping:
    """Column positions in a dataset CSV. ``label=None`` means no label column."""

    timestamp: int = 0
    can_id: int = 1
    dlc: int = 2
    payload: int = 3
    label: int | None = 4
    aliases: dict[str, Label] = field(default_factory=lambda: dict(DEFAULT_LABEL_ALIASES))
    header: tuple[str, ...] = ("Timestamp", "Arbitration_ID", "DLC", "Data", "Class")


class FrameParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line
        self.message = message


@dataclass
class ParsedStream:
    frames: list[CanFrame]
    errors: list[FrameParseError]
    monotonicity_warnings: int
    meta: FrameStreamMeta

    def __len__(self):
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)


def _parse_id(text: str, address_width: int) -> tuple[int, bool]:
    text = text.strip()
    if not text or not re.fullmatch(r"[0-9A-Fa-f]+", text):
        raise ValueError(f"non-hex id {text!r}")
    value = int(text, 16)
    extended = len(text) == 8 or value > STANDARD_ID_MAX
    if extended and address_width == 11:
        raise ValueError(f"id {text} does not fit an 11-bit address")
    return value, extended


def _parse_payload(text: str) -> bytes:
    text = text.strip()
    if not text:
        return b""
    try:
        if " " in text:
            return bytes(int(tok, 16) for tok in text.split())
        return bytes.fromhex(text)
    except ValueError as exc:
        raise ValueError(f"bad payload {text!r}") from exc


class _Collector:
    def __init__(self, strict: bool):
        self.strict = strict
        self.frames: list[CanFrame] = []
        self.errors: list[FrameParseError] = []
        self.warnings = 0

    def error(self, line: int, message: str) -> None:
        err = FrameParseError(line, message)
        if self.strict:
            raise err
        self.errors.append(err)

    def add(self, line: int, frame: CanFrame) -> None:
        if self.frames and frame.timestamp < self.frames[-1].timestamp:
            if self.strict:
                raise FrameParseError(line, "timestamp goes backwards")
            self.warnings += 1
        self.frames.append(frame)

    def result(self, source: str) -> ParsedStream:
        if self.errors:
            log.warning("skipped %d malformed rows", len(self.errors))
        if self.warnings:
            log.warning("%d out-of-order timestamps", self.warnings)
        return ParsedStream(self.frames, self.errors, self.warnings,
                            FrameStreamMeta.of(self.frames, source))


def _as_text(data) -> str:
    if isinstance(data, (bytes, bytearray)):
        return data.decode("utf-8")
    if isinstance(data, str):
        return data
    return data.read() if hasattr(data, "read") else "".join(data)


def parse_dataset_csv(data, mapping: ColumnMapping | None = None, *, strict: bool = True,
                      address_width: int = 29) -> ParsedStream:
    """Parse dataset-CSV bytes (with header row) into frames.

    In strict mode the first malformed row raises :class:`FrameParseError`;
    otherwise bad rows are skipped and collected in ``errors``.
    """
    mapping = mapping or ColumnMapping()
    text = _as_text(data)
    reader = csv.reader(io.StringIO(text))
    out = _Collector(strict)
    header = next(reader, None)
    if header is None:
        return out.result("dataset-csv")
    width = len(header)
    for row in reader:
        line = reader.line_num
        if not row:
            continue
        if len(row) != width:
            out.error(line, f"expected {width} fields, got {len(row)}")
            continue
        try:
            ts = float(row[mapping.timestamp])
            can_id, extended = _parse_id(row[mapping.can_id], address_width)
            dlc = int(row[mapping.dlc])
            payload = _parse_payload(row[mapping.payload])
            if mapping.label is None:
                label = Label.UNLABELED
            else:
                raw = row[mapping.label].strip()
                if raw == "":
                    label = Label.UNLABELED
                elif raw in mapping.aliases:
                    label = mapping.aliases[raw]
                else:
                    raise ValueError(f"unknown label {raw!r}")
            frame = CanFrame(ts, can_id, dlc, payload, label, extended)
        except ValueError as exc:
            out.error(line, str(exc))
            continue
        out.add(line, frame)
    return out.result("dataset-csv")


_CANDUMP = re.compile(r"\(\s*([0-9.]+)\s*\)\s+(\S+)\s+([0-9A-Fa-f]+)#([0-9A-Fa-f]*)\s*$")


def parse_candump(lines, *, strict: bool = True, address_width: int = 29) -> ParsedStream:
    """Parse ``(ts) iface ID#DATA`` lines. Frames come back unlabeled."""
    if isinstance(lines, (bytes, bytearray, str)):
        lines = _as_text(lines).splitlines()
    out = _Collector(strict)
    for lineno, raw in enumerate(lines, start=1):
        raw = raw.rstrip("\r\n")
        if not raw.strip():
            continue
        m = _CANDUMP.match(raw.strip())
        if m is None:
            out.error(lineno, f"not a candump line: {raw!r}")
            continue
        try:
            can_id, extended = _parse_id(m.group(3), address_width)
            if len(m.group(4)) % 2:
                raise ValueError("odd number of payload hex digits")
            payload = bytes.fromhex(m.group(4))
            frame = CanFrame(float(m.group(1)), can_id, len(payload), payload,
                             Label.UNLABELED, extended)
        except ValueError as exc:
            out.error(lineno, str(exc))
            continue
        out.add(lineno, frame)
    return out.result("candump")


def format_id(frame: CanFrame) -> str:
    return f"{frame.can_id:08X}" if frame.extended else f"{frame.can_id:03X}"


def write_frames(frames: Iterable[CanFrame], fmt: str = "dataset-csv",
                 mapping: ColumnMapping | None = None, iface: str = "can0") -> bytes:
    """Serialise frames; timestamps are written with 6 decimals."""
    if fmt == "candump":
        return "".join(
            f"({f.timestamp:.6f}) {iface} {format_id(f)}#{f.payload.hex().upper()}\n"
            for f in frames
        ).encode("utf-8")
    if fmt != "dataset-csv":
        raise ValueError(f"unknown format {fmt!r}")
    mapping = mapping or ColumnMapping()
    frames = list(frames)
    if not frames:
        return b""
    ncols = len(mapping.header)
    label_names = {Label.NORMAL: "Normal", Label.ATTACK: "Attack", Label.UNLABELED: ""}
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(mapping.header)
    for f in frames:
        row = [""] * ncols
        row[mapping.timestamp] = f"{f.timestamp:.6f}"
        row[mapping.can_id] = format_id(f)
        row[mapping.dlc] = str(f.dlc)
        row[mapping.payload] = " ".join(f"{b:02X}" for b in f.payload)
        if mapping.label is not None:
            row[mapping.label] = label_names[f.label]
        writer.writerow(row)
    return buf.getvalue().encode("utf-8")


def read_frames(path, fmt: str = "dataset-csv", *, strict: bool = True) -> ParsedStream:
    with open(path, "rb") as fh:
        data = fh.read()
    if fmt == "candump":
        return parse_candump(data, strict=strict)
    return parse_dataset_csv(data, strict=strict)
