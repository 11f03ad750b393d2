"""Raw event data model, the EVT1 codec and dataset manifests.

An :class:`EventStream` keeps its events column-wise in read-only numpy arrays
so the augmentation and rasterization code can stay vectorized. The public
constructor and the decoder always validate; ``EventStream.unchecked`` exists
for internal transforms whose output is valid by construction.

EVT1 layout (little-endian)::

    "EVT1" | width u32 | height u32 | count u64 | count * (x u16 | y u16 | t u32 | p u8)

Polarity is stored as a byte, 0 for -1 and 1 for +1.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .errors import (
    BadMagic,
    InvariantViolation,
    MalformedLine,
    MissingFile,
    MixedLabelPresence,
    Truncated,
)

EVT1_MAGIC = b"EVT1"
EVT1_HEADER = struct.Struct("<4sIIQ")
EVT1_RECORD = np.dtype([("x", "<u2"), ("y", "<u2"), ("t", "<u4"), ("p", "u1")])
assert EVT1_HEADER.size == 20 and EVT1_RECORD.itemsize == 9


class Event(NamedTuple):
    x: int
    y: int
    t: int
    polarity: int


def _frozen(a: np.ndarray, dtype) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True).reshape(-1)
    out.setflags(write=False)
    return out


class EventStream:
    """Ordered events on a ``width`` x ``height`` sensor.

    ``x`` is the pixel column and ``y`` the pixel row, both 0-based.
    Timestamps are microseconds relative to the stream start.
    """

    __slots__ = ("width", "height", "x", "y", "t", "p")

    def __init__(self, width: int, height: int, x, y, t, p):
        self.width = int(width)
        self.height = int(height)
        self.x = _frozen(x, np.int64)
        self.y = _frozen(y, np.int64)
        self.t = _frozen(t, np.int64)
        self.p = _frozen(p, np.int8)
        self.validate()

    @classmethod
    def empty(cls, width: int, height: int) -> EventStream:
        z = np.zeros(0, dtype=np.int64)
        return cls(width, height, z, z, z, z)

    @classmethod
    def from_events(cls, width: int, height: int, events: Sequence[Event | tuple]) -> EventStream:
        if len(events) == 0:
            return cls.empty(width, height)
        cols = np.asarray(events, dtype=np.int64).reshape(-1, 4)
        return cls(width, height, cols[:, 0], cols[:, 1], cols[:, 2], cols[:, 3])

    def validate(self) -> None:
        n = self.x.size
        if not (self.y.size == self.t.size == self.p.size == n):
            raise InvariantViolation("event columns have different lengths")
        if self.width < 1 or self.height < 1:
            raise InvariantViolation(f"bad sensor geometry {self.width}x{self.height}")
        if n == 0:
            return
        if self.x.min() < 0 or self.x.max() >= self.width:
            raise InvariantViolation(f"x outside [0, {self.width})")
        if self.y.min() < 0 or self.y.max() >= self.height:
            raise InvariantViolation(f"y outside [0, {self.height})")
        if self.t.min() < 0:
            raise InvariantViolation("negative timestamp")
        if n > 1 and np.any(np.diff(self.t) < 0):
            raise InvariantViolation("timestamps decrease")
        if not np.all((self.p == 1) | (self.p == -1)):
            raise InvariantViolation("polarity outside {-1, +1}")

    def __len__(self) -> int:
        return int(self.x.size)

    def __iter__(self) -> Iterator[Event]:
        for row in zip(self.x.tolist(), self.y.tolist(), self.t.tolist(), self.p.tolist()):
            yield Event(*row)

    @property
    def events(self) -> list[Event]:
        return list(self)

    @property
    def duration(self) -> int:
        return int(self.t[-1] - self.t[0]) if len(self) else 0

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.p, other.p)
        )

    def __repr__(self) -> str:
        return f"EventStream({self.width}x{self.height}, {len(self)} events)"

    @classmethod
    def unchecked(cls, width, height, x, y, t, p) -> EventStream:
        """Build without validation. Only for transforms that provably keep the invariants."""
        self = object.__new__(cls)
        self.width, self.height = int(width), int(height)
        for name, col, dtype in (("x", x, np.int64), ("y", y, np.int64), ("t", t, np.int64), ("p", p, np.int8)):
            a = np.asarray(col, dtype=dtype)
            if a.flags.writeable:
                a = a.copy() if a.base is not None else a
                a.setflags(write=False)
            setattr(self, name, a)
        return self

    def replace(self, **cols) -> EventStream:
        """Copy with some of width/height/x/y/t/p swapped out (revalidated)."""
        kw = dict(width=self.width, height=self.height, x=self.x, y=self.y, t=self.t, p=self.p)
        kw.update(cols)
        return EventStream(**kw)

    def take(self, mask_or_index) -> EventStream:
        """Subsequence selected by a boolean mask or increasing index array."""
        return EventStream.unchecked(
            self.width,
            self.height,
            self.x[mask_or_index],
            self.y[mask_or_index],
            self.t[mask_or_index],
            self.p[mask_or_index],
        )


def decode_evt1(data: bytes) -> EventStream:
    data = bytes(data)
    if data[:4] != EVT1_MAGIC:
        raise BadMagic(f"expected {EVT1_MAGIC!r}, got {data[:4]!r}")
    if len(data) < EVT1_HEADER.size:
        raise Truncated(f"header needs {EVT1_HEADER.size} bytes, got {len(data)}")
    _, width, height, count = EVT1_HEADER.unpack_from(data)
    expected = EVT1_HEADER.size + count * EVT1_RECORD.itemsize
    if len(data) != expected:
        raise Truncated(f"{count} events need {expected} bytes, got {len(data)}")
    rec = np.frombuffer(data, dtype=EVT1_RECORD, count=count, offset=EVT1_HEADER.size)
    if count and rec["p"].max() > 1:
        raise InvariantViolation("polarity byte not in {0, 1}")
    p = rec["p"].astype(np.int8) * 2 - 1
    return EventStream(width, height, rec["x"], rec["y"], rec["t"], p)


def encode_evt1(stream: EventStream) -> bytes:
    stream.validate()
    n = len(stream)
    if stream.width >= 2**32 or stream.height >= 2**32:
        raise InvariantViolation("sensor geometry does not fit u32")
    if n and (stream.x.max() >= 2**16 or stream.y.max() >= 2**16):
        raise InvariantViolation("coordinates do not fit u16")
    if n and stream.t.max() >= 2**32:
        raise InvariantViolation("timestamps do not fit u32")
    rec = np.empty(n, dtype=EVT1_RECORD)
    rec["x"] = stream.x
    rec["y"] = stream.y
    rec["t"] = stream.t
    rec["p"] = (stream.p > 0).astype(np.uint8)
    return EVT1_HEADER.pack(EVT1_MAGIC, stream.width, stream.height, n) + rec.tobytes()


def read_evt1(path) -> EventStream:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    return decode_evt1(path.read_bytes())


def write_evt1(path, stream: EventStream) -> None:
    Path(path).write_bytes(encode_evt1(stream))


@dataclass(frozen=True)
class ManifestEntry:
    event_path: Path
    teacher_path: Path
    label: int | None = None


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    path: Path | None = None

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def labeled(self) -> bool:
        return bool(self.entries) and self.entries[0].label is not None

    @property
    def labels(self) -> np.ndarray | None:
        if not self.labeled:
            return None
        return np.array([e.label for e in self.entries], dtype=np.int64)


def load_manifest(path) -> DatasetManifest:
    """Read a tab-separated manifest. Relative paths resolve against its directory."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    base = path.parent
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) not in (2, 3):
            raise MalformedLine(f"{path}:{lineno}: expected 2 or 3 columns, got {len(cols)}")
        label = None
        if len(cols) == 3:
            try:
                label = int(cols[2])
            except ValueError:
                raise MalformedLine(f"{path}:{lineno}: bad label {cols[2]!r}") from None
            if label < 0:
                raise MalformedLine(f"{path}:{lineno}: negative label")
        rows.append((lineno, cols[0], cols[1], label))

    if len({r[3] is None for r in rows}) > 1:
        raise MixedLabelPresence(f"{path}: some lines carry a label and some do not")

    entries = []
    for lineno, ev, tv, label in rows:
        ev_path, tv_path = base / ev, base / tv
        for p in (ev_path, tv_path):
            if not p.is_file():
                raise MissingFile(f"{path}:{lineno}: {p}")
        entries.append(ManifestEntry(ev_path, tv_path, label))
    return DatasetManifest(tuple(entries), path)


def write_manifest(path, rows: Sequence[tuple[str, str, int | None]]) -> None:
    lines = []
    for ev, tv, label in rows:
        lines.append(f"{ev}\t{tv}" if label is None else f"{ev}\t{tv}\t{label}")
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
