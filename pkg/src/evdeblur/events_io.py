"""Event stream and image file formats.

Event files are a small self-describing CSV::

    # sensor 346x260 window 0 50000
    t,x,y,p
    12,4,7,1
    ...

The directive line is mandatory, the ``t,x,y,p`` header is optional and
polarity is written as -1/+1.  Images are binary PGM/PPM with maxval 255.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

_DIRECTIVE = re.compile(r"^#\s*sensor\s+(\d+)x(\d+)\s+window\s+(-?\d+)\s+(-?\d+)\s*$")


class EventFormatError(ValueError):
    """Raised for malformed or invalid event files."""


class ImageFormatError(ValueError):
    """Raised for malformed PNM payloads."""


class Event(NamedTuple):
    t: int
    x: int
    y: int
    p: int


@dataclass(eq=False)
class EventStream:
    """Time-ordered events of one sensor inside an exposure window.

    Events are held column-wise as integer numpy arrays; iterate over the
    stream to get :class:`Event` records.
    """

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    width: int
    height: int
    window: tuple[int, int]

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.int64).reshape(-1)
        self.x = np.asarray(self.x, dtype=np.int64).reshape(-1)
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        self.p = np.asarray(self.p, dtype=np.int64).reshape(-1)
        self.width = int(self.width)
        self.height = int(self.height)
        self.window = (int(self.window[0]), int(self.window[1]))

    @classmethod
    def empty(cls, width, height, window):
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, width, height, window)

    @classmethod
    def from_events(cls, events, width, height, window):
        arr = np.array([tuple(e) for e in events], dtype=np.int64).reshape(-1, 4)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], width, height, window)

    def __len__(self):
        return len(self.t)

    def __iter__(self) -> Iterator[Event]:
        for row in zip(self.t.tolist(), self.x.tolist(), self.y.tolist(), self.p.tolist()):
            yield Event(*row)

    def __eq__(self, other):
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and self.window == other.window
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.p, other.p)
        )

    @property
    def polarity_sum(self) -> int:
        return int(self.p.sum())

    def select(self, mask) -> "EventStream":
        return EventStream(self.t[mask], self.x[mask], self.y[mask], self.p[mask],
                           self.width, self.height, self.window)

    def validate(self) -> "EventStream":
        """Check every stream invariant; return self so calls can chain."""
        t0, t1 = self.window
        if t0 < 0 or t1 < t0:
            raise EventFormatError(f"invalid window {t0} {t1}")
        if self.width <= 0 or self.height <= 0:
            raise EventFormatError(f"invalid sensor size {self.width}x{self.height}")
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise EventFormatError("event columns differ in length")
        if n == 0:
            return self
        if np.any(np.diff(self.t) < 0):
            raise EventFormatError("events are not sorted by time")
        if np.any((self.p != 1) & (self.p != -1)):
            raise EventFormatError("polarity must be -1 or +1")
        if np.any((self.x < 0) | (self.x >= self.width) | (self.y < 0) | (self.y >= self.height)):
            raise EventFormatError("event outside sensor bounds")
        if np.any((self.t < t0) | (self.t > t1)):
            raise EventFormatError("event outside window")
        return self


@dataclass(eq=False)
class ImagePlane:
    """Image with values in [0, 1], stored as an ``(height, width, channels)`` array."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise ValueError(f"image data must be HxWx1 or HxWx3, got {data.shape}")
        self.data = data

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def chw(self) -> np.ndarray:
        return np.ascontiguousarray(self.data.transpose(2, 0, 1))

    @classmethod
    def from_chw(cls, arr) -> "ImagePlane":
        return cls(np.asarray(arr).transpose(1, 2, 0))

    def __eq__(self, other):
        if not isinstance(other, ImagePlane):
            return NotImplemented
        return np.array_equal(self.data, other.data)


def _as_text(data) -> str:
    if isinstance(data, (bytes, bytearray, memoryview)):
        try:
            return bytes(data).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise EventFormatError(f"event file is not UTF-8: {exc}") from None
    return data


def parse_event_csv(data) -> EventStream:
    """Parse an event CSV (bytes or str) into a validated, time-sorted stream."""
    lines = _as_text(data).splitlines()
    if not lines:
        raise EventFormatError("line 1: missing '# sensor WxH window T0 T1' directive")
    m = _DIRECTIVE.match(lines[0].strip())
    if m is None:
        raise EventFormatError(f"line 1: bad directive {lines[0]!r}")
    width, height, t0, t1 = (int(g) for g in m.groups())
    if width <= 0 or height <= 0:
        raise EventFormatError(f"line 1: invalid sensor size {width}x{height}")
    if t0 < 0 or t1 < t0:
        raise EventFormatError(f"line 1: invalid window {t0} {t1}")

    rows = []
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line:
            continue
        if lineno == 2 and line.replace(" ", "") == "t,x,y,p":
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise EventFormatError(f"line {lineno}: expected 4 fields, got {len(parts)}")
        try:
            t, x, y, p = (int(v) for v in parts)
        except ValueError:
            raise EventFormatError(f"line {lineno}: non-integer field in {line!r}") from None
        if p == 0:
            raise EventFormatError(f"line {lineno}: polarity 0 is not allowed (use -1/+1)")
        if p not in (-1, 1):
            raise EventFormatError(f"line {lineno}: polarity {p} not in {{-1, +1}}")
        if not (0 <= x < width and 0 <= y < height):
            raise EventFormatError(f"line {lineno}: ({x}, {y}) outside {width}x{height} sensor")
        if not (t0 <= t <= t1):
            raise EventFormatError(f"line {lineno}: t={t} outside window [{t0}, {t1}]")
        rows.append((t, x, y, p))

    arr = np.array(rows, dtype=np.int64).reshape(-1, 4)
    order = np.argsort(arr[:, 0], kind="stable")
    arr = arr[order]
    return EventStream(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], width, height, (t0, t1))


def write_event_csv(stream: EventStream) -> bytes:
    t0, t1 = stream.window
    out = [f"# sensor {stream.width}x{stream.height} window {t0} {t1}\n"]
    out.extend(f"{t},{x},{y},{p}\n" for t, x, y, p in stream)
    return "".join(out).encode("utf-8")


def _pnm_header(buf: bytes):
    """Return (magic, width, height, maxval, payload offset)."""
    pos = 0
    fields = []
    n = len(buf)
    while len(fields) < 4:
        while pos < n and (buf[pos:pos + 1].isspace() or buf[pos:pos + 1] == b"#"):
            if buf[pos:pos + 1] == b"#":
                while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated header")
        fields.append(buf[start:pos])
    if pos >= n or not buf[pos:pos + 1].isspace():
        raise ImageFormatError("truncated header")
    magic = fields[0]
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise ImageFormatError("non-integer header field") from None
    return magic, width, height, maxval, pos + 1


def load_image_pnm(data: bytes) -> ImagePlane:
    """Decode a binary P5/P6 file with maxval 255 into an ImagePlane."""
    buf = bytes(data)
    if buf[:2] not in (b"P5", b"P6"):
        raise ImageFormatError(f"wrong magic {buf[:2]!r}, expected P5 or P6")
    magic, width, height, maxval, off = _pnm_header(buf)
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"wrong magic {magic!r}")
    if maxval != 255:
        raise ImageFormatError(f"maxval must be 255, got {maxval}")
    if width <= 0 or height <= 0:
        raise ImageFormatError(f"invalid size {width}x{height}")
    channels = 1 if magic == b"P5" else 3
    size = width * height * channels
    payload = buf[off:off + size]
    if len(payload) < size:
        raise ImageFormatError(f"truncated payload: {len(payload)} of {size} bytes")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return ImagePlane(pixels / 255.0)


def quantize(values) -> np.ndarray:
    """Clamp to [0, 1] and map to uint8 with round-half-away-from-zero."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def save_image_pnm(img: ImagePlane) -> bytes:
    magic = b"P5" if img.channels == 1 else b"P6"
    header = b"%s\n%d %d\n255\n" % (magic, img.width, img.height)
    return header + quantize(img.data).tobytes()


def read_image(path) -> ImagePlane:
    with open(path, "rb") as f:
        return load_image_pnm(f.read())


def write_image(path, img: ImagePlane) -> None:
    with open(path, "wb") as f:
        f.write(save_image_pnm(img))


def read_events(path) -> EventStream:
    with open(path, "rb") as f:
        return parse_event_csv(f.read())


def write_events(path, stream: EventStream) -> None:
    with open(path, "wb") as f:
        f.write(write_event_csv(stream))
