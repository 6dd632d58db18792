"""File formats: BANT tensors, BANW weight stores, binary PPM/PGM, palettes.

All multi-byte integers and floats are little-endian. Every reader raises
:class:`FormatError` (with the byte offset where parsing stopped) rather
than an arbitrary exception on malformed input.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .weights import WeightStore

BANT_MAGIC = b"BANT"
BANW_MAGIC = b"BANW"
VERSION = 1
_F32 = np.dtype("<f4")


class FormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated {what}: need {n} bytes, have {len(self.data) - self.pos}", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _read_bytes(source) -> bytes:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source)
    return Path(source).read_bytes()


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# BANT / BANW
# ---------------------------------------------------------------------------

def _encode_array(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim > 255:
        raise FormatError(f"rank {arr.ndim} does not fit in a byte")
    dims = struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape)
    return dims + np.ascontiguousarray(arr, _F32).tobytes()


def _decode_array(r: _Reader, what: str) -> np.ndarray:
    (rank,) = r.unpack("<B", f"{what} rank")
    dims = r.unpack(f"<{rank}I", f"{what} dims")
    count = int(np.prod(dims, dtype=np.int64))
    payload = r.take(count * 4, f"{what} payload")
    return np.frombuffer(payload, _F32).astype(np.float32).reshape(dims)


def encode_tensor(arr: np.ndarray) -> bytes:
    return BANT_MAGIC + struct.pack("<B", VERSION) + _encode_array(arr)


def decode_tensor(data: bytes) -> np.ndarray:
    r = _Reader(data)
    _header(r, BANT_MAGIC)
    arr = _decode_array(r, "tensor")
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes", r.pos)
    return arr


def save_tensor(path, arr: np.ndarray) -> None:
    _atomic_write(path, encode_tensor(arr))


def load_tensor(source) -> np.ndarray:
    return decode_tensor(_read_bytes(source))


def _header(r: _Reader, magic: bytes) -> None:
    got = r.take(4, "magic")
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}", 0)
    (version,) = r.unpack("<B", "version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)


def encode_weights(items) -> bytes:
    """BANW bytes for a WeightStore or an iterable of (name, array) pairs."""
    pairs = list(items.items()) if hasattr(items, "items") else list(items)
    seen = set()
    out = [BANW_MAGIC, struct.pack("<BI", VERSION, len(pairs))]
    for name, arr in pairs:
        if name in seen:
            raise FormatError(f"duplicate weight name {name!r}")
        seen.add(name)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"weight name too long ({len(raw)} bytes)")
        out.append(struct.pack("<H", len(raw)) + raw + _encode_array(arr))
    return b"".join(out)


def decode_weights(data: bytes) -> WeightStore:
    r = _Reader(data)
    _header(r, BANW_MAGIC)
    (count,) = r.unpack("<I", "entry count")
    store = WeightStore()
    for i in range(count):
        start = r.pos
        (n,) = r.unpack("<H", f"entry {i} name length")
        try:
            name = r.take(n, f"entry {i} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"entry {i} name is not UTF-8", start + 2) from exc
        if name in store:
            raise FormatError(f"duplicate weight name {name!r}", start)
        store.add(name, _decode_array(r, f"entry {name!r}"))
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes", r.pos)
    return store


def save_weights(path, store) -> None:
    _atomic_write(path, encode_weights(store))


def load_weights(source) -> WeightStore:
    return decode_weights(_read_bytes(source))


# ---------------------------------------------------------------------------
# PPM (P6) / PGM (P5), 8-bit only
# ---------------------------------------------------------------------------

_WS = b" \t\n\r\v\f"


def _token(data: bytes, pos: int) -> tuple[bytes, int, int]:
    """Next whitespace-separated header token, skipping '#' comments: (token, start, end)."""
    n = len(data)
    while pos < n:
        if data[pos] in _WS:
            pos += 1
        elif data[pos] == ord("#"):
            while pos < n and data[pos] not in b"\r\n":
                pos += 1
        else:
            break
    start = pos
    while pos < n and data[pos] not in _WS and data[pos] != ord("#"):
        pos += 1
    if start == pos:
        raise FormatError("truncated header", pos)
    return data[start:pos], start, pos


def _parse_pnm(data: bytes, magic: bytes, channels: int) -> np.ndarray:
    if data[:2] != magic:
        raise FormatError(f"bad magic {data[:2]!r}, expected {magic!r}", 0)
    pos = 2
    values = []
    for what in ("width", "height", "maxval"):
        tok, start, pos = _token(data, pos)
        if not tok.isdigit():
            raise FormatError(f"{what} {tok!r} is not a decimal integer", start)
        values.append(int(tok))
    width, height, maxval = values
    if width <= 0 or height <= 0:
        raise FormatError(f"non-positive size {width}x{height}", 2)
    if maxval != 255:
        raise FormatError(f"maxval {maxval} unsupported, must be 255", pos)
    if pos >= len(data) or data[pos] not in _WS:
        raise FormatError("missing whitespace after maxval", pos)
    pos += 1
    need = width * height * channels
    if len(data) - pos < need:
        raise FormatError(f"short payload: need {need} bytes, have {len(data) - pos}", pos)
    if len(data) - pos > need:
        raise FormatError(f"{len(data) - pos - need} trailing bytes", pos + need)
    arr = np.frombuffer(data, np.uint8, need, pos).copy()
    return arr.reshape(height, width, channels) if channels > 1 else arr.reshape(height, width)


def encode_ppm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise FormatError(f"PPM needs a uint8 [H, W, 3] array, got {image.dtype} {image.shape}")
    h, w, _ = image.shape
    return f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(image).tobytes()


def encode_pgm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim != 2:
        raise FormatError(f"PGM needs a [H, W] array, got shape {image.shape}")
    if image.size and (image.min() < 0 or image.max() > 255):
        raise FormatError("PGM values must lie in [0, 255]")
    h, w = image.shape
    return f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(image, np.uint8).tobytes()


def decode_ppm(data: bytes) -> np.ndarray:
    return _parse_pnm(data, b"P6", 3)


def decode_pgm(data: bytes, num_classes: int | None = None) -> np.ndarray:
    """Class-index map; with `num_classes`, values >= K are rejected."""
    arr = _parse_pnm(data, b"P5", 1)
    if num_classes is not None and arr.size and arr.max() >= num_classes:
        bad = tuple(int(i) for i in np.argwhere(arr >= num_classes)[0])
        offset = len(data) - arr.size + bad[0] * arr.shape[1] + bad[1]
        raise FormatError(f"class {int(arr[bad])} at pixel {bad} >= K={num_classes}", offset)
    return arr


def write_ppm(path, image) -> None:
    _atomic_write(path, encode_ppm(image))


def write_pgm(path, image) -> None:
    _atomic_write(path, encode_pgm(image))


def read_ppm(source) -> np.ndarray:
    return decode_ppm(_read_bytes(source))


def read_pgm(source, num_classes: int | None = None) -> np.ndarray:
    return decode_pgm(_read_bytes(source), num_classes)


# ---------------------------------------------------------------------------
# palettes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Palette:
    """Ordered (class name, RGB) pairs; class index = position."""

    entries: tuple[tuple[str, tuple[int, int, int]], ...]

    def __post_init__(self):
        names = [n for n, _ in self.entries]
        colors = [c for _, c in self.entries]
        if not self.entries:
            raise FormatError("palette is empty")
        if len(set(names)) != len(names):
            raise FormatError("palette class names must be unique")
        if len(set(colors)) != len(colors):
            raise FormatError("palette colors must be pairwise distinct")
        for name, rgb in self.entries:
            if len(rgb) != 3 or any(not 0 <= v <= 255 for v in rgb):
                raise FormatError(f"color for {name!r} is not an 8-bit RGB triple: {rgb}")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.entries)

    @property
    def colors(self) -> np.ndarray:
        return np.array([c for _, c in self.entries], np.uint8)

    def __len__(self) -> int:
        return len(self.entries)

    def encode(self, labels: np.ndarray) -> np.ndarray:
        labels = np.asarray(labels)
        if labels.size and (labels.min() < 0 or labels.max() >= len(self)):
            bad = tuple(int(i) for i in np.argwhere((labels < 0) | (labels >= len(self)))[0])
            raise FormatError(f"class {int(labels[bad])} at pixel {bad} not in palette of {len(self)}")
        return self.colors[labels]

    def decode(self, image: np.ndarray, ignore_label: int | None = None) -> np.ndarray:
        """RGB [H, W, 3] to class indices; unknown colors map to `ignore_label` if given."""
        image = np.asarray(image, np.uint8)
        key = (image[..., 0].astype(np.int32) << 16) | (image[..., 1].astype(np.int32) << 8) | image[..., 2]
        c = self.colors.astype(np.int32)
        table = (c[:, 0] << 16) | (c[:, 1] << 8) | c[:, 2]
        order = np.argsort(table)
        pos = np.clip(np.searchsorted(table[order], key), 0, len(table) - 1)
        found = table[order][pos] == key
        out = order[pos].astype(np.int64)
        if not found.all():
            if ignore_label is None:
                bad = tuple(int(i) for i in np.argwhere(~found)[0])
                raise FormatError(f"color {tuple(int(v) for v in image[bad])} at pixel {bad} not in palette")
            out[~found] = ignore_label
        return out

    def to_text(self) -> str:
        return "".join(f"{n} {r} {g} {b}\n" for n, (r, g, b) in self.entries)

    @classmethod
    def from_text(cls, text: str) -> "Palette":
        entries = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise FormatError(f"palette line {lineno}: expected 'name r g b', got {line!r}")
            try:
                rgb = tuple(int(v) for v in parts[1:])
            except ValueError:
                raise FormatError(f"palette line {lineno}: non-integer color in {line!r}") from None
            entries.append((parts[0], rgb))
        return cls(tuple(entries))

    @classmethod
    def load(cls, path) -> "Palette":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


# dataset conventions, not values from any experiment
ISPRS_PALETTE = Palette((
    ("imp_surf", (255, 255, 255)),
    ("building", (0, 0, 255)),
    ("low_veg", (0, 255, 255)),
    ("tree", (0, 255, 0)),
    ("car", (255, 255, 0)),
    ("clutter", (255, 0, 0)),
))

UAVID_PALETTE = Palette((
    ("clutter", (0, 0, 0)),
    ("building", (128, 0, 0)),
    ("road", (128, 64, 128)),
    ("tree", (0, 128, 0)),
    ("low_veg", (128, 128, 0)),
    ("moving_car", (64, 0, 128)),
    ("static_car", (192, 0, 192)),
    ("human", (64, 64, 0)),
))

PALETTES = {"isprs": ISPRS_PALETTE, "uavid": UAVID_PALETTE}


def default_palette(num_classes: int, names: Sequence[str] | None = None) -> Palette:
    """ISPRS for K=6, UAVid for K=8, otherwise evenly spread distinct colors."""
    if names is None:
        for pal in PALETTES.values():
            if len(pal) == num_classes:
                return pal
    names = names or [f"class{i}" for i in range(num_classes)]
    # distinct colors on a 6x6x6 cube, walking it with a stride coprime to 216
    colors = [((i * 47) % 216) for i in range(num_classes)]
    return Palette(tuple((n, (51 * (c // 36), 51 * ((c // 6) % 6), 51 * (c % 6)))
                         for n, c in zip(names, colors)))


def load_palette(spec: str) -> Palette:
    """A builtin palette name ('isprs', 'uavid') or a palette file path."""
    if spec in PALETTES:
        return PALETTES[spec]
    return Palette.load(spec)
