"""Landmark files, grayscale images, manifests and dataset splits."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_random_seed, check_shape
from .exceptions import InsufficientDataError, PTSParseError, TruncatedFileError, UnsupportedFormatError

SPLITS = ("train", "validation", "test")


@dataclass
class AnnotatedImage:
    image: np.ndarray
    shape: np.ndarray
    source_path: str = ""
    bbox: tuple | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        img = np.asarray(self.image)
        if img.ndim != 2 or img.size == 0:
            raise ValueError("image must be a non-empty 2-D raster")
        if img.dtype != np.uint8:
            img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        self.image = img
        self.shape = check_shape(self.shape)


@dataclass
class Dataset:
    records: list
    split: list
    seed: int | None = None

    def __post_init__(self):
        if len(self.split) != len(self.records):
            raise ValueError("one split label per record required")
        bad = set(self.split) - set(SPLITS)
        if bad:
            raise ValueError(f"unknown split labels {sorted(bad)}")

    def subset(self, name: str) -> list:
        return [r for r, s in zip(self.records, self.split) if s == name]

    def indices(self, name: str) -> list[int]:
        return [i for i, s in enumerate(self.split) if s == name]

    def __len__(self):
        return len(self.records)


# PTS --------------------------------------------------------------------------

def parse_pts(text: str) -> np.ndarray:
    """Parse PTS landmark text into 0-based ``(N, 2)`` pixel coordinates."""
    lines = text.splitlines()

    def line(i):
        return lines[i].strip() if i < len(lines) else None

    def header(i, key):
        s = line(i)
        if s is None or ":" not in s:
            raise PTSParseError(f"expected '{key}: ...' header", i + 1)
        k, v = (part.strip() for part in s.split(":", 1))
        if k != key:
            raise PTSParseError(f"expected '{key}' header, found {k!r}", i + 1)
        return v

    header(0, "version")
    n_txt = header(1, "n_points")
    try:
        n = int(n_txt)
    except ValueError:
        raise PTSParseError(f"n_points must be an integer, got {n_txt!r}", 2) from None
    if n < 1:
        raise PTSParseError("n_points must be positive", 2)
    if line(2) != "{":
        raise PTSParseError("expected '{'", 3)
    pts = np.empty((n, 2))
    for k in range(n):
        i = 3 + k
        s = line(i)
        if s is None:
            raise PTSParseError(f"expected coordinate {k + 1} of {n}, found end of file", i + 1)
        parts = s.split()
        if len(parts) != 2:
            raise PTSParseError(f"expected 'x y' for coordinate {k + 1} of {n}, found {s!r}", i + 1)
        try:
            pts[k] = [float(parts[0]), float(parts[1])]
        except ValueError:
            raise PTSParseError(f"non-numeric coordinate {s!r}", i + 1) from None
        if not np.all(np.isfinite(pts[k])):
            raise PTSParseError(f"non-finite coordinate {s!r}", i + 1)
    end = 3 + n
    if line(end) != "}":
        raise PTSParseError("expected '}' after the last coordinate", end + 1)
    if any(s.strip() for s in lines[end + 1:]):
        raise PTSParseError("unexpected content after '}'", end + 2)
    return pts - 1.0


def write_pts(shape) -> str:
    """Inverse of :func:`parse_pts` (6 decimal places, 1-based)."""
    pts = check_shape(shape) + 1.0
    body = "\n".join(f"{x:.6f} {y:.6f}" for x, y in pts)
    return f"version: 1\nn_points: {len(pts)}\n{{\n{body}\n}}\n"


def read_pts(path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        return parse_pts(fh.read())


def save_pts(path, shape) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(write_pts(shape))


# images -----------------------------------------------------------------------

def _pgm_tokens(data: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens; returns (tokens, offset)."""
    tokens = []
    i = 0
    while len(tokens) < count:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if i < len(data) and data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j:j + 1].isspace() and data[j:j + 1] != b"#":
            j += 1
        if j == i:
            raise TruncatedFileError("PGM header ends prematurely")
        tokens.append(data[i:j])
        i = j
    return tokens, i + 1  # exactly one whitespace byte follows maxval


def decode_pgm(data: bytes) -> np.ndarray:
    magic = data[:2]
    if magic != b"P5":
        raise UnsupportedFormatError(
            f"unsupported image format {magic!r}: only binary PGM (P5, maxval 255) is supported")
    tokens, off = _pgm_tokens(data[2:], 3)
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise UnsupportedFormatError("malformed P5 header") from None
    if maxval != 255:
        raise UnsupportedFormatError(f"P5 maxval {maxval} unsupported (need 255)")
    if w <= 0 or h <= 0:
        raise UnsupportedFormatError(f"bad P5 dimensions {w}x{h}")
    payload = data[2 + off:]
    if len(payload) < w * h:
        raise TruncatedFileError(f"P5 payload has {len(payload)} bytes, expected {w * h} ({w}x{h})")
    return np.frombuffer(payload[:w * h], dtype=np.uint8).reshape(h, w).copy()


def encode_pgm(image) -> bytes:
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("PGM needs a 2-D raster")
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    h, w = img.shape
    return b"P5\n%d %d\n255\n" % (w, h) + img.tobytes()


def load_image(path) -> np.ndarray:
    """Load an 8-bit grayscale PGM (P5) or PNG as a ``uint8`` array."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        try:
            from PIL import Image
        except ImportError:  # pragma: no cover
            raise UnsupportedFormatError("PNG support needs Pillow") from None
        import io
        with Image.open(io.BytesIO(data)) as im:
            if im.mode != "L":
                raise UnsupportedFormatError(f"PNG mode {im.mode!r} is not 8-bit grayscale")
            return np.asarray(im, dtype=np.uint8).copy()
    return decode_pgm(data)


def save_pgm(path, image) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pgm(image))


# manifests and splits ---------------------------------------------------------

def read_manifest(path) -> list[AnnotatedImage]:
    """Load records from ``image_path,pts_path[,x0,y0,x1,y1]`` lines.

    Relative paths are resolved against the manifest's directory.
    """
    if not os.path.isfile(path):
        raise FileNotFoundError(f"manifest not found: {path}")
    base = os.path.dirname(os.path.abspath(path))
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].strip().startswith("#"):
                continue
            row = [c.strip() for c in row]
            if lineno == 1 and row[0] == "image_path":
                continue
            if len(row) not in (2, 6):
                raise ValueError(f"{path}:{lineno}: expected 2 or 6 columns, got {len(row)}")
            img_path, pts_path = (p if os.path.isabs(p) else os.path.join(base, p) for p in row[:2])
            for p in (img_path, pts_path):
                if not os.path.isfile(p):
                    raise FileNotFoundError(f"{path}:{lineno}: missing file {p}")
            bbox = tuple(float(v) for v in row[2:]) if len(row) == 6 else None
            records.append(AnnotatedImage(load_image(img_path), read_pts(pts_path), img_path, bbox))
    return records


def write_manifest(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_path", "pts_path"])
        for row in rows:
            writer.writerow(row)


def split_counts(n: int, fractions) -> list[int]:
    """Largest-remainder allocation of ``n`` items to ``fractions``."""
    f = np.asarray(fractions, dtype=np.float64)
    raw = f * n
    counts = np.floor(raw + 1e-9).astype(int)
    order = np.argsort(-(raw - counts), kind="stable")
    for k in order[: n - counts.sum()]:
        counts[k] += 1
    return counts.tolist()


def split_dataset(records, fractions=(0.8, 0.2), seed=0) -> Dataset:
    """Seeded shuffle followed by contiguous assignment.

    Two fractions mean (train, test); three mean (train, validation, test).
    """
    records = list(records)
    if not records:
        raise InsufficientDataError("cannot split an empty record list")
    f = [float(x) for x in fractions]
    if len(f) not in (2, 3) or min(f) < 0 or abs(sum(f) - 1.0) > 1e-9:
        raise ValueError("fractions must be 2 or 3 non-negative numbers summing to 1")
    names = ("train", "test") if len(f) == 2 else SPLITS
    counts = split_counts(len(records), f)
    perm = check_random_seed(seed).permutation(len(records))
    labels = [None] * len(records)
    pos = 0
    for name, cnt in zip(names, counts):
        for i in perm[pos:pos + cnt]:
            labels[i] = name
        pos += cnt
    return Dataset(records, labels, seed)
