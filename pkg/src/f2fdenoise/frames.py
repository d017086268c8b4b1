"""Grayscale frame sequences stored as binary PGM files.

Frames are float arrays in [0, 1]. Sequences are addressed with a
printf-style pattern such as ``frames/%03d.pgm`` and indexed from 1.
"""

from __future__ import annotations

import re
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError


class PGMFormatError(DataError):
    pass


class EmptySequenceError(DataError):
    pass


class MissingFrameError(DataError):
    def __init__(self, index, pattern):
        super().__init__(f"frame {index} missing for pattern {pattern!r}")
        self.index = index


class InconsistentDimsError(DataError):
    def __init__(self, index, shape, expected):
        super().__init__(f"frame {index} has shape {shape}, expected {expected}")
        self.index = index


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_pgm(path) -> np.ndarray:
    """Read a P5 PGM (maxval <= 65535) and scale to [0, 1]."""
    data = Path(path).read_bytes()
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise PGMFormatError(f"{path}: truncated header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P5":
        raise PGMFormatError(f"{path}: unsupported magic {fields[0]!r}, expected P5")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise PGMFormatError(f"{path}: non-numeric header field") from None
    if width <= 0 or height <= 0 or not 0 < maxval <= 65535:
        raise PGMFormatError(f"{path}: bad dimensions or maxval ({width}x{height}, {maxval})")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise PGMFormatError(f"{path}: missing whitespace after header")
    pos += 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    n = width * height
    if len(data) - pos < n * dtype.itemsize:
        raise PGMFormatError(f"{path}: pixel data truncated")
    pixels = np.frombuffer(data, dtype=dtype, count=n, offset=pos).reshape(height, width)
    return pixels.astype(np.float64) / maxval


def quantize(frame: np.ndarray, maxval: int = 255) -> np.ndarray:
    """Clip to [0, 1] and round half away from zero onto 0..maxval."""
    x = np.clip(np.asarray(frame, dtype=np.float64), 0.0, 1.0) * maxval
    return np.floor(x + 0.5).astype(np.int64)


def write_pgm(path, frame: np.ndarray, bits: int = 8) -> None:
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    frame = np.asarray(frame)
    if frame.ndim != 2:
        raise ValueError(f"expected a 2-D frame, got shape {frame.shape}")
    maxval = 255 if bits == 8 else 65535
    q = quantize(frame, maxval).astype("u1" if bits == 8 else ">u2")
    h, w = frame.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + q.tobytes())


def _pattern_regex(pattern: str) -> re.Pattern:
    m = re.search(r"%(0?)(\d*)d", pattern)
    if m is None:
        raise ValueError(f"pattern {pattern!r} has no %d field")
    head, tail = pattern[:m.start()], pattern[m.end():]
    return re.compile(re.escape(head) + r"(\d+)" + re.escape(tail) + r"\Z")


def sequence_paths(pattern: str) -> list[Path]:
    """Existing files for ``pattern``, indexed contiguously from 1."""
    pattern = str(pattern)
    directory = Path(pattern).parent
    name_re = _pattern_regex(Path(pattern).name)
    found = {}
    if directory.is_dir():
        for p in directory.iterdir():
            m = name_re.match(p.name)
            if m and p.name == Path(pattern % int(m.group(1))).name:
                found[int(m.group(1))] = p
    if not found:
        raise EmptySequenceError(f"no frames match {pattern!r}")
    last = max(found)
    for t in range(1, last + 1):
        if t not in found:
            raise MissingFrameError(t, pattern)
    return [found[t] for t in range(1, last + 1)]


def load_sequence(pattern: str) -> list[np.ndarray]:
    frames = []
    for t, path in enumerate(sequence_paths(pattern), start=1):
        f = read_pgm(path)
        if frames and f.shape != frames[0].shape:
            raise InconsistentDimsError(t, f.shape, frames[0].shape)
        frames.append(f)
    return frames


def save_sequence(frames: Sequence[np.ndarray], pattern: str, bits: int = 8) -> list[Path]:
    frames = list(frames)
    for t, f in enumerate(frames, start=1):
        if f.shape != frames[0].shape:
            raise InconsistentDimsError(t, f.shape, frames[0].shape)
    paths = []
    for t, f in enumerate(frames, start=1):
        path = Path(str(pattern) % t)
        path.parent.mkdir(parents=True, exist_ok=True)
        write_pgm(path, f, bits)
        paths.append(path)
    return paths


def prepare_sequence(color_frames: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Average the three color channels, then halve each dimension by 2x2 box averaging.

    Odd trailing rows/columns are dropped.
    """
    out = []
    for t, frame in enumerate(color_frames, start=1):
        frame = np.asarray(frame, dtype=np.float64)
        if frame.ndim != 3 or frame.shape[2] != 3:
            raise DataError(f"frame {t}: expected (H, W, 3) color data, got shape {frame.shape}")
        gray = frame.mean(axis=2)
        h, w = gray.shape[0] // 2, gray.shape[1] // 2
        gray = gray[:2 * h, :2 * w]
        out.append(gray.reshape(h, 2, w, 2).mean(axis=(1, 3)))
    return out
