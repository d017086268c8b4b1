"""PSNR and per-frame CSV logs."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

PSNR_CAP = 99.0


def psnr(candidate: np.ndarray, reference: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for peak value 1.0, capped at 99 dB."""
    candidate = np.asarray(candidate, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if candidate.shape != reference.shape:
        raise DataError(f"shape mismatch: {candidate.shape} vs {reference.shape}")
    mse = float(np.mean((candidate - reference) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


@dataclass
class MetricsRow:
    t: int
    psnr_db: float = float("nan")
    aux: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"frame_index": self.t, "psnr_db": self.psnr_db, **self.aux}


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.4f}"
    return str(value)


def write_csv(rows: Iterable[dict], path, columns: Sequence[str]) -> None:
    """Header plus one line per row, ordered by ``frame_index`` when present.

    Floats are written with four fractional digits.
    """
    rows = list(rows)
    if rows and "frame_index" in columns:
        rows.sort(key=lambda r: r["frame_index"])
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(columns)
            for row in rows:
                writer.writerow([_fmt(row.get(c, "")) for c in columns])
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def _parse(value: str):
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    return value


def read_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [{k: _parse(v) for k, v in row.items()} for row in csv.DictReader(fh)]
