"""Seeded noise synthesis and time-varying noise schedules.

Intensities live on [0, 1]; a standard deviation of 25 on the 8-bit scale
is ``25 / 255`` here. Noisy frames are never clipped, except by the JPEG
path, which is 8-bit by construction.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Union

import numpy as np
from scipy.fft import dctn, idctn
from scipy.signal import fftconvolve

from .errors import DataError

KINDS = ("awgn", "multiplicative", "correlated", "salt_pepper", "jpeg_awgn")

# JPEG Annex K luminance table, row-major
JPEG_LUMA = np.array([
    16, 11, 10, 16, 24, 40, 51, 61,
    12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77,
    24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
], dtype=np.int64).reshape(8, 8)


class NoiseSpecError(DataError):
    pass


@dataclass(frozen=True)
class NoiseSpec:
    """A corruption process.

    ``sigma`` is the AWGN std (awgn, correlated, jpeg_awgn) or the std of
    the multiplicative factor (multiplicative); ``p`` the replacement
    probability for salt_pepper.
    """

    kind: str
    sigma: float = 0.0
    p: float = 0.0
    quality: int = 10
    disk_radius: float = 2.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise NoiseSpecError(f"unknown noise kind {self.kind!r}; expected one of {KINDS}")
        if self.sigma < 0:
            raise NoiseSpecError(f"sigma must be >= 0, got {self.sigma}")
        if not 0 <= self.p <= 1:
            raise NoiseSpecError(f"p must lie in [0, 1], got {self.p}")
        if not 1 <= self.quality <= 100:
            raise NoiseSpecError(f"quality must lie in [1, 100], got {self.quality}")
        if self.kind == "correlated" and self.disk_radius < 1:
            raise NoiseSpecError(f"disk_radius must be >= 1, got {self.disk_radius}")

    def describe(self) -> str:
        s8 = f"{self.sigma * 255:g}"
        if self.kind == "awgn":
            return f"awgn(sigma={s8})"
        if self.kind == "multiplicative":
            return f"multiplicative(sigma={s8})"
        if self.kind == "correlated":
            return f"correlated(sigma={s8};radius={self.disk_radius:g})"
        if self.kind == "salt_pepper":
            return f"salt_pepper(p={self.p:g})"
        return f"jpeg_awgn(sigma={s8};quality={self.quality})"


def awgn(sigma: float) -> NoiseSpec:
    return NoiseSpec("awgn", sigma=sigma)


@dataclass(frozen=True)
class SeededRng:
    """Derives an independent generator per (frame index, purpose)."""

    master_seed: int = 0

    def stream(self, t: int, purpose: str = "noise") -> np.random.Generator:
        tag = zlib.crc32(purpose.encode("utf-8"))
        ss = np.random.SeedSequence([self.master_seed & (2 ** 64 - 1), int(t), tag])
        return np.random.default_rng(ss)


def disk_kernel(radius: float) -> np.ndarray:
    """Indicator of ``||x|| <= radius`` on the integer grid, unit L2 norm."""
    r = int(np.floor(radius))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    k = (yy ** 2 + xx ** 2 <= radius ** 2).astype(np.float64)
    return k / np.sqrt((k ** 2).sum())


def correlated_noise(shape, sigma: float, disk_radius: float, rng: np.random.Generator) -> np.ndarray:
    """White Gaussian noise filtered by a unit-norm disk; marginal std is ``sigma``."""
    k = disk_kernel(disk_radius)
    r = k.shape[0] // 2
    h, w = shape
    white = rng.standard_normal((h + 2 * r, w + 2 * r))
    if r == 0:
        return sigma * white
    return sigma * fftconvolve(white, k, mode="valid")


def salt_pepper(u: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    """Replace each pixel by a Uniform[0, 1] draw with probability ``p``."""
    hit = rng.random(u.shape) < p
    values = rng.random(u.shape)
    return np.where(hit, values, u)


def quant_table(quality: int) -> np.ndarray:
    """Luminance table scaled with the IJG quality convention."""
    if not 1 <= quality <= 100:
        raise NoiseSpecError(f"quality must lie in [1, 100], got {quality}")
    scale = 5000 // quality if quality < 50 else 200 - 2 * quality
    return np.clip((JPEG_LUMA * scale + 50) // 100, 1, 255)


def _blocks(x: np.ndarray) -> tuple[np.ndarray, tuple[int, int]]:
    h, w = x.shape
    ph, pw = -h % 8, -w % 8
    x = np.pad(x, ((0, ph), (0, pw)), mode="edge")
    H, W = x.shape
    return x.reshape(H // 8, 8, W // 8, 8).transpose(0, 2, 1, 3), (H, W)


def jpeg_coefficients(u: np.ndarray, quality: int) -> tuple[np.ndarray, np.ndarray]:
    """Dequantized 8x8 DCT coefficients, shape (rows/8, cols/8, 8, 8), and the table."""
    table = quant_table(quality)
    q = np.floor(np.clip(u, 0.0, 1.0) * 255 + 0.5) - 128
    blocks, _ = _blocks(q)
    coef = dctn(blocks, type=2, axes=(-2, -1), norm="ortho")
    return np.round(coef / table) * table, table


def jpeg_degrade(u: np.ndarray, quality: int) -> np.ndarray:
    """Round trip through 8x8 DCT quantization at IJG ``quality``; result is 8-bit valued."""
    u = np.asarray(u, dtype=np.float64)
    h, w = u.shape
    coef, _ = jpeg_coefficients(u, quality)
    blocks = idctn(coef, type=2, axes=(-2, -1), norm="ortho")
    nb_r, nb_c = blocks.shape[:2]
    img = blocks.transpose(0, 2, 1, 3).reshape(nb_r * 8, nb_c * 8)[:h, :w]
    img = np.clip(np.floor(img + 128 + 0.5), 0, 255)
    return img / 255.0


def apply_noise(u: np.ndarray, spec: NoiseSpec, rng: SeededRng, t: int) -> np.ndarray:
    """Corrupt clean frame ``u`` (frame index ``t``) according to ``spec``."""
    if not isinstance(spec, NoiseSpec):
        raise NoiseSpecError(f"expected a NoiseSpec, got {type(spec).__name__}")
    u = np.asarray(u, dtype=np.float64)
    gen = rng.stream(t, spec.kind)
    if spec.kind == "awgn":
        if spec.sigma == 0:
            return u.copy()
        return u + spec.sigma * gen.standard_normal(u.shape)
    if spec.kind == "multiplicative":
        return u + spec.sigma * gen.standard_normal(u.shape) * u
    if spec.kind == "correlated":
        return u + correlated_noise(u.shape, spec.sigma, spec.disk_radius, gen)
    if spec.kind == "salt_pepper":
        return salt_pepper(u, spec.p, gen)
    if spec.kind == "jpeg_awgn":
        return jpeg_degrade(u + spec.sigma * gen.standard_normal(u.shape), spec.quality)
    raise NoiseSpecError(f"unknown noise kind {spec.kind!r}")


@dataclass(frozen=True)
class Constant:
    spec: NoiseSpec


@dataclass(frozen=True)
class LinearRamp:
    start: NoiseSpec
    end: NoiseSpec
    t_start: int
    t_end: int

    def __post_init__(self):
        if self.start.kind != self.end.kind:
            raise NoiseSpecError("ramp endpoints must share a noise kind")
        if self.t_end < self.t_start:
            raise NoiseSpecError("ramp t_end precedes t_start")


@dataclass(frozen=True)
class Switch:
    first: NoiseSpec
    second: NoiseSpec
    t_switch: int


Schedule = Union[Constant, LinearRamp, Switch]


def schedule_eval(schedule: Schedule, t: float) -> NoiseSpec:
    if isinstance(schedule, NoiseSpec):
        return schedule
    if isinstance(schedule, Constant):
        return schedule.spec
    if isinstance(schedule, LinearRamp):
        span = schedule.t_end - schedule.t_start
        a = 1.0 if span == 0 else float(np.clip((t - schedule.t_start) / span, 0.0, 1.0))
        sigma = (1 - a) * schedule.start.sigma + a * schedule.end.sigma
        return replace(schedule.start, sigma=sigma)
    if isinstance(schedule, Switch):
        return schedule.first if t < schedule.t_switch else schedule.second
    raise NoiseSpecError(f"unknown schedule {schedule!r}")


# -- text config -------------------------------------------------------------

def _spec_from(fields: dict, prefix: str) -> NoiseSpec:
    def get(name, default=None):
        return fields.get(prefix + name, fields.get(name, default))

    kind = get("kind")
    if kind is None:
        raise NoiseSpecError(f"missing {prefix}kind")
    return NoiseSpec(
        kind=kind,
        sigma=float(get("sigma", 0.0)) / 255.0,
        p=float(get("p", 0.0)),
        quality=int(get("quality", 10)),
        disk_radius=float(get("radius", 2.0)),
    )


def parse_schedule(text: str) -> Schedule:
    """Parse the ``key = value`` noise config format.

    ::

        # sigmas on the 8-bit scale
        schedule = switch        # constant | ramp | switch
        a.kind = awgn
        a.sigma = 50
        b.kind = salt_pepper
        b.p = 0.25
        t_switch = 200

    ``constant`` reads ``a.*`` (the ``a.`` prefix may be dropped);
    ``ramp`` reads ``a.*``/``b.*`` plus ``t_start``/``t_end``.
    """
    fields = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise NoiseSpecError(f"line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        fields[key] = value
    mode = fields.get("schedule", "constant")
    try:
        if mode == "constant":
            return Constant(_spec_from(fields, "a."))
        if mode == "ramp":
            return LinearRamp(_spec_from(fields, "a."), _spec_from(fields, "b."),
                              int(fields["t_start"]), int(fields["t_end"]))
        if mode == "switch":
            return Switch(_spec_from(fields, "a."), _spec_from(fields, "b."), int(fields["t_switch"]))
    except KeyError as exc:
        raise NoiseSpecError(f"missing key {exc.args[0]!r} for schedule {mode}") from None
    except ValueError as exc:
        raise NoiseSpecError(str(exc)) from None
    raise NoiseSpecError(f"unknown schedule {mode!r}")


def load_schedule(path) -> Schedule:
    return parse_schedule(Path(path).read_text())
