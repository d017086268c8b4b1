"""Coarse-to-fine TV-L1 optical flow (dual formulation with iterative warping).

Minimizes, at every pyramid level and for each linearization,

    sum_x |grad u1| + |grad u2| + lambda_data * |I1(x + u) - I0(x)|

by alternating a pointwise thresholding step on the data term with
Chambolle's projection for the TV term. Intensities are handled on the
8-bit scale internally, so ``lambda_data`` has its customary magnitude.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage as ndi

from .errors import DataError

FLO_MAGIC = 202021.25


@dataclass
class FlowField:
    """Per-pixel displacement: ``u`` along columns (x), ``v`` along rows (y)."""

    u: np.ndarray
    v: np.ndarray

    @property
    def dims(self) -> tuple[int, int]:
        return self.u.shape

    @classmethod
    def zeros(cls, dims) -> "FlowField":
        return cls(np.zeros(dims), np.zeros(dims))

    @classmethod
    def constant(cls, dims, u: float, v: float) -> "FlowField":
        return cls(np.full(dims, float(u)), np.full(dims, float(v)))

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)


@dataclass(frozen=True)
class FlowConfig:
    lambda_data: float = 0.15
    theta_tv: float = 0.3
    tau_pd: float = 0.25
    pyramid_scale: float = 0.5
    n_scales: Optional[int] = None  # None: as many as the 16-pixel floor allows
    n_warps: int = 5
    n_iters: int = 50
    prefilter_downscale: int = 2
    stop_eps: float = 0.01
    median_filter: bool = True
    min_size: int = 16
    monotone: bool = True  # reject a warp that raises the TV-L1 energy and stop the level

    def __post_init__(self):
        if self.lambda_data <= 0 or self.theta_tv <= 0:
            raise ValueError("lambda_data and theta_tv must be positive")
        if not 0 < self.tau_pd <= 0.25:
            raise ValueError(f"tau_pd must lie in (0, 0.25], got {self.tau_pd}")
        if not 0.5 <= self.pyramid_scale < 1:
            raise ValueError(f"pyramid_scale must lie in [0.5, 1), got {self.pyramid_scale}")
        if self.n_warps < 1 or self.n_iters < 1 or self.prefilter_downscale < 1:
            raise ValueError("n_warps, n_iters and prefilter_downscale must be >= 1")
        if self.n_scales is not None and self.n_scales < 1:
            raise ValueError("n_scales must be >= 1")


def _scaled_size(n: int, scale: float) -> int:
    return max(1, int(math.floor(n * scale + 0.5)))


def resize(img: np.ndarray, dims, smooth: bool = True) -> np.ndarray:
    """Pixel-center aligned bilinear resampling, Gaussian prefiltered when shrinking."""
    h, w = img.shape
    nh, nw = dims
    if (nh, nw) == (h, w):
        return img.copy()
    if smooth and (nh < h or nw < w):
        sy = 0.6 * math.sqrt(max((h / nh) ** 2 - 1, 0))
        sx = 0.6 * math.sqrt(max((w / nw) ** 2 - 1, 0))
        img = ndi.gaussian_filter(img, (sy, sx), mode="nearest")
    rows = (np.arange(nh) + 0.5) * (h / nh) - 0.5
    cols = (np.arange(nw) + 0.5) * (w / nw) - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return ndi.map_coordinates(img, [rr, cc], order=1, mode="nearest")


def auto_scales(dims, scale: float, min_size: int = 16) -> int:
    n = 1
    h, w = dims
    while True:
        h, w = _scaled_size(h, scale), _scaled_size(w, scale)
        if min(h, w) < min_size:
            return n
        n += 1


def build_pyramid(frame: np.ndarray, scale: float = 0.5, n_scales: int = 1) -> list[np.ndarray]:
    """Level 0 is ``frame``; each next level is smoothed and subsampled by ``scale``."""
    levels = [np.asarray(frame, dtype=np.float64)]
    for _ in range(n_scales - 1):
        h, w = levels[-1].shape
        levels.append(resize(levels[-1], (_scaled_size(h, scale), _scaled_size(w, scale))))
    return levels


def upsample_flow(flow: FlowField, new_dims) -> FlowField:
    """Bilinear resize of both components, rescaled by the dimension ratios."""
    h, w = flow.dims
    nh, nw = new_dims
    if (nh, nw) == (h, w):
        return FlowField(flow.u.copy(), flow.v.copy())
    u = resize(flow.u, new_dims, smooth=False) * (nw / w)
    v = resize(flow.v, new_dims, smooth=False) * (nh / h)
    return FlowField(u, v)


def _central_gradient(img):
    gy, gx = np.gradient(img)
    return gx, gy


def _forward_gradient(f):
    fx = np.zeros_like(f)
    fy = np.zeros_like(f)
    fx[:, :-1] = f[:, 1:] - f[:, :-1]
    fy[:-1, :] = f[1:, :] - f[:-1, :]
    return fx, fy


def _backward_divergence(px, py):
    """Negative adjoint of :func:`_forward_gradient`."""
    div = np.zeros_like(px)
    div[:, 0] = px[:, 0]
    div[:, 1:-1] = px[:, 1:-1] - px[:, :-2]
    div[:, -1] = -px[:, -2]
    div[0, :] += py[0, :]
    div[1:-1, :] += py[1:-1, :] - py[:-2, :]
    div[-1, :] += -py[-2, :]
    return div


def _sample(img, rows, cols):
    return ndi.map_coordinates(img, [rows, cols], order=1, mode="nearest")


def tv_l1_energy(I0, I1, u1, u2, lam) -> float:
    """Non-linearized energy of a flow on one level."""
    h, w = I0.shape
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    warped = _sample(I1, rr + u2, cc + u1)
    tv = 0.0
    for f in (u1, u2):
        fx, fy = _forward_gradient(f)
        tv += np.sqrt(fx ** 2 + fy ** 2).sum()
    return float(tv + lam * np.abs(warped - I0).sum())


def _solve_level(I0, I1, u1, u2, cfg: FlowConfig, energies: Optional[list] = None):
    h, w = I0.shape
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    I1x, I1y = _central_gradient(I1)
    p11 = np.zeros_like(I0)
    p12 = np.zeros_like(I0)
    p21 = np.zeros_like(I0)
    p22 = np.zeros_like(I0)
    l_t = cfg.lambda_data * cfg.theta_tv
    taut = cfg.tau_pd / cfg.theta_tv
    stop = cfg.stop_eps ** 2
    track = cfg.monotone or energies is not None
    energy = tv_l1_energy(I0, I1, u1, u2, cfg.lambda_data) if track else None
    if energies is not None:
        energies.append(energy)

    for _ in range(cfg.n_warps):
        prev = (u1, u2)
        rows, cols = rr + u2, cc + u1
        I1w = _sample(I1, rows, cols)
        I1wx = _sample(I1x, rows, cols)
        I1wy = _sample(I1y, rows, cols)
        grad = I1wx ** 2 + I1wy ** 2
        rho_c = I1w - I1wx * u1 - I1wy * u2 - I0
        safe = np.where(grad > 1e-10, grad, 1.0)

        for _ in range(cfg.n_iters):
            rho = rho_c + I1wx * u1 + I1wy * u2
            low = rho < -l_t * grad
            high = rho > l_t * grad
            step = np.where(low, l_t, np.where(high, -l_t, np.where(grad > 1e-10, -rho / safe, 0.0)))
            v1 = u1 + step * I1wx
            v2 = u2 + step * I1wy

            new1 = v1 + cfg.theta_tv * _backward_divergence(p11, p12)
            new2 = v2 + cfg.theta_tv * _backward_divergence(p21, p22)
            err = float(((new1 - u1) ** 2 + (new2 - u2) ** 2).mean())
            u1, u2 = new1, new2

            u1x, u1y = _forward_gradient(u1)
            u2x, u2y = _forward_gradient(u2)
            ng1 = 1.0 + taut * np.sqrt(u1x ** 2 + u1y ** 2)
            ng2 = 1.0 + taut * np.sqrt(u2x ** 2 + u2y ** 2)
            p11 = (p11 + taut * u1x) / ng1
            p12 = (p12 + taut * u1y) / ng1
            p21 = (p21 + taut * u2x) / ng2
            p22 = (p22 + taut * u2y) / ng2
            if err < stop:
                break

        if cfg.median_filter:
            u1 = ndi.median_filter(u1, size=3, mode="nearest")
            u2 = ndi.median_filter(u2, size=3, mode="nearest")
        if track:
            new_energy = tv_l1_energy(I0, I1, u1, u2, cfg.lambda_data)
            if cfg.monotone and new_energy > energy:
                u1, u2 = prev
                break
            energy = new_energy
            if energies is not None:
                energies.append(energy)
    return u1, u2


def _pyramid_flow(I0, I1, cfg: FlowConfig, trace: Optional[list] = None) -> FlowField:
    n = cfg.n_scales or auto_scales(I0.shape, cfg.pyramid_scale, cfg.min_size)
    p0 = build_pyramid(I0, cfg.pyramid_scale, n)
    p1 = build_pyramid(I1, cfg.pyramid_scale, n)
    flow = FlowField.zeros(p0[-1].shape)
    for level in range(n - 1, -1, -1):
        flow = upsample_flow(flow, p0[level].shape)
        energies = [] if trace is not None else None
        u1, u2 = _solve_level(p0[level], p1[level], flow.u, flow.v, cfg, energies)
        if trace is not None:
            trace.append({"level": level, "dims": p0[level].shape, "energies": energies})
        flow = FlowField(u1, u2)
    return flow


def tvl1_flow(target: np.ndarray, reference: np.ndarray, config: FlowConfig = FlowConfig(),
              trace: Optional[list] = None) -> FlowField:
    """Flow ``w`` with ``reference(x + w(x)) ~ target(x)``.

    The problem is solved at ``1 / prefilter_downscale`` of the input
    resolution and the result is upsampled back. If ``trace`` is a list,
    per-level energies after each warp are appended to it.
    """
    target = np.asarray(target, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if target.shape != reference.shape or target.ndim != 2:
        raise DataError(f"frame dims differ: {target.shape} vs {reference.shape}")
    I0 = target * 255.0
    I1 = reference * 255.0
    d = config.prefilter_downscale
    dims = target.shape
    if d > 1:
        small = (_scaled_size(dims[0], 1 / d), _scaled_size(dims[1], 1 / d))
        I0 = resize(I0, small)
        I1 = resize(I1, small)
    flow = _pyramid_flow(I0, I1, config, trace)
    return upsample_flow(flow, dims)


def write_flo(path, flow: FlowField) -> None:
    """Middlebury .flo: magic, width, height, interleaved (u, v) float32, little-endian."""
    h, w = flow.dims
    data = np.stack([flow.u, flow.v], axis=-1).astype("<f4")
    Path(path).write_bytes(struct.pack("<fii", FLO_MAGIC, w, h) + data.tobytes())


def read_flo(path) -> FlowField:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise DataError(f"{path}: truncated .flo header")
    magic, w, h = struct.unpack_from("<fii", raw)
    if magic != FLO_MAGIC:
        raise DataError(f"{path}: bad .flo magic {magic}")
    if w <= 0 or h <= 0 or len(raw) - 12 < 8 * w * h:
        raise DataError(f"{path}: bad dimensions or truncated data")
    data = np.frombuffer(raw, dtype="<f4", count=2 * w * h, offset=12).reshape(h, w, 2)
    return FlowField(data[..., 0].astype(np.float64), data[..., 1].astype(np.float64))
