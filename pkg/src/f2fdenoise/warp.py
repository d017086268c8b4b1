"""Motion compensation and occlusion masks for frame-to-frame training pairs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage as ndi

from .flow import FlowConfig, FlowField, tvl1_flow
from .frames import write_pgm


@dataclass(frozen=True)
class OcclusionConfig:
    tau_div: float = 0.5
    dilation_radius: int = 1

    def __post_init__(self):
        if self.tau_div <= 0:
            raise ValueError(f"tau_div must be positive, got {self.tau_div}")
        if self.dilation_radius < 0:
            raise ValueError(f"dilation_radius must be >= 0, got {self.dilation_radius}")


def _targets(flow: FlowField):
    h, w = flow.dims
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    return rr + flow.v, cc + flow.u


def in_domain(flow: FlowField) -> np.ndarray:
    """True where ``x + flow(x)`` lies inside the closed pixel-center rectangle."""
    h, w = flow.dims
    rows, cols = _targets(flow)
    return (rows >= 0) & (rows <= h - 1) & (cols >= 0) & (cols <= w - 1)


def warp_bilinear(reference: np.ndarray, flow: FlowField) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``reference`` at ``x + flow(x)``.

    Returns the warped frame and a validity mask (1 where every neighbor
    with nonzero bilinear weight exists). Out-of-domain samples are
    border-clamped but flagged invalid.
    """
    reference = np.asarray(reference, dtype=np.float64)
    if reference.shape != flow.dims:
        raise ValueError(f"frame {reference.shape} and flow {flow.dims} dims differ")
    rows, cols = _targets(flow)
    warped = ndi.map_coordinates(reference, [rows, cols], order=1, mode="nearest")
    return warped, in_domain(flow).astype(np.uint8)


def divergence(flow: FlowField) -> np.ndarray:
    """du/dx + dv/dy; central differences inside, one-sided at the borders."""
    du_dx = np.gradient(flow.u, axis=1)
    dv_dy = np.gradient(flow.v, axis=0)
    return du_dx + dv_dy


def dilate_zeros(mask: np.ndarray, radius: int) -> np.ndarray:
    """Set a pixel to 0 when any pixel within Chebyshev ``radius`` is 0."""
    if radius == 0:
        return mask.copy()
    size = 2 * radius + 1
    return ndi.minimum_filter(mask, size=size, mode="constant", cval=1)


def occlusion_mask(flow: FlowField, config: OcclusionConfig = OcclusionConfig()) -> np.ndarray:
    """Binary mask, 0 on large divergence or off-domain targets, zeros dilated."""
    kappa = (np.abs(divergence(flow)) <= config.tau_div).astype(np.uint8)
    kappa &= in_domain(flow).astype(np.uint8)
    return dilate_zeros(kappa, config.dilation_radius)


@dataclass
class FramePair:
    """Noisy input, motion-compensated neighbor used as target, and its mask."""

    frame: np.ndarray
    target: np.ndarray
    mask: np.ndarray
    flow: FlowField

    @property
    def skipped(self) -> bool:
        return not self.mask.any()

    @property
    def masked_fraction(self) -> float:
        """Fraction of pixels excluded from the loss."""
        return 1.0 - float(self.mask.mean())


def build_pair(f_t: np.ndarray, f_ref: np.ndarray, flow_cfg: FlowConfig = FlowConfig(),
               occ_cfg: OcclusionConfig = OcclusionConfig(),
               flow: Optional[FlowField] = None) -> FramePair:
    """Register ``f_ref`` onto ``f_t`` and mask unreliable pixels.

    ``flow`` overrides the estimated motion when given.
    """
    f_t = np.asarray(f_t, dtype=np.float64)
    f_ref = np.asarray(f_ref, dtype=np.float64)
    if f_t.shape != f_ref.shape:
        raise ValueError(f"frame dims differ: {f_t.shape} vs {f_ref.shape}")
    if flow is None:
        flow = tvl1_flow(f_t, f_ref, flow_cfg)
    warped, valid = warp_bilinear(f_ref, flow)
    mask = occlusion_mask(flow, occ_cfg) & valid
    return FramePair(f_t, warped, mask, flow)


def save_mask_pgm(path, mask: np.ndarray) -> None:
    write_pgm(path, np.asarray(mask, dtype=np.float64), bits=8)
