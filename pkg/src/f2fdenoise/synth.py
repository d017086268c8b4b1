"""Procedural clean images and videos for desk-scale experiments.

Scenes follow a dead-leaves model: occluding disks with power-law radii,
each carrying a shaded, lightly textured gray level. Videos pan a camera
over a larger canvas with sub-pixel motion and move a textured foreground
disk across it, so registration has both smooth motion and occlusions.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage as ndi


def dead_leaves(shape, rng: np.random.Generator, r_min: float = 2.0, r_max: float = 40.0,
                n_disks: int | None = None, texture: float = 0.03) -> np.ndarray:
    h, w = shape
    if n_disks is None:
        n_disks = int(12 * h * w / (r_min * r_max * 4)) + 40
    img = np.full(shape, rng.uniform(0.2, 0.8))
    rr, cc = np.mgrid[0:h, 0:w]
    # inverse-CDF sampling of p(r) ~ r^-3 on [r_min, r_max]
    a, b = r_min ** -2, r_max ** -2
    radii = (a - rng.random(n_disks) * (a - b)) ** -0.5
    for r in radii:
        cy, cx = rng.uniform(-r, h + r), rng.uniform(-r, w + r)
        y0, y1 = max(0, int(cy - r)), min(h, int(cy + r) + 2)
        x0, x1 = max(0, int(cx - r)), min(w, int(cx + r) + 2)
        if y0 >= y1 or x0 >= x1:
            continue
        ys, xs = rr[y0:y1, x0:x1], cc[y0:y1, x0:x1]
        inside = (ys - cy) ** 2 + (xs - cx) ** 2 <= r * r
        level = rng.uniform(0.1, 0.9)
        gy, gx = rng.normal(0, 0.15 / max(r, 1), size=2)
        shade = level + gy * (ys - cy) + gx * (xs - cx)
        img[y0:y1, x0:x1] = np.where(inside, shade, img[y0:y1, x0:x1])
    if texture > 0:
        img += texture * ndi.gaussian_filter(rng.standard_normal(shape), 1.0) / 0.28
    img = ndi.gaussian_filter(img, 0.7)
    return np.clip(img, 0.0, 1.0)


def corpus(n_images: int, shape, seed: int = 0) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [dead_leaves(shape, rng) for _ in range(n_images)]


def video(n_frames: int, shape, seed: int = 0, velocity=(0.6, 1.3), wobble: float = 1.5,
          foreground: bool = True) -> list[np.ndarray]:
    """Clean frames of a panning camera over a static scene plus one moving disk.

    ``velocity`` is the camera drift in (row, col) pixels per frame.
    """
    rng = np.random.default_rng(seed)
    h, w = shape
    vy, vx = velocity
    margin = int(np.ceil(max(abs(vy), abs(vx)) * n_frames + 2 * wobble)) + 8
    canvas = dead_leaves((h + margin, w + margin), rng)
    obj_r = 0.18 * min(h, w)
    obj = dead_leaves((int(2 * obj_r) + 4, int(2 * obj_r) + 4), rng, r_min=1.5, r_max=obj_r)
    obj_start = np.array([rng.uniform(0.3, 0.7) * h, rng.uniform(0.15, 0.3) * w])
    obj_vel = np.array([rng.uniform(-0.4, 0.4), rng.uniform(0.8, 1.5)]) * min(h, w) / 64
    phase = rng.uniform(0, 2 * np.pi, size=2)

    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    frames = []
    for t in range(n_frames):
        oy = 4 + vy * t + wobble * (1 + np.sin(0.21 * t + phase[0]))
        ox = 4 + vx * t + wobble * (1 + np.sin(0.17 * t + phase[1]))
        if vy < 0:
            oy += margin - 8 - 2 * wobble
        if vx < 0:
            ox += margin - 8 - 2 * wobble
        frame = ndi.map_coordinates(canvas, [rr + oy, cc + ox], order=3, mode="nearest")
        if foreground:
            cy, cx = obj_start + obj_vel * t
            dist = np.hypot(rr - cy, cc - cx)
            cover = np.clip(obj_r - dist + 0.5, 0.0, 1.0)
            oc = obj.shape[0] / 2 - 0.5
            tex = ndi.map_coordinates(obj, [rr - cy + oc, cc - cx + oc], order=3, mode="nearest")
            frame = cover * tex + (1 - cover) * frame
        frames.append(np.clip(frame, 0.0, 1.0))
    return frames
