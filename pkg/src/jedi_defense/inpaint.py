"""Coherence-transport inpainting with onion-peel fill order."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from jedi_defense.errors import FormatError
from jedi_defense.imagecore import check_image, to_gray


@dataclass(frozen=True)
class InpaintConfig:
    radius: int = 5
    coherence_smoothing: float = 1.5
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.radius < 1:
            raise ValueError("radius must be >= 1")
        if self.coherence_smoothing <= 0:
            raise ValueError("coherence_smoothing must be > 0")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")


def _offsets(radius: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    r = radius
    dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
    d2 = dy**2 + dx**2
    keep = (d2 > 0) & (d2 <= r * r)
    dy, dx = dy[keep], dx[keep]
    return dy, dx, np.sqrt(dy**2 + dx**2)


def _coherence_direction(gray: np.ndarray, known: np.ndarray, sigma: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unit isophote direction ``(ey, ex)`` per pixel and a flag saying whether it is defined.

    The structure tensor is built from forward differences between pairs of
    known pixels only, then Gaussian-smoothed. Isophotes run along the minor
    eigenvector.
    """
    g = gray.astype(np.float64)
    gx = np.zeros_like(g)
    gy = np.zeros_like(g)
    gx[:, :-1] = g[:, 1:] - g[:, :-1]
    gy[:-1, :] = g[1:, :] - g[:-1, :]
    valid = known.copy()
    valid[:, :-1] &= known[:, 1:]
    valid[:-1, :] &= known[1:, :]
    valid[:, -1] = False
    valid[-1, :] = False
    gx = np.where(valid, gx, 0.0)
    gy = np.where(valid, gy, 0.0)
    jxx = ndimage.gaussian_filter(gx * gx, sigma, mode="nearest")
    jxy = ndimage.gaussian_filter(gx * gy, sigma, mode="nearest")
    jyy = ndimage.gaussian_filter(gy * gy, sigma, mode="nearest")
    # dominant (gradient) eigenvector angle; isophotes are perpendicular to it
    phi = 0.5 * np.arctan2(2.0 * jxy, jxx - jyy)
    ex = -np.sin(phi)
    ey = np.cos(phi)
    strength = jxx + jyy
    defined = strength > 1e-9
    return ey, ex, defined


def inpaint(image: np.ndarray, mask: np.ndarray, config: InpaintConfig | None = None) -> np.ndarray:
    """Fill ``mask`` pixels from the boundary inwards.

    Each pixel of distance layer ``L`` becomes the normalised weighted mean
    of known pixels (original or from layers ``< L``) within ``radius``.
    Weights are ``(1 / (eps + |o|)) * (eps + |cos theta|)`` where ``theta`` is
    the angle between the offset ``o`` and the local isophote direction.
    """
    config = config or InpaintConfig()
    check_image(image)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != image.shape[:2]:
        raise FormatError(f"mask shape {mask.shape} does not match image {image.shape[:2]}")
    if mask.all():
        raise ValueError("mask covers the entire image; nothing to inpaint from")
    if not mask.any():
        return image.copy()

    squeeze = image.ndim == 2
    work = image.astype(np.float64)
    if squeeze:
        work = work[:, :, None]
    out = image.copy()
    out3 = out[:, :, None] if squeeze else out
    h, w = mask.shape

    layers = ndimage.distance_transform_cdt(mask, metric="taxicab")
    dy, dx, dist = _offsets(config.radius)
    eps = config.epsilon
    known = ~mask
    gray_src = to_gray(image).copy()

    for layer in range(1, int(layers.max()) + 1):
        ys, xs = np.nonzero(layers == layer)
        if ys.size == 0:
            continue
        ey, ex, defined = _coherence_direction(gray_src, known, config.coherence_smoothing)
        ny = ys[:, None] + dy[None, :]
        nx = xs[:, None] + dx[None, :]
        inside = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
        nyc = np.clip(ny, 0, h - 1)
        nxc = np.clip(nx, 0, w - 1)
        usable = inside & known[nyc, nxc]
        cos = np.abs(dy[None, :] * ey[ys, xs][:, None] + dx[None, :] * ex[ys, xs][:, None]) / dist[None, :]
        cos = np.where(defined[ys, xs][:, None], cos, 1.0)
        weights = (1.0 / (eps + dist[None, :])) * (eps + cos)
        weights = np.where(usable, weights, 0.0)
        total = weights.sum(axis=1)
        if np.any(total <= 0):
            raise RuntimeError("inpaint: pixel without known neighbours")
        weights /= total[:, None]
        values = work[nyc, nxc]  # (P, K, C)
        filled = np.einsum("pk,pkc->pc", weights, values)
        # clip guards the last ulp of the convex combination before rounding
        lo = np.where(usable[..., None], values, np.inf).min(axis=1)
        hi = np.where(usable[..., None], values, -np.inf).max(axis=1)
        filled = np.clip(filled, lo, hi)
        rounded = np.rint(filled)
        work[ys, xs] = rounded
        out3[ys, xs] = rounded.astype(np.uint8)
        known[ys, xs] = True
        gray_src[ys, xs] = out[ys, xs] if squeeze else to_gray(out[ys, xs][None])[0]
    return out
