"""Bilinear sampling and backward warping shared by the scene generator,
temporal-consistency metric, and camera-shake rendering."""

from __future__ import annotations

import numpy as np


def bilinear_sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample ``img`` (H, W[, C]) at float coordinates, edge-clamped.

    ``xs``/``ys`` are column/row coordinates of any common shape; the result
    has that shape (plus the channel axis when present).
    """
    h, w = img.shape[:2]
    xs = np.clip(np.asarray(xs, dtype=np.float64), 0.0, w - 1.0)
    ys = np.clip(np.asarray(ys, dtype=np.float64), 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    v00 = img[y0, x0].astype(np.float64)
    v01 = img[y0, x1].astype(np.float64)
    v10 = img[y1, x0].astype(np.float64)
    v11 = img[y1, x1].astype(np.float64)
    top = v00 * (1.0 - fx) + v01 * fx
    bot = v10 * (1.0 - fx) + v11 * fx
    return top * (1.0 - fy) + bot * fy


def backward_warp(img: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Warp ``img`` so that out(p) = img(p + flow(p)); flow is (H, W, 2) as (dx, dy)."""
    h, w = flow.shape[:2]
    gy, gx = np.mgrid[0:h, 0:w]
    return bilinear_sample(img, gx + flow[:, :, 0], gy + flow[:, :, 1])


def in_bounds(xs: np.ndarray, ys: np.ndarray, width: int, height: int,
              margin: float = 0.0) -> np.ndarray:
    """Boolean mask of coordinates at least ``margin`` inside the image."""
    return (
        (xs >= margin)
        & (xs <= width - 1 - margin)
        & (ys >= margin)
        & (ys <= height - 1 - margin)
    )
