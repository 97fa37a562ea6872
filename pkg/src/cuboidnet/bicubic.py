"""Separable convolutional bicubic resampling.

One convention everywhere: Catmull-Rom-family cubic kernel (a = -0.5),
half-pixel center alignment, edge-clamped taps, rows normalized to unit sum
so constants survive exactly. Downsampling stretches the kernel by the
inverse scale (antialias prefilter). The per-axis map is a dense weight
matrix, which keeps resampling linear, testable against direct kernel sums,
and reusable as a differentiable operator.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError

_A = -0.5


def cubic_kernel(t: np.ndarray) -> np.ndarray:
    """Keys cubic kernel with a = -0.5, support (-2, 2)."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    out = np.zeros_like(t)
    near = t <= 1.0
    far = (t > 1.0) & (t < 2.0)
    tn = t[near]
    out[near] = (_A + 2.0) * tn**3 - (_A + 3.0) * tn**2 + 1.0
    tf = t[far]
    out[far] = _A * (tf**3 - 5.0 * tf**2 + 8.0 * tf - 4.0)
    return out


def weight_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense (n_out, n_in) resampling matrix for one axis."""
    if n_in < 1 or n_out < 1:
        raise ContractError(f"weight_matrix: extents must be >= 1, got {n_in}->{n_out}")
    scale = n_in / n_out
    support = max(1.0, scale)  # kernel stretch for antialiased downsampling
    m = np.zeros((n_out, n_in))
    for o in range(n_out):
        center = (o + 0.5) * scale - 0.5
        lo = math.ceil(center - 2.0 * support)
        hi = math.floor(center + 2.0 * support)
        taps = np.arange(lo, hi + 1)
        w = cubic_kernel((center - taps) / support) / support
        np.add.at(m[o], np.clip(taps, 0, n_in - 1), w)
        m[o] /= m[o].sum()
    return m


def resample_2d(image: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Resample a 2-D image to ``target = (Ho, Wo)``."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ContractError(f"resample_2d: expected a 2-D image, got shape {image.shape}")
    ho, wo = int(target[0]), int(target[1])
    wy = weight_matrix(image.shape[0], ho)
    wx = weight_matrix(image.shape[1], wo)
    return wy @ image @ wx.T


def resample_axis(volume: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    """Resample one axis of an N-D array, leaving the others untouched."""
    volume = np.asarray(volume, dtype=np.float64)
    m = weight_matrix(volume.shape[axis], n_out)
    moved = np.moveaxis(volume, axis, -1)
    return np.moveaxis(moved @ m.T, -1, axis)
