"""Sparse condition construction and the axial degradation it inverts.

A low-axial-resolution slice is lifted to lateral resolution by inserting
zero rows: source row k lands on output row k*alpha (top-aligned), giving a
padded height of h*alpha that exactly inverts the average-pooling
degradation shape-for-shape. The row mask marks which rows carry source
pixels; the zero fill is immaterial because conditioned sampling overwrites
it at every step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Image2D, Volume3D

__all__ = ["ConditionPair", "pad_axial", "unpad_axial", "downsample_axial"]


@dataclass(frozen=True, eq=False)
class ConditionPair:
    """A padded sparse condition image plus its binary row mask."""

    x_con_0: Image2D
    mask: Image2D
    alpha: int

    def __post_init__(self):
        if self.alpha < 1:
            raise ValueError(f"alpha must be >= 1, got {self.alpha}")
        if self.x_con_0.shape != self.mask.shape:
            raise ValueError("condition and mask shapes must match")
        m = self.mask.data
        if not np.all((m == 0.0) | (m == 1.0)):
            raise ValueError("mask entries must be 0 or 1")
        row_any = m.any(axis=1)
        row_all = m.all(axis=1)
        if not np.array_equal(row_any, row_all):
            raise ValueError("mask rows must be constant (all-0 or all-1)")
        if int(row_all.sum()) * self.alpha != self.x_con_0.height:
            raise ValueError("source-row count times alpha must equal the padded height")
        if np.any(self.x_con_0.data[~row_all] != 0.0):
            raise ValueError("padded rows outside the mask must be exactly zero")

    @property
    def source_rows(self) -> np.ndarray:
        """Indices of rows carrying source pixels."""
        return np.flatnonzero(self.mask.data[:, 0] == 1.0)


def pad_axial(x_axi: Image2D, alpha: int) -> ConditionPair:
    """Insert zero rows so source row k occupies output row k*alpha."""
    if alpha < 1:
        raise ValueError(f"alpha must be >= 1, got {alpha}")
    h, w = x_axi.shape
    padded = np.zeros((h * alpha, w))
    padded[::alpha] = x_axi.data
    mask = np.zeros((h * alpha, w))
    mask[::alpha] = 1.0
    return ConditionPair(Image2D(padded), Image2D(mask), alpha)


def unpad_axial(pair: ConditionPair) -> Image2D:
    """Gather the source rows back out; exact inverse of ``pad_axial``."""
    return Image2D(pair.x_con_0.data[pair.source_rows])


def downsample_axial(vol: Volume3D, alpha: int) -> Volume3D:
    """Average-pool along z by a factor of alpha.

    The depth must be divisible by alpha; callers crop beforehand rather
    than relying on silent truncation.
    """
    if alpha < 1:
        raise ValueError(f"alpha must be >= 1, got {alpha}")
    if vol.depth % alpha != 0:
        raise ValueError(f"depth {vol.depth} is not divisible by alpha {alpha}")
    if alpha == 1:
        return vol
    pooled = vol.data.reshape(vol.depth // alpha, alpha, vol.height, vol.width).mean(axis=1)
    return Volume3D(pooled)
