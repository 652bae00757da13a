"""Deterministic synthetic volumes for tests, training, and benchmarks.

Three families: statistically isotropic striped textures (plane waves with
random 3D orientation, so lateral and axial slices share one distribution),
smooth random blobs, and unit-variance Gaussian columns with first-order
autoregressive correlation along z for conditional-sampling oracles.
"""

from __future__ import annotations

import numpy as np

from .core import RandomSource, Volume3D

__all__ = [
    "SYNTH_KINDS",
    "stripes_volume",
    "blobs_volume",
    "gaussian_columns_volume",
    "ar1_covariance",
    "make_volume",
]

SYNTH_KINDS = ("stripes", "blobs", "gauss-columns")


def _unit_direction(rng: RandomSource) -> np.ndarray:
    v = rng.normal(3)
    return v / np.linalg.norm(v)


def stripes_volume(
    dims: tuple[int, int, int],
    seed: int,
    period: float = 8.0,
    n_waves: int = 3,
    direction: np.ndarray | None = None,
) -> Volume3D:
    """Sum of sinusoidal plane waves with random orientation, peak about 0.9.

    Passing ``direction`` pins a single wave along a known axis; the period
    is in voxels along the wave direction either way.
    """
    if period <= 0.0 or n_waves < 1:
        raise ValueError("period must be positive and n_waves >= 1")
    nz, ny, nx = dims
    rng = RandomSource(seed, stream=0)
    zz, yy, xx = np.meshgrid(
        np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij"
    )
    acc = np.zeros(dims, dtype=np.float64)
    if direction is not None:
        n_waves = 1
    for _ in range(n_waves):
        d = np.asarray(direction, dtype=np.float64) if direction is not None else _unit_direction(rng)
        d = d / np.linalg.norm(d)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        wavelength = period if direction is not None else period * rng.uniform(0.85, 1.15)
        k = 2.0 * np.pi / wavelength
        acc += np.sin(k * (d[0] * zz + d[1] * yy + d[2] * xx) + phase)
    peak = np.max(np.abs(acc))
    if peak > 0.0:
        acc *= 0.9 / peak
    return Volume3D(acc)


def blobs_volume(dims: tuple[int, int, int], seed: int, count: int = 24) -> Volume3D:
    """Random smooth Gaussian bumps of either sign, squashed into (-1, 1)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    nz, ny, nx = dims
    rng = RandomSource(seed, stream=0)
    zz, yy, xx = np.meshgrid(
        np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij"
    )
    acc = np.zeros(dims, dtype=np.float64)
    for _ in range(count):
        cz, cy, cx = (rng.uniform(0.0, n) for n in dims)
        width = rng.uniform(2.0, max(3.0, min(dims) / 4.0))
        amp = rng.uniform(0.4, 1.2) * (1.0 if rng.uniform(0.0, 1.0) < 0.5 else -1.0)
        dist2 = (zz - cz) ** 2 + (yy - cy) ** 2 + (xx - cx) ** 2
        acc += amp * np.exp(-dist2 / (2.0 * width * width))
    return Volume3D(np.tanh(acc) * 0.95)


def ar1_covariance(d: int, rho: float) -> np.ndarray:
    """Unit-variance first-order autoregressive covariance: cov[i, j] = rho^|i-j|."""
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"rho must lie in [0, 1), got {rho}")
    idx = np.arange(d)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def gaussian_columns_volume(dims: tuple[int, int, int], seed: int, rho: float = 0.9) -> Volume3D:
    """Unit-variance Gaussian field, AR(1) along z, independent across (y, x)."""
    nz, ny, nx = dims
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"rho must lie in [0, 1), got {rho}")
    rng = RandomSource(seed, stream=0)
    data = np.empty(dims, dtype=np.float64)
    data[0] = rng.normal((ny, nx))
    scale = np.sqrt(1.0 - rho * rho)
    for z in range(1, nz):
        data[z] = rho * data[z - 1] + scale * rng.normal((ny, nx))
    return Volume3D(data)


def make_volume(kind: str, dims: tuple[int, int, int], seed: int, **kwargs) -> Volume3D:
    """Dispatch on the dataset kind; deterministic per (kind, dims, seed)."""
    if kind == "stripes":
        return stripes_volume(dims, seed, **kwargs)
    if kind == "blobs":
        return blobs_volume(dims, seed, **kwargs)
    if kind == "gauss-columns":
        return gaussian_columns_volume(dims, seed, **kwargs)
    raise ValueError(f"unknown dataset kind {kind!r}, expected one of {SYNTH_KINDS}")
