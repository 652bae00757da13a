"""Dense 2D/3D grid types and counter-based random streams.

Grid values are float64 in the canonical range [-1, 1] (8-bit data maps in
via ``canonical_from_uint8``). Grids are immutable once constructed, so they
can be shared freely across threads; randomness is owned by ``RandomSource``
instances, one per logical stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Image2D",
    "Volume3D",
    "RandomSource",
    "gaussian_noise",
    "extract_axial_slice",
    "insert_axial_slice",
    "canonical_from_uint8",
    "uint8_from_canonical",
]

_MASK64 = (1 << 64) - 1


def _as_grid(data, ndim: int) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != ndim:
        raise ValueError(f"expected {ndim}-dimensional data, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ValueError(f"all dimensions must be positive, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("grid values must be finite")
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Image2D:
    """A dense (height, width) float64 grid, immutable after construction."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _as_grid(self.data, 2))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @classmethod
    def zeros(cls, height: int, width: int) -> "Image2D":
        if height < 1 or width < 1:
            raise ValueError(f"dimensions must be positive, got {(height, width)}")
        return cls(np.zeros((height, width)))


@dataclass(frozen=True, eq=False)
class Volume3D:
    """A dense (depth, height, width) float64 grid; z-major, row-major slices."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _as_grid(self.data, 3))

    @property
    def depth(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @classmethod
    def zeros(cls, depth: int, height: int, width: int) -> "Volume3D":
        if min(depth, height, width) < 1:
            raise ValueError(f"dimensions must be positive, got {(depth, height, width)}")
        return cls(np.zeros((depth, height, width)))


class RandomSource:
    """Counter-based (Philox) random stream keyed by (seed, stream).

    Identical (seed, stream) pairs replay the identical draw sequence;
    distinct stream ids are statistically independent, so parallel work
    (one stream per slice, per training batch) is reproducible regardless
    of scheduling. A source is single-owner: share streams, not instances.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def split(self, stream: int) -> "RandomSource":
        """A fresh, independent source with the same seed and a new stream id."""
        return RandomSource(self.seed, stream)

    def normal(self, shape) -> np.ndarray:
        """Standard normal draws of the given shape (float64)."""
        return self._gen.standard_normal(size=shape)

    def uniform(self, low: float, high: float, shape=None) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=None):
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=shape)

    def __repr__(self):
        return f"RandomSource(seed={self.seed}, stream={self.stream})"


def gaussian_noise(rng: RandomSource, shape) -> Image2D:
    """I.i.d. standard normal image of the given (height, width) shape."""
    height, width = shape
    if height < 1 or width < 1:
        raise ValueError(f"noise dimensions must be positive, got {(height, width)}")
    return Image2D(rng.normal((height, width)))


def _plane_index_bound(vol: Volume3D, axis: str) -> int:
    if axis == "xz":
        return vol.height
    if axis == "yz":
        return vol.width
    raise ValueError(f"axis must be 'xz' or 'yz', got {axis!r}")


def extract_axial_slice(vol: Volume3D, axis: str, index: int) -> Image2D:
    """Extract an axial plane; rows run along z, columns along the lateral axis.

    ``axis='xz'`` indexes along y, ``axis='yz'`` indexes along x.
    """
    bound = _plane_index_bound(vol, axis)
    if not 0 <= index < bound:
        raise ValueError(f"plane index {index} out of range [0, {bound}) for axis {axis}")
    if axis == "xz":
        return Image2D(vol.data[:, index, :])
    return Image2D(vol.data[:, :, index])


def insert_axial_slice(vol: Volume3D, axis: str, index: int, img: Image2D) -> Volume3D:
    """Return a copy of ``vol`` with the addressed plane replaced by ``img``."""
    bound = _plane_index_bound(vol, axis)
    if not 0 <= index < bound:
        raise ValueError(f"plane index {index} out of range [0, {bound}) for axis {axis}")
    expected = (vol.depth, vol.width) if axis == "xz" else (vol.depth, vol.height)
    if img.shape != expected:
        raise ValueError(f"slice shape {img.shape} does not match plane shape {expected}")
    data = vol.data.copy()
    if axis == "xz":
        data[:, index, :] = img.data
    else:
        data[:, :, index] = img.data
    return Volume3D(data)


def canonical_from_uint8(arr: np.ndarray) -> np.ndarray:
    """Map 8-bit values [0, 255] into the canonical range: v / 127.5 - 1."""
    return np.asarray(arr, dtype=np.float64) / 127.5 - 1.0


def uint8_from_canonical(arr: np.ndarray) -> np.ndarray:
    """Map canonical values back to 8-bit with clamping; 1.0 maps to 255 exactly."""
    scaled = np.rint((np.asarray(arr, dtype=np.float64) + 1.0) * 127.5)
    return np.clip(scaled, 0, 255).astype(np.uint8)
