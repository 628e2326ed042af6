"""Dense tensor primitives.

Tensors are plain numpy arrays with a fixed convention: dtype float64,
C-contiguous (row-major), laid out batch-first, then channels, then the
spatial axes (2 of them for 2D data, 3 for 3D). All operations here are
pure: they never mutate their inputs, and slices copy rather than alias.

Randomness goes through :class:`Rng`, a seeded PCG64 generator with a
documented child-stream derivation, so that every downstream artifact is
reproducible from a single integer seed.
"""

import numpy as np

from .errors import RegionBoundsError, ShapeError

DTYPE = np.float64


def as_tensor(values):
    """Coerce array-like input to the canonical float64 row-major layout."""
    return np.ascontiguousarray(values, dtype=DTYPE)


def _check_shape(shape):
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise ShapeError("tensor shape must have at least one axis")
    for i, s in enumerate(shape):
        if s < 1:
            raise ShapeError(f"tensor shape must be positive, got {s} on axis {i}")
    return shape


def create(shape, fill=0.0):
    """Allocate a tensor of `shape` with every element equal to `fill`."""
    return np.full(_check_shape(shape), fill, dtype=DTYPE)


def _check_region(shape, offsets, sizes):
    if len(offsets) != len(shape) or len(sizes) != len(shape):
        raise RegionBoundsError(
            f"region rank {len(offsets)}/{len(sizes)} does not match tensor rank {len(shape)}"
        )
    for i, (off, size, dim) in enumerate(zip(offsets, sizes, shape)):
        if off < 0 or size < 1 or off + size > dim:
            raise RegionBoundsError(
                f"region [{off}, {off + size}) exceeds axis {i} of size {dim}"
            )


def slice_region(x, offsets, sizes):
    """Copy the hyper-rectangular region at `offsets` with extents `sizes`."""
    _check_region(x.shape, offsets, sizes)
    index = tuple(slice(o, o + s) for o, s in zip(offsets, sizes))
    return x[index].copy()


def write_region(x, offsets, patch):
    """Return a copy of `x` with `patch` written at `offsets`."""
    _check_region(x.shape, offsets, patch.shape)
    out = x.copy()
    index = tuple(slice(o, o + s) for o, s in zip(offsets, patch.shape))
    out[index] = patch
    return out


def zero_pad(x, pad_before, pad_after):
    """Zero-pad the spatial axes (all axes past batch and channel).

    `pad_before` / `pad_after` give the per-spatial-axis amounts; both must
    be non-negative. Batch and channel axes are never padded.
    """
    spatial = x.ndim - 2
    if len(pad_before) != spatial or len(pad_after) != spatial:
        raise ShapeError(
            f"expected {spatial} pad entries, got {len(pad_before)}/{len(pad_after)}"
        )
    if any(p < 0 for p in pad_before) or any(p < 0 for p in pad_after):
        raise ValueError("padding must be non-negative")
    widths = [(0, 0), (0, 0)] + [(b, a) for b, a in zip(pad_before, pad_after)]
    return np.pad(x, widths, mode="constant")


class Rng:
    """Seeded random stream (PCG64 behind numpy's Generator).

    The same (seed, key) pair always yields the same stream. Child streams
    are derived by extending the key tuple, which maps onto numpy's
    SeedSequence spawn keys; this is how per-purpose and per-sample streams
    stay independent yet reproducible.
    """

    def __init__(self, seed, key=()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.PCG64(seq))

    def child(self, *key):
        """Derive an independent stream keyed by extra integers."""
        return Rng(self.seed, self.key + tuple(key))

    def uniform(self, shape, lo=0.0, hi=1.0):
        """Tensor of uniform draws in [lo, hi)."""
        if not lo < hi:
            raise ValueError(f"uniform bounds must satisfy lo < hi, got {lo} >= {hi}")
        return self._gen.uniform(lo, hi, size=_check_shape(shape)).astype(DTYPE)

    def normal(self, shape, scale=1.0):
        return (self._gen.standard_normal(size=_check_shape(shape)) * scale).astype(DTYPE)

    def integers(self, lo, hi, size=None):
        """Integers drawn uniformly from [lo, hi]."""
        return self._gen.integers(lo, hi, size=size, endpoint=True)

    def permutation(self, n):
        return self._gen.permutation(n)

    def random(self):
        """One float in [0, 1)."""
        return float(self._gen.random())


def rng_uniform(rng, shape, lo, hi):
    """Functional alias for :meth:`Rng.uniform`."""
    return rng.uniform(shape, lo, hi)
