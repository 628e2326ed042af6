"""Patch individual filter (PIF) layer.

A PIF layer cuts each feature map into a disjoint grid of equally sized
patches, runs every patch through its own convolutional block (weights are
shared within a patch, never across patches), and reassembles the processed
patches in the order they were cut. With patch size + padding equal to the
kernel size the per-patch kernel cannot slide, which makes the layer a
locally connected (unshared) convolution; with a 1x1 grid it degenerates to
an ordinary shared-weight convolution.

The grid is row-major over grid coordinates, and all geometry is generic
over 2 or 3 spatial axes.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import GridConsistencyError, PatchTilingError, ShapeError
from .layers import (
    BatchNormParams,
    ConvParams,
    batchnorm_backward,
    batchnorm_forward,
    conv_backward,
    conv_forward,
    he_init,
    relu,
    relu_backward,
)
from .tensor import DTYPE


@dataclass
class PifConfig:
    """Geometry and width of one PIF layer.

    `padding` is the total zero padding per spatial axis applied to every
    patch, split as evenly as possible with the extra row/column on the
    trailing side. `blocks` is the number of conv blocks applied per patch
    (the first maps in_channels -> out_channels, later ones keep width).
    """

    patch_size: tuple
    kernel_size: tuple
    padding: tuple
    in_channels: int
    out_channels: int
    with_bn_relu: bool = True
    blocks: int = 1
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        self.patch_size = tuple(int(s) for s in self.patch_size)
        self.kernel_size = tuple(int(k) for k in self.kernel_size)
        self.padding = tuple(int(p) for p in self.padding)
        d = len(self.patch_size)
        if d not in (2, 3):
            raise ShapeError(f"PIF layers support 2 or 3 spatial axes, got {d}")
        if not (len(self.kernel_size) == len(self.padding) == d):
            raise ShapeError("patch_size, kernel_size and padding must share rank")
        if any(s < 1 for s in self.patch_size) or any(k < 1 for k in self.kernel_size):
            raise ShapeError("patch and kernel extents must be >= 1")
        if any(p < 0 for p in self.padding):
            raise ValueError("padding must be non-negative")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("channel counts must be >= 1")
        if self.blocks < 1:
            raise ValueError("blocks must be >= 1")
        # Each block must keep at least one output position per axis.
        for axis, size in enumerate(self.block_sizes()[1:], start=0):
            if min(size) < 1:
                raise ShapeError(
                    f"patch {self.patch_size} with padding {self.padding} collapses "
                    f"under kernel {self.kernel_size} (block {axis})"
                )

    def pad_split(self):
        """(pad_before, pad_after) per axis: floor(p/2) before, rest after."""
        before = tuple(p // 2 for p in self.padding)
        after = tuple(p - p // 2 for p in self.padding)
        return before, after

    def block_sizes(self):
        """Per-patch spatial sizes entering each block, plus the final size."""
        sizes = [self.patch_size]
        for _ in range(self.blocks):
            sizes.append(
                tuple(
                    s + p - k + 1
                    for s, p, k in zip(sizes[-1], self.padding, self.kernel_size)
                )
            )
        return sizes

    def patch_out_size(self):
        """Spatial size of one processed patch."""
        return self.block_sizes()[-1]


@dataclass
class PatchGrid:
    """Patches listed row-major over grid coordinates."""

    patches: list
    grid_dims: tuple
    source_shape: tuple

    def __post_init__(self):
        expected = int(np.prod(self.grid_dims))
        if len(self.patches) != expected:
            raise GridConsistencyError(
                f"grid {self.grid_dims} needs {expected} patches, got {len(self.patches)}"
            )


def grid_coords(grid_dims):
    """Row-major grid coordinates, the canonical patch order."""
    return list(np.ndindex(*grid_dims))


def split(x, patch_size):
    """Cut the spatial extent of x into a disjoint grid of patches."""
    patch_size = tuple(int(s) for s in patch_size)
    spatial = x.shape[2:]
    if len(patch_size) != len(spatial):
        raise ShapeError(
            f"patch size rank {len(patch_size)} does not match {len(spatial)} spatial axes"
        )
    for axis, (size, s) in enumerate(zip(spatial, patch_size)):
        if s < 1 or size % s != 0:
            raise PatchTilingError(
                f"spatial axis {axis} of size {size} is not divisible by patch size {s}"
            )
    grid_dims = tuple(size // s for size, s in zip(spatial, patch_size))
    patches = []
    for coord in grid_coords(grid_dims):
        window = tuple(
            slice(c * s, (c + 1) * s) for c, s in zip(coord, patch_size)
        )
        patches.append(x[(slice(None), slice(None)) + window].copy())
    return PatchGrid(patches=patches, grid_dims=grid_dims, source_shape=x.shape)


def reassemble(grid):
    """Place every patch back at its grid position; inverse of split."""
    if not grid.patches:
        raise GridConsistencyError("cannot reassemble an empty grid")
    first = grid.patches[0].shape
    for i, patch in enumerate(grid.patches):
        if patch.shape != first:
            raise GridConsistencyError(
                f"patch {i} has shape {patch.shape}, expected {first}"
            )
    patch_spatial = first[2:]
    if len(patch_spatial) != len(grid.grid_dims):
        raise GridConsistencyError(
            f"patch rank {len(patch_spatial)} does not match grid rank {len(grid.grid_dims)}"
        )
    out_spatial = tuple(g * s for g, s in zip(grid.grid_dims, patch_spatial))
    out = np.empty(first[:2] + out_spatial, dtype=DTYPE)
    for coord, patch in zip(grid_coords(grid.grid_dims), grid.patches):
        window = tuple(
            slice(c * s, (c + 1) * s) for c, s in zip(coord, patch_spatial)
        )
        out[(slice(None), slice(None)) + window] = patch
    return out


@dataclass
class PifParams:
    """One parameter set per patch; nothing is shared across patches.

    `per_patch[i]` is the list of blocks for patch i (row-major grid
    order); each block is a dict with 'conv' (ConvParams) and optionally
    'bn' (BatchNormParams).
    """

    grid_dims: tuple
    per_patch: list

    def __post_init__(self):
        expected = int(np.prod(self.grid_dims))
        if len(self.per_patch) != expected:
            raise GridConsistencyError(
                f"grid {self.grid_dims} needs {expected} parameter sets, "
                f"got {len(self.per_patch)}"
            )


def init_pif_params(cfg, grid_dims, rng):
    """Fresh per-patch parameters; draws are consumed patch-major, block-minor."""
    pad_before, pad_after = cfg.pad_split()
    d = len(cfg.patch_size)
    per_patch = []
    for _ in grid_coords(tuple(grid_dims)):
        blocks = []
        for b in range(cfg.blocks):
            c_in = cfg.in_channels if b == 0 else cfg.out_channels
            conv = ConvParams(
                weights=he_init(rng, (cfg.out_channels, c_in) + cfg.kernel_size),
                bias=np.zeros(cfg.out_channels, dtype=DTYPE),
                stride=(1,) * d,
                pad_before=pad_before,
                pad_after=pad_after,
            )
            block = {"conv": conv}
            if cfg.with_bn_relu:
                block["bn"] = BatchNormParams.init(
                    cfg.out_channels, eps=cfg.bn_eps, momentum=cfg.bn_momentum
                )
            blocks.append(block)
        per_patch.append(blocks)
    return PifParams(grid_dims=tuple(grid_dims), per_patch=per_patch)


def pif_forward(x, cfg, params, mode="train"):
    """Split, process each patch with its own block(s), reassemble.

    Returns (y, cache, running_updates) where running_updates mirrors the
    per-patch/per-block layout with (mean, var) batch-norm updates, or None
    entries when the config has no batch norm.
    """
    if x.shape[1] != cfg.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, PIF expects {cfg.in_channels}")
    grid = split(x, cfg.patch_size)
    if grid.grid_dims != params.grid_dims:
        raise GridConsistencyError(
            f"input implies grid {grid.grid_dims} but parameters hold {params.grid_dims}"
        )

    out_patches = []
    patch_caches = []
    running_updates = []
    for patch, blocks in zip(grid.patches, params.per_patch):
        h = patch
        block_caches = []
        block_running = []
        for block in blocks:
            h, conv_cache = conv_forward(h, block["conv"])
            if cfg.with_bn_relu:
                pre_relu, bn_cache, running = batchnorm_forward(h, block["bn"], mode)
                h = relu(pre_relu)
                block_caches.append((conv_cache, bn_cache, pre_relu))
                block_running.append(running)
            else:
                block_caches.append((conv_cache, None, None))
                block_running.append(None)
        out_patches.append(h)
        patch_caches.append(block_caches)
        running_updates.append(block_running)

    y = reassemble(
        PatchGrid(patches=out_patches, grid_dims=grid.grid_dims, source_shape=x.shape)
    )
    cache = (cfg, grid.grid_dims, x.shape, patch_caches)
    return y, cache, running_updates


def pif_backward(dy, cache):
    """Route gradients back through each patch independently.

    Returns (dx, grads) with grads mirroring PifParams.per_patch: one dict
    per block holding 'w', 'b' and, with batch norm, 'gamma' and 'beta'.
    """
    cfg, grid_dims, x_shape, patch_caches = cache
    out_patch = cfg.patch_out_size()
    expected_spatial = tuple(g * s for g, s in zip(grid_dims, out_patch))
    expected = (x_shape[0], cfg.out_channels) + expected_spatial
    if dy.shape != expected:
        raise ShapeError(f"dy shape {dy.shape} does not match forward output {expected}")

    dy_grid = split(dy, out_patch)
    dx_patches = []
    grads = []
    for dpatch, block_caches in zip(dy_grid.patches, patch_caches):
        dh = dpatch
        block_grads = [None] * len(block_caches)
        for b in range(len(block_caches) - 1, -1, -1):
            conv_cache, bn_cache, pre_relu = block_caches[b]
            if cfg.with_bn_relu:
                dh = relu_backward(dh, pre_relu)
                dh, dgamma, dbeta = batchnorm_backward(dh, bn_cache)
                dh, dw, db = conv_backward(dh, conv_cache)
                block_grads[b] = {"w": dw, "b": db, "gamma": dgamma, "beta": dbeta}
            else:
                dh, dw, db = conv_backward(dh, conv_cache)
                block_grads[b] = {"w": dw, "b": db}
        dx_patches.append(dh)
        grads.append(block_grads)

    dx = reassemble(
        PatchGrid(patches=dx_patches, grid_dims=grid_dims, source_shape=x_shape)
    )
    return dx, grads


def pif_param_count(cfg, grid_dims):
    """Exact learnable scalar count of a PIF layer on the given grid."""
    n_patches = int(np.prod(tuple(grid_dims)))
    kernel_volume = int(np.prod(cfg.kernel_size))
    total = 0
    for b in range(cfg.blocks):
        c_in = cfg.in_channels if b == 0 else cfg.out_channels
        total += cfg.out_channels * c_in * kernel_volume + cfg.out_channels
        if cfg.with_bn_relu:
            total += 2 * cfg.out_channels
    return n_patches * total
