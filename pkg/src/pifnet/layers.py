"""Shared-weight building blocks: convolution, batch norm, relu, pooling,
linear, and the softmax cross-entropy loss.

Every operation comes as a forward returning ``(y, cache)`` and a backward
taking ``(dy, cache)``, all in float64. Convolutions are dimension-generic:
inputs are ``[N, C, H, W]`` or ``[N, C, D, H, W]`` and kernels follow suit.
The forward uses an im2col matrix product; the nested-loop reference lives
in the test suite and the two must agree to 1e-12.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateBatchError, ShapeError
from .tensor import DTYPE, zero_pad


def conv_output_shape(in_spatial, kernel, stride, pad_before, pad_after):
    """Spatial output sizes of a strided, padded convolution."""
    out = []
    for i, (n, k, s, pb, pa) in enumerate(
        zip(in_spatial, kernel, stride, pad_before, pad_after)
    ):
        size = (n + pb + pa - k) // s + 1
        if size < 1:
            raise ShapeError(
                f"convolution output collapses on spatial axis {i}: "
                f"input {n}, kernel {k}, stride {s}, pad {pb}+{pa}"
            )
        out.append(size)
    return tuple(out)


@dataclass
class ConvParams:
    """Learnable convolution: weights [C_out, C_in, *kernel], bias [C_out]."""

    weights: np.ndarray
    bias: np.ndarray
    stride: tuple = (1, 1)
    pad_before: tuple = (0, 0)
    pad_after: tuple = (0, 0)

    def __post_init__(self):
        self.stride = tuple(int(s) for s in self.stride)
        self.pad_before = tuple(int(p) for p in self.pad_before)
        self.pad_after = tuple(int(p) for p in self.pad_after)
        d = self.weights.ndim - 2
        if d not in (2, 3):
            raise ShapeError(f"conv weights must be 4-D or 5-D, got {self.weights.ndim}-D")
        if not (len(self.stride) == len(self.pad_before) == len(self.pad_after) == d):
            raise ShapeError("stride/padding rank does not match kernel rank")
        if any(k < 1 for k in self.kernel):
            raise ShapeError(f"kernel extents must be >= 1, got {self.kernel}")
        if any(s < 1 for s in self.stride):
            raise ShapeError(f"strides must be >= 1, got {self.stride}")
        if any(p < 0 for p in self.pad_before + self.pad_after):
            raise ValueError("padding must be non-negative")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match {self.weights.shape[0]} filters"
            )

    @property
    def kernel(self):
        return self.weights.shape[2:]

    @property
    def in_channels(self):
        return self.weights.shape[1]

    @property
    def out_channels(self):
        return self.weights.shape[0]


def _im2col(x_padded, kernel, stride, out_spatial):
    """Gather sliding windows into columns: [N, C*prod(kernel), prod(out)].

    Column index (c, k_1, ..., k_d) is row-major, matching a reshape of
    [C_out, C_in, *kernel] weights.
    """
    n, c = x_padded.shape[:2]
    d = len(kernel)
    n_positions = int(np.prod(out_spatial))
    n_offsets = int(np.prod(kernel))
    cols = np.empty((n, c, n_offsets, n_positions), dtype=DTYPE)
    for j, offset in enumerate(np.ndindex(*kernel)):
        window = tuple(
            slice(offset[i], offset[i] + stride[i] * (out_spatial[i] - 1) + 1, stride[i])
            for i in range(d)
        )
        cols[:, :, j, :] = x_padded[(slice(None), slice(None)) + window].reshape(
            n, c, n_positions
        )
    return cols.reshape(n, c * n_offsets, n_positions)


def conv_forward(x, p):
    """Strided, padded convolution. Returns (y, cache)."""
    d = p.weights.ndim - 2
    if x.ndim != d + 2:
        raise ShapeError(f"expected {d + 2}-D input for {d}-D conv, got {x.ndim}-D")
    if x.shape[1] != p.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, weights expect {p.in_channels}")
    out_spatial = conv_output_shape(x.shape[2:], p.kernel, p.stride, p.pad_before, p.pad_after)

    x_padded = zero_pad(x, p.pad_before, p.pad_after)
    cols = _im2col(x_padded, p.kernel, p.stride, out_spatial)
    w_mat = p.weights.reshape(p.out_channels, -1)
    y = np.matmul(w_mat[None, :, :], cols)
    y += p.bias[None, :, None]
    y = y.reshape((x.shape[0], p.out_channels) + out_spatial)
    cache = (cols, x.shape, p, out_spatial)
    return y, cache


def conv_backward(dy, cache):
    """Gradients of a scalar loss through conv_forward: (dx, dw, db)."""
    cols, x_shape, p, out_spatial = cache
    n = x_shape[0]
    expected = (n, p.out_channels) + out_spatial
    if dy.shape != expected:
        raise ShapeError(f"dy shape {dy.shape} does not match forward output {expected}")

    d = len(out_spatial)
    dy_mat = dy.reshape(n, p.out_channels, -1)
    db = dy_mat.sum(axis=(0, 2))
    dw = np.matmul(dy_mat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(p.weights.shape)

    w_mat = p.weights.reshape(p.out_channels, -1)
    dcols = np.matmul(w_mat.T[None, :, :], dy_mat)
    dcols = dcols.reshape((n, p.in_channels) + p.kernel + (int(np.prod(out_spatial)),))

    padded_spatial = tuple(
        x_shape[2 + i] + p.pad_before[i] + p.pad_after[i] for i in range(d)
    )
    dx_padded = np.zeros((n, p.in_channels) + padded_spatial, dtype=DTYPE)
    for offset in np.ndindex(*p.kernel):
        window = tuple(
            slice(offset[i], offset[i] + p.stride[i] * (out_spatial[i] - 1) + 1, p.stride[i])
            for i in range(d)
        )
        piece = dcols[(slice(None), slice(None)) + offset].reshape(
            (n, p.in_channels) + out_spatial
        )
        dx_padded[(slice(None), slice(None)) + window] += piece

    interior = tuple(
        slice(p.pad_before[i], p.pad_before[i] + x_shape[2 + i]) for i in range(d)
    )
    dx = dx_padded[(slice(None), slice(None)) + interior].copy()
    return dx, dw, db


@dataclass
class BatchNormParams:
    """Per-channel affine normalization state."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def init(cls, channels, eps=1e-5, momentum=0.1):
        return cls(
            gamma=np.ones(channels, dtype=DTYPE),
            beta=np.zeros(channels, dtype=DTYPE),
            running_mean=np.zeros(channels, dtype=DTYPE),
            running_var=np.ones(channels, dtype=DTYPE),
            eps=eps,
            momentum=momentum,
        )


def _channel_shape(x):
    return (1, x.shape[1]) + (1,) * (x.ndim - 2)


def batchnorm_forward(x, p, mode="train"):
    """Normalize per channel over batch and spatial axes.

    Train mode uses batch statistics (biased variance) and returns updated
    running statistics; eval mode uses the stored running statistics.
    Returns (y, cache, (new_running_mean, new_running_var)). The params
    object itself is never mutated.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if x.shape[1] != p.gamma.shape[0]:
        raise ShapeError(f"input has {x.shape[1]} channels, batchnorm expects {p.gamma.shape[0]}")
    axes = (0,) + tuple(range(2, x.ndim))
    cshape = _channel_shape(x)

    if mode == "train":
        if x.shape[0] < 2:
            raise DegenerateBatchError("train-mode batch norm needs batch size >= 2")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)  # biased: divide by count
        new_mean = (1.0 - p.momentum) * p.running_mean + p.momentum * mean
        new_var = (1.0 - p.momentum) * p.running_var + p.momentum * var
    else:
        mean = p.running_mean
        var = p.running_var
        new_mean = p.running_mean.copy()
        new_var = p.running_var.copy()

    inv_std = 1.0 / np.sqrt(var + p.eps)
    xhat = (x - mean.reshape(cshape)) * inv_std.reshape(cshape)
    y = p.gamma.reshape(cshape) * xhat + p.beta.reshape(cshape)
    cache = (xhat, inv_std, p.gamma, axes, mode)
    return y, cache, (new_mean, new_var)


def batchnorm_backward(dy, cache):
    """Gradients through batchnorm_forward: (dx, dgamma, dbeta)."""
    xhat, inv_std, gamma, axes, mode = cache
    if dy.shape != xhat.shape:
        raise ShapeError(f"dy shape {dy.shape} does not match forward output {xhat.shape}")
    cshape = _channel_shape(dy)
    dbeta = dy.sum(axis=axes)
    dgamma = (dy * xhat).sum(axis=axes)
    dxhat = dy * gamma.reshape(cshape)
    if mode == "eval":
        return dxhat * inv_std.reshape(cshape), dgamma, dbeta
    # Train mode: batch statistics depend on x as well.
    m_dxhat = dxhat.mean(axis=axes).reshape(cshape)
    m_dxhat_xhat = (dxhat * xhat).mean(axis=axes).reshape(cshape)
    dx = inv_std.reshape(cshape) * (dxhat - m_dxhat - xhat * m_dxhat_xhat)
    return dx, dgamma, dbeta


def relu(x):
    """Element-wise max(x, 0)."""
    return np.maximum(x, 0.0)


def relu_backward(dy, x):
    """dy gated by x > 0; the derivative at exactly 0 is defined as 0."""
    return dy * (x > 0.0)


def global_avg_pool(x):
    """Mean over all spatial positions: [N, C, ...] -> [N, C]."""
    if x.ndim < 3:
        raise ShapeError(f"global average pool needs spatial axes, got {x.ndim}-D input")
    return x.mean(axis=tuple(range(2, x.ndim)))


def global_avg_pool_backward(dy, x_shape):
    """Spread dy uniformly over the pooled positions."""
    spatial_count = int(np.prod(x_shape[2:]))
    dx = np.broadcast_to(
        dy.reshape(dy.shape + (1,) * (len(x_shape) - 2)), x_shape
    ) / spatial_count
    return np.ascontiguousarray(dx)


def linear_forward(x, weights, bias):
    """Affine map y = x @ W + b for x [N, F], W [F, K], b [K]."""
    if x.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(f"linear expects [N, {weights.shape[0]}] input, got {x.shape}")
    y = x @ weights + bias
    return y, (x, weights)


def linear_backward(dy, cache):
    x, weights = cache
    if dy.shape != (x.shape[0], weights.shape[1]):
        raise ShapeError(f"dy shape {dy.shape} does not match {(x.shape[0], weights.shape[1])}")
    dx = dy @ weights.T
    dw = x.T @ dy
    db = dy.sum(axis=0)
    return dx, dw, db


def softmax(logits):
    """Row-wise softmax, stabilized by max subtraction."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood and its gradient w.r.t. the logits.

    Returns (loss, dlogits) with dlogits = (softmax - onehot) / N.
    """
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    probs = softmax(logits)
    rows = np.arange(n)
    loss = float(-np.log(probs[rows, labels]).mean())
    dlogits = probs.copy()
    dlogits[rows, labels] -= 1.0
    dlogits /= n
    return loss, dlogits


def he_init(rng, shape):
    """Uniform init in [-b, b] with b = sqrt(6 / fan_in).

    fan_in is C_in * prod(kernel) for conv shapes [C_out, C_in, *kernel]
    and the input width F for linear shapes [F, K].
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) == 2:
        fan_in = shape[0]
    else:
        fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(shape, -bound, bound)
