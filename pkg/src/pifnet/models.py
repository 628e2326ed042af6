"""Model construction: the plain CNN and the PIF CNN under comparison.

Both architectures share the same stem recipe (Conv-BatchNorm-ReLU blocks
with stride-2 blocks doing the downsampling) and the same head (global
average pool + linear). The baseline stacks five conv blocks; the PIF
variant stacks four and replaces the fifth with a PIF layer, so the two
differ in exactly one mechanism. Shape chains are validated at build time:
a spec that underflows spatially or breaks PIF divisibility never produces
a model.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import (
    BatchNormParams,
    ConvParams,
    batchnorm_backward,
    batchnorm_forward,
    conv_backward,
    conv_forward,
    conv_output_shape,
    global_avg_pool,
    global_avg_pool_backward,
    he_init,
    linear_backward,
    linear_forward,
    relu,
    relu_backward,
)
from .pif import PifConfig, init_pif_params, pif_backward, pif_forward, pif_param_count
from .tensor import DTYPE


@dataclass
class ModelSpec:
    """Declarative description of one architecture.

    `input_shape` is (channels, *spatial). `filters_per_block` has five
    entries for the baseline and four for the PIF model (whose fifth stage
    is the PIF layer described by `pif`). `strides` gives the per-block
    downsampling factor; conv blocks keep spatial size via k-1 total
    padding, so block i maps size n to ceil(n / stride_i).
    """

    dims: int = 2
    input_shape: tuple = (1, 32, 32)
    num_classes: int = 2
    filters_per_block: tuple = (8, 8, 16, 16, 32)
    kernel_size: int = 3
    strides: tuple = (2, 2, 1, 1, 1)
    pif: PifConfig | None = None
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.filters_per_block = tuple(int(f) for f in self.filters_per_block)
        self.strides = tuple(int(s) for s in self.strides)
        if self.dims not in (2, 3):
            raise ConfigError(f"dims must be 2 or 3, got {self.dims}")
        if len(self.input_shape) != self.dims + 1:
            raise ConfigError(
                f"input_shape {self.input_shape} does not match dims={self.dims}"
            )
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.strides) != len(self.filters_per_block):
            raise ConfigError("strides must list one entry per conv block")
        if any(f < 1 for f in self.filters_per_block):
            raise ConfigError("filter counts must be >= 1")


def default_baseline_spec(**overrides):
    """Reference 2D baseline: five conv blocks on 32x32 single-channel input."""
    return ModelSpec(**overrides)


def default_pif_spec(**overrides):
    """Reference 2D PIF model: four conv blocks, then a 4x4-grid PIF layer.

    The stem brings 32x32 input to an 8x8 map; patch size 2 then yields a
    grid of 16 patches, each processed by its own Conv-BatchNorm-ReLU block.
    """
    spec = dict(
        filters_per_block=(8, 8, 16, 16),
        strides=(2, 2, 1, 1),
        pif=PifConfig(
            patch_size=(2, 2),
            kernel_size=(2, 2),
            padding=(1, 1),
            in_channels=16,
            out_channels=32,
        ),
    )
    spec.update(overrides)
    return ModelSpec(**spec)


class ConvBlock:
    """Conv-BatchNorm-ReLU with its own parameters and gradient slots."""

    def __init__(self, name, conv, bn):
        self.name = name
        self.conv = conv
        self.bn = bn
        self._cache = None
        self.grads = {}

    def forward(self, x, mode):
        h, conv_cache = conv_forward(x, self.conv)
        pre_relu, bn_cache, (new_mean, new_var) = batchnorm_forward(h, self.bn, mode)
        if mode == "train":
            self.bn.running_mean = new_mean
            self.bn.running_var = new_var
        self._cache = (conv_cache, bn_cache, pre_relu)
        return relu(pre_relu)

    def backward(self, dy):
        conv_cache, bn_cache, pre_relu = self._cache
        dh = relu_backward(dy, pre_relu)
        dh, dgamma, dbeta = batchnorm_backward(dh, bn_cache)
        dx, dw, db = conv_backward(dh, conv_cache)
        self.grads = {
            f"{self.name}.conv.w": dw,
            f"{self.name}.conv.b": db,
            f"{self.name}.bn.gamma": dgamma,
            f"{self.name}.bn.beta": dbeta,
        }
        return dx

    def named_params(self):
        return {
            f"{self.name}.conv.w": self.conv.weights,
            f"{self.name}.conv.b": self.conv.bias,
            f"{self.name}.bn.gamma": self.bn.gamma,
            f"{self.name}.bn.beta": self.bn.beta,
        }

    def named_buffers(self):
        return {
            f"{self.name}.bn.running_mean": self.bn.running_mean,
            f"{self.name}.bn.running_var": self.bn.running_var,
        }

    def set_tensor(self, name, value):
        key = name.split(".", 1)[1]
        target = {
            "conv.w": ("conv", "weights"),
            "conv.b": ("conv", "bias"),
            "bn.gamma": ("bn", "gamma"),
            "bn.beta": ("bn", "beta"),
            "bn.running_mean": ("bn", "running_mean"),
            "bn.running_var": ("bn", "running_var"),
        }[key]
        setattr(getattr(self, target[0]), target[1], value)


class PifLayerModule:
    """PIF layer bound to its per-patch parameters."""

    def __init__(self, name, cfg, params):
        self.name = name
        self.cfg = cfg
        self.params = params
        self._cache = None
        self.grads = {}

    def _tensor_names(self, coord, block):
        stem = f"{self.name}.patch." + "_".join(str(c) for c in coord)
        if self.cfg.blocks > 1:
            stem = f"{stem}_{block}"
        return stem

    def _entries(self):
        for patch_index, coord in enumerate(np.ndindex(*self.params.grid_dims)):
            for b, block in enumerate(self.params.per_patch[patch_index]):
                yield self._tensor_names(coord, b), patch_index, b, block

    def forward(self, x, mode):
        y, cache, running_updates = pif_forward(x, self.cfg, self.params, mode)
        if mode == "train" and self.cfg.with_bn_relu:
            for patch_params, patch_running in zip(self.params.per_patch, running_updates):
                for block, running in zip(patch_params, patch_running):
                    block["bn"].running_mean, block["bn"].running_var = running
        self._cache = cache
        return y

    def backward(self, dy):
        dx, grads = pif_backward(dy, self._cache)
        named = {}
        for stem, patch_index, b, _ in self._entries():
            g = grads[patch_index][b]
            named[f"{stem}.w"] = g["w"]
            named[f"{stem}.b"] = g["b"]
            if self.cfg.with_bn_relu:
                named[f"{stem}.gamma"] = g["gamma"]
                named[f"{stem}.beta"] = g["beta"]
        self.grads = named
        return dx

    def named_params(self):
        named = {}
        for stem, _, _, block in self._entries():
            named[f"{stem}.w"] = block["conv"].weights
            named[f"{stem}.b"] = block["conv"].bias
            if self.cfg.with_bn_relu:
                named[f"{stem}.gamma"] = block["bn"].gamma
                named[f"{stem}.beta"] = block["bn"].beta
        return named

    def named_buffers(self):
        named = {}
        if not self.cfg.with_bn_relu:
            return named
        for stem, _, _, block in self._entries():
            named[f"{stem}.running_mean"] = block["bn"].running_mean
            named[f"{stem}.running_var"] = block["bn"].running_var
        return named

    def set_tensor(self, name, value):
        for stem, _, _, block in self._entries():
            if not name.startswith(stem + "."):
                continue
            leaf = name[len(stem) + 1 :]
            if leaf == "w":
                block["conv"].weights = value
            elif leaf == "b":
                block["conv"].bias = value
            elif leaf in ("gamma", "beta", "running_mean", "running_var"):
                setattr(block["bn"], leaf, value)
            else:
                continue
            return
        raise KeyError(name)


class GlobalAvgPool:
    def __init__(self):
        self._in_shape = None
        self.grads = {}

    def forward(self, x, mode):
        self._in_shape = x.shape
        return global_avg_pool(x)

    def backward(self, dy):
        return global_avg_pool_backward(dy, self._in_shape)

    def named_params(self):
        return {}

    def named_buffers(self):
        return {}


class LinearHead:
    def __init__(self, name, weights, bias):
        self.name = name
        self.weights = weights
        self.bias = bias
        self._cache = None
        self.grads = {}

    def forward(self, x, mode):
        y, self._cache = linear_forward(x, self.weights, self.bias)
        return y

    def backward(self, dy):
        dx, dw, db = linear_backward(dy, self._cache)
        self.grads = {f"{self.name}.w": dw, f"{self.name}.b": db}
        return dx

    def named_params(self):
        return {f"{self.name}.w": self.weights, f"{self.name}.b": self.bias}

    def named_buffers(self):
        return {}

    def set_tensor(self, name, value):
        if name.endswith(".w"):
            self.weights = value
        else:
            self.bias = value


class Model:
    """An ordered layer stack with explicit forward/backward."""

    def __init__(self, spec, layers):
        self.spec = spec
        self.layers = layers

    def forward(self, x, mode="eval"):
        if x.shape[1:] != self.spec.input_shape:
            raise ShapeError(
                f"input shape {x.shape[1:]} does not match spec {self.spec.input_shape}"
            )
        h = np.ascontiguousarray(x, dtype=DTYPE)
        for layer in self.layers:
            h = layer.forward(h, mode)
        return h

    def backward(self, dlogits):
        dh = dlogits
        for layer in reversed(self.layers):
            dh = layer.backward(dh)
        return dh

    def named_params(self):
        named = {}
        for layer in self.layers:
            named.update(layer.named_params())
        return named

    def named_grads(self):
        named = {}
        for layer in self.layers:
            named.update(layer.grads)
        return named

    def param_count(self):
        return sum(v.size for v in self.named_params().values())

    def state(self):
        """Deep copy of every parameter and buffer, keyed by name."""
        out = {}
        for layer in self.layers:
            for name, value in layer.named_params().items():
                out[name] = value.copy()
            for name, value in layer.named_buffers().items():
                out[name] = value.copy()
        return out

    def load_state(self, state):
        for layer in self.layers:
            known = list(layer.named_params()) + list(layer.named_buffers())
            for name in known:
                layer.set_tensor(name, state[name].copy())


def _same_padding(kernel, dims):
    k = (kernel,) * dims if np.isscalar(kernel) else tuple(kernel)
    before = tuple((kk - 1) // 2 for kk in k)
    after = tuple((kk - 1) - (kk - 1) // 2 for kk in k)
    return k, before, after


def _build_stem(spec, rng, n_blocks):
    """Conv-BN-ReLU blocks 1..n plus the spatial shape they produce."""
    dims = spec.dims
    kernel, pad_before, pad_after = _same_padding(spec.kernel_size, dims)
    layers = []
    channels = spec.input_shape[0]
    spatial = spec.input_shape[1:]
    for i in range(n_blocks):
        filters = spec.filters_per_block[i]
        stride = (spec.strides[i],) * dims
        conv = ConvParams(
            weights=he_init(rng, (filters, channels) + kernel),
            bias=np.zeros(filters, dtype=DTYPE),
            stride=stride,
            pad_before=pad_before,
            pad_after=pad_after,
        )
        spatial = conv_output_shape(spatial, kernel, stride, pad_before, pad_after)
        bn = BatchNormParams.init(filters, eps=spec.bn_eps, momentum=spec.bn_momentum)
        layers.append(ConvBlock(f"block{i + 1}", conv, bn))
        channels = filters
    return layers, channels, spatial


def _head(rng, in_features, num_classes):
    weights = he_init(rng, (in_features, num_classes))
    bias = np.zeros(num_classes, dtype=DTYPE)
    return [GlobalAvgPool(), LinearHead("head.linear", weights, bias)]


def build_baseline(spec, rng):
    """Five shared-weight conv blocks, then global average pool and linear."""
    if spec.pif is not None:
        raise ConfigError("baseline spec must not carry a PIF config")
    if len(spec.filters_per_block) != 5:
        raise ConfigError(
            f"baseline needs 5 conv blocks, got {len(spec.filters_per_block)}"
        )
    layers, channels, _ = _build_stem(spec, rng, 5)
    layers += _head(rng, channels, spec.num_classes)
    return Model(spec, layers)


def build_pif_model(spec, rng):
    """Four conv blocks, one PIF layer, then the shared head."""
    if spec.pif is None:
        raise ConfigError("PIF model spec requires a PIF config")
    if len(spec.filters_per_block) != 4:
        raise ConfigError(
            f"PIF model needs 4 conv blocks, got {len(spec.filters_per_block)}"
        )
    layers, channels, spatial = _build_stem(spec, rng, 4)
    cfg = spec.pif
    if cfg.in_channels != channels:
        raise ConfigError(
            f"PIF expects {cfg.in_channels} input channels but block 4 emits {channels}"
        )
    # Raises PatchTilingError at build time if the reached map does not tile.
    for axis, (size, s) in enumerate(zip(spatial, cfg.patch_size)):
        if size % s != 0:
            from .errors import PatchTilingError

            raise PatchTilingError(
                f"block-4 map axis {axis} has size {size}, not divisible by patch {s}"
            )
    grid_dims = tuple(size // s for size, s in zip(spatial, cfg.patch_size))
    params = init_pif_params(cfg, grid_dims, rng)
    layers.append(PifLayerModule("pif", cfg, params))
    layers += _head(rng, cfg.out_channels, spec.num_classes)
    return Model(spec, layers)


def build_model(spec, rng):
    """Dispatch on the spec: PIF config present means PIF architecture."""
    if spec.pif is None:
        return build_baseline(spec, rng)
    return build_pif_model(spec, rng)


def model_param_count(model):
    return model.param_count()
