"""Synthetic spatially-normalized image datasets.

Every sample is a smooth low-frequency background field plus white noise,
normalized per image to zero mean and unit variance. Class 1 additionally
receives a constant additive template of amplitude `signal_strength` inside
a fixed region, so the class-discriminative signal sits at the same spatial
location in every image (optionally jittered by up to `jitter` voxels to
emulate slight misregistration). That fixed location is the property the
patch-local architecture is designed to exploit.

Labels alternate 0,1,0,1,... so any even-length prefix is class-balanced;
the train/val/test convention is simply consecutive blocks. Sample i draws
from the child stream (seed, i), which makes generation order-independent
and reproducible.

On disk a dataset is a directory holding ``images.pift``, ``labels.csv``
(one integer per line) and ``meta.txt`` (key = value spec dump).
"""

import os
from dataclasses import dataclass, fields

import numpy as np

from .errors import FormatError, RegionBoundsError
from .io import read_tensor, write_tensor
from .tensor import DTYPE, Rng


@dataclass
class SynthSpec:
    dims: int = 2
    image_size: tuple = (32, 32)
    samples_per_class: int = 500
    signal_offsets: tuple = (12, 12)
    signal_sizes: tuple = (8, 8)
    signal_strength: float = 0.6
    smooth_amplitude: float = 1.0
    smooth_modes: int = 3
    max_frequency: int = 2
    jitter: int = 0
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(int(s) for s in self.image_size)
        self.signal_offsets = tuple(int(o) for o in self.signal_offsets)
        self.signal_sizes = tuple(int(s) for s in self.signal_sizes)
        if self.dims not in (2, 3):
            raise ValueError(f"dims must be 2 or 3, got {self.dims}")
        if len(self.image_size) != self.dims:
            raise ValueError(f"image_size {self.image_size} does not match dims={self.dims}")
        if len(self.signal_offsets) != self.dims or len(self.signal_sizes) != self.dims:
            raise ValueError("signal_patch rank must match dims")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")
        if self.jitter < 0 or self.jitter > 1:
            raise ValueError(f"jitter must be 0 or 1, got {self.jitter}")
        for off, size, dim in zip(self.signal_offsets, self.signal_sizes, self.image_size):
            if off < 0 or size < 1 or off + size > dim:
                raise RegionBoundsError(
                    f"signal_patch [{off}, {off + size}) exceeds image axis of size {dim}"
                )


@dataclass
class Dataset:
    images: np.ndarray  # [N, 1, *spatial]
    labels: np.ndarray  # [N] integers
    meta: SynthSpec | None = None

    def __len__(self):
        return self.images.shape[0]

    def take(self, indices):
        return Dataset(
            images=self.images[indices].copy(),
            labels=self.labels[indices].copy(),
            meta=self.meta,
        )

    def slice(self, start, stop):
        return self.take(np.arange(start, stop))


def _coordinate_grids(image_size):
    axes = [np.arange(s, dtype=DTYPE) / s for s in image_size]
    return np.meshgrid(*axes, indexing="ij")


def _sample_image(spec, rng, grids):
    """One background field, normalized per image to mean 0, variance 1."""
    field = np.zeros(spec.image_size, dtype=DTYPE)
    for _ in range(spec.smooth_modes):
        freq = rng.integers(-spec.max_frequency, spec.max_frequency, size=spec.dims)
        if not np.any(freq):
            freq[0] = 1
        phase = rng.uniform((1,), 0.0, 2.0 * np.pi)[0]
        wave = phase
        for f, grid in zip(freq, grids):
            wave = wave + 2.0 * np.pi * float(f) * grid
        field += np.cos(wave)
    field *= spec.smooth_amplitude / np.sqrt(spec.smooth_modes)
    field += rng.normal(spec.image_size)
    field -= field.mean()
    field /= field.std()
    return field


def _signal_region(spec, rng):
    offsets = list(spec.signal_offsets)
    if spec.jitter > 0:
        shifts = rng.integers(-spec.jitter, spec.jitter, size=spec.dims)
        for i, shift in enumerate(shifts):
            lo = 0
            hi = spec.image_size[i] - spec.signal_sizes[i]
            offsets[i] = int(np.clip(offsets[i] + int(shift), lo, hi))
    return tuple(slice(o, o + s) for o, s in zip(offsets, spec.signal_sizes))


def generate(spec):
    """Build the dataset described by `spec`, 2 * samples_per_class images."""
    n = 2 * spec.samples_per_class
    images = np.empty((n, 1) + spec.image_size, dtype=DTYPE)
    labels = np.arange(n, dtype=np.int64) % 2
    grids = _coordinate_grids(spec.image_size)
    base = Rng(spec.seed)
    for i in range(n):
        rng = base.child(i)
        image = _sample_image(spec, rng, grids)
        if labels[i] == 1:
            image[_signal_region(spec, rng)] += spec.signal_strength
        images[i, 0] = image
    return Dataset(images=images, labels=labels, meta=spec)


def split_dataset(dataset, train_per_class, val_per_class, test_per_class=0):
    """Cut consecutive balanced blocks: train, then val, then test."""
    needed = 2 * (train_per_class + val_per_class + test_per_class)
    if needed > len(dataset):
        raise ValueError(f"split needs {needed} samples, dataset has {len(dataset)}")
    a = 2 * train_per_class
    b = a + 2 * val_per_class
    c = b + 2 * test_per_class
    parts = [dataset.slice(0, a), dataset.slice(a, b)]
    if test_per_class:
        parts.append(dataset.slice(b, c))
    return tuple(parts)


def _format_value(value):
    if isinstance(value, tuple):
        return " ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(name, text, kind):
    if kind == "tuple":
        return tuple(int(v) for v in text.split())
    if kind == "float":
        return float(text)
    return int(text)


_META_KINDS = {
    "dims": "int",
    "image_size": "tuple",
    "samples_per_class": "int",
    "signal_offsets": "tuple",
    "signal_sizes": "tuple",
    "signal_strength": "float",
    "smooth_amplitude": "float",
    "smooth_modes": "int",
    "max_frequency": "int",
    "jitter": "int",
    "seed": "int",
}


def save(dataset, directory):
    """Write images.pift, labels.csv and meta.txt into `directory`."""
    os.makedirs(directory, exist_ok=True)
    write_tensor(os.path.join(directory, "images.pift"), dataset.images)
    with open(os.path.join(directory, "labels.csv"), "w", encoding="utf-8") as fh:
        for label in dataset.labels:
            fh.write(f"{int(label)}\n")
    with open(os.path.join(directory, "meta.txt"), "w", encoding="utf-8") as fh:
        fh.write("format = pifnet-dataset-v1\n")
        if dataset.meta is not None:
            for f in fields(dataset.meta):
                fh.write(f"{f.name} = {_format_value(getattr(dataset.meta, f.name))}\n")
    return directory


def load(directory):
    """Read a dataset directory back; the round trip is bitwise exact."""
    images = read_tensor(os.path.join(directory, "images.pift"))
    labels_path = os.path.join(directory, "labels.csv")
    with open(labels_path, "r", encoding="utf-8") as fh:
        lines = [line.strip() for line in fh if line.strip()]
    try:
        labels = np.array([int(line) for line in lines], dtype=np.int64)
    except ValueError as exc:
        raise FormatError(f"{labels_path}: non-integer label line: {exc}") from None
    if labels.shape[0] != images.shape[0]:
        raise FormatError(
            f"{labels_path}: {labels.shape[0]} labels for {images.shape[0]} images"
        )

    meta_path = os.path.join(directory, "meta.txt")
    meta = None
    if os.path.exists(meta_path):
        values = {}
        with open(meta_path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or "=" not in line:
                    continue
                name, text = (part.strip() for part in line.split("=", 1))
                if name in _META_KINDS:
                    values[name] = _parse_value(name, text, _META_KINDS[name])
        if values:
            meta = SynthSpec(**values)
    return Dataset(images=images, labels=labels, meta=meta)
