"""PIFT tensor files and weight manifests.

PIFT is the on-disk tensor format used for datasets and weights:

    bytes 0-3   magic ``PIFT``
    bytes 4-7   rank, uint32 little-endian
    then        rank dims, uint32 little-endian each
    then        product(dims) float64 values, little-endian, row-major

Weights of a whole model persist as one PIFT file per named tensor plus a
plain-text ``manifest.txt`` mapping each tensor name to its file.
"""

import os
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"PIFT"
MAX_RANK = 8


def write_tensor(path, x):
    """Write one tensor to `path` in PIFT format."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", x.ndim))
        fh.write(struct.pack(f"<{x.ndim}I", *x.shape))
        fh.write(x.astype("<f8", copy=False).tobytes(order="C"))


def read_tensor(path):
    """Read one PIFT tensor. Raises FormatError with the failing byte offset."""
    with open(path, "rb") as fh:
        data = fh.read()

    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic, expected {MAGIC!r}", offset=0)
    if len(data) < 8:
        raise FormatError(f"{path}: truncated before rank field", offset=len(data))
    (rank,) = struct.unpack_from("<I", data, 4)
    if rank < 1 or rank > MAX_RANK:
        raise FormatError(f"{path}: rank {rank} outside [1, {MAX_RANK}]", offset=4)

    dims_end = 8 + 4 * rank
    if len(data) < dims_end:
        raise FormatError(f"{path}: truncated inside dims", offset=len(data))
    dims = struct.unpack_from(f"<{rank}I", data, 8)
    for i, d in enumerate(dims):
        if d < 1:
            raise FormatError(f"{path}: non-positive dim {d}", offset=8 + 4 * i)

    count = 1
    for d in dims:
        count *= d
    expected = dims_end + 8 * count
    if len(data) < expected:
        raise FormatError(
            f"{path}: expected {expected} bytes, file has {len(data)}", offset=len(data)
        )
    if len(data) > expected:
        raise FormatError(f"{path}: {len(data) - expected} trailing bytes", offset=expected)

    flat = np.frombuffer(data, dtype="<f8", count=count, offset=dims_end)
    return np.ascontiguousarray(flat.astype(np.float64).reshape(dims))


def save_weights(directory, named_tensors):
    """Write `{name: tensor}` as PIFT files plus a manifest, return manifest path."""
    os.makedirs(directory, exist_ok=True)
    manifest_path = os.path.join(directory, "manifest.txt")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        for name in sorted(named_tensors):
            fname = f"{name}.pift"
            write_tensor(os.path.join(directory, fname), named_tensors[name])
            fh.write(f"{name} = {fname}\n")
    return manifest_path


def load_weights(directory):
    """Read a weight directory back into `{name: tensor}`."""
    manifest_path = os.path.join(directory, "manifest.txt")
    tensors = {}
    with open(manifest_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"{manifest_path}:{lineno}: expected 'name = file'")
            name, fname = (part.strip() for part in line.split("=", 1))
            tensors[name] = read_tensor(os.path.join(directory, fname))
    return tensors
