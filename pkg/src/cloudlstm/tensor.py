"""Dense double-precision arrays and the array operations everything else builds on.

A tensor here is a plain ``numpy.ndarray`` of float64 values in row-major
order: ``shape`` plus flat data is exactly the numpy layout. The functions in
this module add strict shape checking (no broadcasting between mismatched
shapes) and the binary ``CLT1`` tensor file format shared by datasets,
checkpoints and golden fixtures.

All operations are pure and deterministic: identical inputs give bit-identical
outputs within one environment.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

Tensor = np.ndarray

MAGIC = b"CLT1"

# Open-interval bounds for the squashing activations. Plain float evaluation
# of sigmoid/tanh saturates to exactly 0.0 or 1.0 for |x| above ~37/19, which
# would violate the (0,1) / (-1,1) contracts, so outputs are clipped to the
# nearest representable interior values.
_SIGMOID_LO = np.nextafter(0.0, 1.0)
_OPEN_ONE = np.nextafter(1.0, 0.0)


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class FormatError(ValueError):
    """A tensor file or container is malformed or truncated."""


def _as_f64(a) -> Tensor:
    return np.asarray(a, dtype=np.float64)


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    """Entrywise product of two identically shaped tensors."""
    a, b = _as_f64(a), _as_f64(b)
    _require_same_shape(a, b, "elementwise_mul")
    return a * b


def elementwise_add(a: Tensor, b: Tensor) -> Tensor:
    """Entrywise sum of two identically shaped tensors."""
    a, b = _as_f64(a), _as_f64(b)
    _require_same_shape(a, b, "elementwise_add")
    return a + b


def sigmoid(a: Tensor) -> Tensor:
    """Logistic function, computed branch-wise so it never overflows.

    Outputs are strictly inside (0, 1) for every finite input.
    """
    a = _as_f64(a)
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return np.clip(out, _SIGMOID_LO, _OPEN_ONE)


def tanh(a: Tensor) -> Tensor:
    """Hyperbolic tangent with outputs strictly inside (-1, 1)."""
    return np.clip(np.tanh(_as_f64(a)), -_OPEN_ONE, _OPEN_ONE)


def _im2col(image: Tensor, k: int) -> Tensor:
    """Unfold [H,W,C] into [H*W, k*k*C] patch rows for a stride-1 same conv.

    Column order within a row is (ky, kx, channel), matching the row-major
    flattening of a [k,k,C,out] kernel.
    """
    h, w, c = image.shape
    p = (k - 1) // 2
    padded = np.zeros((h + 2 * p, w + 2 * p, c), dtype=np.float64)
    padded[p : p + h, p : p + w] = image
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(0, 1))
    # win is [H, W, C, k, k]; reorder to put (ky, kx, C) fastest.
    return win.transpose(0, 1, 3, 4, 2).reshape(h * w, k * k * c)


def conv2d_same(image: Tensor, kernel: Tensor) -> Tensor:
    """Spatial cross-correlation with zero padding and unchanged spatial size.

    ``image`` is [H,W,Cin], ``kernel`` is [k,k,Cin,Cout] with odd k; the result
    is [H,W,Cout]. No kernel flip is applied (cross-correlation convention).
    """
    image = np.ascontiguousarray(image, dtype=np.float64)
    kernel = np.ascontiguousarray(kernel, dtype=np.float64)
    if image.ndim != 3:
        raise ShapeError(f"conv2d_same: image must be [H,W,Cin], got {image.shape}")
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise ShapeError(
            f"conv2d_same: kernel must be [k,k,Cin,Cout] with square taps, got {kernel.shape}"
        )
    k = kernel.shape[0]
    if k % 2 == 0:
        raise ShapeError(f"conv2d_same: kernel size must be odd, got {k}")
    if kernel.shape[2] != image.shape[2]:
        raise ShapeError(
            f"conv2d_same: channel mismatch, image {image.shape} vs kernel {kernel.shape}"
        )
    h, w, _ = image.shape
    c_out = kernel.shape[3]
    if h == 0 or w == 0:
        return np.zeros((h, w, c_out), dtype=np.float64)
    cols = _im2col(image, k)
    out = cols @ kernel.reshape(k * k * kernel.shape[2], c_out)
    return out.reshape(h, w, c_out)


def write_tensor_to(stream: BinaryIO, array: Tensor) -> None:
    """Serialize one tensor in the CLT1 wire format.

    Layout: magic "CLT1", rank as u32 little-endian, each extent as u32
    little-endian, then the values as IEEE-754 f64 little-endian, row-major.
    """
    # asarray with order="C", not ascontiguousarray: the latter promotes
    # rank-0 tensors to rank 1.
    a = np.asarray(array, dtype=np.float64, order="C")
    stream.write(MAGIC)
    stream.write(struct.pack("<I", a.ndim))
    stream.write(struct.pack(f"<{a.ndim}I", *a.shape))
    stream.write(a.astype("<f8", copy=False).tobytes())


def _read_exact(stream: BinaryIO, n: int, what: str) -> bytes:
    buf = stream.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated tensor data while reading {what}")
    return buf


def read_tensor_from(stream: BinaryIO) -> Tensor:
    """Read one CLT1 tensor from the current stream position."""
    magic = _read_exact(stream, 4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack("<I", _read_exact(stream, 4, "rank"))
    if rank > 32:
        raise FormatError(f"implausible tensor rank {rank}")
    shape = struct.unpack(f"<{rank}I", _read_exact(stream, 4 * rank, "extents"))
    count = 1
    for e in shape:
        count *= e
    data = _read_exact(stream, 8 * count, "values")
    return np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(shape)


def write_tensor(path, array: Tensor) -> None:
    """Write a single tensor to ``path`` as a CLT1 file."""
    with open(path, "wb") as fh:
        write_tensor_to(fh, array)


def read_tensor(path) -> Tensor:
    """Read a single-tensor CLT1 file; errors name the offending file."""
    try:
        with open(path, "rb") as fh:
            out = read_tensor_from(fh)
            if fh.read(1):
                raise FormatError("trailing bytes after tensor data")
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return out
