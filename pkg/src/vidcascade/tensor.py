"""Dense float32 tensor values plus the resize/upsample kernels the cascade needs.

Tensors are immutable once created (the backing numpy buffer is frozen), so
they are safe to share across threads. Video payloads are 4-D arrays shaped
(frames, height, width, channels) with values in [-1, 1]; batched forms add a
leading batch axis.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Sequence

import numpy as np


class TensorError(ValueError):
    """Raised on shape mismatches, non-finite values, or invalid arguments."""


class Tensor:
    """Immutable row-major float32 array value.

    Construction rejects non-finite data: NaN/Inf is an error surface here,
    never a silent state.
    """

    __slots__ = ("data",)

    def __init__(self, data, *, _trusted: bool = False):
        if isinstance(data, Tensor):
            arr = data.data
        elif _trusted and isinstance(data, np.ndarray) and data.dtype == np.float32:
            arr = data if data.flags.c_contiguous else np.ascontiguousarray(data)
        else:
            arr = np.asarray(data, dtype=np.float32)
            if not arr.flags.c_contiguous:
                arr = np.ascontiguousarray(arr)
            if not np.all(np.isfinite(arr)):
                raise TensorError("tensor contains non-finite values")
        arr = arr.view()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _reject_item(self)

    def tolist(self):
        return self.data.tolist()

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Tensor(self.data.reshape(shape), _trusted=True)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def __eq__(self, other) -> bool:
        return isinstance(other, Tensor) and np.array_equal(self.data, other.data)

    def __hash__(self):
        return hash((self.shape, self.data.tobytes()))

    # Elementwise arithmetic returns new tensors; scalars broadcast.
    def __add__(self, other):
        return tensor(self.data + _raw(other))

    __radd__ = __add__

    def __sub__(self, other):
        return tensor(self.data - _raw(other))

    def __rsub__(self, other):
        return tensor(_raw(other) - self.data)

    def __mul__(self, other):
        return tensor(self.data * _raw(other))

    __rmul__ = __mul__

    def __neg__(self):
        return tensor(-self.data)


def _reject_item(t: Tensor) -> float:
    raise TensorError(f"item() requires a single-element tensor, got shape {t.shape}")


def _raw(x):
    return x.data if isinstance(x, Tensor) else x


def tensor(data) -> Tensor:
    """Build a Tensor from array-like data, validating finiteness."""
    return Tensor(data)


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=np.float32), _trusted=True)


def full(shape: Sequence[int], value: float) -> Tensor:
    out = np.full(tuple(shape), value, dtype=np.float32)
    return Tensor(out)


def check_video(t: Tensor) -> Tensor:
    if t.ndim != 4:
        raise TensorError(f"video tensor must be 4-D (F,H,W,C), got shape {t.shape}")
    return t


# ---------------------------------------------------------------------------
# Bilinear resize
# ---------------------------------------------------------------------------

@lru_cache(maxsize=256)
def _resize_weights(n_in: int, n_out: int, antialias: bool) -> np.ndarray:
    """Row-stochastic (n_out, n_in) matrix for 1-D bilinear resampling.

    Sampling uses the align-corners-false convention: output index i reads
    the source coordinate (i + 0.5) * n_in / n_out - 0.5. When downscaling
    with antialias, the tent kernel support grows with the scale ratio so
    that all covered source samples contribute.
    """
    if n_out < 1:
        raise TensorError("resize target extent must be >= 1")
    scale = n_in / n_out
    support = scale if (antialias and scale > 1.0) else 1.0
    w = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        center = (i + 0.5) * scale - 0.5
        lo = int(np.floor(center - support)) + 1
        hi = int(np.ceil(center + support))
        for j in range(lo, hi):
            weight = max(0.0, 1.0 - abs(j - center) / support)
            if weight > 0.0:
                w[i, min(max(j, 0), n_in - 1)] += weight
    w /= w.sum(axis=1, keepdims=True)
    return w


def bilinear_resize(image: Tensor, target: tuple[int, int], antialias: bool = True) -> Tensor:
    """Resize (..., H, W, C) to (..., H', W', C) with separable tent filtering.

    Same-size axes pass through bit-identically (the weight matrix reduces to
    the identity). Linear in the input by construction.
    """
    th, tw = target
    if th < 1 or tw < 1:
        raise TensorError(f"resize target must have positive extents, got {target}")
    arr = image.data
    if arr.ndim < 3:
        raise TensorError(f"expected (..., H, W, C) input, got shape {image.shape}")
    h, w = arr.shape[-3], arr.shape[-2]
    out = arr.astype(np.float64)
    if th != h:
        out = np.tensordot(_resize_weights(h, th, antialias), out, axes=(1, out.ndim - 3))
        out = np.moveaxis(out, 0, out.ndim - 3)
    if tw != w:
        out = np.tensordot(_resize_weights(w, tw, antialias), out, axes=(1, out.ndim - 2))
        out = np.moveaxis(out, 0, out.ndim - 2)
    if th == h and tw == w:
        return image
    return Tensor(out.astype(np.float32), _trusted=True)


# ---------------------------------------------------------------------------
# Temporal upsampling
# ---------------------------------------------------------------------------

def temporal_upsample(video: Tensor, factor: int, mode: str = "repeat") -> Tensor:
    """Expand the frame axis of a (..., F, H, W, C) video by an integer factor.

    repeat mode copies each frame `factor` times in order; blank mode keeps
    each source frame followed by factor-1 zero frames.
    """
    if factor < 1:
        raise TensorError(f"temporal upsample factor must be >= 1, got {factor}")
    if mode not in ("repeat", "blank"):
        raise TensorError(f"unknown temporal upsample mode {mode!r}")
    if factor == 1:
        return video
    arr = video.data
    axis = arr.ndim - 4
    if axis < 0:
        raise TensorError(f"video tensor must be at least 4-D, got shape {video.shape}")
    if mode == "repeat":
        out = np.repeat(arr, factor, axis=axis)
    else:
        shape = list(arr.shape)
        shape[axis] *= factor
        out = np.zeros(shape, dtype=np.float32)
        idx = [slice(None)] * arr.ndim
        idx[axis] = slice(None, None, factor)
        out[tuple(idx)] = arr
    return Tensor(out, _trusted=True)
