"""Dense array primitives shared by every layer.

Feature maps are row-major ``(N, H, W, C)`` numpy arrays. Single-image
``(H, W, C)`` inputs are accepted wherever a batch is, and come back without
the leading axis.

Patch matrices flatten a ``K x K`` neighbourhood into the column order
``(du, dv, c)`` so that ``patches @ weights.reshape(K*K*C, -1)`` is a
"same"-padded stride-1 cross-correlation.
"""
from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from threadpoolctl import threadpool_limits

from .exceptions import ConfigError, ShapeError

__all__ = [
    "matmul",
    "pad_zero",
    "extract_patches",
    "patch_grid",
    "fold_patches",
    "thread_limit",
]


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of a ``(M, K)`` and a ``(K, N)`` array."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def _as_batch(x):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected (H, W, C) or (N, H, W, C), got shape {x.shape}")


def pad_zero(x: np.ndarray, margin: int) -> np.ndarray:
    """Zero-pad both spatial axes of a feature map by ``margin`` pixels."""
    if margin < 0:
        raise ConfigError(f"margin must be >= 0, got {margin}")
    xb, single = _as_batch(x)
    out = np.pad(xb, ((0, 0), (margin, margin), (margin, margin), (0, 0)))
    return out[0] if single else out


def _check_window(k: int) -> None:
    if k < 1 or k % 2 == 0:
        raise ConfigError(f"window size must be a positive odd integer, got {k}")


def patch_grid(x: np.ndarray, k: int) -> np.ndarray:
    """Return neighbourhoods as a ``(N, H, W, k, k, C)`` array (contiguous copy).

    Entry ``[n, i, j, a, b, c]`` is ``x[n, i + a - k//2, j + b - k//2, c]`` or
    zero when that position lies outside the image.
    """
    _check_window(k)
    xb, _ = _as_batch(x)
    r = k // 2
    padded = np.pad(xb, ((0, 0), (r, r), (r, r), (0, 0)))
    # window axes land last: (N, H, W, C, k, k)
    win = sliding_window_view(padded, (k, k), axis=(1, 2))
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


def extract_patches(x: np.ndarray, k: int) -> np.ndarray:
    """Gather ``k x k`` zero-padded neighbourhoods into a patch matrix.

    Returns an array with one row per output position (``n*H*W + i*W + j``)
    and ``k*k*C`` columns ordered ``(du, dv, c)``.
    """
    grid = patch_grid(x, k)
    n, h, w = grid.shape[:3]
    return grid.reshape(n * h * w, -1)


def fold_patches(cols: np.ndarray, shape: tuple, k: int) -> np.ndarray:
    """Adjoint of :func:`extract_patches`: scatter-add patch values back.

    ``cols`` may be the 2-d patch matrix or the 6-d patch grid; ``shape`` is
    the ``(N, H, W, C)`` shape of the original input.
    """
    _check_window(k)
    n, h, w, c = shape
    grid = np.asarray(cols).reshape(n, h, w, k, k, c)
    r = k // 2
    out = np.zeros((n, h + 2 * r, w + 2 * r, c), dtype=grid.dtype)
    for a in range(k):
        for b in range(k):
            out[:, a : a + h, b : b + w, :] += grid[:, :, :, a, b, :]
    return out[:, r : r + h, r : r + w, :]


@contextlib.contextmanager
def thread_limit(threads: int | None):
    """Cap BLAS/OpenMP threads inside the block. ``None`` leaves them alone."""
    if threads is None:
        yield
        return
    if threads < 1:
        raise ConfigError(f"threads must be >= 1, got {threads}")
    with threadpool_limits(limits=threads):
        yield
