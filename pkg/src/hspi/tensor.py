"""Dense numeric kernels: interpolation, masking and the layers of the classifier.

Arrays are plain :class:`numpy.ndarray` objects in channels-last layout
(``N x H x W x C`` for image batches, ``H x W`` or ``N x H x W`` for grids and
masks).  Every differentiable kernel comes as a ``*_forward`` function that
returns ``(output, cache)`` and a ``*_backward`` function that consumes the
upstream gradient together with that cache.  The functions keep no state.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFiniteError, ShapeError

__all__ = [
    "nearest_indices",
    "bilinear_matrix",
    "upsample_nearest",
    "upsample_bilinear",
    "upsample_bilinear_backward",
    "apply_mask",
    "conv2d_forward",
    "conv2d_backward",
    "relu_forward",
    "relu_backward",
    "maxpool2_forward",
    "maxpool2_backward",
    "global_avg_pool_forward",
    "global_avg_pool_backward",
    "dense_forward",
    "dense_backward",
]


def _check_finite(x: np.ndarray, what: str) -> None:
    # a single reduction is much cheaper than np.isfinite(x).all() and NaN/Inf propagate through it;
    # an overflowing sum only triggers the exact check
    with np.errstate(over="ignore", invalid="ignore"):
        total = x.sum()
    if not np.isfinite(total) and not np.isfinite(x).all():
        raise NonFiniteError(f"{what} contains NaN or Inf")


def _check_upsample(shape: tuple[int, ...], target_h: int, target_w: int) -> tuple[int, int]:
    if len(shape) < 2:
        raise ShapeError(f"expected a grid with at least 2 dims, got shape {shape}")
    rows, cols = shape[-2], shape[-1]
    if rows < 1 or cols < 1:
        raise ShapeError(f"grid must be at least 1x1, got {rows}x{cols}")
    if target_h < rows or target_w < cols:
        raise ShapeError(
            f"cannot upsample a {rows}x{cols} grid to a smaller {target_h}x{target_w} target"
        )
    return rows, cols


@lru_cache(maxsize=256)
def nearest_indices(source: int, target: int) -> np.ndarray:
    """Source index for every target position under nearest-neighbour sampling.

    Target pixel ``t`` takes the source cell whose footprint contains the pixel
    centre, i.e. ``floor((t + 0.5) * source / target)``.  When ``target`` is a
    multiple of ``source`` this is plain block replication.
    """
    idx = np.floor((np.arange(target) + 0.5) * source / target).astype(np.intp)
    np.clip(idx, 0, source - 1, out=idx)
    idx.flags.writeable = False
    return idx


@lru_cache(maxsize=256)
def bilinear_matrix(source: int, target: int) -> np.ndarray:
    """``target x source`` matrix of 1-D linear interpolation weights.

    Corner-aligned: source index 0 maps to target index 0 and source index
    ``source - 1`` maps to target index ``target - 1``.
    """
    mat = np.zeros((target, source), dtype=np.float64)
    if source == 1:
        mat[:, 0] = 1.0
    else:
        pos = np.arange(target) * ((source - 1) / (target - 1))
        lo = np.minimum(np.floor(pos).astype(np.intp), source - 2)
        frac = pos - lo
        rows = np.arange(target)
        mat[rows, lo] = 1.0 - frac
        mat[rows, lo + 1] = frac
    mat.flags.writeable = False
    return mat


def upsample_nearest(grid: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Nearest-neighbour upsampling of a grid (or a stack of grids) to ``target_h x target_w``."""
    grid = np.asarray(grid)
    rows, cols = _check_upsample(grid.shape, target_h, target_w)
    ri = nearest_indices(rows, target_h)
    ci = nearest_indices(cols, target_w)
    return grid[..., ri[:, None], ci[None, :]]


def upsample_bilinear(grid: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Bilinear (corner-aligned) upsampling of a grid or stack of grids."""
    grid = np.asarray(grid, dtype=np.float64)
    rows, cols = _check_upsample(grid.shape, target_h, target_w)
    ah = bilinear_matrix(rows, target_h)
    aw = bilinear_matrix(cols, target_w)
    return ah @ grid @ aw.T


def upsample_bilinear_backward(
    grid_shape: tuple[int, ...], target_h: int, target_w: int, upstream: np.ndarray
) -> np.ndarray:
    """Adjoint of :func:`upsample_bilinear`: gradient w.r.t. the grid.

    ``upstream`` must have shape ``grid_shape[:-2] + (target_h, target_w)``.
    """
    rows, cols = _check_upsample(tuple(grid_shape), target_h, target_w)
    upstream = np.asarray(upstream, dtype=np.float64)
    expected = tuple(grid_shape[:-2]) + (target_h, target_w)
    if upstream.shape != expected:
        raise ShapeError(f"upstream shape {upstream.shape} does not match target {expected}")
    ah = bilinear_matrix(rows, target_h)
    aw = bilinear_matrix(cols, target_w)
    return ah.T @ upstream @ aw


def apply_mask(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Multiply every channel of ``image`` (``... x H x W x C``) by ``mask`` (``... x H x W``)."""
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.ndim < 3 or image.shape[:-1] != mask.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match image shape {image.shape}")
    return image * mask[..., None]


# --------------------------------------------------------------------------
# classifier layers
# --------------------------------------------------------------------------


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, pad: int = 1):
    """Stride-1 2-D convolution (cross-correlation) with zero padding.

    ``x``: ``N x H x W x C``; ``w``: ``kh x kw x C x O``; ``b``: ``O``.
    Output is ``N x (H + 2 pad - kh + 1) x (W + 2 pad - kw + 1) x O``.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2] or b.shape != (w.shape[3],):
        raise ShapeError(f"conv2d: incompatible shapes x={x.shape} w={w.shape} b={b.shape}")
    _check_finite(x, "conv2d input")
    n, h, wd, c = x.shape
    kh, kw, _, o = w.shape
    oh, ow = h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}")
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    # view is N x oh x ow x C x kh x kw; flatten in that order to match wmat
    cols = sliding_window_view(xp, (kh, kw), axis=(1, 2)).reshape(n * oh * ow, c * kh * kw)
    wmat = w.transpose(2, 0, 1, 3).reshape(c * kh * kw, o)
    y = (cols @ wmat).reshape(n, oh, ow, o)
    y += b
    return y, (x, w, pad)


def conv2d_backward(dy: np.ndarray, cache, param_grads: bool = True):
    """Returns ``(dx, dw, db)``; ``dw`` and ``db`` are ``None`` unless ``param_grads``."""
    x, w, pad = cache
    n, h, wd, c = x.shape
    kh, kw, _, o = w.shape
    oh, ow = dy.shape[1], dy.shape[2]
    if dy.shape != (n, oh, ow, o) or oh != h + 2 * pad - kh + 1 or ow != wd + 2 * pad - kw + 1:
        raise ShapeError(f"conv2d backward: upstream shape {dy.shape} inconsistent with cache")
    dxp = np.zeros((n, h + 2 * pad, wd + 2 * pad, c), dtype=np.result_type(dy, w))
    for ky in range(kh):
        for kx in range(kw):
            dxp[:, ky : ky + oh, kx : kx + ow, :] += dy @ w[ky, kx].T
    dx = dxp[:, pad : pad + h, pad : pad + wd, :] if pad else dxp
    if not param_grads:
        return dx, None, None
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    cols = sliding_window_view(xp, (kh, kw), axis=(1, 2)).reshape(n * oh * ow, c * kh * kw)
    dwmat = cols.T @ dy.reshape(-1, o)
    dw = dwmat.reshape(c, kh, kw, o).transpose(1, 2, 0, 3)
    db = dy.sum(axis=(0, 1, 2))
    return dx, dw, db


def relu_forward(x: np.ndarray):
    return np.maximum(x, 0), x


def relu_backward(dy: np.ndarray, cache) -> np.ndarray:
    x = cache
    if dy.shape != x.shape:
        raise ShapeError(f"relu backward: upstream {dy.shape} vs input {x.shape}")
    return dy * (x > 0)


def maxpool2_forward(x: np.ndarray):
    """2x2 max pooling with stride 2; spatial dims must be even."""
    if x.ndim != 4 or x.shape[1] % 2 or x.shape[2] % 2:
        raise ShapeError(f"maxpool2 needs N x H x W x C with even H, W; got {x.shape}")
    quads = (x[:, 0::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 0::2], x[:, 1::2, 1::2])
    y = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
    return y, (x.shape, quads, y)


def maxpool2_backward(dy: np.ndarray, cache) -> np.ndarray:
    shape, quads, y = cache
    if dy.shape != y.shape:
        raise ShapeError(f"maxpool2 backward: upstream {dy.shape} vs output {y.shape}")
    dx = np.zeros(shape, dtype=dy.dtype)
    # route the gradient to the first maximal element of each window only
    taken = np.zeros(y.shape, dtype=bool)
    for (r, c), q in zip(((0, 0), (0, 1), (1, 0), (1, 1)), quads):
        hit = (q == y) & ~taken
        taken |= hit
        dx[:, r::2, c::2] = dy * hit
    return dx


def global_avg_pool_forward(x: np.ndarray):
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool needs N x H x W x C, got {x.shape}")
    return x.mean(axis=(1, 2)), x.shape


def global_avg_pool_backward(dy: np.ndarray, cache) -> np.ndarray:
    n, h, w, c = cache
    if dy.shape != (n, c):
        raise ShapeError(f"global_avg_pool backward: upstream {dy.shape}, expected {(n, c)}")
    return np.broadcast_to(dy[:, None, None, :] / (h * w), cache).copy()


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """``x``: ``N x in``, ``w``: ``in x out``, ``b``: ``out``."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"dense: incompatible shapes x={x.shape} w={w.shape} b={b.shape}")
    _check_finite(x, "dense input")
    return x @ w + b, (x, w)


def dense_backward(dy: np.ndarray, cache, param_grads: bool = True):
    x, w = cache
    if dy.shape != (x.shape[0], w.shape[1]):
        raise ShapeError(f"dense backward: upstream {dy.shape} inconsistent with cache")
    dx = dy @ w.T
    if not param_grads:
        return dx, None, None
    return dx, x.T @ dy, dy.sum(axis=0)
