"""3D conv / SiLU / upsample primitives with hand-written backward passes.

Tensors are ``(B, C, X, Y, Z)``. Convolutions use 3x3x3 kernels with zero
padding 1 (cross-correlation, as in most deep learning frameworks).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

KSIZE = 3


def conv_out_length(length: int, stride: int) -> int:
    return (length - 1) // stride + 1


def im2col(x: np.ndarray, stride: int = 1) -> np.ndarray:
    """``(B, C, L, L, L)`` -> ``(B, C*27, Lo^3)`` patch matrix."""
    B, C = x.shape[:2]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (KSIZE, KSIZE, KSIZE), axis=(2, 3, 4))
    win = win[:, :, ::stride, ::stride, ::stride]
    Lx, Ly, Lz = win.shape[2:5]
    # (B, C, kx, ky, kz, X, Y, Z)
    cols = win.transpose(0, 1, 5, 6, 7, 2, 3, 4).reshape(B, C * KSIZE**3, Lx * Ly * Lz)
    return cols


def col2im(cols: np.ndarray, in_shape: tuple, stride: int = 1) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patches back to the input."""
    B, C, X, Y, Z = in_shape
    Lx, Ly, Lz = (conv_out_length(n, stride) for n in (X, Y, Z))
    cols = cols.reshape(B, C, KSIZE, KSIZE, KSIZE, Lx, Ly, Lz)
    xp = np.zeros((B, C, X + 2, Y + 2, Z + 2), dtype=cols.dtype)
    for i in range(KSIZE):
        for j in range(KSIZE):
            for k in range(KSIZE):
                xp[
                    :,
                    :,
                    i : i + stride * (Lx - 1) + 1 : stride,
                    j : j + stride * (Ly - 1) + 1 : stride,
                    k : k + stride * (Lz - 1) + 1 : stride,
                ] += cols[:, :, i, j, k]
    return xp[:, :, 1:-1, 1:-1, 1:-1]


def conv3d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1):
    """Padded 3x3x3 convolution. Returns ``(out, cache)``."""
    B, C, X, Y, Z = x.shape
    O = w.shape[0]
    if w.shape[1] != C:
        raise ValueError(f"conv expects {w.shape[1]} input channels, got {C}")
    cols = im2col(x, stride)
    out = np.matmul(w.reshape(O, -1), cols) + b[None, :, None]
    dims = tuple(conv_out_length(n, stride) for n in (X, Y, Z))
    return out.reshape((B, O) + dims), (cols, x.shape, stride)


def conv3d_backward(dout: np.ndarray, w: np.ndarray, cache):
    """Gradients ``(dx, dw, db)`` of a conv given the upstream gradient."""
    cols, in_shape, stride = cache
    B, O = dout.shape[:2]
    d2 = dout.reshape(B, O, -1)
    dw = np.einsum("bon,bkn->ok", d2, cols, optimize=True).reshape(w.shape)
    db = d2.sum(axis=(0, 2))
    dcols = np.matmul(w.reshape(O, -1).T, d2)
    dx = col2im(dcols, in_shape, stride)
    return dx, dw, db


def silu(z: np.ndarray) -> np.ndarray:
    return z * expit(z)


def silu_backward(dout: np.ndarray, z: np.ndarray) -> np.ndarray:
    s = expit(z)
    return dout * (s * (1.0 + z * (1.0 - s)))


def upsample2(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbour x2 upsampling over the three spatial axes."""
    return x.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)


def upsample2_backward(dout: np.ndarray) -> np.ndarray:
    B, C, X, Y, Z = dout.shape
    return dout.reshape(B, C, X // 2, 2, Y // 2, 2, Z // 2, 2).sum(axis=(3, 5, 7))
