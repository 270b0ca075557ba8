"""Structured array kernels with custom vector-Jacobian products.

Everything here operates on channel-first images (C, H, W) as float64 and
participates in the tape from :mod:`deshadow.autodiff`. The convolutions
are cross-correlations with zero padding, matching the usual deep-learning
convention.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tensor, add, as_tensor, div, mul, record, reshape, sqrt, sub, tmean
from .errors import ContractViolation


def _im2col(
    x: np.ndarray, k: int, stride: int, padding: int
) -> tuple[np.ndarray, int, int]:
    """(C, H, W) -> ((C*k*k, Ho*Wo) patch matrix, Ho, Wo)."""
    c = x.shape[0]
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(
        c * k * k, ho * wo
    ), ho, wo


def _col2im(
    cols: np.ndarray, shape: tuple[int, int, int], k: int, stride: int, padding: int,
    ho: int, wo: int,
) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patches back onto the image."""
    c, h, w = shape
    xp = np.zeros((c, h + 2 * padding, w + 2 * padding))
    cols = cols.reshape(c, k, k, ho, wo)
    for dy in range(k):
        for dx in range(k):
            xp[:, dy : dy + ho * stride : stride, dx : dx + wo * stride : stride] += (
                cols[:, dy, dx]
            )
    if padding:
        return xp[:, padding : padding + h, padding : padding + w]
    return xp


def conv2d(x, weight, bias, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate (C_in, H, W) with (C_out, C_in, k, k) + bias.

    Output extent per axis is floor((n + 2*padding - k) / stride) + 1.
    The kernel size must be odd.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    cout, cin, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ContractViolation(f"conv2d kernel must be square and odd, got {k}x{k2}")
    if x.ndim != 3 or x.shape[0] != cin:
        raise ContractViolation(
            f"conv2d input channels {x.shape} incompatible with weight {weight.shape}"
        )
    if bias.shape != (cout,):
        raise ContractViolation(f"conv2d bias shape {bias.shape} != ({cout},)")

    cols, ho, wo = _im2col(x.data, k, stride, padding)
    wmat = weight.data.reshape(cout, cin * k * k)
    out_data = (wmat @ cols).reshape(cout, ho, wo) + bias.data[:, None, None]
    out = Tensor(out_data)

    x_shape = x.shape

    def vjp_x(g):
        dcols = wmat.T @ g.reshape(cout, ho * wo)
        return _col2im(dcols, x_shape, k, stride, padding, ho, wo)

    def vjp_w(g):
        return (g.reshape(cout, ho * wo) @ cols.T).reshape(cout, cin, k, k)

    def vjp_b(g):
        return g.sum(axis=(1, 2))

    return record(out, (x, weight, bias), (vjp_x, vjp_w, vjp_b))


def depthwise_conv2d(x, weight, bias) -> Tensor:
    """Per-channel 3x3 cross-correlation, stride 1, zero padding 1.

    ``weight`` is (C, 3, 3); every channel is filtered independently.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    c, h, w = x.shape
    if weight.shape != (c, 3, 3):
        raise ContractViolation(
            f"depthwise weight shape {weight.shape} != ({c}, 3, 3)"
        )
    if bias.shape != (c,):
        raise ContractViolation(f"depthwise bias shape {bias.shape} != ({c},)")

    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
    out_data = np.zeros_like(x.data)
    for dy in range(3):
        for dx in range(3):
            out_data += weight.data[:, dy, dx, None, None] * xp[:, dy : dy + h, dx : dx + w]
    out_data += bias.data[:, None, None]
    out = Tensor(out_data)

    def vjp_x(g):
        gp = np.pad(g, ((0, 0), (1, 1), (1, 1)))
        dx_ = np.zeros((c, h, w))
        for dy in range(3):
            for dx in range(3):
                # Correlation adjoint: flip the kernel offsets.
                dx_ += weight.data[:, dy, dx, None, None] * gp[
                    :, 2 - dy : 2 - dy + h, 2 - dx : 2 - dx + w
                ]
        return dx_

    def vjp_w(g):
        dw = np.zeros((c, 3, 3))
        for dy in range(3):
            for dx in range(3):
                dw[:, dy, dx] = (g * xp[:, dy : dy + h, dx : dx + w]).sum(axis=(1, 2))
        return dw

    def vjp_b(g):
        return g.sum(axis=(1, 2))

    return record(out, (x, weight, bias), (vjp_x, vjp_w, vjp_b))


def layer_norm(x, gain, shift, eps: float = 1e-5) -> Tensor:
    """Normalize over the channel axis at each spatial position, then affine.

    Built from primitives, so its gradient comes from the tape.
    """
    if eps <= 0:
        raise ContractViolation("layer_norm eps must be positive")
    x, gain, shift = as_tensor(x), as_tensor(gain), as_tensor(shift)
    c = x.shape[0]
    mu = tmean(x, axis=0, keepdims=True)
    centered = sub(x, mu)
    var = tmean(mul(centered, centered), axis=0, keepdims=True)
    inv = div(centered, sqrt(add(var, eps)))
    g3 = reshape(gain, (c, 1, 1))
    s3 = reshape(shift, (c, 1, 1))
    return add(mul(inv, g3), s3)


def bilinear_sample_2d(src, grid) -> Tensor:
    """Sample (C, H, W) at absolute (x, y) positions given by a (2, Ho, Wo) grid.

    grid[0] holds x (column) and grid[1] holds y (row) coordinates.
    Coordinates outside [0, W-1] x [0, H-1] are clamped to the border
    before interpolation, so the map is total. Differentiable in both the
    source and the grid almost everywhere (kinks at integer coordinates).
    """
    src, grid = as_tensor(src), as_tensor(grid)
    if grid.ndim != 3 or grid.shape[0] != 2:
        raise ContractViolation(f"grid must be (2, Ho, Wo), got {grid.shape}")
    if src.ndim != 3 or src.size == 0:
        raise ContractViolation("source must be a non-empty (C, H, W) tensor")
    c, h, w = src.shape

    gx, gy = grid.data[0], grid.data[1]
    x = np.clip(gx, 0.0, w - 1.0)
    y = np.clip(gy, 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0

    v00 = src.data[:, y0, x0]
    v01 = src.data[:, y0, x1]
    v10 = src.data[:, y1, x0]
    v11 = src.data[:, y1, x1]
    w00 = (1.0 - fy) * (1.0 - fx)
    w01 = (1.0 - fy) * fx
    w10 = fy * (1.0 - fx)
    w11 = fy * fx
    out = Tensor(w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11)

    # Zero grid-gradient where the clamp saturated.
    in_x = (gx >= 0.0) & (gx <= w - 1.0)
    in_y = (gy >= 0.0) & (gy <= h - 1.0)

    def vjp_src(g):
        dsrc = np.zeros((c, h, w))
        np.add.at(dsrc, (slice(None), y0, x0), g * w00)
        np.add.at(dsrc, (slice(None), y0, x1), g * w01)
        np.add.at(dsrc, (slice(None), y1, x0), g * w10)
        np.add.at(dsrc, (slice(None), y1, x1), g * w11)
        return dsrc

    def vjp_grid(g):
        ddx = ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10)) * g
        ddy = ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01)) * g
        return np.stack([ddx.sum(axis=0) * in_x, ddy.sum(axis=0) * in_y])

    return record(out, (src, grid), (vjp_src, vjp_grid))


def bilinear_sample_2d_raw(src: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Plain-numpy forward of :func:`bilinear_sample_2d` (no tape)."""
    return bilinear_sample_2d(Tensor(src), Tensor(grid)).data


def identity_grid(h: int, w: int) -> np.ndarray:
    """(2, H, W) grid with grid[0]=x=j and grid[1]=y=i."""
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return np.stack([xs, ys])


def avg_pool2(x) -> Tensor:
    """2x2 average pooling with stride 2; extents must be even."""
    x = as_tensor(x)
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ContractViolation(f"avg_pool2 needs even extents, got {h}x{w}")
    out = Tensor(x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4)))

    def vjp(g):
        return np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25

    return record(out, (x,), (vjp,))


def upsample_nearest2(x) -> Tensor:
    """Nearest-neighbor 2x upsampling."""
    x = as_tensor(x)
    c, h, w = x.shape
    out = Tensor(np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2))

    def vjp(g):
        return g.reshape(c, h, 2, w, 2).sum(axis=(2, 4))

    return record(out, (x,), (vjp,))
