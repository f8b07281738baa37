"""Convolution geometry and ring-level im2col shared by the protocol and the oracle."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from aby2cnn.errors import ShapeError


@dataclass(frozen=True)
class ConvParams:
    n_ker: int
    k_row: int
    k_col: int
    i_ch: int
    strides: tuple = (1, 1)
    padding: tuple = (0, 0, 0, 0)  # top, bottom, left, right

    def __post_init__(self):
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        object.__setattr__(self, "padding", tuple(int(p) for p in self.padding))
        if len(self.strides) != 2 or min(self.strides) < 1:
            raise ShapeError(f"strides must be two values >= 1, got {self.strides}")
        if len(self.padding) != 4 or min(self.padding) < 0:
            raise ShapeError(f"padding must be four values >= 0, got {self.padding}")
        if min(self.n_ker, self.k_row, self.k_col, self.i_ch) < 1:
            raise ShapeError("kernel geometry must be positive")

    @property
    def kernel_shape(self) -> tuple:
        return (self.n_ker, self.i_ch, self.k_row, self.k_col)

    def with_(self, **kw) -> "ConvParams":
        d = dict(n_ker=self.n_ker, k_row=self.k_row, k_col=self.k_col, i_ch=self.i_ch,
                 strides=self.strides, padding=self.padding)
        d.update(kw)
        return ConvParams(**d)


def conv_output_dims(in_dims, p: ConvParams) -> tuple[int, int, int]:
    """``(o_ch, o_row, o_col)`` for an ``(i_ch, i_row, i_col)`` input."""
    i_ch, i_row, i_col = in_dims
    if i_ch != p.i_ch:
        raise ShapeError(f"input has {i_ch} channels, kernels expect {p.i_ch}")
    top, bottom, left, right = p.padding
    rows = i_row + top + bottom
    cols = i_col + left + right
    if p.k_row > rows or p.k_col > cols:
        raise ShapeError(f"kernel {p.k_row}x{p.k_col} larger than padded input {rows}x{cols}")
    return p.n_ker, (rows - p.k_row) // p.strides[0] + 1, (cols - p.k_col) // p.strides[1] + 1


def mult_count_conv(in_dims, p: ConvParams) -> int:
    o_ch, o_row, o_col = conv_output_dims(in_dims, p)
    return o_ch * o_row * o_col * p.i_ch * p.k_row * p.k_col


def im2col(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Patch matrix of shape ``(i_ch*k_row*k_col, o_row*o_col)``; zero padding."""
    _, o_row, o_col = conv_output_dims(x.shape, p)
    top, bottom, left, right = p.padding
    xp = np.pad(x, ((0, 0), (top, bottom), (left, right)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (p.k_row, p.k_col), axis=(1, 2))
    win = win[:, ::p.strides[0], ::p.strides[1]][:, :o_row, :o_col]
    # (C, o_row, o_col, kr, kc) -> (C, kr, kc, o_row, o_col)
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(
        p.i_ch * p.k_row * p.k_col, o_row * o_col)


def conv2d_ring(kernels: np.ndarray, x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Wrapping (mod 2^64) convolution without rescaling: ``(n_ker, o_row, o_col)``."""
    if kernels.shape != p.kernel_shape:
        raise ShapeError(f"kernel tensor {kernels.shape} != {p.kernel_shape}")
    _, o_row, o_col = conv_output_dims(x.shape, p)
    out = kernels.reshape(p.n_ker, -1) @ im2col(x, p)
    return out.reshape(p.n_ker, o_row, o_col)
