"""Complex-valued layers built from paired real/imaginary torch tensors.

A complex weight ``W = W_r + i W_i`` acting on ``x = x_r + i x_i`` gives

    y_r = conv(x_r, W_r) - conv(x_i, W_i) + b_r
    y_i = conv(x_r, W_i) + conv(x_i, W_r) + b_i

Tensors are laid out ``[batch, channels, freq, time]``.  Backward passes come
from autograd; :mod:`datcftnet.gradaudit` checks them against finite differences.
"""
from __future__ import annotations

import math
from typing import NamedTuple, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

LEAKY_SLOPE = 0.1


class ComplexTensor(NamedTuple):
    real: Tensor
    imag: Tensor

    @property
    def shape(self):
        return self.real.shape

    def map(self, fn) -> "ComplexTensor":
        return ComplexTensor(fn(self.real), fn(self.imag))

    def cat(self, other: "ComplexTensor", dim: int = 1) -> "ComplexTensor":
        return ComplexTensor(torch.cat([self.real, other.real], dim), torch.cat([self.imag, other.imag], dim))

    def __mul__(self, other: "ComplexTensor") -> "ComplexTensor":
        return ComplexTensor(self.real * other.real - self.imag * other.imag,
                             self.real * other.imag + self.imag * other.real)


def _pair(v) -> Tuple[int, int]:
    return (v, v) if isinstance(v, int) else tuple(v)


# -- functional forms -----------------------------------------------------------

def complex_conv2d(x: ComplexTensor, w_r: Tensor, w_i: Tensor, b_r: Optional[Tensor] = None,
                   b_i: Optional[Tensor] = None, stride=1, padding=0, groups: int = 1) -> ComplexTensor:
    if x.real.shape[1] != w_r.shape[1] * groups:
        raise ValueError(f"input has {x.real.shape[1]} channels, kernel expects {w_r.shape[1] * groups}")
    conv = lambda t, w: F.conv2d(t, w, None, stride, padding, 1, groups)  # noqa: E731
    y_r = conv(x.real, w_r) - conv(x.imag, w_i)
    y_i = conv(x.real, w_i) + conv(x.imag, w_r)
    if b_r is not None:
        y_r = y_r + b_r.view(1, -1, 1, 1)
        y_i = y_i + b_i.view(1, -1, 1, 1)
    return ComplexTensor(y_r, y_i)


def complex_conv_transpose2d(x: ComplexTensor, w_r: Tensor, w_i: Tensor, b_r: Optional[Tensor] = None,
                             b_i: Optional[Tensor] = None, stride=1, padding=0, output_padding=0,
                             groups: int = 1) -> ComplexTensor:
    """Weights use the ``[in_ch, out_ch // groups, k_f, k_t]`` layout of ``conv_transpose2d``."""
    if x.real.shape[1] != w_r.shape[0]:
        raise ValueError(f"input has {x.real.shape[1]} channels, kernel expects {w_r.shape[0]}")
    conv = lambda t, w: F.conv_transpose2d(t, w, None, stride, padding, output_padding, groups)  # noqa: E731
    y_r = conv(x.real, w_r) - conv(x.imag, w_i)
    y_i = conv(x.real, w_i) + conv(x.imag, w_r)
    if b_r is not None:
        y_r = y_r + b_r.view(1, -1, 1, 1)
        y_i = y_i + b_i.view(1, -1, 1, 1)
    return ComplexTensor(y_r, y_i)


def complex_dsc_conv2d(x: ComplexTensor, dw_r, dw_i, db_r, db_i, pw_r, pw_i, pb_r, pb_i,
                       stride=1, padding=0, transposed: bool = False, output_padding=0) -> ComplexTensor:
    """Depthwise complex conv (one filter per channel) followed by a 1x1 complex conv."""
    c_in = x.real.shape[1]
    if dw_r.shape[0] != c_in or pw_r.shape[1] != c_in:
        raise ValueError(f"input has {c_in} channels, DSC kernels expect {dw_r.shape[0]}")
    if transposed:
        h = complex_conv_transpose2d(x, dw_r, dw_i, db_r, db_i, stride, padding, output_padding, groups=c_in)
    else:
        h = complex_conv2d(x, dw_r, dw_i, db_r, db_i, stride, padding, groups=c_in)
    return complex_conv2d(h, pw_r, pw_i, pb_r, pb_i)


def complex_leaky_relu(x: ComplexTensor, slope: float = LEAKY_SLOPE) -> ComplexTensor:
    return x.map(lambda t: F.leaky_relu(t, slope))


def complex_layer_norm(x: ComplexTensor, g_r: Tensor, b_r: Tensor, g_i: Tensor, b_i: Tensor,
                       eps: float = 1e-5) -> ComplexTensor:
    """Normalise each part over (channels, freq) per (batch, frame); per-channel affine."""
    def norm(t, g, b):
        mu = t.mean(dim=(1, 2), keepdim=True)
        var = t.var(dim=(1, 2), keepdim=True, unbiased=False)
        return (t - mu) / torch.sqrt(var + eps) * g.view(1, -1, 1, 1) + b.view(1, -1, 1, 1)
    return ComplexTensor(norm(x.real, g_r, b_r), norm(x.imag, g_i, b_i))


# -- parameter accounting --------------------------------------------------------

def param_count_conv(c_in: int, c_out: int, kernel) -> int:
    kf, kt = _pair(kernel)
    return 2 * c_in * c_out * kf * kt + 2 * c_out


def param_count_dsc(c_in: int, c_out: int, kernel) -> int:
    kf, kt = _pair(kernel)
    return 2 * c_in * kf * kt + 2 * c_in * c_out + 2 * c_out + 2 * c_in


# -- modules --------------------------------------------------------------------

def _uniform_(t: Tensor, bound: float, gen: torch.Generator) -> None:
    with torch.no_grad():
        t.copy_((torch.rand(t.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)


class ComplexConv2d(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, kernel=1, stride=1, padding=0):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.padding = _pair(kernel), _pair(stride), _pair(padding)
        shape = (out_ch, in_ch) + self.kernel
        self.weight_real = nn.Parameter(torch.zeros(shape))
        self.weight_imag = nn.Parameter(torch.zeros(shape))
        self.bias_real = nn.Parameter(torch.zeros(out_ch))
        self.bias_imag = nn.Parameter(torch.zeros(out_ch))

    def reset_parameters(self, gen: torch.Generator) -> None:
        bound = 1.0 / math.sqrt(2 * self.in_ch * self.kernel[0] * self.kernel[1])
        for p in (self.weight_real, self.weight_imag, self.bias_real, self.bias_imag):
            _uniform_(p, bound, gen)

    def expected_params(self) -> int:
        return param_count_conv(self.in_ch, self.out_ch, self.kernel)

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        return complex_conv2d(x, self.weight_real, self.weight_imag, self.bias_real, self.bias_imag,
                              self.stride, self.padding)

    def extra_repr(self):
        return f"{self.in_ch}, {self.out_ch}, kernel={self.kernel}, stride={self.stride}, padding={self.padding}"


class ComplexConvTranspose2d(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, kernel=1, stride=1, padding=0, output_padding=0):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.padding = _pair(kernel), _pair(stride), _pair(padding)
        self.output_padding = _pair(output_padding)
        shape = (in_ch, out_ch) + self.kernel
        self.weight_real = nn.Parameter(torch.zeros(shape))
        self.weight_imag = nn.Parameter(torch.zeros(shape))
        self.bias_real = nn.Parameter(torch.zeros(out_ch))
        self.bias_imag = nn.Parameter(torch.zeros(out_ch))

    reset_parameters = ComplexConv2d.reset_parameters
    expected_params = ComplexConv2d.expected_params

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        return complex_conv_transpose2d(x, self.weight_real, self.weight_imag, self.bias_real,
                                        self.bias_imag, self.stride, self.padding, self.output_padding)

    def extra_repr(self):
        return f"{self.in_ch}, {self.out_ch}, kernel={self.kernel}, stride={self.stride}, padding={self.padding}"


class ComplexDSConv2d(nn.Module):
    """Depthwise-separable complex convolution; ``transposed=True`` upsamples in the depthwise stage."""

    def __init__(self, in_ch: int, out_ch: int, kernel=1, stride=1, padding=0,
                 transposed: bool = False, output_padding=0):
        super().__init__()
        self.in_ch, self.out_ch, self.transposed = in_ch, out_ch, transposed
        self.kernel, self.stride, self.padding = _pair(kernel), _pair(stride), _pair(padding)
        self.output_padding = _pair(output_padding)
        self.depthwise_real = nn.Parameter(torch.zeros((in_ch, 1) + self.kernel))
        self.depthwise_imag = nn.Parameter(torch.zeros((in_ch, 1) + self.kernel))
        self.depthwise_bias_real = nn.Parameter(torch.zeros(in_ch))
        self.depthwise_bias_imag = nn.Parameter(torch.zeros(in_ch))
        self.pointwise_real = nn.Parameter(torch.zeros(out_ch, in_ch, 1, 1))
        self.pointwise_imag = nn.Parameter(torch.zeros(out_ch, in_ch, 1, 1))
        self.pointwise_bias_real = nn.Parameter(torch.zeros(out_ch))
        self.pointwise_bias_imag = nn.Parameter(torch.zeros(out_ch))

    def reset_parameters(self, gen: torch.Generator) -> None:
        dw = 1.0 / math.sqrt(2 * self.kernel[0] * self.kernel[1])
        pw = 1.0 / math.sqrt(2 * self.in_ch)
        for p in (self.depthwise_real, self.depthwise_imag, self.depthwise_bias_real, self.depthwise_bias_imag):
            _uniform_(p, dw, gen)
        for p in (self.pointwise_real, self.pointwise_imag, self.pointwise_bias_real, self.pointwise_bias_imag):
            _uniform_(p, pw, gen)

    def expected_params(self) -> int:
        return param_count_dsc(self.in_ch, self.out_ch, self.kernel)

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        return complex_dsc_conv2d(x, self.depthwise_real, self.depthwise_imag, self.depthwise_bias_real,
                                  self.depthwise_bias_imag, self.pointwise_real, self.pointwise_imag,
                                  self.pointwise_bias_real, self.pointwise_bias_imag, self.stride,
                                  self.padding, self.transposed, self.output_padding)

    def extra_repr(self):
        kind = "transposed, " if self.transposed else ""
        return f"{self.in_ch}, {self.out_ch}, {kind}kernel={self.kernel}, stride={self.stride}"


class ComplexLeakyReLU(nn.Module):
    def __init__(self, slope: float = LEAKY_SLOPE):
        super().__init__()
        self.slope = slope

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        return complex_leaky_relu(x, self.slope)


class ComplexLayerNorm(nn.Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.channels, self.eps = channels, eps
        self.gamma_real = nn.Parameter(torch.ones(channels))
        self.beta_real = nn.Parameter(torch.zeros(channels))
        self.gamma_imag = nn.Parameter(torch.ones(channels))
        self.beta_imag = nn.Parameter(torch.zeros(channels))

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        return complex_layer_norm(x, self.gamma_real, self.beta_real, self.gamma_imag, self.beta_imag, self.eps)
