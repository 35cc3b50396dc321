"""Frequency transformation block: T-F attention, a learned F x F map along
frequency, and a 1x1 fusion of the block input with the transformed features."""
from __future__ import annotations

import math

import torch
from torch import nn

from .complex_nn import ComplexConv2d, ComplexTensor, _uniform_, complex_leaky_relu

FTB_ORDERS = ("attention_first", "matrix_first")


def apply_freq_fc(x: ComplexTensor, freq_fc: torch.Tensor) -> ComplexTensor:
    """y[..., f, t] = sum_g freq_fc[f, g] x[..., g, t], same real matrix on both parts."""
    if x.real.shape[2] != freq_fc.shape[1]:
        raise ValueError(f"freq dim {x.real.shape[2]} does not match freq_fc {tuple(freq_fc.shape)}")
    return x.map(lambda t: torch.einsum("fg,bcgt->bcft", freq_fc, t))


class FTB(nn.Module):
    def __init__(self, channels: int, freq: int, attn_channels: int | None = None,
                 order: str = "attention_first"):
        super().__init__()
        if order not in FTB_ORDERS:
            raise ValueError(f"ftb order must be one of {FTB_ORDERS}")
        self.channels, self.freq, self.order = channels, freq, order
        self.attn_channels = attn_channels or max(2, channels // 4)
        self.attn_conv_in = ComplexConv2d(channels, self.attn_channels)
        self.attn_conv_out = ComplexConv2d(self.attn_channels, channels)
        self.freq_fc = nn.Parameter(torch.zeros(freq, freq))
        self.concat_conv = ComplexConv2d(2 * channels, channels)

    def reset_parameters(self, gen: torch.Generator) -> None:
        for conv in (self.attn_conv_in, self.attn_conv_out, self.concat_conv):
            conv.reset_parameters(gen)
        _uniform_(self.freq_fc, 1.0 / math.sqrt(self.freq), gen)

    def attend(self, x: ComplexTensor) -> ComplexTensor:
        a = self.attn_conv_out(complex_leaky_relu(self.attn_conv_in(x))).map(torch.sigmoid)
        return ComplexTensor(x.real * a.real, x.imag * a.imag)

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        if self.order == "attention_first":
            y = apply_freq_fc(self.attend(x), self.freq_fc)
        else:
            y = self.attend(apply_freq_fc(x, self.freq_fc))
        return self.concat_conv(x.cat(y))


def ftb_forward(x: ComplexTensor, block: FTB) -> ComplexTensor:
    return block(x)
