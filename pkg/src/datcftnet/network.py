"""Encoder / FTB / DAT-RNN bottleneck / skip / decoder assembly.

Variants:

* ``base`` - an FTB after every encoder block;
* ``f``    - FTBs only after the first and the last encoder block;
* ``l``    - ``f`` wiring with every spatial convolution (encoder and decoder)
  replaced by its depthwise-separable counterpart.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .complex_nn import (ComplexConv2d, ComplexConvTranspose2d, ComplexDSConv2d, ComplexLayerNorm,
                         ComplexTensor, _uniform_, complex_leaky_relu, param_count_conv, param_count_dsc)
from .dat_rnn import MASK_TARGETS, DatRnnBlock
from .ftb import FTB, FTB_ORDERS
from .signal_io import Waveform
from .stft import ComplexSpectrogram, StftConfig, istft, stft

VARIANTS = ("base", "f", "l")
OUTPUT_MODES = ("direct", "crm")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    variant: str = "base"
    encoder_channels: List[int] = field(default_factory=lambda: [16, 32, 64, 128, 128, 128])
    kernel: Tuple[int, int] = (5, 2)
    stride: Tuple[int, int] = (2, 1)
    datrnn_blocks: int = 2
    chunk_len: int = 32
    lstm_hidden: int = 128
    bottleneck_dim: int = 256
    ftb_order: str = "attention_first"
    ftb_attn_channels: Optional[int] = None
    mask_target: str = "input"
    output_mode: str = "direct"
    stft: StftConfig = field(default_factory=StftConfig)
    seed: int = 0

    def __post_init__(self):
        self.kernel = tuple(self.kernel)
        self.stride = tuple(self.stride)
        self.encoder_channels = list(self.encoder_channels)
        if isinstance(self.stft, dict):
            self.stft = StftConfig(**self.stft)
        self.validate()

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)
        need(self.variant in VARIANTS, f"variant must be one of {VARIANTS}, got {self.variant!r}")
        need(len(self.encoder_channels) >= 2, "need at least two encoder blocks")
        need(all(isinstance(c, int) and c >= 1 for c in self.encoder_channels), "channel widths must be positive ints")
        need(len(self.kernel) == 2 and min(self.kernel) >= 1, "kernel must be two positive ints")
        need(len(self.stride) == 2 and min(self.stride) >= 1, "stride must be two positive ints")
        need(self.stride[1] == 1, "time stride must be 1")
        need(self.datrnn_blocks >= 1, "datrnn_blocks must be >= 1")
        need(self.chunk_len >= 2 and self.chunk_len % 2 == 0, "chunk_len must be even and >= 2")
        need(self.lstm_hidden >= 1 and self.bottleneck_dim >= 1, "lstm_hidden and bottleneck_dim must be >= 1")
        need(self.ftb_order in FTB_ORDERS, f"ftb_order must be one of {FTB_ORDERS}")
        need(self.mask_target in MASK_TARGETS, f"mask_target must be one of {MASK_TARGETS}")
        need(self.output_mode in OUTPUT_MODES, f"output_mode must be one of {OUTPUT_MODES}")
        need(self.freq_dims()[-1] >= 1, "too many frequency-downsampling stages for this STFT size")

    @property
    def depth(self) -> int:
        return len(self.encoder_channels)

    def freq_dims(self) -> List[int]:
        """Frequency size at the input and after each encoder block."""
        dims = [self.stft.n_bins]
        kf, sf = self.kernel[0], self.stride[0]
        for _ in self.encoder_channels:
            dims.append((dims[-1] + 2 * (kf // 2) - kf) // sf + 1)
        return dims

    def ftb_positions(self) -> List[int]:
        """0-based encoder block indices followed by an FTB."""
        if self.variant == "base":
            return list(range(self.depth))
        return [0, self.depth - 1]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["kernel"], d["stride"] = list(self.kernel), list(self.stride)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def reference_config(variant: str = "base", **overrides) -> ModelConfig:
    """Full-size widths chosen so the parameter counts land near 12.4 M (base) / 4.7 M (l)."""
    cfg = dict(variant=variant, encoder_channels=[32, 64, 128, 224, 224, 192], datrnn_blocks=2,
               lstm_hidden=192, bottleneck_dim=192)
    cfg.update(overrides)
    return ModelConfig(**cfg)


def tiny_config(variant: str = "f", **overrides) -> ModelConfig:
    cfg = dict(variant=variant, encoder_channels=[8, 16, 16, 32], datrnn_blocks=1, chunk_len=16,
               lstm_hidden=32, bottleneck_dim=32)
    cfg.update(overrides)
    return ModelConfig(**cfg)


# -- blocks -------------------------------------------------------------------

class EncoderBlock(nn.Module):
    def __init__(self, in_ch, out_ch, kernel, stride, dsc: bool):
        super().__init__()
        self.kernel = kernel
        conv = ComplexDSConv2d if dsc else ComplexConv2d
        self.conv = conv(in_ch, out_ch, kernel, stride, (kernel[0] // 2, 0))
        self.norm = ComplexLayerNorm(out_ch)

    def reset_parameters(self, gen):
        self.conv.reset_parameters(gen)

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        x = x.map(lambda t: F.pad(t, (self.kernel[1] - 1, 0)))  # causal in time
        return complex_leaky_relu(self.norm(self.conv(x)))


class DecoderBlock(nn.Module):
    def __init__(self, in_ch, out_ch, kernel, stride, output_padding, dsc: bool):
        super().__init__()
        if dsc:
            self.conv = ComplexDSConv2d(in_ch, out_ch, kernel, stride, (kernel[0] // 2, 0),
                                        transposed=True, output_padding=(output_padding, 0))
        else:
            self.conv = ComplexConvTranspose2d(in_ch, out_ch, kernel, stride, (kernel[0] // 2, 0),
                                               output_padding=(output_padding, 0))
        self.norm = ComplexLayerNorm(out_ch)

    def reset_parameters(self, gen):
        self.conv.reset_parameters(gen)

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        T = x.real.shape[-1]
        y = self.conv(x).map(lambda t: t[..., :T])
        return complex_leaky_relu(self.norm(y))


class DatCftNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.encoder_channels
        fdims = cfg.freq_dims()
        dsc = cfg.variant == "l"
        ins = [1] + ch[:-1]
        self.encoder = nn.ModuleList(EncoderBlock(i, o, cfg.kernel, cfg.stride, dsc) for i, o in zip(ins, ch))
        self.ftb_after = cfg.ftb_positions()
        self.ftb = nn.ModuleList(FTB(ch[i], fdims[i + 1], cfg.ftb_attn_channels, cfg.ftb_order)
                                 for i in self.ftb_after)
        self.skip = nn.ModuleList(ComplexConv2d(c, c) for c in ch)

        flat = 2 * ch[-1] * fdims[-1]
        self.bottleneck_in = nn.Linear(flat, cfg.bottleneck_dim)
        self.datrnn = nn.ModuleList(DatRnnBlock(cfg.bottleneck_dim, cfg.lstm_hidden, cfg.chunk_len, cfg.mask_target)
                                    for _ in range(cfg.datrnn_blocks))
        self.bottleneck_out = nn.Linear(cfg.bottleneck_dim, flat)

        # decoder[0] mirrors the deepest encoder block
        kf, sf = cfg.kernel[0], cfg.stride[0]
        dec = []
        for i in reversed(range(cfg.depth)):
            out_ch = ch[i - 1] if i > 0 else ch[0]
            natural = (fdims[i + 1] - 1) * sf - 2 * (kf // 2) + kf
            dec.append(DecoderBlock(2 * ch[i], out_ch, cfg.kernel, cfg.stride, fdims[i] - natural, dsc))
        self.decoder = nn.ModuleList(dec)
        self.head = ComplexConv2d(ch[0], 1)
        self.reset_parameters(cfg.seed)

    def reset_parameters(self, seed: int) -> None:
        """Deterministic uniform fan-in initialisation from ``seed``."""
        gen = torch.Generator().manual_seed(int(seed))
        for blk in self.encoder:
            blk.reset_parameters(gen)
        for blk in self.ftb:
            blk.reset_parameters(gen)
        for conv in self.skip:
            conv.reset_parameters(gen)
        for lin in (self.bottleneck_in, self.bottleneck_out):
            bound = 1.0 / np.sqrt(lin.in_features)
            _uniform_(lin.weight, bound, gen)
            _uniform_(lin.bias, bound, gen)
        for blk in self.datrnn:
            blk.reset_parameters(gen)
        for blk in self.decoder:
            blk.reset_parameters(gen)
        self.head.reset_parameters(gen)
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, ComplexLayerNorm):
                    m.gamma_real.fill_(1.0)
                    m.gamma_imag.fill_(1.0)
                    m.beta_real.zero_()
                    m.beta_imag.zero_()

    # -- stages ---------------------------------------------------------------

    def encode(self, x: ComplexTensor):
        skips = []
        ftb_iter = dict(zip(self.ftb_after, self.ftb))
        for i, blk in enumerate(self.encoder):
            x = blk(x)
            if i in ftb_iter:
                x = ftb_iter[i](x)
            skips.append(x)
        return x, skips

    def bottleneck(self, x: ComplexTensor) -> ComplexTensor:
        B, C, Fb, T = x.real.shape
        flat = torch.cat([x.real, x.imag], dim=1).reshape(B, 2 * C * Fb, T)
        h = self.bottleneck_in(flat.transpose(1, 2)).transpose(1, 2)
        for blk in self.datrnn:
            h = blk(h)
        y = self.bottleneck_out(h.transpose(1, 2)).transpose(1, 2).reshape(B, 2 * C, Fb, T)
        return ComplexTensor(y[:, :C], y[:, C:])

    def decode(self, x: ComplexTensor, skips) -> ComplexTensor:
        for j, blk in enumerate(self.decoder):
            i = len(skips) - 1 - j
            x = blk(x.cat(self.skip[i](skips[i])))
        return self.head(x)

    def forward(self, real: torch.Tensor, imag: torch.Tensor):
        """[batch, bins, frames] spectra in, same-shaped spectra out."""
        x = ComplexTensor(real.unsqueeze(1), imag.unsqueeze(1))
        z, skips = self.encode(x)
        y = self.decode(self.bottleneck(z), skips)
        if self.cfg.output_mode == "crm":
            y = y * x
        return y.real.squeeze(1), y.imag.squeeze(1)


def build(cfg: ModelConfig) -> DatCftNet:
    cfg.validate()
    return DatCftNet(cfg)


def count_params(m: nn.Module) -> int:
    return sum(p.numel() for p in m.parameters())


def _closed_form(mod: nn.Module) -> Optional[int]:
    if isinstance(mod, ComplexDSConv2d):
        return param_count_dsc(mod.in_ch, mod.out_ch, mod.kernel)
    if isinstance(mod, (ComplexConv2d, ComplexConvTranspose2d)):
        return param_count_conv(mod.in_ch, mod.out_ch, mod.kernel)
    if isinstance(mod, ComplexLayerNorm):
        return 4 * mod.channels
    if isinstance(mod, FTB):
        return mod.freq * mod.freq
    if isinstance(mod, nn.Linear):
        return mod.in_features * mod.out_features + mod.out_features
    if isinstance(mod, nn.LayerNorm):
        return 2 * int(np.prod(mod.normalized_shape))
    if isinstance(mod, nn.LSTM):
        dirs = 2 if mod.bidirectional else 1
        h = mod.hidden_size
        return dirs * (4 * h * (mod.input_size + h) + 8 * h)
    return None


def param_table(m: nn.Module):
    """Rows (name, kind, enumerated, closed_form) for every module owning parameters directly."""
    rows = []
    for name, mod in m.named_modules():
        own = sum(p.numel() for p in mod.parameters(recurse=False))
        if own:
            rows.append((name, type(mod).__name__, own, _closed_form(mod)))
    return rows


def standard_conv_layers(m: nn.Module):
    """Names of full (non-separable) complex convolutions with a spatial kernel larger than 1x1."""
    return [name for name, mod in m.named_modules()
            if isinstance(mod, (ComplexConv2d, ComplexConvTranspose2d)) and mod.kernel != (1, 1)]


# -- numpy-facing wrappers --------------------------------------------------------

def _dtype(m: nn.Module):
    return next(m.parameters()).dtype


def forward(m: DatCftNet, noisy: ComplexSpectrogram) -> ComplexSpectrogram:
    if noisy.config != m.cfg.stft:
        raise ValueError("spectrogram STFT config differs from the model's")
    dt = _dtype(m)
    with torch.no_grad():
        re, im = m(torch.as_tensor(noisy.real, dtype=dt)[None], torch.as_tensor(noisy.imag, dtype=dt)[None])
    return ComplexSpectrogram(re[0].double().numpy(), im[0].double().numpy(), noisy.config, noisy.original_length)


def enhance(m: DatCftNet, w: Waveform) -> Waveform:
    spec = stft(w, m.cfg.stft)
    return istft(forward(m, spec), len(w), w.sample_rate)
