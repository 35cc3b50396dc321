"""Analysis/synthesis STFT with 32 ms frames and 16 ms hop at 16 kHz.

The numpy functions are the reference front end; ``stft_torch`` / ``istft_torch``
are differentiable twins used inside training.  Both use a periodic Hann
window for analysis and synthesis and divide the overlap-added signal by the
summed squared window, so reconstruction is exact wherever that sum is nonzero.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .kernels import overlap_add
from .signal_io import Waveform

_WSS_FLOOR = 1e-10


@dataclass(frozen=True)
class StftConfig:
    frame_len: int = 512
    hop: int = 256
    window: str = "hann"
    fft_size: int = 512
    center_padding: bool = True

    def __post_init__(self):
        if self.frame_len < 2 or self.frame_len % 2:
            raise ValueError("frame_len must be an even integer >= 2")
        if self.hop * 2 != self.frame_len:
            raise ValueError("hop must equal frame_len / 2")
        if self.fft_size < self.frame_len:
            raise ValueError("fft_size must be >= frame_len")
        if self.window != "hann":
            raise ValueError(f"unsupported window {self.window!r}")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        padded = n_samples + (self.frame_len if self.center_padding else 0)
        padded = max(padded, self.frame_len)
        return 1 + (padded - self.frame_len) // self.hop

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StftConfig":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class ComplexSpectrogram:
    real: np.ndarray
    imag: np.ndarray
    config: StftConfig
    original_length: int

    def __post_init__(self):
        re = np.asarray(self.real, dtype=np.float64)
        im = np.asarray(self.imag, dtype=np.float64)
        if re.shape != im.shape or re.ndim != 2:
            raise ValueError("real and imag must be matching 2-D arrays")
        if re.shape[0] != self.config.n_bins:
            raise ValueError(f"expected {self.config.n_bins} bins, got {re.shape[0]}")
        if not (np.all(np.isfinite(re)) and np.all(np.isfinite(im))):
            raise ValueError("spectrogram has non-finite entries")
        object.__setattr__(self, "real", re)
        object.__setattr__(self, "imag", im)

    @property
    def shape(self):
        return self.real.shape

    @property
    def n_frames(self) -> int:
        return self.real.shape[1]

    def complex(self) -> np.ndarray:
        return self.real + 1j * self.imag

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.real, self.imag)


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def _pad_input(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    if cfg.center_padding:
        x = np.pad(x, cfg.frame_len // 2, mode="reflect")
    if x.size < cfg.frame_len:
        x = np.pad(x, (0, cfg.frame_len - x.size))
    return x


def stft(w: Waveform, cfg: StftConfig = StftConfig()) -> ComplexSpectrogram:
    x = _pad_input(w.samples, cfg)
    n_frames = 1 + (x.size - cfg.frame_len) // cfg.hop
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.frame_len)[::cfg.hop][:n_frames]
    spec = np.fft.rfft(frames * hann(cfg.frame_len), n=cfg.fft_size, axis=1).T
    return ComplexSpectrogram(spec.real.copy(), spec.imag.copy(), cfg, len(w))


def istft(s: ComplexSpectrogram, target_len: int | None = None, sample_rate: int = 16000) -> Waveform:
    """Inverse STFT by weighted overlap-add.

    Only the real part of each inverse frame is used: the imaginary parts of
    the DC and Nyquist bins (which a conjugate-symmetric spectrum would have at
    zero) are discarded by the one-sided inverse FFT.
    """
    cfg = s.config
    if s.real.shape[0] != cfg.n_bins:
        raise ValueError("spectrogram bin count does not match its config")
    if target_len is None:
        target_len = s.original_length
    win = hann(cfg.frame_len)
    frames = np.fft.irfft(s.complex().T, n=cfg.fft_size, axis=1)[:, :cfg.frame_len] * win
    y = overlap_add(frames, cfg.hop)
    wss = overlap_add(np.tile(win ** 2, (s.n_frames, 1)), cfg.hop)
    y = np.where(wss > _WSS_FLOOR, y / np.where(wss > _WSS_FLOOR, wss, 1.0), 0.0)
    if cfg.center_padding:
        y = y[cfg.frame_len // 2:]
    if y.size < target_len:
        y = np.pad(y, (0, target_len - y.size))
    return Waveform(y[:target_len], sample_rate)


# -- torch twins ----------------------------------------------------------------

def stft_torch(x: torch.Tensor, cfg: StftConfig = StftConfig()):
    """[batch, samples] -> (real, imag), each [batch, bins, frames]."""
    if cfg.center_padding:
        x = F.pad(x.unsqueeze(1), (cfg.frame_len // 2, cfg.frame_len // 2), mode="reflect").squeeze(1)
    if x.shape[-1] < cfg.frame_len:
        x = F.pad(x, (0, cfg.frame_len - x.shape[-1]))
    win = torch.as_tensor(hann(cfg.frame_len), dtype=x.dtype)
    frames = x.unfold(-1, cfg.frame_len, cfg.hop) * win
    spec = torch.fft.rfft(frames, n=cfg.fft_size, dim=-1).transpose(1, 2)
    return spec.real, spec.imag


def istft_torch(real: torch.Tensor, imag: torch.Tensor, cfg: StftConfig, length: int) -> torch.Tensor:
    """(real, imag) [batch, bins, frames] -> [batch, length]."""
    n_frames = real.shape[-1]
    win = torch.as_tensor(hann(cfg.frame_len), dtype=real.dtype)
    frames = torch.fft.irfft(torch.complex(real, imag).transpose(1, 2), n=cfg.fft_size, dim=-1)
    frames = frames[..., :cfg.frame_len] * win  # batch x frames x frame_len
    total = (n_frames - 1) * cfg.hop + cfg.frame_len
    y = F.fold(frames.transpose(1, 2), output_size=(1, total), kernel_size=(1, cfg.frame_len),
               stride=(1, cfg.hop)).reshape(real.shape[0], total)
    wss = torch.as_tensor(overlap_add(np.tile(hann(cfg.frame_len) ** 2, (n_frames, 1)), cfg.hop),
                          dtype=real.dtype)
    y = y / torch.where(wss > _WSS_FLOOR, wss, torch.ones_like(wss)) * (wss > _WSS_FLOOR)
    if cfg.center_padding:
        y = y[:, cfg.frame_len // 2:]
    if y.shape[1] < length:
        y = F.pad(y, (0, length - y.shape[1]))
    return y[:, :length]


# -- spectrogram container and rendering ------------------------------------------

_MAGIC = b"CSPEC\x00\x00\x01"


def save_spectrogram(path, s: ComplexSpectrogram) -> None:
    """Binary dump: magic, u32 header length, JSON header, float64 real then imag planes."""
    header = json.dumps({"shape": list(s.shape), "config": s.config.to_dict(),
                         "original_length": s.original_length, "dtype": "<f8",
                         "order": "C"}).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(s.real.astype("<f8").tobytes(order="C"))
        fh.write(s.imag.astype("<f8").tobytes(order="C"))


def load_spectrogram(path) -> ComplexSpectrogram:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a spectrogram container")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen])
    shape = tuple(header["shape"])
    n = int(np.prod(shape))
    body = np.frombuffer(raw[12 + hlen:], dtype="<f8")
    if body.size != 2 * n:
        raise ValueError(f"{path}: truncated payload")
    return ComplexSpectrogram(body[:n].reshape(shape), body[n:].reshape(shape),
                              StftConfig.from_dict(header["config"]), header["original_length"])


def render_spectrogram(s: ComplexSpectrogram, path, sample_rate: int = 16000,
                       floor_db: float = -80.0, title: str | None = None) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    mag = s.magnitude()
    db = 20 * np.log10(mag / max(mag.max(), 1e-12) + 1e-12)
    db = np.maximum(db, floor_db)
    hop_s = s.config.hop / sample_rate
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.imshow(db, origin="lower", aspect="auto", cmap="magma", vmin=floor_db, vmax=0,
              extent=(0, s.n_frames * hop_s, 0, sample_rate / 2000))
    ax.set_xlabel("time (s)")
    ax.set_ylabel("frequency (kHz)")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
