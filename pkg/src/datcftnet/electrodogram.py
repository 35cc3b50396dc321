"""ACE-style cochlear-implant simulation: n-of-m envelopes, electrodograms, noise vocoder.

Electrode 1 is the most apical (lowest frequency) channel; electrode 22 the most basal.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from . import kernels
from .signal_io import Waveform
from .stft import hann

# FFT bins per channel, apex to base, starting at bin 2 of a 128-point FFT at 16 kHz.
# One bin per channel up to ~1.3 kHz, then widening roughly logarithmically.
DEFAULT_BAND_BINS = (1, 1, 1, 1, 1, 1, 1, 1, 1, 2, 2, 2, 2, 3, 3, 4, 4, 5, 5, 6, 7, 8)


@dataclass(frozen=True)
class AceConfig:
    n_electrodes: int = 22
    n_maxima: int = 8
    channel_rate: float = 900.0
    sample_rate: int = 16000
    fft_size: int = 128
    first_bin: int = 2
    band_bins: Tuple[int, ...] = DEFAULT_BAND_BINS
    t_level: float = 100.0
    c_level: float = 200.0
    base_level: float = 4.0 / 256.0
    saturation_level: float = 150.0 / 256.0
    rho: float = 416.2
    vocoder_seed: int = 0
    presentation_rms: Optional[float] = None  # front-end gain to a fixed RMS before analysis; None = off

    def __post_init__(self):
        object.__setattr__(self, "band_bins", tuple(int(b) for b in self.band_bins))
        if len(self.band_bins) != self.n_electrodes:
            raise ValueError(f"{len(self.band_bins)} band widths for {self.n_electrodes} electrodes")
        if not 1 <= self.n_maxima <= self.n_electrodes:
            raise ValueError(f"n_maxima must lie in [1, {self.n_electrodes}]")
        if min(self.band_bins) < 1:
            raise ValueError("every band needs at least one FFT bin")
        if self.first_bin < 1 or self.first_bin + sum(self.band_bins) > self.fft_size // 2 + 1:
            raise ValueError("bands exceed the FFT range")
        if not 0 < self.base_level < self.saturation_level:
            raise ValueError("need 0 < base_level < saturation_level")
        if not 0 <= self.t_level < self.c_level:
            raise ValueError("need 0 <= T_level < C_level")
        if self.channel_rate <= 0 or self.rho <= 0:
            raise ValueError("channel_rate and rho must be positive")
        if self.presentation_rms is not None and not self.presentation_rms > 0:
            raise ValueError("presentation_rms must be positive")

    @property
    def band_starts(self) -> np.ndarray:
        return self.first_bin + np.concatenate([[0], np.cumsum(self.band_bins)[:-1]]).astype(np.int64)

    @property
    def band_edges(self) -> np.ndarray:
        """Channel edges in Hz (``n_electrodes + 1`` values); bin k covers (k ± 0.5)·fs/N."""
        bin_hz = self.sample_rate / self.fft_size
        ends = self.first_bin + np.concatenate([[0], np.cumsum(self.band_bins)])
        return (ends - 0.5) * bin_hz

    @property
    def band_centers(self) -> np.ndarray:
        e = self.band_edges
        return 0.5 * (e[:-1] + e[1:])

    def frame_starts(self, n_samples: int) -> np.ndarray:
        n_frames = int(math.ceil(n_samples * self.channel_rate / self.sample_rate)) if n_samples else 0
        return np.round(np.arange(n_frames) * self.sample_rate / self.channel_rate).astype(np.int64)


class Pulse(NamedTuple):
    time: float
    electrode: int
    amplitude: float
    frame: int


@dataclass
class Electrodogram:
    pulses: List[Pulse]
    duration: float
    config: AceConfig = field(default_factory=AceConfig)
    n_frames: int = 0

    def selection(self) -> np.ndarray:
        """Boolean [electrodes × frames] matrix of stimulated channels."""
        sel = np.zeros((self.config.n_electrodes, self.n_frames), dtype=bool)
        for p in self.pulses:
            sel[p.electrode - 1, p.frame] = True
        return sel

    def amplitude_matrix(self) -> np.ndarray:
        out = np.zeros((self.config.n_electrodes, self.n_frames))
        for p in self.pulses:
            out[p.electrode - 1, p.frame] = p.amplitude
        return out

    def to_csv(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time_s", "electrode", "amplitude"])
            for p in self.pulses:
                w.writerow([f"{p.time:.9f}", p.electrode, f"{p.amplitude:.6f}"])


def _check_rate(w: Waveform, cfg: AceConfig) -> None:
    if w.sample_rate != cfg.sample_rate:
        raise ValueError(f"ACE front end expects {cfg.sample_rate} Hz input, got {w.sample_rate} Hz")


def ace_envelopes(w: Waveform, cfg: AceConfig = AceConfig(), backend=None) -> np.ndarray:
    """Band envelopes [n_electrodes × frames] from a short-time FFT filterbank.

    Magnitudes are scaled by 2/sum(window), so a sinusoid of amplitude A centred
    on a single-bin channel yields an envelope close to A.
    """
    _check_rate(w, cfg)
    N = cfg.fft_size
    starts = cfg.frame_starts(len(w))
    if starts.size == 0:
        return np.zeros((cfg.n_electrodes, 0))
    x = np.zeros(int(starts[-1]) + N)
    x[:len(w)] = w.samples
    if cfg.presentation_rms is not None:
        rms = np.sqrt(np.mean(w.samples ** 2)) if len(w) else 0.0
        if rms > 0:
            x *= cfg.presentation_rms / rms
    win = hann(N)
    frames = x[starts[:, None] + np.arange(N)[None, :]] * win
    mag = np.abs(np.fft.rfft(frames, axis=1)).T * (2.0 / win.sum())
    return kernels.band_envelopes(mag, cfg.band_starts, np.asarray(cfg.band_bins), backend=backend)


def select_maxima(envelopes: np.ndarray, n: int, backend=None) -> np.ndarray:
    """Per frame, mark the ``n`` largest envelopes; ties go to the lower (apical) electrode."""
    return kernels.select_maxima(envelopes, n, backend=backend)


def loudness_map(env, cfg: AceConfig = AceConfig()) -> np.ndarray:
    """Logarithmic loudness growth to clinical units; 0 marks "no pulse" (below base level)."""
    env = np.asarray(env, dtype=np.float64)
    x = np.clip((env - cfg.base_level) / (cfg.saturation_level - cfg.base_level), 0.0, 1.0)
    level = cfg.t_level + (cfg.c_level - cfg.t_level) * np.log1p(cfg.rho * x) / math.log1p(cfg.rho)
    return np.where(env >= cfg.base_level, level, 0.0)


def inverse_loudness(amplitude, cfg: AceConfig = AceConfig()) -> np.ndarray:
    """Envelope that maps to ``amplitude`` (0 for no pulse); saturated levels map to saturation."""
    a = np.asarray(amplitude, dtype=np.float64)
    frac = np.clip((a - cfg.t_level) / (cfg.c_level - cfg.t_level), 0.0, 1.0)
    x = np.expm1(frac * math.log1p(cfg.rho)) / cfg.rho
    env = cfg.base_level + x * (cfg.saturation_level - cfg.base_level)
    return np.where(a > 0, env, 0.0)


def ace_process(w: Waveform, cfg: AceConfig = AceConfig(), backend=None) -> Electrodogram:
    """Waveform -> electrodogram.  Within a frame, pulses run base to apex in consecutive slots."""
    env = ace_envelopes(w, cfg, backend=backend)
    n_frames = env.shape[1]
    if n_frames == 0:
        return Electrodogram([], len(w) / w.sample_rate, cfg, 0)
    sel = select_maxima(env, cfg.n_maxima, backend=backend)
    amp = loudness_map(env, cfg)
    slot = 1.0 / (cfg.channel_rate * cfg.n_maxima)
    pulses = []
    for t in range(n_frames):
        t0 = t / cfg.channel_rate
        j = 0
        for e in range(cfg.n_electrodes - 1, -1, -1):
            if sel[e, t] and amp[e, t] > 0:
                pulses.append(Pulse(t0 + j * slot, e + 1, float(amp[e, t]), t))
                j += 1
    return Electrodogram(pulses, len(w) / w.sample_rate, cfg, n_frames)


def selection_overlap(a: Electrodogram, b: Electrodogram) -> float:
    """Jaccard overlap of the (frame, electrode) stimulation sets; 1.0 when both are empty."""
    sa = {(p.frame, p.electrode) for p in a.pulses}
    sb = {(p.frame, p.electrode) for p in b.pulses}
    if not sa and not sb:
        return 1.0
    return len(sa & sb) / len(sa | sb)


def render_electrodogram(eg: Electrodogram, path, width: int = 800, height: int = 400, dpi: int = 100) -> None:
    """PNG raster: time on x, electrode on y (apex at the bottom), shade = amplitude."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cfg = eg.config
    fig = plt.figure(figsize=(width / dpi, height / dpi), dpi=dpi)
    ax = fig.add_subplot(111)
    raster = eg.amplitude_matrix()
    duration = max(eg.duration, eg.n_frames / cfg.channel_rate, 1e-3)
    if raster.size:
        ax.imshow(raster, origin="lower", aspect="auto", cmap="Greys", vmin=0.0, vmax=cfg.c_level,
                  interpolation="nearest",
                  extent=(0.0, eg.n_frames / cfg.channel_rate, 0.5, cfg.n_electrodes + 0.5))
    ax.set_xlim(0.0, duration)
    ax.set_ylim(0.5, cfg.n_electrodes + 0.5)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("electrode (1 = apex)")
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=dpi)
    plt.close(fig)


def _band_noise(n: int, lo_hz: float, hi_hz: float, fs: int, rng) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / fs)
    spec[(f < lo_hz) | (f >= hi_hz)] = 0.0
    x = np.fft.irfft(spec, n)
    rms = math.sqrt(float(np.mean(x * x)))
    return x / rms if rms > 0 else x


def vocode(source: Union[Electrodogram, np.ndarray], cfg: Optional[AceConfig] = None,
           length: Optional[int] = None) -> Waveform:
    """Noise-band vocoder driven by an electrodogram or a raw envelope matrix.

    Each active channel gets its own band-limited noise carrier (unit RMS, band
    edges from ``cfg``) scaled by the channel envelope, interpolated from frame
    rate to sample rate.  Electrodogram amplitudes are first mapped back to
    envelopes through the inverse loudness growth function.
    """
    if isinstance(source, Electrodogram):
        cfg = cfg or source.config
        env = inverse_loudness(source.amplitude_matrix(), cfg)
        if length is None:
            length = int(round(source.duration * cfg.sample_rate))
    else:
        cfg = cfg or AceConfig()
        env = np.asarray(source, dtype=np.float64)
        if env.ndim != 2 or env.shape[0] != cfg.n_electrodes:
            raise ValueError(f"envelopes must be [{cfg.n_electrodes} × frames], got {env.shape}")
    fs = cfg.sample_rate
    n_frames = env.shape[1]
    if length is None:
        length = int(round(n_frames * fs / cfg.channel_rate))
    out = np.zeros(length)
    if length == 0 or n_frames == 0:
        return Waveform(out, fs)
    frame_t = (np.round(np.arange(n_frames) * fs / cfg.channel_rate) + cfg.fft_size / 2) / fs
    t = np.arange(length) / fs
    edges = cfg.band_edges
    rng = np.random.default_rng(cfg.vocoder_seed)
    for b in range(cfg.n_electrodes):
        carrier = _band_noise(length, edges[b], edges[b + 1], fs, rng)
        if not np.any(env[b]):
            continue
        # sinusoid of amplitude A has RMS A/sqrt(2); keep that scale for the noise carrier
        out += np.interp(t, frame_t, env[b]) * carrier / math.sqrt(2.0)
    return Waveform(out, fs)


def tone(freq_hz: float, seconds: float = 0.25, amplitude: float = 0.5, fs: int = 16000) -> Waveform:
    n = int(round(seconds * fs))
    return Waveform(amplitude * np.sin(2 * np.pi * freq_hz * np.arange(n) / fs), fs)


def dominant_electrodes(eg_or_env: Union[Electrodogram, np.ndarray]) -> np.ndarray:
    """Per-frame electrode (1-based) with the largest amplitude/envelope; 0 for empty frames."""
    m = eg_or_env.amplitude_matrix() if isinstance(eg_or_env, Electrodogram) else np.asarray(eg_or_env)
    idx = np.argmax(m, axis=0) + 1
    return np.where(m.max(axis=0, initial=0.0) > 0, idx, 0)
