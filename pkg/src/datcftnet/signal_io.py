"""Waveforms, WAV I/O, resampling, SNR mixing and the synthetic corpus."""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import signal as sps
from scipy.io import wavfile

SAMPLE_RATE = 16000
TRAIN_SNRS = tuple(range(-2, 15, 2))
TEST_SNRS = (-5, 0, 5)
NOISE_KINDS = ("white", "speech_shaped", "babble_synth", "car_synth", "file")


class AudioError(Exception):
    """Base class for audio loading problems."""


class MissingFileError(AudioError, FileNotFoundError):
    pass


class MultichannelError(AudioError):
    pass


class UnsupportedEncodingError(AudioError):
    pass


class ZeroPowerError(ValueError):
    """A signal needed for power normalisation has zero energy."""


@dataclass(frozen=True, eq=False)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1 or x.size < 1:
            raise ValueError("waveform must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(x)):
            raise ValueError("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def power(self) -> float:
        return float(np.mean(self.samples ** 2))


@dataclass(frozen=True)
class MixRecipe:
    utterance_id: str
    noise_kind: str
    snr_db: float
    seed: int
    noise_path: Optional[str] = None

    def __post_init__(self):
        if not math.isfinite(self.snr_db):
            raise ValueError("snr_db must be finite")
        if self.noise_kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.noise_kind!r}")


# -- WAV I/O ------------------------------------------------------------------

def load_wav(path) -> Waveform:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"no such file: {path}")
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        raise UnsupportedEncodingError(f"{path}: {exc}") from exc
    if data.ndim > 1:
        if data.shape[1] != 1:
            raise MultichannelError(f"{path}: {data.shape[1]} channels, expected mono")
        data = data[:, 0]
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise UnsupportedEncodingError(f"{path}: sample type {data.dtype} (need PCM16 or float32)")
    return Waveform(samples, rate)


def write_wav(path, w: Waveform, encoding: str = "pcm16") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if encoding == "pcm16":
        data = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype(np.int16)
    elif encoding == "float32":
        data = w.samples.astype(np.float32)
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    wavfile.write(path, w.sample_rate, data)


def load_wav_folder(folder) -> List[Tuple[Waveform, str]]:
    folder = Path(folder)
    if not folder.is_dir():
        raise MissingFileError(f"no such directory: {folder}")
    return [(load_wav(p), p.stem) for p in sorted(folder.glob("*.wav"))]


# -- resampling ---------------------------------------------------------------

def resample(w: Waveform, target_rate: int) -> Waveform:
    """Polyphase windowed-sinc resampling (anti-aliased when downsampling)."""
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if target_rate == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)
    ratio = Fraction(int(target_rate), w.sample_rate)
    y = sps.resample_poly(w.samples, ratio.numerator, ratio.denominator)
    n_out = max(1, int(round(len(w) * target_rate / w.sample_rate)))
    if y.size < n_out:
        y = np.pad(y, (0, n_out - y.size))
    return Waveform(y[:n_out], target_rate)


# -- mixing -------------------------------------------------------------------

def snr_gain(clean_power: float, noise_power: float, snr_db: float) -> float:
    if clean_power <= 0 or noise_power <= 0:
        raise ZeroPowerError("clean and noise segments must have nonzero power")
    return math.sqrt(clean_power / (noise_power * 10.0 ** (snr_db / 10.0)))


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float, seed: int = 0
               ) -> Tuple[Waveform, Waveform]:
    """Add ``noise`` to ``clean`` at ``snr_db``; returns (noisy, scaled_noise).

    The noise segment is cropped from a uniformly drawn offset.
    """
    if clean.sample_rate != noise.sample_rate:
        raise ValueError("sample rates differ")
    n = len(clean)
    if len(noise) < n:
        raise ValueError("noise shorter than clean signal")
    offset = int(np.random.default_rng(seed).integers(0, len(noise) - n + 1))
    seg = noise.samples[offset:offset + n]
    g = snr_gain(clean.power(), float(np.mean(seg ** 2)), snr_db)
    scaled = g * seg
    return Waveform(clean.samples + scaled, clean.sample_rate), Waveform(scaled, clean.sample_rate)


def measured_snr(clean: Waveform, noise: Waveform) -> float:
    return 10.0 * math.log10(clean.power() / noise.power())


# -- synthetic pseudo-speech ----------------------------------------------------

# (F1, F2, F3) in Hz for a handful of vowel-like targets
_VOWELS = np.array([
    [730, 1090, 2440], [270, 2290, 3010], [300, 870, 2240], [530, 1840, 2480],
    [660, 1720, 2410], [570, 840, 2410], [440, 1020, 2240], [490, 1350, 1690],
])
_BANDWIDTHS = np.array([90.0, 110.0, 170.0])


def _smooth_track(rng, n, fs, rate_hz, lo, hi):
    """Piecewise-cosine interpolated random track with knots every 1/rate_hz s."""
    step = max(1, int(fs / rate_hz))
    knots = rng.uniform(lo, hi, size=n // step + 2)
    pos = np.arange(n) / step
    i = pos.astype(int)
    frac = 0.5 - 0.5 * np.cos(np.pi * (pos - i))
    return knots[i] * (1 - frac) + knots[i + 1] * frac


def pseudo_speech(n_samples: int, rng: np.random.Generator, fs: int = SAMPLE_RATE) -> np.ndarray:
    """Pitch-modulated harmonic stack with moving formants and syllabic AM."""
    t = np.arange(n_samples) / fs
    f0_base = rng.uniform(95.0, 220.0)
    f0 = f0_base * (1.0 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * t + rng.uniform(0, 2 * np.pi)))
    f0 *= _smooth_track(rng, n_samples, fs, 8.0, 0.95, 1.05)

    # formant targets switch every ~120 ms, cosine-interpolated
    step = int(0.12 * fs)
    n_knots = n_samples // step + 2
    targets = _VOWELS[rng.integers(0, len(_VOWELS), size=n_knots)].astype(float)
    pos = np.arange(n_samples) / step
    i = pos.astype(int)
    frac = (0.5 - 0.5 * np.cos(np.pi * (pos - i)))[:, None]
    formants = targets[i] * (1 - frac) + targets[i + 1] * frac  # n x 3

    n_harm = int(7000.0 / f0_base)
    phase = 2 * np.pi * np.cumsum(f0) / fs
    out = np.zeros(n_samples)
    for k in range(1, n_harm + 1):
        fk = k * f0
        # sum of resonance-shaped peaks plus a -6 dB/oct tilt
        gain = np.zeros(n_samples)
        for j in range(3):
            gain += 1.0 / (1.0 + ((fk - formants[:, j]) / _BANDWIDTHS[j]) ** 2) / (j + 1)
        gain = (gain + 0.02) / k ** 0.5
        gain[fk > 0.48 * fs] = 0.0
        out += gain * np.sin(k * phase + rng.uniform(0, 2 * np.pi))

    # syllables: ~4 Hz raised-cosine bursts separated by short gaps
    am = np.zeros(n_samples)
    pos = int(rng.uniform(0.05, 0.15) * fs)
    while pos < n_samples:
        length = int(rng.uniform(0.12, 0.30) * fs)
        seg = np.hanning(length) ** 0.5 * rng.uniform(0.5, 1.0)
        end = min(n_samples, pos + length)
        am[pos:end] = seg[:end - pos]
        pos = end + int(rng.uniform(0.03, 0.12) * fs)
    out *= am
    peak = np.max(np.abs(out))
    return 0.5 * out / peak if peak > 0 else out


def make_synthetic_corpus(n_utterances: int, seed: int, fs: int = SAMPLE_RATE
                          ) -> List[Tuple[Waveform, str]]:
    if n_utterances < 1:
        raise ValueError("n_utterances must be >= 1")
    corpus = []
    for i in range(n_utterances):
        rng = np.random.default_rng([seed, i])
        n = int(rng.integers(2 * fs, 3 * fs + 1))
        corpus.append((Waveform(pseudo_speech(n, rng, fs), fs), f"utt{i:04d}"))
    return corpus


# -- noise sources ------------------------------------------------------------

def long_term_spectrum(waves: Iterable[Waveform], n_fft: int = 512) -> np.ndarray:
    """Mean power spectrum (n_fft//2 + 1 bins) over all frames of ``waves``."""
    acc = np.zeros(n_fft // 2 + 1)
    count = 0
    for w in waves:
        _, _, z = sps.stft(w.samples, nperseg=n_fft, noverlap=n_fft // 2, boundary=None, padded=False)
        acc += np.sum(np.abs(z) ** 2, axis=1)
        count += z.shape[1]
    return acc / max(count, 1)


def make_noise(kind: str, n_samples: int, seed: int, fs: int = SAMPLE_RATE,
               corpus: Optional[Sequence[Waveform]] = None, path=None) -> Waveform:
    """Synthesise (or load) ``n_samples`` of noise of the given kind, unit RMS."""
    rng = np.random.default_rng([seed, NOISE_KINDS.index(kind) if kind in NOISE_KINDS else 99])
    if kind == "white":
        x = rng.standard_normal(n_samples)
    elif kind == "speech_shaped":
        if corpus is None:
            corpus = [w for w, _ in make_synthetic_corpus(8, seed=seed)]
        ltas = long_term_spectrum(corpus)
        spec = np.fft.rfft(rng.standard_normal(n_samples))
        grid = np.fft.rfftfreq(n_samples, 1.0 / fs)
        shape = np.sqrt(np.interp(grid, np.fft.rfftfreq(512, 1.0 / fs), ltas))
        x = np.fft.irfft(spec * shape, n=n_samples)
    elif kind == "car_synth":
        brown = sps.lfilter([1.0], [1.0, -0.995], rng.standard_normal(n_samples))
        b, a = sps.butter(4, 400.0, fs=fs)
        x = sps.filtfilt(b, a, brown)
        x = x - x.mean()
    elif kind == "babble_synth":
        x = np.zeros(n_samples)
        for k in range(8):
            sub = np.random.default_rng([seed, 1000 + k])
            length = int(sub.integers(2 * fs, 3 * fs + 1))
            stream = pseudo_speech(length, sub, fs)
            reps = int(np.ceil((n_samples + length) / length))
            tiled = np.tile(stream, reps)
            off = int(sub.integers(0, length))
            x += tiled[off:off + n_samples]
    elif kind == "file":
        if path is None:
            raise ValueError("noise kind 'file' needs a path")
        w = load_wav(path)
        if w.sample_rate != fs:
            w = resample(w, fs)
        reps = int(np.ceil(n_samples / len(w)))
        x = np.tile(w.samples, reps)[:n_samples]
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    rms = np.sqrt(np.mean(x ** 2))
    if rms == 0:
        raise ZeroPowerError(f"generated {kind} noise is silent")
    return Waveform(x / rms, fs)


# -- recipe grids ---------------------------------------------------------------

def _recipe_seed(seed: int, index: int) -> int:
    return int(np.random.default_rng([seed, index]).integers(0, 2 ** 31 - 1))


def build_training_grid(corpus, noise_kinds: Sequence[str], seed: int,
                        split: str = "train", snrs: Optional[Sequence[float]] = None) -> List[MixRecipe]:
    """Cross product utterances x noise kinds x SNR grid.

    ``split="train"`` uses -2..14 dB in 2 dB steps; ``split="test"`` uses -5, 0, 5 dB.
    An explicit ``snrs`` list overrides the split's grid.
    ``noise_kinds`` entries may be a kind name or a WAV path (kind ``file``).
    """
    if not corpus:
        raise ValueError("corpus is empty")
    if snrs is None:
        if split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {split!r}")
        snrs = TRAIN_SNRS if split == "train" else TEST_SNRS
    recipes = []
    for utt in corpus:
        uid = utt[1] if isinstance(utt, tuple) else str(utt)
        for nk in noise_kinds:
            kind, npath = (nk, None) if nk in NOISE_KINDS else ("file", str(nk))
            for snr in snrs:
                recipes.append(MixRecipe(uid, kind, float(snr), _recipe_seed(seed, len(recipes)), npath))
    return recipes


def realize(recipe: MixRecipe, clean: Waveform, corpus_waves: Optional[Sequence[Waveform]] = None
            ) -> Tuple[Waveform, Waveform]:
    """Generate the recipe's noise and mix it with ``clean``; returns (noisy, clean)."""
    noise = make_noise(recipe.noise_kind, len(clean) + clean.sample_rate, recipe.seed,
                       fs=clean.sample_rate, corpus=corpus_waves, path=recipe.noise_path)
    noisy, _ = mix_at_snr(clean, noise, recipe.snr_db, seed=recipe.seed)
    return noisy, clean


# -- manifests ----------------------------------------------------------------

def write_manifest(path, records: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path) -> List[dict]:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"no such manifest: {path}")
    base = path.parent
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            for key in ("clean_path", "noisy_path"):
                if key in rec and rec[key] and not os.path.isabs(rec[key]):
                    rec[key] = str(base / rec[key])
            out.append(rec)
    return out


def recipe_record(recipe: MixRecipe, clean_path: str, noisy_path: Optional[str] = None) -> dict:
    rec = {"id": f"{recipe.utterance_id}_{recipe.noise_kind}_{recipe.snr_db:+g}dB",
           "clean_path": clean_path, "noise_kind": recipe.noise_kind,
           "snr_db": recipe.snr_db, "seed": recipe.seed}
    if noisy_path is not None:
        rec["noisy_path"] = noisy_path
    if recipe.noise_path:
        rec["noise_path"] = recipe.noise_path
    return rec

