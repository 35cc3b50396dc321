"""Objective metrics and per-condition report tables."""
from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import torch
from scipy.signal import resample_poly

from .kernels import overlap_add, stoi_correlation
from .signal_io import Waveform
from .stft import ComplexSpectrogram

SISDR_CAP_DB = 60.0
_CAP_RATIO = 10.0 ** (SISDR_CAP_DB / 10.0)
LSD_EPS = 1e-8


# -- SI-SDR ---------------------------------------------------------------------

def _as_array(x) -> np.ndarray:
    return x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)


def sisdr(ref, est) -> float:
    """Scale-invariant SDR in dB, capped at +60 dB."""
    r, e = _as_array(ref), _as_array(est)
    if r.shape != e.shape:
        raise ValueError(f"length mismatch: {r.shape} vs {e.shape}")
    rr = float(np.dot(r, r))
    if rr == 0.0:
        raise ValueError("reference has zero energy")
    target = (np.dot(e, r) / rr) * r
    resid = e - target
    ss, ee = float(np.dot(target, target)), float(np.dot(resid, resid))
    return 10.0 * math.log10(ss / max(ee, ss / _CAP_RATIO)) if ss > 0 else -SISDR_CAP_DB


def sisdr_torch(ref: torch.Tensor, est: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Batched SI-SDR over the last axis; ``mask`` zeroes padded samples."""
    if mask is not None:
        ref, est = ref * mask, est * mask
    rr = (ref * ref).sum(-1, keepdim=True)
    target = (est * ref).sum(-1, keepdim=True) / rr * ref
    resid = est - target
    ss, ee = (target ** 2).sum(-1), (resid ** 2).sum(-1)
    tiny = torch.finfo(ref.dtype).tiny
    return 10.0 * torch.log10((ss + tiny) / torch.maximum(ee, ss / _CAP_RATIO + tiny))


# -- LSD ------------------------------------------------------------------------

def _magnitude(s) -> np.ndarray:
    if isinstance(s, ComplexSpectrogram):
        return s.magnitude()
    return np.abs(np.asarray(s))


def lsd(ref_spec, est_spec) -> float:
    """Mean over frames of the RMS (over bins) log-magnitude difference in dB."""
    a, b = _magnitude(ref_spec), _magnitude(est_spec)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = 20 * np.log10(a + LSD_EPS) - 20 * np.log10(b + LSD_EPS)
    return float(np.mean(np.sqrt(np.mean(d * d, axis=0))))


# -- STOI -----------------------------------------------------------------------

STOI_FS = 10000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEG = 30
STOI_BETA = -15.0
STOI_DYN_RANGE = 40.0


def third_octave_matrix(fs=STOI_FS, nfft=STOI_NFFT, n_bands=STOI_BANDS, min_freq=STOI_MIN_FREQ):
    f = np.linspace(0, fs, nfft + 1)[:nfft // 2 + 1]
    k = np.arange(n_bands, dtype=float)
    lo = min_freq * 2.0 ** ((2 * k - 1) / 6)
    hi = min_freq * 2.0 ** ((2 * k + 1) / 6)
    obm = np.zeros((n_bands, f.size))
    for i in range(n_bands):
        a = int(np.argmin((f - lo[i]) ** 2))
        b = int(np.argmin((f - hi[i]) ** 2))
        obm[i, a:b] = 1.0
    return obm


def _frames(x, win):
    n = win.size
    starts = range(0, x.size - n + 1, n // 2)
    return np.array([win * x[i:i + n] for i in starts]).reshape(-1, n)


def _remove_silent_frames(x, y):
    win = np.hanning(STOI_FRAME + 2)[1:-1]
    xf, yf = _frames(x, win), _frames(y, win)
    energy = 20 * np.log10(np.linalg.norm(xf, axis=1) + np.finfo(float).eps)
    keep = (energy.max() - STOI_DYN_RANGE - energy) < 0
    return overlap_add(xf[keep], STOI_FRAME // 2), overlap_add(yf[keep], STOI_FRAME // 2)


def _tob(x, obm):
    win = np.hanning(STOI_FRAME + 2)[1:-1]
    starts = range(0, x.size - STOI_FRAME, STOI_FRAME // 2)
    frames = np.array([win * x[i:i + STOI_FRAME] for i in starts]).reshape(-1, STOI_FRAME)
    spec = np.fft.rfft(frames, n=STOI_NFFT, axis=1)
    return np.sqrt(obm @ (np.abs(spec) ** 2).T)


def stoi(ref, est, fs: int = 16000) -> float:
    """Short-time objective intelligibility (third-octave bands, 384 ms segments)."""
    x, y = _as_array(ref), _as_array(est)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    if fs != STOI_FS:
        g = math.gcd(STOI_FS, fs)
        x = resample_poly(x, STOI_FS // g, fs // g)
        y = resample_poly(y, STOI_FS // g, fs // g)
    if x.size < STOI_FRAME * 2:
        raise ValueError("signal shorter than one STOI analysis segment")
    x, y = _remove_silent_frames(x, y)
    obm = third_octave_matrix()
    x_tob, y_tob = _tob(x, obm), _tob(y, obm)
    if x_tob.shape[1] < STOI_SEG:
        raise ValueError("signal shorter than one STOI analysis segment (384 ms of active speech)")
    d = stoi_correlation(x_tob, y_tob, STOI_SEG, 10.0 ** (-STOI_BETA / 20.0))
    return float(min(max(d, 0.0), 1.0))


# -- reports --------------------------------------------------------------------

COLUMNS = ("noise_kind", "snr_db", "system", "n", "sisdr_db", "stoi", "lsd_db", "pesq")


@dataclass
class MetricReport:
    rows: List[dict] = field(default_factory=list)
    aggregates: Dict[str, dict] = field(default_factory=dict)

    def has_nan(self) -> bool:
        for row in self.rows:
            for key in ("sisdr_db", "stoi", "lsd_db"):
                if not math.isfinite(row[key]):
                    return True
        return False

    def row(self, noise_kind, snr_db, system) -> dict:
        for r in self.rows:
            if r["noise_kind"] == noise_kind and r["snr_db"] == snr_db and r["system"] == system:
                return r
        raise KeyError((noise_kind, snr_db, system))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: ("" if r.get(k) is None else r[k]) for k in COLUMNS})

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"columns": list(COLUMNS), "rows": self.rows, "aggregates": self.aggregates}, fh, indent=2)


def score_pair(clean: Waveform, est: Waveform, stft_cfg=None) -> dict:
    from .stft import StftConfig, stft
    cfg = stft_cfg or StftConfig()
    return {"sisdr_db": sisdr(clean, est), "stoi": stoi(clean, est, clean.sample_rate),
            "lsd_db": lsd(stft(clean, cfg), stft(est, cfg))}


def _mean_rows(items: Iterable[dict]) -> dict:
    items = list(items)
    return {k: float(np.mean([it[k] for it in items])) for k in ("sisdr_db", "stoi", "lsd_db")} | {"n": len(items)}


def evaluate(model, test_set: Sequence[dict], seen_kinds: Optional[Sequence[str]] = None) -> MetricReport:
    """Score the unprocessed mixture and (if ``model`` is given) the enhanced output.

    ``test_set`` items carry ``noisy`` and ``clean`` Waveforms plus ``noise_kind``
    and ``snr_db``.  Aggregates are reported overall and split into seen/unseen
    noise kinds when ``seen_kinds`` is given.
    """
    if not test_set:
        raise ValueError("empty test set")
    from .network import enhance

    per_cond = defaultdict(list)
    for item in test_set:
        systems = {"noisy": item["noisy"]}
        if model is not None:
            systems["enhanced"] = enhance(model, item["noisy"])
        for name, est in systems.items():
            scores = score_pair(item["clean"], est, model.cfg.stft if model is not None else None)
            per_cond[(item["noise_kind"], float(item["snr_db"]), name)].append(scores)

    report = MetricReport()
    for (kind, snr, system), scores in sorted(per_cond.items()):
        report.rows.append({"noise_kind": kind, "snr_db": snr, "system": system, "pesq": None,
                            **_mean_rows(scores)})
    systems = sorted({r["system"] for r in report.rows})
    for system in systems:
        mine = [s for (k, _, name), ss in per_cond.items() if name == system for s in ss]
        report.aggregates[f"{system}/all"] = _mean_rows(mine)
        if seen_kinds is not None:
            seen = [s for (k, _, name), ss in per_cond.items() if name == system and k in seen_kinds for s in ss]
            unseen = [s for (k, _, name), ss in per_cond.items() if name == system and k not in seen_kinds
                      for s in ss]
            if seen:
                report.aggregates[f"{system}/seen"] = _mean_rows(seen)
            if unseen:
                report.aggregates[f"{system}/unseen"] = _mean_rows(unseen)
    return report
