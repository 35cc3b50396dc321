#!/usr/bin/env python3
"""Numba vs numpy timings for the DSP kernels (overlap-add, band envelopes, n-of-m, STOI core).

    python benchmarks/bench_kernels.py [--repeat 5] [--seconds 10]

Each kernel is called once per backend before timing so JIT compilation is
excluded.  Outputs are checked for agreement before anything is reported.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from datcftnet import kernels
from datcftnet.electrodogram import AceConfig


def _workloads(seconds: float, rng):
    fs = 16000
    n_frames_stft = int(seconds * fs / 256)
    frames = rng.standard_normal((n_frames_stft, 512))
    cfg = AceConfig()
    n_ace = int(seconds * cfg.channel_rate)
    mag = np.abs(rng.standard_normal((65, n_ace)))
    env = rng.random((22, n_ace))
    n_tob = int(seconds * 10000 / 128)
    x_tob = np.abs(rng.standard_normal((15, n_tob)))
    y_tob = x_tob + 0.3 * np.abs(rng.standard_normal((15, n_tob)))
    return {
        "overlap_add": lambda b: kernels.overlap_add(frames, 256, backend=b),
        "band_envelopes": lambda b: kernels.band_envelopes(mag, cfg.band_starts, np.array(cfg.band_bins), backend=b),
        "select_maxima": lambda b: kernels.select_maxima(env, 8, backend=b),
        "stoi_correlation": lambda b: kernels.stoi_correlation(x_tob, y_tob, 30, 10 ** 0.75, backend=b),
    }


def _best_of(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seconds", type=float, default=10.0, help="audio duration the workloads correspond to")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<18} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, fn in _workloads(args.seconds, rng).items():
        a, b = fn("numpy"), fn("numba")
        if not np.allclose(a, b, rtol=1e-10, atol=1e-12):
            raise SystemExit(f"{name}: backends disagree")
        t_np = _best_of(lambda: fn("numpy"), args.repeat)
        t_nb = _best_of(lambda: fn("numba"), args.repeat)
        print(f"{name:<18} {1e3 * t_np:>10.3f} {1e3 * t_nb:>10.3f} {t_np / t_nb:>7.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
