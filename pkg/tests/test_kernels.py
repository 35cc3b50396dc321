import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from datcftnet import _accel, kernels
from datcftnet.electrodogram import AceConfig

BACKENDS = ["numpy"] + (["numba"] if _accel.HAVE_NUMBA else [])
CFG = AceConfig()


@given(st.integers(1, 8), st.integers(2, 16), st.data())
def test_overlap_add_backends_agree_with_loop(n_frames, frame_len, data):
    hop = data.draw(st.integers(1, frame_len))
    frames = data.draw(arrays(np.float64, (n_frames, frame_len), elements=st.floats(-10, 10)))
    ref = np.zeros((n_frames - 1) * hop + frame_len)
    for i in range(n_frames):
        ref[i * hop:i * hop + frame_len] += frames[i]
    for b in BACKENDS:
        np.testing.assert_allclose(kernels.overlap_add(frames, hop, backend=b), ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
def test_band_envelopes_root_sum_square(backend, rng):
    mag = np.abs(rng.standard_normal((65, 40)))
    env = kernels.band_envelopes(mag, CFG.band_starts, np.array(CFG.band_bins), backend=backend)
    for b, (s, w) in enumerate(zip(CFG.band_starts, CFG.band_bins)):
        np.testing.assert_allclose(env[b], np.sqrt((mag[s:s + w] ** 2).sum(axis=0)), rtol=1e-12)


@given(arrays(np.float64, (22, 6), elements=st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0])), st.integers(1, 22))
def test_select_maxima_backends_agree(env, n):
    outs = [kernels.select_maxima(env, n, backend=b) for b in BACKENDS]
    assert all(np.array_equal(outs[0], o) for o in outs)
    assert np.all(outs[0].sum(axis=0) == n)


@given(st.integers(30, 60), st.integers(0, 2 ** 16))
def test_stoi_correlation_backends_agree(n_frames, seed):
    r = np.random.default_rng(seed)
    x = np.abs(r.standard_normal((15, n_frames)))
    y = x + 0.5 * np.abs(r.standard_normal((15, n_frames)))
    vals = [kernels.stoi_correlation(x, y, 30, 10 ** 0.75, backend=b) for b in BACKENDS]
    assert all(abs(v - vals[0]) <= 1e-10 for v in vals)
    assert -1 <= vals[0] <= 1


def test_stoi_correlation_identity_is_one(rng):
    x = np.abs(rng.standard_normal((15, 40))) + 0.1
    for b in BACKENDS:
        assert kernels.stoi_correlation(x, x, 30, 10 ** 0.75, backend=b) == pytest.approx(1.0, abs=1e-9)


def test_stoi_correlation_too_short(rng):
    with pytest.raises(ValueError):
        kernels.stoi_correlation(np.ones((15, 10)), np.ones((15, 10)), 30, 1.0)


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.overlap_add(np.ones((2, 4)), 2, backend="cuda")


@pytest.mark.parametrize("flag,expected", [("1", "False"), ("0", str(_accel.HAVE_NUMBA))])
def test_env_flag_selects_fallback(flag, expected):
    env = dict(os.environ, DATCFTNET_DISABLE_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", "from datcftnet import _accel; print(_accel.USE_NUMBA)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == expected


def test_benchmark_runs():
    script = os.path.join(os.path.dirname(__file__), "..", "benchmarks", "bench_kernels.py")
    out = subprocess.run([sys.executable, script, "--repeat", "1", "--seconds", "0.5"], capture_output=True,
                         text=True, check=True)
    for name in ("overlap_add", "band_envelopes", "select_maxima", "stoi_correlation"):
        assert name in out.stdout
