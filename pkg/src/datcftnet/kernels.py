"""Hot DSP loops: overlap-add, band envelopes, n-of-m selection, STOI correlation.

Every kernel has a numba implementation (``_*_nb``) and a vectorised numpy
implementation (``_*_np``).  The public wrappers dispatch on
:data:`datcftnet._accel.USE_NUMBA`; pass ``backend="numpy"`` or
``backend="numba"`` to pin one explicitly (tests and the benchmark do).
"""
import numpy as np

from . import _accel
from ._accel import njit

EPS = np.finfo(np.float64).eps


def _pick(backend):
    if backend is None:
        return "numba" if _accel.USE_NUMBA else "numpy"
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "numba" and not _accel.HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    return backend


# -- overlap-add --------------------------------------------------------------

@njit
def _overlap_add_nb(frames, hop):
    n_frames, frame_len = frames.shape
    out = np.zeros((n_frames - 1) * hop + frame_len)
    for i in range(n_frames):
        start = i * hop
        for k in range(frame_len):
            out[start + k] += frames[i, k]
    return out


def _overlap_add_np(frames, hop):
    n_frames, frame_len = frames.shape
    out = np.zeros((n_frames - 1) * hop + frame_len)
    idx = (np.arange(n_frames)[:, None] * hop + np.arange(frame_len)[None, :]).ravel()
    np.add.at(out, idx, frames.ravel())
    return out


def overlap_add(frames, hop, backend=None):
    """Sum ``frames`` (n_frames x frame_len) at multiples of ``hop``."""
    frames = np.ascontiguousarray(frames, dtype=np.float64)
    if _pick(backend) == "numba":
        return _overlap_add_nb(frames, int(hop))
    return _overlap_add_np(frames, int(hop))


# -- filterbank envelopes -------------------------------------------------------

@njit
def _band_envelopes_nb(mag, starts, widths):
    n_bands = starts.shape[0]
    n_frames = mag.shape[1]
    env = np.zeros((n_bands, n_frames))
    for b in range(n_bands):
        for t in range(n_frames):
            acc = 0.0
            for k in range(starts[b], starts[b] + widths[b]):
                acc += mag[k, t] * mag[k, t]
            env[b, t] = np.sqrt(acc)
    return env


def _band_envelopes_np(mag, starts, widths):
    power = mag * mag
    env = np.empty((starts.shape[0], mag.shape[1]))
    for b, (s, w) in enumerate(zip(starts, widths)):
        env[b] = power[s:s + w].sum(axis=0)
    return np.sqrt(env)


def band_envelopes(mag, starts, widths, backend=None):
    """Root-sum-square of ``mag`` rows over contiguous bin groups."""
    mag = np.ascontiguousarray(mag, dtype=np.float64)
    starts = np.asarray(starts, dtype=np.int64)
    widths = np.asarray(widths, dtype=np.int64)
    if _pick(backend) == "numba":
        return _band_envelopes_nb(mag, starts, widths)
    return _band_envelopes_np(mag, starts, widths)


# -- n-of-m selection ---------------------------------------------------------

@njit
def _select_maxima_nb(env_t, n):
    # env_t is frame-major [frames, m]; channel k is kept when fewer than n channels
    # outrank it, where j outranks k if larger, or equal with a lower index
    n_frames, m = env_t.shape
    sel = np.zeros((n_frames, m), dtype=np.bool_)
    for t in range(n_frames):
        for k in range(m):
            v = env_t[t, k]
            rank = 0
            for j in range(m):
                w = env_t[t, j]
                rank += (w > v) or (w == v and j < k)
            sel[t, k] = rank < n
    return sel


def _select_maxima_np(env, n):
    order = np.argsort(-env, axis=0, kind="stable")[:n]
    sel = np.zeros(env.shape, dtype=bool)
    np.put_along_axis(sel, order, True, axis=0)
    return sel


def select_maxima(env, n, backend=None):
    """Boolean mask of the ``n`` largest entries per column; ties go to the lower row."""
    env = np.ascontiguousarray(env, dtype=np.float64)
    if not 1 <= n <= env.shape[0]:
        raise ValueError(f"n={n} outside [1, {env.shape[0]}]")
    if _pick(backend) == "numba":
        return _select_maxima_nb(np.ascontiguousarray(env.T), int(n)).T
    return _select_maxima_np(env, int(n))


# -- STOI intermediate intelligibility ------------------------------------------

@njit
def _stoi_corr_nb(x_tob, y_tob, seg_len, clip):
    n_bands, n_frames = x_tob.shape
    n_seg = n_frames - seg_len + 1
    total = 0.0
    xs = np.empty(seg_len)
    ys = np.empty(seg_len)
    for m in range(n_seg):
        for j in range(n_bands):
            nx = 0.0
            ny = 0.0
            for k in range(seg_len):
                xs[k] = x_tob[j, m + k]
                ys[k] = y_tob[j, m + k]
                nx += xs[k] * xs[k]
                ny += ys[k] * ys[k]
            scale = np.sqrt(nx) / (np.sqrt(ny) + EPS)
            mx = 0.0
            my = 0.0
            for k in range(seg_len):
                v = ys[k] * scale
                lim = xs[k] * (1.0 + clip)
                ys[k] = v if v < lim else lim
                mx += xs[k]
                my += ys[k]
            mx /= seg_len
            my /= seg_len
            sxx = 0.0
            syy = 0.0
            sxy = 0.0
            for k in range(seg_len):
                a = xs[k] - mx
                b = ys[k] - my
                sxx += a * a
                syy += b * b
                sxy += a * b
            total += sxy / ((np.sqrt(sxx) + EPS) * (np.sqrt(syy) + EPS))
    return total / (n_seg * n_bands)


def _stoi_corr_np(x_tob, y_tob, seg_len, clip):
    n_frames = x_tob.shape[1]
    idx = np.arange(n_frames - seg_len + 1)[:, None] + np.arange(seg_len)[None, :]
    xs = x_tob[:, idx].transpose(1, 0, 2)  # segments x bands x seg_len
    ys = y_tob[:, idx].transpose(1, 0, 2)
    scale = np.linalg.norm(xs, axis=2, keepdims=True) / (np.linalg.norm(ys, axis=2, keepdims=True) + EPS)
    ys = np.minimum(ys * scale, xs * (1.0 + clip))
    xs = xs - xs.mean(axis=2, keepdims=True)
    ys = ys - ys.mean(axis=2, keepdims=True)
    xs = xs / (np.linalg.norm(xs, axis=2, keepdims=True) + EPS)
    ys = ys / (np.linalg.norm(ys, axis=2, keepdims=True) + EPS)
    return float(np.mean(np.sum(xs * ys, axis=2)))


def stoi_correlation(x_tob, y_tob, seg_len, clip, backend=None):
    """Mean clipped, normalised correlation over all (segment, band) pairs."""
    x_tob = np.ascontiguousarray(x_tob, dtype=np.float64)
    y_tob = np.ascontiguousarray(y_tob, dtype=np.float64)
    if x_tob.shape[1] < seg_len:
        raise ValueError("fewer frames than one analysis segment")
    if _pick(backend) == "numba":
        return float(_stoi_corr_nb(x_tob, y_tob, int(seg_len), float(clip)))
    return _stoi_corr_np(x_tob, y_tob, int(seg_len), float(clip))
