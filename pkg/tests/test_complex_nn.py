import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

import oracles
from conftest import from_ct, to_ct
from datcftnet.complex_nn import (ComplexConv2d, ComplexConvTranspose2d, ComplexDSConv2d, ComplexLayerNorm,
                                  ComplexTensor, complex_conv2d, complex_conv_transpose2d, complex_dsc_conv2d,
                                  complex_layer_norm, complex_leaky_relu, param_count_conv, param_count_dsc)


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def split(z):
    return torch.from_numpy(np.ascontiguousarray(z.real)), torch.from_numpy(np.ascontiguousarray(z.imag))


# -- complex_conv2d -------------------------------------------------------------

def test_identity_kernel_passes_input_through(rng):
    x = crandn(rng, 2, 3, 4, 5)
    w_r = torch.eye(3, dtype=torch.float64)[:, :, None, None]
    y = complex_conv2d(to_ct(x), w_r, torch.zeros_like(w_r))
    np.testing.assert_array_equal(from_ct(y), x)


def test_imaginary_unit_kernel_rotates(rng):
    x = crandn(rng, 1, 1, 3, 3)
    one = torch.ones(1, 1, 1, 1, dtype=torch.float64)
    y = complex_conv2d(to_ct(x), torch.zeros_like(one), one)
    np.testing.assert_array_equal(y.real.numpy(), -x.imag)
    np.testing.assert_array_equal(y.imag.numpy(), x.real)


def test_conv_matches_bruteforce_example(rng):
    x = crandn(rng, 2, 3, 4, 5)
    w = crandn(rng, 2, 3, 3, 3)
    b = crandn(rng, 2)
    y = complex_conv2d(to_ct(x), *split(w), *split(b), stride=1, padding=1)
    assert np.max(np.abs(from_ct(y) - oracles.conv2d(x, w, b, padding=(1, 1)))) <= 1e-10


@given(st.integers(0, 10 ** 6))
def test_conv_matches_bruteforce_random(seed):
    r = np.random.default_rng(seed)
    B, C, O = r.integers(1, 3), r.integers(1, 4), r.integers(1, 4)
    kh, kw = r.integers(1, 4, size=2)
    sh, sw = r.integers(1, 3, size=2)
    ph, pw = r.integers(0, kh), r.integers(0, kw)
    H, W = r.integers(kh, 7), r.integers(kw, 7)
    x, w, b = crandn(r, B, C, H, W), crandn(r, O, C, kh, kw), crandn(r, O)
    y = complex_conv2d(to_ct(x), *split(w), *split(b), stride=(sh, sw), padding=(ph, pw))
    ref = oracles.conv2d(x, w, b, (sh, sw), (ph, pw))
    assert np.max(np.abs(from_ct(y) - ref)) <= 1e-10


def test_conv_channel_mismatch_raises(rng):
    w = torch.zeros(2, 3, 1, 1, dtype=torch.float64)
    with pytest.raises(ValueError, match="channels"):
        complex_conv2d(to_ct(crandn(rng, 1, 2, 3, 3)), w, w)


def test_complex_linearity(rng):
    x, w = crandn(rng, 1, 2, 5, 4), crandn(rng, 3, 2, 3, 2)
    alpha = 0.7 - 1.3j
    y1 = from_ct(complex_conv2d(to_ct(alpha * x), *split(w), padding=1))
    y2 = alpha * from_ct(complex_conv2d(to_ct(x), *split(w), padding=1))
    np.testing.assert_allclose(y1, y2, atol=1e-12)


# -- transposed -----------------------------------------------------------------

def test_transposed_identity(rng):
    x = crandn(rng, 1, 2, 3, 4)
    w = torch.eye(2, dtype=torch.float64)[:, :, None, None]
    np.testing.assert_array_equal(from_ct(complex_conv_transpose2d(to_ct(x), w, torch.zeros_like(w))), x)


def test_transposed_inverts_forward_shape():
    conv = ComplexConv2d(1, 2, (5, 2), (2, 1), (2, 0))
    tconv = ComplexConvTranspose2d(2, 1, (5, 2), (2, 1), (2, 0))
    x = ComplexTensor(torch.zeros(1, 1, 257, 10), torch.zeros(1, 1, 257, 10))
    y = conv(x)
    assert y.real.shape[2] == 129
    assert tconv(y).real.shape[2] == 257


def test_transposed_is_adjoint_of_forward(rng):
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 2))
    wt = torch.from_numpy(w)
    zero = torch.zeros_like(wt)
    y_shape = complex_conv2d(to_ct(x + 0j), wt, zero, stride=(2, 1), padding=(1, 0)).real.shape
    yv = rng.standard_normal(tuple(y_shape))
    fx = complex_conv2d(to_ct(x + 0j), wt, zero, stride=(2, 1), padding=(1, 0)).real.numpy()
    # forward weight [O, C, ...] is the transposed conv's [in=O, out=C, ...] weight
    aty = complex_conv_transpose2d(to_ct(yv + 0j), wt, zero, stride=(2, 1), padding=(1, 0)).real.numpy()
    assert abs(np.sum(fx * yv) - np.sum(x * aty[:, :, :7, :6])) <= 1e-10
    assert aty.shape[2:] == (7, 6)


@given(st.integers(0, 10 ** 6))
def test_transposed_matches_scatter_oracle(seed):
    r = np.random.default_rng(seed)
    C, O = r.integers(1, 4), r.integers(1, 4)
    kh, kw = r.integers(1, 4, size=2)
    sh, sw = r.integers(1, 3, size=2)
    ph, pw = r.integers(0, kh), r.integers(0, kw)
    oph, opw = r.integers(0, sh), r.integers(0, sw)
    x, w, b = crandn(r, 1, C, r.integers(kh, 6), r.integers(kw, 6)), crandn(r, C, O, kh, kw), crandn(r, O)
    y = complex_conv_transpose2d(to_ct(x), *split(w), *split(b), (sh, sw), (ph, pw), (oph, opw))
    ref = oracles.conv_transpose2d(x, w, b, (sh, sw), (ph, pw), (oph, opw))
    assert np.max(np.abs(from_ct(y) - ref)) <= 1e-10


# -- depthwise separable -----------------------------------------------------------

def _dsc_args(r, C, O, kh, kw):
    return crandn(r, C, 1, kh, kw), crandn(r, C), crandn(r, O, C, 1, 1), crandn(r, O)


def _dsc_call(x, dw, db, pw, pb, **kw):
    return complex_dsc_conv2d(to_ct(x), *split(dw), *split(db), *split(pw), *split(pb), **kw)


def test_dsc_identity(rng):
    x = crandn(rng, 1, 3, 4, 4)
    C = 3
    dw = np.ones((C, 1, 1, 1)) + 0j
    pw = np.eye(C)[:, :, None, None] + 0j
    y = _dsc_call(x, dw, np.zeros(C) + 0j, pw, np.zeros(C) + 0j)
    np.testing.assert_allclose(from_ct(y), x, atol=1e-15)


def test_dsc_single_channel_equals_standard_conv(rng):
    x = crandn(rng, 2, 1, 6, 5)
    k = crandn(rng, 1, 1, 3, 2)
    y_dsc = _dsc_call(x, k, np.zeros(1) + 0j, np.ones((1, 1, 1, 1)) + 0j, np.zeros(1) + 0j, padding=(1, 0))
    y_std = complex_conv2d(to_ct(x), *split(k), padding=(1, 0))
    assert np.max(np.abs(from_ct(y_dsc) - from_ct(y_std))) <= 1e-12


@given(st.integers(0, 10 ** 6), st.booleans())
def test_dsc_matches_two_stage_oracle(seed, transposed):
    r = np.random.default_rng(seed)
    C, O = r.integers(1, 4), r.integers(1, 4)
    kh, kw = r.integers(1, 4, size=2)
    stride = tuple(r.integers(1, 3, size=2))
    pad = (r.integers(0, kh), r.integers(0, kw))
    opad = (r.integers(0, stride[0]), r.integers(0, stride[1])) if transposed else (0, 0)
    H, W = r.integers(kh, 7), r.integers(kw, 7)
    x = crandn(r, 1, C, H, W)
    args = _dsc_args(r, C, O, kh, kw)
    y = _dsc_call(x, *args, stride=stride, padding=pad, transposed=transposed, output_padding=opad)
    ref = oracles.dsc2d(x, *args, stride, pad, transposed, opad)
    assert np.max(np.abs(from_ct(y) - ref)) <= 1e-10


def test_dsc_channel_mismatch_raises(rng):
    args = _dsc_args(rng, 3, 2, 1, 1)
    with pytest.raises(ValueError):
        _dsc_call(crandn(rng, 1, 2, 3, 3), *args)


# -- parameter counts -------------------------------------------------------------

def test_param_count_example_16_32_3x3():
    conv_w = param_count_conv(16, 32, 3) - 2 * 32
    dsc_w = param_count_dsc(16, 32, 3) - 2 * 32 - 2 * 16
    assert conv_w == 9216
    assert dsc_w == 1312
    assert round(conv_w / dsc_w, 1) == 7.0


def test_param_count_degenerate_single_channel():
    # At C_in = C_out = 1, k = 1x1 both layers compute one complex scale, but the stated DSC
    # formula still counts a depthwise and a pointwise complex weight: 2 vs 2 + 2.
    assert param_count_conv(1, 1, 1) - 2 == 2
    assert param_count_dsc(1, 1, 1) - 2 - 2 == 4


@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 5), st.integers(1, 5))
def test_param_counts_match_enumeration(c_in, c_out, kf, kt):
    conv = ComplexConv2d(c_in, c_out, (kf, kt))
    tconv = ComplexConvTranspose2d(c_in, c_out, (kf, kt))
    dsc = ComplexDSConv2d(c_in, c_out, (kf, kt))
    assert sum(p.numel() for p in conv.parameters()) == param_count_conv(c_in, c_out, (kf, kt))
    assert sum(p.numel() for p in tconv.parameters()) == param_count_conv(c_in, c_out, (kf, kt))
    assert sum(p.numel() for p in dsc.parameters()) == param_count_dsc(c_in, c_out, (kf, kt))


# -- activation and normalisation ---------------------------------------------------

def test_leaky_positive_identity_negative_scaled(rng):
    x = np.abs(crandn(rng, 1, 2, 3, 3).real) + 1j * np.abs(crandn(rng, 1, 2, 3, 3).imag)
    np.testing.assert_array_equal(from_ct(complex_leaky_relu(to_ct(x))), x)
    np.testing.assert_allclose(from_ct(complex_leaky_relu(to_ct(-x))), -0.1 * x, rtol=0, atol=0)


def test_leaky_mixed_matches_scalar_oracle(rng):
    x = crandn(rng, 2, 3, 4, 5)
    np.testing.assert_array_equal(from_ct(complex_leaky_relu(to_ct(x))), oracles.leaky(x))


def _ln(x, channels):
    one, zero = torch.ones(channels, dtype=torch.float64), torch.zeros(channels, dtype=torch.float64)
    return from_ct(complex_layer_norm(to_ct(x), one, zero, one, zero))


def test_norm_constant_input_is_zero(rng):
    x = np.full((1, 3, 4, 2), 2.5 - 1.5j)
    np.testing.assert_allclose(_ln(x, 3), 0.0, atol=1e-12)


def test_norm_unit_variance_per_group(rng):
    x = 3.0 * crandn(rng, 2, 4, 5, 3) + 1.0
    y = _ln(x, 4)
    for part in (y.real, y.imag):
        np.testing.assert_allclose(part.mean(axis=(1, 2)), 0.0, atol=1e-12)
        # eps = 1e-5 inside the sqrt shrinks the variance by var / (var + eps)
        np.testing.assert_allclose(part.var(axis=(1, 2)), 1.0, atol=1e-5)


def test_norm_scale_equivariance(rng):
    x = crandn(rng, 1, 3, 4, 4) * 10
    np.testing.assert_allclose(_ln(x, 3), _ln(2 * x, 3), atol=1e-6)


def test_norm_matches_loop_oracle(rng):
    norm = ComplexLayerNorm(3).double()
    with torch.no_grad():
        for p in norm.parameters():
            p.copy_(torch.from_numpy(rng.standard_normal(3)))
    x = crandn(rng, 2, 3, 4, 5)
    ref = oracles.complex_layer_norm(x, *(getattr(norm, n).detach().numpy()
                                          for n in ("gamma_real", "beta_real", "gamma_imag", "beta_imag")))
    np.testing.assert_allclose(from_ct(norm(to_ct(x))), ref, atol=1e-12)
