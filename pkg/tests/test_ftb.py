import numpy as np
import pytest
import torch

import oracles
from conftest import from_ct, numpy_params, randomize, to_ct
from datcftnet.complex_nn import ComplexTensor
from datcftnet.ftb import FTB, apply_freq_fc, ftb_forward
from datcftnet.gradaudit import grad_audit


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def identity_block(C, F):
    blk = FTB(C, F).double()
    with torch.no_grad():
        for p in blk.parameters():
            p.zero_()
        blk.freq_fc.copy_(torch.eye(F, dtype=torch.float64))
        # large output bias saturates the sigmoid attention to 1
        blk.attn_conv_out.bias_real.fill_(60.0)
        blk.attn_conv_out.bias_imag.fill_(60.0)
        blk.concat_conv.weight_real[:, :C, 0, 0] = torch.eye(C, dtype=torch.float64)
    return blk


def test_identity_configuration_returns_input(rng):
    x = crandn(rng, 2, 3, 7, 4)
    y = from_ct(ftb_forward(to_ct(x), identity_block(3, 7)))
    np.testing.assert_allclose(y, x, atol=1e-12)


def test_averaging_matrix_spreads_every_bin(rng):
    C, F, T = 2, 6, 3
    blk = randomize(FTB(C, F), seed=1)
    with torch.no_grad():
        blk.freq_fc.fill_(1.0 / F)
    x = crandn(rng, 1, C, F, T)
    base = from_ct(blk(to_ct(x)))
    for f in range(F):
        x2 = x.copy()
        x2[0, :, f, :] += 0.5
        delta = np.abs(from_ct(blk(to_ct(x2))) - base).sum(axis=(0, 1, 3))
        assert np.all(delta > 1e-8), f"perturbing bin {f} left some output bins untouched"


def test_single_bin_input_spreads_across_bins(rng):
    C, F = 2, 8
    blk = randomize(FTB(C, F), seed=2)
    with torch.no_grad():
        for conv in (blk.attn_conv_in, blk.attn_conv_out, blk.concat_conv):
            conv.bias_real.zero_()
            conv.bias_imag.zero_()
    x = np.zeros((1, C, F, 3), dtype=complex)
    x[0, :, 3, :] = crandn(rng, C, 3)
    y = from_ct(blk(to_ct(x)))
    assert np.all(np.abs(y[0]).sum(axis=(0, 2)) > 1e-8)


@pytest.mark.parametrize("order", ["attention_first", "matrix_first"])
def test_matches_reference_composition(rng, order):
    blk = randomize(FTB(3, 5, order=order), seed=3)
    x = crandn(rng, 2, 3, 5, 4)
    p = numpy_params(blk)
    ref = oracles.ftb(x, {f"b.{k}": v for k, v in p.items()}, "b", order)
    np.testing.assert_allclose(from_ct(blk(to_ct(x))), ref, atol=1e-12)


@pytest.mark.parametrize("C,F,T", [(1, 3, 1), (2, 9, 5), (5, 17, 2)])
def test_shape_preserved(rng, C, F, T):
    blk = randomize(FTB(C, F), seed=0)
    assert blk(to_ct(crandn(rng, 2, C, F, T))).real.shape == (2, C, F, T)


def test_jacobian_dense_along_frequency(rng):
    C, F = 2, 5
    blk = randomize(FTB(C, F), seed=4)
    x = torch.tensor(rng.standard_normal((1, C, F, 2)), requires_grad=True)
    xi = torch.tensor(rng.standard_normal((1, C, F, 2)))
    jac = torch.autograd.functional.jacobian(lambda r: blk(ComplexTensor(r, xi)).real, x)
    # [out: 1, C, F, T, in: 1, C, F, T] -> F x F magnitude
    ff = jac.abs().sum(dim=(0, 1, 3, 4, 5, 7))
    assert torch.all(ff > 0)


def test_frequency_mismatch_raises(rng):
    with pytest.raises(ValueError, match="freq"):
        apply_freq_fc(to_ct(crandn(rng, 1, 1, 4, 2)), torch.eye(5, dtype=torch.float64))


def test_unknown_order_rejected():
    with pytest.raises(ValueError):
        FTB(2, 4, order="sideways")


def test_default_attention_channels():
    assert FTB(16, 5).attn_channels == 4
    assert FTB(4, 5).attn_channels == 2


def test_gradient_audit():
    assert grad_audit("ftb") <= 1e-4
