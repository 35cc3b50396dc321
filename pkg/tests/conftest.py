import os
import sys

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

torch.set_num_threads(1)
settings.register_profile("ci", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


def to_ct(z):
    """complex numpy array -> ComplexTensor of float64 tensors."""
    from datcftnet.complex_nn import ComplexTensor
    return ComplexTensor(torch.from_numpy(np.ascontiguousarray(z.real)), torch.from_numpy(np.ascontiguousarray(z.imag)))


def from_ct(ct):
    return ct.real.detach().numpy() + 1j * ct.imag.detach().numpy()


def numpy_params(module):
    return {k: v.detach().numpy().copy() for k, v in module.named_parameters()}


def randomize(module, seed=0, scale=0.5):
    """Double precision with N(0, scale^2) parameters (no zeros, so every path is exercised)."""
    gen = torch.Generator().manual_seed(seed)
    module.double()
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * scale)
    return module


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting ---------------------------------------------------------------

ACCEPTANCE_IDS = tuple(f"A{i}" for i in range(1, 11))
_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def accept(request):
    """``accept(criterion, ok, detail)`` records one PASS/FAIL line for the terminal summary."""
    results = request.config.stash.setdefault(_ACCEPTANCE, {})

    def report(criterion, ok, detail):
        results[criterion] = (bool(ok), detail)
        print(f"{criterion} {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return report


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_ACCEPTANCE, None)
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for cid in ACCEPTANCE_IDS:
        if cid in results:
            ok, detail = results[cid]
            terminalreporter.write_line(f"{cid:<4} {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"{cid:<4} ----  no result (not selected, or the test errored before reporting)")
