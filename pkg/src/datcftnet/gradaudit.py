"""Central finite-difference audit of autograd gradients on tiny double-precision instances."""
from __future__ import annotations

from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch

from .complex_nn import (ComplexConv2d, ComplexConvTranspose2d, ComplexDSConv2d, ComplexLayerNorm,
                         ComplexTensor, complex_leaky_relu)
from .dat_rnn import DatRnnBlock, MaskHead, RecurrentEncoder, attention, mask_and_enhance
from .ftb import FTB

DEFAULT_DIMS = {"batch": 1, "channels": 2, "out_channels": 3, "freq": 5, "time": 4,
                "d": 4, "h": 3, "T": 6, "P": 4, "steps": 4}


def _randn(gen, *shape):
    return torch.randn(*shape, generator=gen, dtype=torch.float64)


def _complex_input(gen, dims):
    shape = (dims["batch"], dims["channels"], dims["freq"], dims["time"])
    return [_randn(gen, *shape), _randn(gen, *shape)]


def _seeded(module: torch.nn.Module, gen) -> torch.nn.Module:
    module = module.double()
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(_randn(gen, *p.shape) * 0.5)
    return module


def _case(module_id: str, dims: dict, gen) -> Tuple[Callable, List[torch.Tensor], torch.nn.Module]:
    """Returns (fn(*inputs) -> tensor or tuple of tensors, inputs, module owning parameters)."""
    C, Co = dims["channels"], dims["out_channels"]
    if module_id == "complex_conv2d":
        m = _seeded(ComplexConv2d(C, Co, (3, 2), (2, 1), (1, 1)), gen)
        return lambda r, i: m(ComplexTensor(r, i)), _complex_input(gen, dims), m
    if module_id == "complex_transposed_conv2d":
        m = _seeded(ComplexConvTranspose2d(C, Co, (3, 2), (2, 1), (1, 0)), gen)
        return lambda r, i: m(ComplexTensor(r, i)), _complex_input(gen, dims), m
    if module_id == "dsc":
        m = _seeded(ComplexDSConv2d(C, Co, (3, 2), (2, 1), (1, 0)), gen)
        return lambda r, i: m(ComplexTensor(r, i)), _complex_input(gen, dims), m
    if module_id == "activation":
        m = torch.nn.Module()
        return lambda r, i: complex_leaky_relu(ComplexTensor(r, i)), _complex_input(gen, dims), m
    if module_id == "norm":
        m = _seeded(ComplexLayerNorm(C), gen)
        return lambda r, i: m(ComplexTensor(r, i)), _complex_input(gen, dims), m
    if module_id == "ftb":
        m = _seeded(FTB(C, dims["freq"]), gen)
        return lambda r, i: m(ComplexTensor(r, i)), _complex_input(gen, dims), m
    d, steps = dims["d"], dims["steps"]
    if module_id == "attention":
        m = torch.nn.Module()

        def fn(hk, hq):
            w0, c0 = attention(hk, hq, causal=False)
            w1, c1 = attention(hk, hq, causal=True)
            return w0, c0, w1, c1
        return fn, [_randn(gen, 2, steps, d), _randn(gen, 2, steps, d)], m
    if module_id == "mask_and_enhance":
        m = _seeded(MaskHead(d), gen)
        inputs = [_randn(gen, 2, steps, d) for _ in range(3)]
        return lambda c, hq, x: mask_and_enhance(c, hq, x, m), inputs, m
    if module_id == "rnn_encode":
        m = _seeded(RecurrentEncoder(d, dims["h"], bidirectional=True), gen)
        return lambda x: m(x)[:2], [_randn(gen, 2, steps, d)], m
    if module_id == "dat_rnn":
        m = _seeded(DatRnnBlock(d, dims["h"], dims["P"]), gen)
        return lambda x: m(x), [_randn(gen, dims["batch"], d, dims["T"])], m
    if module_id == "network":
        from .network import ModelConfig, build
        from .stft import StftConfig
        cfg = ModelConfig(variant=dims.get("variant", "f"), encoder_channels=[2, 2], kernel=(3, 2),
                          datrnn_blocks=1, chunk_len=dims["P"], lstm_hidden=2, bottleneck_dim=d,
                          stft=StftConfig(frame_len=16, hop=8, fft_size=16))
        m = _seeded(build(cfg), gen)
        F = cfg.stft.n_bins
        return lambda r, i: m(r, i), [_randn(gen, 1, F, dims["T"]), _randn(gen, 1, F, dims["T"])], m
    raise KeyError(f"unknown module {module_id!r}; choose from {MODULES}")


MODULES = ("complex_conv2d", "complex_transposed_conv2d", "dsc", "activation", "norm", "ftb",
           "attention", "mask_and_enhance", "rnn_encode", "dat_rnn", "network")


def _flatten(out) -> List[torch.Tensor]:
    if isinstance(out, torch.Tensor):
        return [out]
    result = []
    for o in out:
        result.extend(_flatten(o))
    return result


def _rel_error(a: np.ndarray, n: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def gradient_errors(module_id: str, dims: Optional[dict] = None, eps: float = 1e-5,
                    seed: int = 0) -> Dict[str, float]:
    """Relative error ||analytic - numeric|| / max(||analytic||, ||numeric||) per input/parameter tensor.

    The scalar objective is a fixed random projection of every output element.
    """
    dims = {**DEFAULT_DIMS, **(dims or {})}
    gen = torch.Generator().manual_seed(seed)
    fn, inputs, module = _case(module_id, dims, gen)
    inputs = [x.clone().requires_grad_(True) for x in inputs]
    outs = _flatten(fn(*inputs))
    proj = [_randn(gen, *o.shape) for o in outs]

    def objective():
        return sum((o * p).sum() for o, p in zip(_flatten(fn(*inputs)), proj))

    tensors = {f"input{i}": x for i, x in enumerate(inputs)}
    tensors.update(dict(module.named_parameters()))
    for t in tensors.values():
        t.grad = None
    objective().backward()
    analytic = {k: (t.grad.detach().numpy().copy() if t.grad is not None else np.zeros(t.shape))
                for k, t in tensors.items()}

    errors = {}
    with torch.no_grad():
        for name, t in tensors.items():
            flat = t.view(-1)
            numeric = np.zeros(flat.numel())
            for k in range(flat.numel()):
                orig = float(flat[k])
                flat[k] = orig + eps
                fp = float(objective())
                flat[k] = orig - eps
                fm = float(objective())
                flat[k] = orig
                numeric[k] = (fp - fm) / (2 * eps)
            errors[name] = _rel_error(analytic[name].reshape(-1), numeric)
    return errors


def grad_audit(module_id: str, dims: Optional[dict] = None, eps: float = 1e-5, seed: int = 0) -> float:
    """Worst relative gradient error over every input and parameter tensor of a tiny instance."""
    return max(gradient_errors(module_id, dims, eps, seed).values())


def parse_dims(text: Optional[str]) -> dict:
    """``"d=4,T=6"`` -> ``{"d": 4, "T": 6}``."""
    if not text:
        return {}
    out = {}
    for item in text.split(","):
        key, _, val = item.partition("=")
        if not val:
            raise ValueError(f"bad dims entry {item!r}; expected key=value")
        key = key.strip()
        out[key] = val.strip() if key == "variant" else int(val)
    return out
