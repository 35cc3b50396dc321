"""Parameter containers and training checkpoints (``.npz``, no pickles).

Keys:
    ``param/<layer path>``            parameter arrays
    ``optim/<layer path>/<slot>``     optimiser state (exp_avg, exp_avg_sq, step)
    ``__meta__``                      JSON: format version, model config, epoch, history, ...
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

FORMAT_VERSION = 1


def state_arrays(model: torch.nn.Module) -> Dict[str, np.ndarray]:
    return {name: p.detach().cpu().numpy().copy() for name, p in model.named_parameters()}


def save_params(path, model, meta: Optional[dict] = None) -> None:
    arrays = {f"param/{k}": v for k, v in state_arrays(model).items()}
    meta = dict(meta or {}, format_version=FORMAT_VERSION)
    if hasattr(model, "cfg"):
        meta.setdefault("model_config", model.cfg.to_dict())
    np.savez(path, __meta__=np.array(json.dumps(meta)), **arrays)


def load_params_into(model, arrays: Dict[str, np.ndarray]) -> None:
    named = dict(model.named_parameters())
    missing = set(named) - set(arrays)
    extra = set(arrays) - set(named)
    if missing or extra:
        raise ValueError(f"parameter mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
    with torch.no_grad():
        for name, p in named.items():
            a = arrays[name]
            if tuple(a.shape) != tuple(p.shape):
                raise ValueError(f"{name}: shape {a.shape} != {tuple(p.shape)}")
            p.copy_(torch.from_numpy(a))


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    model_config: dict
    epoch: int = 0
    step: int = 0
    optimizer: Dict[str, np.ndarray] = field(default_factory=dict)
    lr: Optional[float] = None
    history: List[dict] = field(default_factory=list)
    train_config: Optional[dict] = None
    extra: dict = field(default_factory=dict)

    def save(self, path) -> None:
        meta = {"format_version": FORMAT_VERSION, "model_config": self.model_config, "epoch": self.epoch,
                "step": self.step, "lr": self.lr, "history": self.history,
                "train_config": self.train_config, "extra": self.extra}
        arrays = {f"param/{k}": v for k, v in self.params.items()}
        arrays.update({f"optim/{k}": v for k, v in self.optimizer.items()})
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        np.savez(path, __meta__=np.array(json.dumps(meta)), **arrays)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            if meta.get("format_version") != FORMAT_VERSION:
                raise ValueError(f"{path}: unsupported format version {meta.get('format_version')}")
            params = {k[6:]: z[k] for k in z.files if k.startswith("param/")}
            optim = {k[6:]: z[k] for k in z.files if k.startswith("optim/")}
        return cls(params=params, model_config=meta["model_config"], epoch=meta.get("epoch", 0),
                   step=meta.get("step", 0), optimizer=optim, lr=meta.get("lr"),
                   history=meta.get("history", []), train_config=meta.get("train_config"),
                   extra=meta.get("extra", {}))

    def build_model(self, dtype=None):
        """Rebuild the network in the dtype it was trained in (float64 if unrecorded)."""
        from .network import ModelConfig, build
        if dtype is None:
            dtype = {"float32": torch.float32}.get(self.extra.get("dtype"), torch.float64)
        model = build(ModelConfig.from_dict(self.model_config)).to(dtype)
        load_params_into(model, {k: v for k, v in self.params.items()})
        return model


def optimizer_arrays(model, opt: torch.optim.Optimizer) -> Dict[str, np.ndarray]:
    out = {}
    for name, p in model.named_parameters():
        st = opt.state.get(p)
        if not st:
            continue
        for slot, val in st.items():
            out[f"{name}/{slot}"] = val.detach().cpu().numpy().copy() if torch.is_tensor(val) else np.array(val)
    return out


def restore_optimizer(model, opt: torch.optim.Optimizer, arrays: Dict[str, np.ndarray]) -> None:
    for name, p in model.named_parameters():
        slots = {k.split("/")[-1]: v for k, v in arrays.items() if k.rsplit("/", 1)[0] == name}
        if slots:
            opt.state[p] = {s: torch.from_numpy(np.array(v)) for s, v in slots.items()}
