"""Loss, Adam training loop with plateau LR halving, checkpoints, overfit harness."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from .checkpoint import Checkpoint, optimizer_arrays, restore_optimizer, state_arrays
from .evaluation import lsd, sisdr, sisdr_torch, stoi
from .network import DatCftNet, ModelConfig, build, enhance
from .signal_io import Waveform, make_noise, mix_at_snr
from .stft import StftConfig, istft_torch, stft_torch

log = logging.getLogger(__name__)

LOSS_MODES = ("combined", "waveform", "spectral")
DTYPES = {"float32": torch.float32, "float64": torch.float64}
METRIC_COLUMNS = ("epoch", "split", "loss", "sisdr", "stoi", "lsd")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    lr_patience: int = 3
    grad_clip_norm: float = 5.0
    batch: int = 4
    epochs: int = 10
    loss_alpha: float = 0.3
    loss_mode: str = "combined"
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.loss_alpha <= 1.0:
            raise ValueError("loss_alpha must lie in [0, 1]")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {tuple(DTYPES)}")
        if self.batch < 1 or self.epochs < 0:
            raise ValueError("batch must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _mag(spec: Tuple[torch.Tensor, torch.Tensor]) -> torch.Tensor:
    re, im = spec
    return torch.sqrt(re * re + im * im + 1e-12)


def loss(enh_wave, clean_wave, enh_spec, clean_spec, alpha: float = 0.3, mode: str = "combined",
         sample_mask=None, frame_mask=None) -> torch.Tensor:
    """-SISDR/10 + alpha * L1(|enh_spec|, |clean_spec|), averaged over the batch.

    Waves are ``[batch, samples]`` tensors, spectra ``(real, imag)`` pairs of
    ``[batch, bins, frames]``; masks mark valid (unpadded) samples and frames.
    """
    clean_e = (clean_wave ** 2 if sample_mask is None else (clean_wave * sample_mask) ** 2).sum(-1)
    if torch.any(clean_e == 0):
        raise ValueError("clean reference has zero energy")
    wave_term = -sisdr_torch(clean_wave, enh_wave, sample_mask).mean() / 10.0
    diff = (_mag(enh_spec) - _mag(clean_spec)).abs()
    if frame_mask is not None:
        fm = frame_mask[:, None, :].to(diff.dtype)
        spec_term = (diff * fm).sum() / (fm.sum() * diff.shape[1])
    else:
        spec_term = diff.mean()
    if mode == "waveform":
        return wave_term
    if mode == "spectral":
        return spec_term
    return wave_term + alpha * spec_term


# -- batching -------------------------------------------------------------------

def collate(pairs: Sequence[Tuple[Waveform, Waveform]], cfg: StftConfig, dtype):
    lengths = [len(n) for n, _ in pairs]
    L = max(lengths)
    noisy = torch.zeros(len(pairs), L, dtype=dtype)
    clean = torch.zeros(len(pairs), L, dtype=dtype)
    for i, (n, c) in enumerate(pairs):
        noisy[i, :len(n)] = torch.as_tensor(n.samples, dtype=dtype)
        clean[i, :len(c)] = torch.as_tensor(c.samples, dtype=dtype)
    smask = (torch.arange(L)[None, :] < torch.tensor(lengths)[:, None]).to(dtype)
    n_frames = cfg.n_frames(L)
    fcounts = torch.tensor([cfg.n_frames(n) for n in lengths])
    fmask = torch.arange(n_frames)[None, :] < fcounts[:, None]
    return noisy, clean, smask, fmask


def batch_loss(model: DatCftNet, batch, tcfg: TrainConfig) -> torch.Tensor:
    noisy, clean, smask, fmask = batch
    cfg = model.cfg.stft
    n_spec = stft_torch(noisy, cfg)
    c_spec = stft_torch(clean, cfg)
    e_spec = model(*n_spec)
    e_wave = istft_torch(*e_spec, cfg, noisy.shape[-1])
    return loss(e_wave, clean, e_spec, c_spec, tcfg.loss_alpha, tcfg.loss_mode, smask, fmask)


def clip_gradients(params, max_norm: float) -> float:
    """Clip in place to global norm ``max_norm``; returns the pre-clip norm."""
    return float(torch.nn.utils.clip_grad_norm_(list(params), max_norm))


def train_step(model, opt, batch, tcfg: TrainConfig) -> Tuple[float, float]:
    opt.zero_grad()
    value = batch_loss(model, batch, tcfg)
    if not torch.isfinite(value):
        raise FloatingPointError("non-finite training loss")
    value.backward()
    norm = clip_gradients(model.parameters(), tcfg.grad_clip_norm)
    opt.step()
    return float(value.detach()), norm


# -- epoch loop -----------------------------------------------------------------

def _validation_metrics(model, val_set, tcfg) -> dict:
    dt = DTYPES[tcfg.dtype]
    with torch.no_grad():
        losses = [float(batch_loss(model, collate([p], model.cfg.stft, dt), tcfg)) for p in val_set]
    s, o, d = [], [], []
    from .stft import stft
    for noisy, clean in val_set:
        est = enhance(model, noisy)
        s.append(sisdr(clean, est))
        try:
            o.append(stoi(clean, est, clean.sample_rate))
        except ValueError:
            pass
        d.append(lsd(stft(clean, model.cfg.stft), stft(est, model.cfg.stft)))
    return {"loss": float(np.mean(losses)), "sisdr": float(np.mean(s)),
            "stoi": float(np.mean(o)) if o else float("nan"), "lsd": float(np.mean(d))}


def _snapshot(model, opt, epoch, step, lr, history, tcfg, best_loss, stall) -> Checkpoint:
    return Checkpoint(params=state_arrays(model), model_config=model.cfg.to_dict(), epoch=epoch, step=step,
                      optimizer=optimizer_arrays(model, opt), lr=lr, history=list(history),
                      train_config=tcfg.to_dict(),
                      extra={"dtype": tcfg.dtype, "best_loss": best_loss, "stall": stall})


def train(model: DatCftNet, train_set: Sequence[Tuple[Waveform, Waveform]], tcfg: TrainConfig,
          val_set: Optional[Sequence[Tuple[Waveform, Waveform]]] = None, out_dir=None,
          resume: Optional[Checkpoint] = None) -> Checkpoint:
    """Train on (noisy, clean) pairs; returns the best-validation checkpoint.

    With ``out_dir`` set, writes ``metrics.csv``, ``last.npz`` and ``best.npz``.
    Shuffling uses ``default_rng([seed, epoch])`` so a resumed run replays the
    same batches as an uninterrupted one.
    """
    if not train_set:
        raise ValueError("empty training set")
    val_set = list(val_set) if val_set else list(train_set)
    dt = DTYPES[tcfg.dtype]
    model.to(dt)
    opt = torch.optim.Adam(model.parameters(), lr=tcfg.lr)
    history, start_epoch, step, lr = [], 1, 0, tcfg.lr
    best_loss, stall = math.inf, 0
    if resume is not None:
        restore_optimizer(model, opt, resume.optimizer)
        history = list(resume.history)
        start_epoch, step, lr = resume.epoch + 1, resume.step, resume.lr or tcfg.lr
        for g in opt.param_groups:
            g["lr"] = lr
        best_loss = resume.extra.get("best_loss", math.inf)
        stall = resume.extra.get("stall", 0)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume is None or not (out / "metrics.csv").exists():
            with open(out / "metrics.csv", "w", newline="") as fh:
                csv.writer(fh).writerow(METRIC_COLUMNS)

    best = resume
    for epoch in range(start_epoch, tcfg.epochs + 1):
        order = np.random.default_rng([tcfg.seed, epoch]).permutation(len(train_set))
        model.train()
        losses = []
        for i in range(0, len(order), tcfg.batch):
            batch = collate([train_set[j] for j in order[i:i + tcfg.batch]], model.cfg.stft, dt)
            value, _ = train_step(model, opt, batch, tcfg)
            losses.append(value)
            step += 1
        model.eval()
        val = _validation_metrics(model, val_set, tcfg)
        rows = [{"epoch": epoch, "split": "train", "loss": float(np.mean(losses)),
                 "sisdr": None, "stoi": None, "lsd": None},
                {"epoch": epoch, "split": "val", **val}]
        history.extend(rows)
        log.info("epoch %d train %.4f val %.4f sisdr %.2f dB", epoch, rows[0]["loss"], val["loss"], val["sisdr"])
        if out is not None:
            with open(out / "metrics.csv", "a", newline="") as fh:
                w = csv.writer(fh)
                for r in rows:
                    w.writerow(["" if r[c] is None else r[c] for c in METRIC_COLUMNS])

        if val["loss"] < best_loss:
            best_loss, stall = val["loss"], 0
            best = _snapshot(model, opt, epoch, step, lr, history, tcfg, best_loss, stall)
            if out is not None:
                best.save(out / "best.npz")
        else:
            stall += 1
            if stall >= tcfg.lr_patience:
                lr *= 0.5
                stall = 0
                for g in opt.param_groups:
                    g["lr"] = lr
        last = _snapshot(model, opt, epoch, step, lr, history, tcfg, best_loss, stall)
        if out is not None:
            last.save(out / "last.npz")
    if best is None:
        best = _snapshot(model, opt, start_epoch - 1, step, lr, history, tcfg, best_loss, stall)
    return best


# -- single-utterance overfit -------------------------------------------------------

@dataclass
class OverfitReport:
    sisdr_noisy: float
    sisdr_enhanced: float
    losses: List[float]
    model: DatCftNet
    noisy: Waveform
    clean: Waveform
    enhanced: Waveform

    @property
    def gain_db(self) -> float:
        return self.sisdr_enhanced - self.sisdr_noisy


def overfit_single(model_cfg: ModelConfig, utterance: Waveform, noise: Waveform | str = "white",
                   snr_db: float = 0.0, steps: int = 1000, tcfg: Optional[TrainConfig] = None,
                   mix_seed: int = 0) -> OverfitReport:
    """Fit a fresh model to one (noisy, clean) pair and report SI-SDR before/after."""
    tcfg = tcfg or TrainConfig(lr=1e-3, batch=1)
    if isinstance(noise, str):
        noise = make_noise(noise, len(utterance) + utterance.sample_rate, mix_seed, fs=utterance.sample_rate)
    noisy, _ = mix_at_snr(utterance, noise, snr_db, seed=mix_seed)
    dt = DTYPES[tcfg.dtype]
    model = build(model_cfg).to(dt)
    opt = torch.optim.Adam(model.parameters(), lr=tcfg.lr)
    batch = collate([(noisy, utterance)], model_cfg.stft, dt)
    losses = []
    model.train()
    for _ in range(steps):
        value, _ = train_step(model, opt, batch, tcfg)
        losses.append(value)
    model.eval()
    enhanced = enhance(model, noisy)
    return OverfitReport(sisdr(utterance, noisy), sisdr(utterance, enhanced), losses, model,
                         noisy, utterance, enhanced)
