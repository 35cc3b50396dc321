"""Dual-path attention RNN.

Features ``[batch, d, T]`` are layer-normalised, cut into 50%-overlapping
chunks of ``P`` frames, and passed through

* an intra-chunk pass: Bi-LSTM along the frames of each chunk, unrestricted
  attention, mask + residual;
* an inter-chunk pass: LSTM along the chunk index at each within-chunk
  position, causal attention, mask + residual;

before overlap-add merging back to ``[batch, d, T]``.

Each pass computes ``r = proj(lstm(x))``, keys and queries
``H_K = W_K LN(r)``, ``H_Q = W_Q LN(r)``, attention weights
``W[k, j] = softmax_j(<H_K[j], H_Q[k]> / sqrt(d))`` (restricted to ``j <= k``
when causal), context ``C = W @ H_K``, and the mask
``M = sigmoid(Linear([C, H_Q]))``.  The output is ``x * M + x``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .complex_nn import _uniform_

MASK_TARGETS = ("input", "recurrent")


@dataclass
class ChunkedFeatures:
    data: Tensor  # [batch, d, n_chunks, chunk_len]
    chunk_len: int
    hop: int
    pad_frames: int

    @property
    def n_chunks(self) -> int:
        return self.data.shape[2]

    @property
    def length(self) -> int:
        return (self.n_chunks - 1) * self.hop + self.chunk_len - self.pad_frames


@dataclass
class AttentionTensors:
    H_K: Tensor
    H_Q: Tensor
    W: Tensor
    C: Tensor
    M: Tensor


def n_chunks_for(T: int, P: int) -> int:
    hop = P // 2
    if T <= P:
        return 1
    return 1 + -(-(T - P) // hop)


def segment(X: Tensor, P: int) -> ChunkedFeatures:
    if P < 2 or P % 2:
        raise ValueError("chunk length P must be even and >= 2")
    T = X.shape[-1]
    if T < 1:
        raise ValueError("empty sequence")
    hop = P // 2
    S = n_chunks_for(T, P)
    pad = (S - 1) * hop + P - T
    Xp = F.pad(X, (0, pad)) if pad else X
    return ChunkedFeatures(Xp.unfold(-1, P, hop), P, hop, pad)


def _chunk_index(S: int, P: int, hop: int) -> Tensor:
    return (torch.arange(S)[:, None] * hop + torch.arange(P)[None, :]).reshape(-1)


def merge(c: ChunkedFeatures) -> Tensor:
    B, d, S, P = c.data.shape
    if P != c.chunk_len or c.hop * 2 != P or not 0 <= c.pad_frames < P:
        raise ValueError("inconsistent chunk metadata")
    total = (S - 1) * c.hop + P
    idx = _chunk_index(S, P, c.hop)
    out = c.data.new_zeros(B, d, total).index_add_(2, idx, c.data.reshape(B, d, S * P))
    count = torch.bincount(idx, minlength=total).to(c.data.dtype)
    out = out / count
    return out[..., :total - c.pad_frames]


def attention(H_K: Tensor, H_Q: Tensor, causal: bool = False):
    """Scaled dot-product attention over the step axis; returns (W, C)."""
    if H_K.shape != H_Q.shape:
        raise ValueError(f"key/query shapes differ: {tuple(H_K.shape)} vs {tuple(H_Q.shape)}")
    steps, d = H_K.shape[-2:]
    scores = H_Q @ H_K.transpose(-1, -2) / math.sqrt(d)  # [..., query k, key j]
    if causal:
        future = torch.ones(steps, steps, dtype=torch.bool, device=H_K.device).triu(1)
        scores = scores.masked_fill(future, float("-inf"))
    W = torch.softmax(scores, dim=-1)
    return W, W @ H_K


class RecurrentEncoder(nn.Module):
    """(Bi-)LSTM, projection back to ``d``, layer norm, then key/query projections."""

    def __init__(self, d: int, hidden: int, bidirectional: bool):
        super().__init__()
        self.d, self.hidden, self.bidirectional = d, hidden, bidirectional
        self.lstm = nn.LSTM(d, hidden, batch_first=True, bidirectional=bidirectional)
        self.proj = nn.Linear(hidden * (2 if bidirectional else 1), d)
        self.norm = nn.LayerNorm(d)
        self.key = nn.Linear(d, d)
        self.query = nn.Linear(d, d)

    def reset_parameters(self, gen: torch.Generator) -> None:
        for p in self.lstm.parameters():
            _uniform_(p, 1.0 / math.sqrt(self.hidden), gen)
        for lin in (self.proj, self.key, self.query):
            bound = 1.0 / math.sqrt(lin.in_features)
            _uniform_(lin.weight, bound, gen)
            _uniform_(lin.bias, bound, gen)
        with torch.no_grad():
            self.norm.weight.fill_(1.0)
            self.norm.bias.zero_()

    def forward(self, x: Tensor):
        """x: [N, steps, d] -> (H_K, H_Q, r)."""
        if x.shape[-1] != self.d:
            raise ValueError(f"expected feature dim {self.d}, got {x.shape[-1]}")
        r = self.proj(self.lstm(x)[0])
        n = self.norm(r)
        return self.key(n), self.query(n), r


def rnn_encode(x: Tensor, encoder: RecurrentEncoder):
    H_K, H_Q, _ = encoder(x)
    return H_K, H_Q


class MaskHead(nn.Module):
    def __init__(self, d: int, d_in: Optional[int] = None):
        super().__init__()
        self.linear = nn.Linear(2 * d, d_in or d)

    def reset_parameters(self, gen: torch.Generator) -> None:
        bound = 1.0 / math.sqrt(self.linear.in_features)
        _uniform_(self.linear.weight, bound, gen)
        _uniform_(self.linear.bias, bound, gen)

    def forward(self, C: Tensor, H_Q: Tensor) -> Tensor:
        return torch.sigmoid(self.linear(torch.cat([C, H_Q], dim=-1)))


def mask_and_enhance(C: Tensor, H_Q: Tensor, x_in: Tensor, head: MaskHead,
                     target: Optional[Tensor] = None):
    """Returns (enhanced, M) with enhanced = target * M + x_in (target defaults to x_in)."""
    M = head(C, H_Q)
    base = x_in if target is None else target
    return base * M + x_in, M


class DatPass(nn.Module):
    def __init__(self, d: int, hidden: int, bidirectional: bool, causal: bool, mask_target: str = "input"):
        super().__init__()
        if mask_target not in MASK_TARGETS:
            raise ValueError(f"mask_target must be one of {MASK_TARGETS}")
        self.causal, self.mask_target = causal, mask_target
        self.encoder = RecurrentEncoder(d, hidden, bidirectional)
        self.mask = MaskHead(d)

    def reset_parameters(self, gen: torch.Generator) -> None:
        self.encoder.reset_parameters(gen)
        self.mask.reset_parameters(gen)

    def forward(self, x: Tensor, return_tensors: bool = False):
        H_K, H_Q, r = self.encoder(x)
        W, C = attention(H_K, H_Q, self.causal)
        out, M = mask_and_enhance(C, H_Q, x, self.mask, r if self.mask_target == "recurrent" else None)
        if return_tensors:
            return out, AttentionTensors(H_K, H_Q, W, C, M)
        return out


class DatRnnBlock(nn.Module):
    def __init__(self, d: int, hidden: int, chunk_len: int = 32, mask_target: str = "input"):
        super().__init__()
        if chunk_len < 2 or chunk_len % 2:
            raise ValueError("chunk_len must be even and >= 2")
        self.d, self.chunk_len = d, chunk_len
        self.norm = nn.LayerNorm(d)
        self.intra = DatPass(d, hidden, bidirectional=True, causal=False, mask_target=mask_target)
        self.inter = DatPass(d, hidden, bidirectional=False, causal=True, mask_target=mask_target)

    def reset_parameters(self, gen: torch.Generator) -> None:
        with torch.no_grad():
            self.norm.weight.fill_(1.0)
            self.norm.bias.zero_()
        self.intra.reset_parameters(gen)
        self.inter.reset_parameters(gen)

    def intra_pass(self, data: Tensor) -> Tensor:
        B, d, S, P = data.shape
        seq = data.permute(0, 2, 3, 1).reshape(B * S, P, d)
        return self.intra(seq).reshape(B, S, P, d).permute(0, 3, 1, 2)

    def inter_pass(self, data: Tensor) -> Tensor:
        B, d, S, P = data.shape
        seq = data.permute(0, 3, 2, 1).reshape(B * P, S, d)
        return self.inter(seq).reshape(B, P, S, d).permute(0, 3, 2, 1)

    def dual_path(self, data: Tensor) -> Tensor:
        """Intra then inter pass on chunked data ``[batch, d, n_chunks, P]``."""
        return self.inter_pass(self.intra_pass(data))

    def forward(self, X: Tensor) -> Tensor:
        if X.shape[-1] == 0:
            raise ValueError("empty sequence")
        Xn = self.norm(X.transpose(1, 2)).transpose(1, 2)
        c = segment(Xn, self.chunk_len)
        c.data = self.dual_path(c.data)
        return merge(c)


def dat_rnn_forward(X: Tensor, blocks) -> Tensor:
    for block in blocks:
        X = block(X)
    return X
