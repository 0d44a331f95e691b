"""Hierarchical dict encoder.

Embedding is ``W_emb[token] + P_table[group_pos]``; each layer is a
parallel-residual block ``h + attn(norm(h)) + mlp(norm(h))`` where attention
logits carry a dictionary-level visibility bias. An optional learned
per-head bias between a key and its own value (``pair_bias``) makes the
key-value binding explicit; pair-local positions alone do not say which
label sits next to which key.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dict_tokenizer import (
    PAD_ID,
    EncodedReport,
    Vocabulary,
    sequential_positions,
    tokenize,
)
from .report_model import LabReportSet

MASKED_LOGIT = -1e9


@dataclass
class EncoderConfig:
    vocab_size: int
    num_layers: int = 4
    hidden_dim: int = 256
    num_heads: int = 4
    max_group_pos: int = 2
    mlp_expansion: int = 4
    dropout: float = 0.0
    pair_bias: bool = False
    # ablations
    group_pe: bool = True
    attn_bias: bool = True

    def __post_init__(self):
        if min(self.num_layers + 1, self.hidden_dim, self.num_heads, self.vocab_size) <= 0:
            raise ValueError("encoder sizes must be positive")
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if self.max_group_pos < 2:
            raise ValueError("max_group_pos must be at least 2")

    def to_dict(self):
        return asdict(self)


def build_mask(encoded: EncodedReport) -> np.ndarray:
    """Visibility matrix; ``mask[i, j]`` is True when token i may attend to j.

    Ordinary tokens see their own dictionary. [CLS] sees and is seen by
    everything, each [SEP] sees its own dictionary, and all specials see
    each other.
    """
    seg = encoded.segment_ids
    special = encoded.is_special
    k = encoded.num_dictionaries
    is_cls = special & (seg == k)
    same_seg = seg[:, None] == seg[None, :]
    both_special = special[:, None] & special[None, :]
    cls_any = is_cls[:, None] | is_cls[None, :]
    return same_seg | both_special | cls_any


def build_pair_matrix(encoded: EncodedReport) -> np.ndarray:
    """True between the two distinct tokens of the same key-value pair."""
    pair = encoded.pair_ids()
    same = (pair[:, None] == pair[None, :]) & (pair[:, None] >= 0)
    np.fill_diagonal(same, False)
    return same


class HierEncLayer(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        a = config.hidden_dim
        self.num_heads = config.num_heads
        self.norm = nn.LayerNorm(a)
        self.q = nn.Linear(a, a, bias=False)
        self.k = nn.Linear(a, a, bias=False)
        self.v = nn.Linear(a, a, bias=False)
        self.o = nn.Linear(a, a, bias=False)
        self.mlp_in = nn.Linear(a, config.mlp_expansion * a)
        self.mlp_out = nn.Linear(config.mlp_expansion * a, a)
        self.pair_bias = nn.Parameter(torch.zeros(config.num_heads)) if config.pair_bias else None
        self.dropout = nn.Dropout(config.dropout)

    def attention(self, h, mask, pair=None, return_weights=False):
        """Masked multi-head attention over ``h`` of shape (B, T, a)."""
        B, T, a = h.shape
        H = self.num_heads
        d = a // H
        q = self.q(h).view(B, T, H, d).transpose(1, 2)
        k = self.k(h).view(B, T, H, d).transpose(1, 2)
        v = self.v(h).view(B, T, H, d).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(d)
        if pair is not None and self.pair_bias is not None:
            logits = logits + pair[:, None].to(logits.dtype) * self.pair_bias.view(1, H, 1, 1)
        bias = torch.zeros(mask.shape, dtype=logits.dtype, device=logits.device)
        bias = bias.masked_fill(~mask, MASKED_LOGIT)
        weights = torch.softmax(logits + bias[:, None], dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(B, T, a)
        out = self.dropout(self.o(out))
        if return_weights:
            return out, weights
        return out

    def mlp(self, h):
        return self.mlp_out(F.gelu(self.mlp_in(h)))

    def forward(self, h, mask, pair=None):
        x = self.norm(h)
        return h + self.attention(x, mask, pair) + self.mlp(x)


class HierEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.tok_emb = nn.Embedding(config.vocab_size, config.hidden_dim)
        self.pos_emb = nn.Embedding(config.max_group_pos, config.hidden_dim)
        self.layers = nn.ModuleList(HierEncLayer(config) for _ in range(config.num_layers))
        nn.init.normal_(self.tok_emb.weight, std=0.02)
        nn.init.normal_(self.pos_emb.weight, std=0.02)

    def embed(self, token_ids, pos_ids):
        if token_ids.numel() and (token_ids.min() < 0 or token_ids.max() >= self.config.vocab_size):
            raise IndexError("token id out of range for the encoder vocabulary")
        if pos_ids.numel() and (pos_ids.min() < 0 or pos_ids.max() >= self.config.max_group_pos):
            raise IndexError(
                f"positional id out of range (max_group_pos={self.config.max_group_pos})"
            )
        return self.tok_emb(token_ids) + self.pos_emb(pos_ids)

    def forward(self, token_ids, pos_ids, mask, pair=None):
        h = self.embed(token_ids, pos_ids)
        for layer in self.layers:
            h = layer(h, mask, pair)
        return h


@dataclass
class EncoderBatch:
    token_ids: torch.Tensor  # (B, T)
    pos_ids: torch.Tensor  # (B, T)
    mask: torch.Tensor  # (B, T, T) bool
    pair: torch.Tensor  # (B, T, T) bool
    valid: torch.Tensor  # (B, T) bool, False on padding


def collate(encoded: Sequence[EncodedReport], config: EncoderConfig) -> EncoderBatch:
    """Pad a list of encoded reports into batch tensors.

    Padding tokens only see themselves and are invisible to real tokens.
    Ablation switches in ``config`` are applied here.
    """
    B = len(encoded)
    T = max(len(e) for e in encoded)
    tokens = np.full((B, T), PAD_ID, dtype=np.int64)
    pos = np.zeros((B, T), dtype=np.int64)
    mask = np.zeros((B, T, T), dtype=bool)
    pair = np.zeros((B, T, T), dtype=bool)
    valid = np.zeros((B, T), dtype=bool)
    for b, e in enumerate(encoded):
        n = len(e)
        tokens[b, :n] = e.token_ids
        pos[b, :n] = e.group_pos_ids if config.group_pe else sequential_positions(e)
        mask[b, :n, :n] = build_mask(e) if config.attn_bias else True
        pair[b, :n, :n] = build_pair_matrix(e)
        valid[b, :n] = True
        idx = np.arange(n, T)
        mask[b, idx, idx] = True
    return EncoderBatch(
        torch.from_numpy(tokens),
        torch.from_numpy(pos),
        torch.from_numpy(mask),
        torch.from_numpy(pair),
        torch.from_numpy(valid),
    )


def encode(
    report: LabReportSet, vocab: Vocabulary, config: EncoderConfig, params: HierEncoder
) -> torch.Tensor:
    """Encode one report into ``h_L`` of shape (n_tok, hidden_dim)."""
    batch = collate([tokenize(report, vocab)], config)
    return params(batch.token_ids, batch.pos_ids, batch.mask, batch.pair)[0]
