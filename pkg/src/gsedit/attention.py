"""Multi-head attention and the cross-view latent alignment blend.

The alignment operator replaces plain image self-attention inside the
denoiser: reference views keep attending to themselves, every other view
blends its self-attention with the mean of its cross-attentions to each
reference view. The blend is a convex combination controlled by lambda.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch


@dataclass
class AttentionWeights:
    """Per-head query/key/value projections, each of shape (heads, d, c)."""

    w_q: torch.Tensor
    w_k: torch.Tensor
    w_v: torch.Tensor

    def __post_init__(self):
        if not (self.w_q.shape == self.w_k.shape == self.w_v.shape):
            raise ValueError("q/k/v projection shapes differ")
        if self.w_q.dim() != 3:
            raise ValueError("projections must be (num_heads, d, c)")

    @property
    def num_heads(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.w_q.shape[2]


@dataclass
class AlignmentConfig:
    lam: float = 0.6  # blend weight on self-attention
    reference_ids: list[int] = field(default_factory=list)
    enabled: bool = True

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if len(set(self.reference_ids)) != len(self.reference_ids):
            raise ValueError("reference ids must be distinct")


def attention(z_i: torch.Tensor, z_j: torch.Tensor, w: AttentionWeights) -> torch.Tensor:
    """Scaled dot-product attention of queries from z_i over keys/values of z_j.

    Inputs are token sequences (L_i, d) and (L_j, d); the result is the
    head-concatenated (L_i, heads * c) tensor, before the output projection
    owned by the calling denoiser layer.
    """
    if z_i.shape[-1] != w.w_q.shape[1] or z_j.shape[-1] != w.w_q.shape[1]:
        raise ValueError("token feature dimension does not match projections")
    q = torch.einsum("ld,hdc->hlc", z_i, w.w_q)
    k = torch.einsum("ld,hdc->hlc", z_j, w.w_k)
    v = torch.einsum("ld,hdc->hlc", z_j, w.w_v)
    logits = q @ k.transpose(-1, -2) / math.sqrt(w.head_dim)
    probs = torch.softmax(logits, dim=-1)
    out = probs @ v  # (h, L_i, c)
    return out.permute(1, 0, 2).reshape(z_i.shape[0], w.num_heads * w.head_dim)


def attn_align(z_e: torch.Tensor, refs: list[torch.Tensor], w: AttentionWeights,
               cfg: AlignmentConfig) -> torch.Tensor:
    """lambda * self-attention + (1 - lambda) * mean cross-attention to refs.

    Callers must pass `refs` in a fixed order (ascending view id) so the
    summation order, and therefore the output bits, never depend on how the
    references were sampled.
    """
    self_attn = attention(z_e, z_e, w)
    if not cfg.enabled or cfg.lam == 1.0:
        return self_attn
    if not refs:
        raise ValueError("alignment enabled with lambda < 1 requires reference views")
    cross = torch.zeros_like(self_attn)
    for ref in refs:
        cross = cross + attention(z_e, ref, w)
    cross = cross / len(refs)
    return cfg.lam * self_attn + (1.0 - cfg.lam) * cross


def batch_align_layer(tokens: torch.Tensor, view_ids: list[int],
                      cfg: AlignmentConfig, w: AttentionWeights) -> torch.Tensor:
    """Apply the alignment operator to a (V, L, d) batch of token sequences.

    Reference views get plain self-attention; the rest align against the
    reference views' token sequences at this layer. With alignment disabled
    every view is processed independently.
    """
    if cfg.enabled and not set(cfg.reference_ids) <= set(view_ids):
        raise ValueError("reference ids missing from the batch")
    ref_order = sorted(cfg.reference_ids)
    by_id = {vid: tokens[k] for k, vid in enumerate(view_ids)}
    refs = [by_id[vid] for vid in ref_order]
    outputs = []
    for k, vid in enumerate(view_ids):
        if not cfg.enabled or vid in cfg.reference_ids:
            outputs.append(attention(tokens[k], tokens[k], w))
        else:
            outputs.append(attn_align(tokens[k], refs, w, cfg))
    return torch.stack(outputs)
