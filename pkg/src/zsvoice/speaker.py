"""ECAPA-style speaker encoder over latent speech sequences, and the overlapping
sub-sequence split used to build contrastive embedding pairs."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .commons import AttentiveStatsPool, ChannelNorm, SERes2Block


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class OverlapSplit:
    total: int
    length: int
    overlap: int

    @property
    def span1(self) -> tuple[int, int]:
        return (0, self.length)

    @property
    def span2(self) -> tuple[int, int]:
        return (self.total - self.length, self.total)


def split_overlapping(total: int, rho: float) -> OverlapSplit:
    """Two end-anchored windows over ``total`` frames overlapping by about ``rho * total``.

    The overlap is rounded half-up, then nudged by one frame toward ``rho * total``
    when needed so that ``total + overlap`` is even.
    """
    if total < 5:
        raise SplitError(f"sequence of {total} frames is too short to split (need >= 5)")
    target = rho * total
    overlap = math.floor(target + 0.5)
    if (total + overlap) % 2:
        overlap = overlap + 1 if target >= overlap else overlap - 1
    length = (total + overlap) // 2
    return OverlapSplit(total, length, overlap)


def draw_split(total: int, rho_min: float, rho_max: float, generator: torch.Generator | None) -> OverlapSplit:
    u = float(torch.rand((), generator=generator, dtype=torch.float64))
    return split_overlapping(total, rho_min + (rho_max - rho_min) * u)


@dataclass
class SpeakerEmbedding:
    vector: torch.Tensor              # [B, d_spk]
    spans: list[tuple[int, int]]      # source span per item


class SpeakerEncoder(nn.Module):
    """Frame encoder (SE-Res2 blocks with multi-layer aggregation), attentive
    statistics pooling, and a two-layer feedforward head in place of a classifier."""

    def __init__(self, in_channels: int, channels: int = 64, out_dim: int = 32, n_blocks: int = 2,
                 scale: int = 4):
        super().__init__()
        self.conv_in = nn.Conv1d(in_channels, channels, 5, padding=2)
        self.norm_in = ChannelNorm(channels)
        self.blocks = nn.ModuleList(
            SERes2Block(channels, 3, dilation=i + 2, scale=scale) for i in range(n_blocks)
        )
        agg = channels * n_blocks
        self.mfa = nn.Conv1d(agg, agg, 1)
        self.pool = AttentiveStatsPool(agg, attention_channels=max(32, channels // 2))
        self.head = nn.Sequential(
            nn.Linear(2 * agg, 2 * out_dim),
            nn.ReLU(),
            nn.Linear(2 * out_dim, out_dim),
        )
        self.out_dim = out_dim
        # per-item stand-ins for the batch norms after aggregation and pooling
        self.norm_mfa = ChannelNorm(agg)
        self.norm_pool = nn.LayerNorm(2 * agg)

    def forward(self, x: torch.Tensor, x_mask: torch.Tensor) -> torch.Tensor:
        """``x`` [B, C, T] with mask [B, 1, T] -> [B, out_dim]."""
        if x_mask.sum((1, 2)).min() < 1:
            raise ValueError("speaker encoder needs at least one frame per item")
        h = self.norm_in(F.relu(self.conv_in(x * x_mask))) * x_mask
        outs = []
        for block in self.blocks:
            h = block(h, x_mask)
            outs.append(h)
        h = self.norm_mfa(F.relu(self.mfa(torch.cat(outs, dim=1)))) * x_mask
        return self.head(self.norm_pool(self.pool(h, x_mask)))


def gather_spans(x: torch.Tensor, spans: list[tuple[int, int]]):
    """Left-align each item's span into a padded batch; returns (values, mask)."""
    lengths = [e - s for s, e in spans]
    if min(lengths) < 1:
        raise ValueError("empty span")
    width = max(lengths)
    out = x.new_zeros(x.shape[0], x.shape[1], width)
    mask = x.new_zeros(x.shape[0], 1, width)
    for i, (s, e) in enumerate(spans):
        if s < 0 or e > x.shape[-1]:
            raise ValueError(f"span {(s, e)} outside sequence of {x.shape[-1]} frames")
        out[i, :, : e - s] = x[i, :, s:e]
        mask[i, :, : e - s] = 1.0
    return out, mask


def extract_embedding(encoder: SpeakerEncoder, x: torch.Tensor, spans: list[tuple[int, int]]) -> SpeakerEmbedding:
    values, mask = gather_spans(x, spans)
    return SpeakerEmbedding(encoder(values, mask), list(spans))


@dataclass
class ContrastivePairs:
    pair_overlap: torch.Tensor    # s1_ref (+) s2_ref
    pair_contrast: torch.Tensor   # s_gt (+) s2_ref
    s_downstream: torch.Tensor
    s1: torch.Tensor
    s2: torch.Tensor
    s_gt: torch.Tensor
    chose_first: torch.Tensor     # bool [B]
    splits: list[OverlapSplit]


def make_contrastive_pairs(encoder: SpeakerEncoder, x_gt: torch.Tensor, gt_lengths: torch.Tensor,
                           x_ref: torch.Tensor, ref_lengths: torch.Tensor,
                           generator: torch.Generator | None, rho_range=(0.2, 0.4),
                           splits: list[OverlapSplit] | None = None) -> ContrastivePairs:
    """Three embeddings (two overlapping reference halves and the full GT) and the
    two concatenated pairs the leakage discriminator compares."""
    if splits is None:
        splits = [draw_split(int(t), rho_range[0], rho_range[1], generator) for t in ref_lengths.tolist()]
    s1 = extract_embedding(encoder, x_ref, [sp.span1 for sp in splits]).vector
    s2 = extract_embedding(encoder, x_ref, [sp.span2 for sp in splits]).vector
    s_gt = extract_embedding(encoder, x_gt, [(0, int(t)) for t in gt_lengths.tolist()]).vector
    chose_first = torch.rand(len(splits), generator=generator) < 0.5
    s_down = torch.where(chose_first[:, None], s1, s2)
    return ContrastivePairs(
        pair_overlap=torch.cat([s1, s2], dim=-1),
        pair_contrast=torch.cat([s_gt, s2], dim=-1),
        s_downstream=s_down,
        s1=s1, s2=s2, s_gt=s_gt,
        chose_first=chose_first,
        splits=splits,
    )
