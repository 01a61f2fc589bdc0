"""Phoneme encoder: text encoder, duration predictor and monotonic alignment."""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .commons import ChannelNorm


class RelativeSelfAttention(nn.Module):
    """Multi-head self-attention with learned relative-position key/value embeddings
    clipped to ``window`` positions on either side."""

    def __init__(self, channels: int, n_heads: int, window: int = 4, p_dropout: float = 0.0):
        super().__init__()
        if channels % n_heads:
            raise ValueError("channels must be divisible by n_heads")
        self.n_heads = n_heads
        self.d_head = channels // n_heads
        self.window = window
        self.q = nn.Conv1d(channels, channels, 1)
        self.k = nn.Conv1d(channels, channels, 1)
        self.v = nn.Conv1d(channels, channels, 1)
        self.o = nn.Conv1d(channels, channels, 1)
        std = self.d_head ** -0.5
        self.rel_k = nn.Parameter(torch.randn(2 * window + 1, self.d_head) * std)
        self.rel_v = nn.Parameter(torch.randn(2 * window + 1, self.d_head) * std)
        self.drop = nn.Dropout(p_dropout)

    def forward(self, x, attn_mask):
        b, c, t = x.shape
        h, d = self.n_heads, self.d_head
        q = self.q(x).view(b, h, d, t).transpose(2, 3) / math.sqrt(d)
        k = self.k(x).view(b, h, d, t).transpose(2, 3)
        v = self.v(x).view(b, h, d, t).transpose(2, 3)
        pos = torch.arange(t, device=x.device)
        rel = (pos[None, :] - pos[:, None]).clamp(-self.window, self.window) + self.window
        scores = q @ k.transpose(-1, -2) + torch.einsum("bhtd,tsd->bhts", q, self.rel_k[rel])
        scores = scores.masked_fill(attn_mask == 0, -1e4)
        p = self.drop(torch.softmax(scores, dim=-1))
        out = p @ v + torch.einsum("bhts,tsd->bhtd", p, self.rel_v[rel])
        return self.o(out.transpose(2, 3).reshape(b, c, t))


class TextEncoder(nn.Module):
    """Phoneme ids -> hidden states and per-phoneme prior (mu, log_sigma)."""

    def __init__(self, n_vocab: int, out_channels: int, hidden: int, ffn: int, n_heads: int,
                 n_layers: int, window: int = 4, kernel_size: int = 3, p_dropout: float = 0.1):
        super().__init__()
        self.hidden = hidden
        self.out_channels = out_channels
        self.emb = nn.Embedding(n_vocab, hidden)
        nn.init.normal_(self.emb.weight, 0.0, hidden ** -0.5)
        self.attn = nn.ModuleList()
        self.norm1 = nn.ModuleList()
        self.ffn_in = nn.ModuleList()
        self.ffn_out = nn.ModuleList()
        self.norm2 = nn.ModuleList()
        for _ in range(n_layers):
            self.attn.append(RelativeSelfAttention(hidden, n_heads, window, p_dropout))
            self.norm1.append(ChannelNorm(hidden))
            self.ffn_in.append(nn.Conv1d(hidden, ffn, kernel_size, padding=kernel_size // 2))
            self.ffn_out.append(nn.Conv1d(ffn, hidden, kernel_size, padding=kernel_size // 2))
            self.norm2.append(ChannelNorm(hidden))
        self.drop = nn.Dropout(p_dropout)
        self.proj = nn.Conv1d(hidden, out_channels * 2, 1)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor):
        """``ids`` [B, N], ``mask`` [B, 1, N] -> (hidden, mu, log_sigma), all [B, C, N]."""
        x = self.emb(ids).transpose(1, 2) * math.sqrt(self.hidden) * mask
        attn_mask = mask.unsqueeze(2) * mask.unsqueeze(-1)
        for i in range(len(self.attn)):
            y = self.drop(self.attn[i](x * mask, attn_mask))
            x = self.norm1[i](x + y)
            y = F.relu(self.ffn_in[i](x * mask))
            y = self.drop(self.ffn_out[i](self.drop(y) * mask))
            x = self.norm2[i](x + y)
        x = x * mask
        stats = self.proj(x) * mask
        mu, log_sigma = stats.split(self.out_channels, dim=1)
        return x, mu, log_sigma


class DurationPredictor(nn.Module):
    """Deterministic log-duration regressor, conditioned on the speaker embedding."""

    def __init__(self, in_channels: int, filter_channels: int, kernel_size: int = 3,
                 p_dropout: float = 0.5, gin_channels: int = 0):
        super().__init__()
        pad = kernel_size // 2
        self.conv1 = nn.Conv1d(in_channels, filter_channels, kernel_size, padding=pad)
        self.norm1 = ChannelNorm(filter_channels)
        self.conv2 = nn.Conv1d(filter_channels, filter_channels, kernel_size, padding=pad)
        self.norm2 = ChannelNorm(filter_channels)
        self.proj = nn.Conv1d(filter_channels, 1, 1)
        self.drop = nn.Dropout(p_dropout)
        if gin_channels:
            self.cond = nn.Linear(gin_channels, in_channels)

    def forward(self, x, x_mask, g=None):
        """Returns log-durations [B, 1, N]."""
        if g is not None:
            x = x + self.cond(g).unsqueeze(-1)
        x = self.drop(self.norm1(torch.relu(self.conv1(x * x_mask))))
        x = self.drop(self.norm2(torch.relu(self.conv2(x * x_mask))))
        return self.proj(x * x_mask) * x_mask


def predict_durations(log_durations: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return torch.exp(log_durations) * mask


def round_durations(durations: torch.Tensor, mask: torch.Tensor, pace: float = 1.0) -> torch.Tensor:
    """Integer frame counts, at least 1 on real phonemes."""
    return (torch.round(durations * pace).clamp(min=1) * mask).long()


def duration_loss(predicted: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Masked mean squared log-ratio between predicted and target durations."""
    if predicted.shape != target.shape or predicted.shape != mask.shape:
        raise ValueError(f"shape mismatch: {tuple(predicted.shape)}, {tuple(target.shape)}, {tuple(mask.shape)}")
    ones = torch.ones_like(predicted)
    log_ratio = torch.log(torch.where(mask > 0, predicted, ones)) - torch.log(torch.where(mask > 0, target, ones))
    return (log_ratio ** 2 * mask).sum() / mask.sum().clamp(min=1.0)


def log_likelihood_matrix(mu: np.ndarray, log_sigma: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Gaussian log density of every frame under every phoneme.

    ``mu``, ``log_sigma``: [d, N]; ``z``: [d, T]. Returns [N, T].
    """
    inv_var = np.exp(-2.0 * log_sigma)
    c = np.sum(-0.5 * math.log(2 * math.pi) - log_sigma, axis=0)[:, None]
    quad = (
        (inv_var * mu * mu).sum(0)[:, None]
        - 2.0 * (mu * inv_var).T @ z
        + inv_var.T @ (z * z)
    )
    return c - 0.5 * quad


def maximum_path(value: np.ndarray) -> np.ndarray:
    """Best monotonic surjective path through ``value`` [N, T].

    Every phoneme covers at least one frame; returns durations [N].
    """
    n, t = value.shape
    if n < 1:
        raise ValueError("need at least one phoneme")
    if t < n:
        raise ValueError(f"cannot align {n} phonemes to {t} frames")
    neg = -np.inf
    q = np.full((n, t), neg)
    q[0, 0] = value[0, 0]
    for j in range(1, t):
        stay = q[:, j - 1]
        move = np.concatenate(([neg], q[:-1, j - 1]))
        q[:, j] = np.maximum(stay, move) + value[:, j]
        # phoneme i can only be reached by frame i and must leave room for the rest
        q[min(j + 1, n):, j] = neg
    durations = np.zeros(n, dtype=np.int64)
    i = n - 1
    for j in range(t - 1, -1, -1):
        durations[i] += 1
        if j == 0:
            break
        if i > 0 and (i == j or q[i - 1, j - 1] > q[i, j - 1]):
            i -= 1
    return durations


def monotonic_align(mu: torch.Tensor, log_sigma: torch.Tensor, z: torch.Tensor,
                    phoneme_lengths: torch.Tensor, frame_lengths: torch.Tensor) -> torch.Tensor:
    """Batched hard alignment. Inputs are [B, d, N] / [B, d, T]; returns durations [B, N]."""
    mu = mu.detach().double().numpy()
    log_sigma = log_sigma.detach().double().numpy()
    z = z.detach().double().numpy()
    out = torch.zeros(mu.shape[0], mu.shape[-1], dtype=torch.long)
    for b, (n, t) in enumerate(zip(phoneme_lengths.tolist(), frame_lengths.tolist())):
        value = log_likelihood_matrix(mu[b, :, :n], log_sigma[b, :, :n], z[b, :, :t])
        out[b, :n] = torch.from_numpy(maximum_path(value))
    return out


def expand_to_frames(stats: torch.Tensor, durations: torch.Tensor, total: int | None = None) -> torch.Tensor:
    """Repeat column ``i`` of ``stats`` [B, C, N] ``durations[:, i]`` times; pad to ``total``."""
    sums = durations.sum(-1)
    width = int(sums.max()) if total is None else total
    if total is not None and int(sums.max()) > total:
        raise ValueError(f"durations sum to {int(sums.max())}, more than {total} frames")
    out = stats.new_zeros(stats.shape[0], stats.shape[1], width)
    for b in range(stats.shape[0]):
        idx = torch.repeat_interleave(torch.arange(stats.shape[-1]), durations[b])
        out[b, :, : idx.numel()] = stats[b][:, idx]
    return out
