"""Mask-aware building blocks shared by the encoders, flow and discriminators.

Tensors are channel-first ``[B, C, T]``; masks are float ``[B, 1, T]``.
Every block zeroes padded frames before any temporal convolution so outputs on
real frames do not depend on how much padding follows them.
"""

from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F


def get_padding(kernel_size: int, dilation: int = 1) -> int:
    return (kernel_size * dilation - dilation) // 2


def length_mask(lengths: torch.Tensor, max_len: int, dtype=torch.float32) -> torch.Tensor:
    mask = torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]
    return mask.unsqueeze(1).to(dtype)


def masked_randn(lengths: torch.Tensor, channels: int, max_len: int, generator: torch.Generator | None,
                 dtype=torch.float32) -> torch.Tensor:
    """Standard normal noise drawn item by item over real frames only.

    The number of draws depends on the lengths, not the padded width, so
    re-padding a batch leaves the noise on real frames unchanged.
    """
    out = torch.zeros(len(lengths), channels, max_len, dtype=dtype)
    for i, n in enumerate(lengths.tolist()):
        out[i, :, :n] = torch.randn(channels, n, generator=generator, dtype=dtype)
    return out


def slice_segments(x: torch.Tensor, starts: torch.Tensor, size: int) -> torch.Tensor:
    return torch.stack([x[i, ..., s : s + size] for i, s in enumerate(starts.tolist())])


class ChannelNorm(nn.Module):
    """LayerNorm over the channel axis of a [B, C, T] tensor."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.norm = nn.LayerNorm(channels, eps=eps)

    def forward(self, x):
        return self.norm(x.transpose(1, -1)).transpose(1, -1)


class WN(nn.Module):
    """Gated dilated-convolution stack with optional global conditioning."""

    def __init__(self, hidden: int, kernel_size: int, dilation_rate: int, n_layers: int,
                 gin_channels: int = 0, p_dropout: float = 0.0):
        super().__init__()
        self.hidden = hidden
        self.n_layers = n_layers
        self.in_layers = nn.ModuleList()
        self.res_skip_layers = nn.ModuleList()
        self.drop = nn.Dropout(p_dropout)
        if gin_channels:
            self.cond_layer = nn.Conv1d(gin_channels, 2 * hidden * n_layers, 1)
        for i in range(n_layers):
            dilation = dilation_rate ** i
            self.in_layers.append(nn.Conv1d(hidden, 2 * hidden, kernel_size, dilation=dilation,
                                            padding=get_padding(kernel_size, dilation)))
            out = 2 * hidden if i < n_layers - 1 else hidden
            self.res_skip_layers.append(nn.Conv1d(hidden, out, 1))

    def forward(self, x, x_mask, g=None):
        output = torch.zeros_like(x)
        if g is not None:
            g = self.cond_layer(g)
        for i in range(self.n_layers):
            x_in = self.in_layers[i](x * x_mask)
            if g is not None:
                x_in = x_in + g[:, i * 2 * self.hidden : (i + 1) * 2 * self.hidden]
            t, s = x_in.chunk(2, dim=1)
            acts = self.drop(torch.tanh(t) * torch.sigmoid(s))
            res_skip = self.res_skip_layers[i](acts)
            if i < self.n_layers - 1:
                x = (x + res_skip[:, : self.hidden]) * x_mask
                output = output + res_skip[:, self.hidden :]
            else:
                output = output + res_skip
        return output * x_mask


def masked_mean(x, mask):
    return (x * mask).sum(-1, keepdim=True) / mask.sum(-1, keepdim=True).clamp(min=1.0)


def _safe_std(var: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    # Exactly zero for zero variance, finite gradient everywhere.
    return torch.sqrt(var.clamp(min=0.0) + eps) - eps ** 0.5


class AttentiveStatsPool(nn.Module):
    """Attention-weighted mean and standard deviation over real frames.

    Returns ``[B, 2C]``. Attention sees each frame together with the global
    (masked) mean and deviation, as in ECAPA-TDNN.
    """

    def __init__(self, channels: int, attention_channels: int = 64):
        super().__init__()
        self.attention = nn.Sequential(
            nn.Conv1d(channels * 3, attention_channels, 1),
            nn.Tanh(),
            nn.Conv1d(attention_channels, channels, 1),
        )

    def forward(self, x, x_mask):
        t = x.shape[-1]
        mean = masked_mean(x, x_mask)
        std = _safe_std(masked_mean((x - mean) ** 2, x_mask))
        ctx = torch.cat([x, mean.expand(-1, -1, t), std.expand(-1, -1, t)], dim=1)
        logits = self.attention(ctx * x_mask).masked_fill(x_mask == 0, float("-inf"))
        w = torch.softmax(logits, dim=-1)
        mu = (w * x).sum(-1)
        sigma = _safe_std((w * (x - mu.unsqueeze(-1)) ** 2).sum(-1))
        return torch.cat([mu, sigma], dim=1)


class SqueezeExcite(nn.Module):
    def __init__(self, channels: int, bottleneck: int = 32):
        super().__init__()
        self.down = nn.Conv1d(channels, bottleneck, 1)
        self.up = nn.Conv1d(bottleneck, channels, 1)

    def forward(self, x, x_mask):
        s = masked_mean(x, x_mask)
        s = torch.sigmoid(self.up(F.relu(self.down(s))))
        return x * s


class Res2Conv(nn.Module):
    """Hierarchical multi-scale convolution: split channels into ``scale`` groups,
    each group convolved after adding the previous group's output."""

    def __init__(self, channels: int, kernel_size: int = 3, dilation: int = 1, scale: int = 4):
        super().__init__()
        if channels % scale:
            raise ValueError("channels must be divisible by scale")
        self.scale = scale
        width = channels // scale
        self.convs = nn.ModuleList(
            nn.Conv1d(width, width, kernel_size, dilation=dilation,
                      padding=get_padding(kernel_size, dilation))
            for _ in range(scale - 1)
        )
        self.norms = nn.ModuleList(ChannelNorm(width) for _ in range(scale - 1))

    def forward(self, x, x_mask):
        chunks = x.chunk(self.scale, dim=1)
        out = [chunks[0]]
        y = None
        for i, conv in enumerate(self.convs):
            inp = chunks[i + 1] if y is None else chunks[i + 1] + y
            y = self.norms[i](F.relu(conv(inp * x_mask))) * x_mask
            out.append(y)
        return torch.cat(out, dim=1)


class SERes2Block(nn.Module):
    """1x1 conv -> Res2 conv -> 1x1 conv -> squeeze-excite, with a residual path."""

    def __init__(self, channels: int, kernel_size: int = 3, dilation: int = 1, scale: int = 4,
                 se: bool = True):
        super().__init__()
        self.pre = nn.Conv1d(channels, channels, 1)
        self.pre_norm = ChannelNorm(channels)
        self.res2 = Res2Conv(channels, kernel_size, dilation, scale)
        self.post = nn.Conv1d(channels, channels, 1)
        self.post_norm = ChannelNorm(channels)
        self.se = SqueezeExcite(channels, max(8, channels // 4)) if se else None

    def forward(self, x, x_mask):
        h = self.pre_norm(F.relu(self.pre(x))) * x_mask
        h = self.res2(h, x_mask)
        h = self.post_norm(F.relu(self.post(h))) * x_mask
        if self.se is not None:
            h = self.se(h, x_mask)
        return (x + h) * x_mask
