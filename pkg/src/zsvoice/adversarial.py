"""Disentanglement adversaries.

* A feedforward leakage discriminator scores concatenated speaker-embedding
  pairs; it learns to tell the overlapping-window pair (which shares phonetic
  content) from the GT/reference pair, while the speaker encoder is penalised
  whenever the overlapping pair is recognisable.
* A Res2Net discriminator judges whether a prior-domain sequence still carries
  timbre. The reverse-flow output reaches it through a gradient reversal layer,
  so one backward pass descends the loss for the discriminator and ascends it,
  scaled by ``lambda_d``, for the flow.

All three losses are least-squares.
"""

from __future__ import annotations

import torch
from torch import nn
from torch.func import functional_call
from torch.nn import functional as F

from .commons import AttentiveStatsPool, ChannelNorm, SERes2Block


class _ReverseGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, scale):
        ctx.scale = scale
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output * -ctx.scale, None


def gradient_reversal(x: torch.Tensor, lambda_d: float) -> torch.Tensor:
    """Identity going forward; multiplies the incoming gradient by ``-lambda_d``."""
    if lambda_d < 0:
        raise ValueError("lambda_d must be non-negative")
    return _ReverseGrad.apply(x, float(lambda_d))


class GradientReversal(nn.Module):
    def __init__(self, lambda_d: float = 8.0):
        super().__init__()
        if lambda_d < 0:
            raise ValueError("lambda_d must be non-negative")
        self.lambda_d = lambda_d

    def forward(self, x):
        return gradient_reversal(x, self.lambda_d)


class LeakageDiscriminator(nn.Module):
    def __init__(self, d_spk: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or 4 * d_spk
        self.net = nn.Sequential(
            nn.Linear(2 * d_spk, hidden),
            nn.LeakyReLU(0.2),
            nn.Linear(hidden, hidden),
            nn.LeakyReLU(0.2),
            nn.Linear(hidden, 1),
        )

    def forward(self, pair: torch.Tensor) -> torch.Tensor:
        return self.net(pair).squeeze(-1)


class TimbreResidualDiscriminator(nn.Module):
    """Res2Net blocks, attentive statistics pooling, linear score head."""

    def __init__(self, in_channels: int, channels: int = 32, n_blocks: int = 2, scale: int = 4):
        super().__init__()
        self.conv_in = nn.Conv1d(in_channels, channels, 3, padding=1)
        self.norm_in = ChannelNorm(channels)
        self.blocks = nn.ModuleList(
            SERes2Block(channels, 3, dilation=i + 1, scale=scale, se=False) for i in range(n_blocks)
        )
        self.pool = AttentiveStatsPool(channels, attention_channels=channels)
        self.head = nn.Linear(2 * channels, 1)

    def forward(self, x: torch.Tensor, x_mask: torch.Tensor) -> torch.Tensor:
        h = self.norm_in(F.leaky_relu(self.conv_in(x * x_mask), 0.2)) * x_mask
        for block in self.blocks:
            h = block(h, x_mask)
        return self.head(self.pool(h, x_mask)).squeeze(-1)


def frozen(module: nn.Module, *args):
    """Run ``module`` with detached parameters: gradients reach the inputs only."""
    params = {k: v.detach() for k, v in module.named_parameters()}
    return functional_call(module, params, args)


def leakage_discriminator_loss(d_contrast: torch.Tensor, d_overlap: torch.Tensor) -> torch.Tensor:
    """Contrast pair pushed toward 1, overlapping pair toward 0."""
    return torch.mean((d_contrast - 1) ** 2) + torch.mean(d_overlap ** 2)


def speaker_encoder_adversarial_loss(d_overlap: torch.Tensor, lambda_se: float) -> torch.Tensor:
    return lambda_se * torch.mean((d_overlap - 1) ** 2)


def timbre_residual_loss(d_m: torch.Tensor, d_rev: torch.Tensor) -> torch.Tensor:
    """Prior samples pushed toward 1, reverse-flow outputs toward 0."""
    return torch.mean((d_m - 1) ** 2) + torch.mean(d_rev ** 2)
