"""Speech VAE: posterior encoder over linear spectrograms and a waveform decoder.

The posterior encoder deliberately takes no speaker input; speaker embeddings
are extracted downstream from its latents.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .audio import SpectrogramFrontEnd, Waveform
from .commons import WN, get_padding, masked_randn


@dataclass
class PosteriorStats:
    mu: torch.Tensor         # [B, d, T]
    log_sigma: torch.Tensor  # [B, d, T]
    mask: torch.Tensor       # [B, 1, T]

    @property
    def lengths(self) -> torch.Tensor:
        return self.mask.sum((1, 2)).long()


@dataclass
class LatentSpeechSequence:
    values: torch.Tensor  # [B, d, T]
    mask: torch.Tensor    # [B, 1, T]

    @property
    def lengths(self) -> torch.Tensor:
        return self.mask.sum((1, 2)).long()


class PosteriorEncoder(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, hidden: int, kernel_size: int = 5,
                 dilation_rate: int = 1, n_layers: int = 16):
        super().__init__()
        self.out_channels = out_channels
        self.pre = nn.Conv1d(in_channels, hidden, 1)
        self.enc = WN(hidden, kernel_size, dilation_rate, n_layers)
        self.proj = nn.Conv1d(hidden, out_channels * 2, 1)

    def forward(self, spec: torch.Tensor, mask: torch.Tensor) -> PosteriorStats:
        if spec.shape[-1] != mask.shape[-1] or spec.shape[0] != mask.shape[0]:
            raise ValueError(f"spectrogram {tuple(spec.shape)} does not match mask {tuple(mask.shape)}")
        x = self.pre(spec * mask) * mask
        x = self.enc(x, mask)
        stats = self.proj(x) * mask
        mu, log_sigma = stats.split(self.out_channels, dim=1)
        return PosteriorStats(mu, log_sigma, mask)


def sample_latent(stats: PosteriorStats, generator: torch.Generator | None = None,
                  sigma: torch.Tensor | None = None) -> LatentSpeechSequence:
    """Reparameterised draw ``mu + exp(log_sigma) * eps`` on real frames.

    ``sigma`` overrides ``exp(log_sigma)``; passing zeros gives the mean.
    """
    eps = masked_randn(stats.lengths, stats.mu.shape[1], stats.mu.shape[-1], generator, stats.mu.dtype)
    if sigma is None:
        sigma = torch.exp(stats.log_sigma)
    z = (stats.mu + sigma * eps) * stats.mask
    return LatentSpeechSequence(z, stats.mask)


class ResBlock(nn.Module):
    def __init__(self, channels: int, kernel_size: int = 3, dilations=(1, 3)):
        super().__init__()
        self.convs1 = nn.ModuleList(
            nn.Conv1d(channels, channels, kernel_size, dilation=d, padding=get_padding(kernel_size, d))
            for d in dilations
        )
        self.convs2 = nn.ModuleList(
            nn.Conv1d(channels, channels, kernel_size, padding=get_padding(kernel_size))
            for _ in dilations
        )

    def forward(self, x):
        for c1, c2 in zip(self.convs1, self.convs2):
            xt = c2(F.leaky_relu(c1(F.leaky_relu(x, 0.1)), 0.1))
            x = x + xt
        return x


class WaveformDecoder(nn.Module):
    """Transposed-convolution upsampler; output length is ``T * prod(upsample_rates)``."""

    def __init__(self, in_channels: int, upsample_rates=(8, 8, 4), initial_channels: int = 64,
                 resblock_kernels=(3, 7)):
        super().__init__()
        self.upsample_rates = tuple(upsample_rates)
        self.conv_pre = nn.Conv1d(in_channels, initial_channels, 7, padding=3)
        self.ups = nn.ModuleList()
        self.resblocks = nn.ModuleList()
        ch = initial_channels
        for u in self.upsample_rates:
            if u % 2:
                raise ValueError("upsample factors must be even")
            out = max(ch // 2, 4)
            self.ups.append(nn.ConvTranspose1d(ch, out, 2 * u, stride=u, padding=u // 2))
            self.resblocks.append(nn.ModuleList(ResBlock(out, k) for k in resblock_kernels))
            ch = out
        self.conv_post = nn.Conv1d(ch, 1, 7, padding=3)

    @property
    def hop(self) -> int:
        n = 1
        for u in self.upsample_rates:
            n *= u
        return n

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        """``z`` is [B, d, T]; returns [B, T * hop] in [-1, 1]."""
        if z.shape[-1] == 0:
            raise ValueError("cannot decode an empty latent sequence")
        x = self.conv_pre(z)
        for up, blocks in zip(self.ups, self.resblocks):
            x = up(F.leaky_relu(x, 0.1))
            x = sum(b(x) for b in blocks) / len(blocks)
        x = self.conv_post(F.leaky_relu(x))
        return torch.tanh(x).squeeze(1)


def decode_waveform(decoder: WaveformDecoder, z: LatentSpeechSequence, sample_rate: int = 22050) -> list[Waveform]:
    """Decode each item over its real frames."""
    out = []
    with torch.no_grad():
        for i, n in enumerate(z.lengths.tolist()):
            y = decoder(z.values[i : i + 1, :, :n])[0]
            out.append(Waveform(y.double().numpy(), sample_rate))
    return out


def reconstruction_loss(y_hat, y, frontend: SpectrogramFrontEnd) -> torch.Tensor:
    """Mean absolute difference of log-mel spectrograms."""
    if isinstance(y_hat, Waveform):
        y_hat = torch.from_numpy(y_hat.samples)
    if isinstance(y, Waveform):
        y = torch.from_numpy(y.samples)
    if y_hat.shape != y.shape:
        raise ValueError(f"length mismatch: {tuple(y_hat.shape)} vs {tuple(y.shape)}")
    return F.l1_loss(frontend.log_mel(y_hat), frontend.log_mel(y))
