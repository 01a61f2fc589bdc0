"""Speaker-conditioned invertible flow between the timbre-invariant prior domain
and the timbre-dependent latent domain."""

from __future__ import annotations

import torch
from torch import nn

from .commons import WN

LOG_SCALE_LIMIT = 5.0


class AffineCoupling(nn.Module):
    """Transforms the second channel half with a scale and shift predicted from
    the first half and the speaker embedding. Padded frames pass through unchanged."""

    def __init__(self, channels: int, hidden: int, kernel_size: int, dilation_rate: int, n_layers: int,
                 gin_channels: int):
        super().__init__()
        self.half = channels // 2
        self.pre = nn.Conv1d(self.half, hidden, 1)
        self.enc = WN(hidden, kernel_size, dilation_rate, n_layers, gin_channels=gin_channels)
        self.post = nn.Conv1d(hidden, self.half * 2, 1)
        nn.init.zeros_(self.post.weight)
        nn.init.zeros_(self.post.bias)

    def _stats(self, x0, mask, g):
        h = self.pre(x0) * mask
        h = self.enc(h, mask, g=g)
        stats = self.post(h) * mask
        shift, log_scale = stats.split(self.half, dim=1)
        return shift, log_scale.clamp(-LOG_SCALE_LIMIT, LOG_SCALE_LIMIT)

    def forward(self, x, mask, g, reverse: bool = False):
        x0, x1 = x.split(self.half, dim=1)
        shift, log_scale = self._stats(x0, mask, g)
        if not reverse:
            x1 = shift + x1 * torch.exp(log_scale)
            logdet = (log_scale * mask).sum((1, 2))
        else:
            x1 = (x1 - shift) * torch.exp(-log_scale)
            logdet = -(log_scale * mask).sum((1, 2))
        return torch.cat([x0, x1], dim=1), logdet


class TimbreTransformer(nn.Module):
    """Stack of affine couplings with channel flips in between.

    Each layer is followed by a flip, except the last one when the layer count
    is odd, so the flips always cancel and a zero-initialised stack is the identity.

    ``forward`` maps prior-domain sequences to latent-domain ones (adds timbre);
    ``reverse`` is its exact inverse (removes timbre). Both return the
    log-determinant of the map they applied.
    """

    def __init__(self, channels: int, hidden: int, gin_channels: int, n_flows: int = 4,
                 kernel_size: int = 5, dilation_rate: int = 1, n_layers: int = 4):
        super().__init__()
        if channels % 2:
            raise ValueError("channels must be even")
        self.channels = channels
        self.gin_channels = gin_channels
        self.couplings = nn.ModuleList(
            AffineCoupling(channels, hidden, kernel_size, dilation_rate, n_layers, gin_channels)
            for _ in range(n_flows)
        )
        self.flip_after = [i < n_flows - 1 or n_flows % 2 == 0 for i in range(n_flows)]

    def _check(self, x, s):
        if x.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} latent channels, got {x.shape[1]}")
        if s.shape[-1] != self.gin_channels:
            raise ValueError(f"expected speaker embedding of size {self.gin_channels}, got {s.shape[-1]}")
        return s.unsqueeze(-1)

    def forward(self, x, mask, s):
        g = self._check(x, s)
        logdet = x.new_zeros(x.shape[0])
        for coupling, flip in zip(self.couplings, self.flip_after):
            x, ld = coupling(x, mask, g)
            if flip:
                x = torch.flip(x, [1])
            logdet = logdet + ld
        return x, logdet

    def reverse(self, z, mask, s):
        g = self._check(z, s)
        logdet = z.new_zeros(z.shape[0])
        for i in range(len(self.couplings) - 1, -1, -1):
            if self.flip_after[i]:
                z = torch.flip(z, [1])
            z, ld = self.couplings[i](z, mask, g, reverse=True)
            logdet = logdet + ld
        return z, logdet

    def log_det_forward(self, x, mask, s):
        return self.forward(x, mask, s)[1]
