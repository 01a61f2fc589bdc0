from __future__ import annotations

import torch
from torch import nn

from .adversarial import LeakageDiscriminator, TimbreResidualDiscriminator
from .config import RunConfig
from .flow import TimbreTransformer
from .phonemes import DurationPredictor, TextEncoder
from .speaker import SpeakerEncoder
from .vae import PosteriorEncoder, WaveformDecoder


class Synthesizer(nn.Module):
    """Everything on the generator side of training."""

    def __init__(self, cfg: RunConfig, n_vocab: int):
        super().__init__()
        self.cfg = cfg
        self.n_vocab = n_vocab
        self.posterior_encoder = PosteriorEncoder(cfg.n_freq, cfg.d_latent, cfg.hidden,
                                                  n_layers=cfg.posterior_layers)
        self.decoder = WaveformDecoder(cfg.d_latent, cfg.upsample_rates, cfg.upsample_initial_channels)
        self.text_encoder = TextEncoder(n_vocab, cfg.d_latent, cfg.hidden, cfg.text_ffn, cfg.text_heads,
                                        cfg.text_layers, window=cfg.text_window)
        self.duration_predictor = DurationPredictor(cfg.hidden, cfg.dp_filter, gin_channels=cfg.d_spk)
        self.flow = TimbreTransformer(cfg.d_latent, cfg.hidden, cfg.d_spk, n_flows=cfg.flow_layers,
                                      n_layers=cfg.flow_wn_layers)
        spk_in = cfg.d_latent if cfg.speaker_input == "latent" else cfg.n_freq
        self.speaker_encoder = SpeakerEncoder(spk_in, cfg.spk_channels, cfg.d_spk, cfg.spk_blocks)

    def speaker_source(self, spec: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        """What the speaker encoder reads: the latent, or the spectrogram under the ablation flag."""
        return z if self.cfg.speaker_input == "latent" else spec


class Discriminators(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.leakage = LeakageDiscriminator(cfg.d_spk)
        self.timbre = TimbreResidualDiscriminator(cfg.d_latent, cfg.disc_channels)


def build_models(cfg: RunConfig, n_vocab: int, seed: int | None = None) -> tuple[Synthesizer, Discriminators]:
    if seed is not None:
        torch.manual_seed(seed)
    return Synthesizer(cfg, n_vocab), Discriminators(cfg)
