"""Zero-shot TTS and voice conversion inference.

Latent draws use a fresh generator seeded per call, so identical audio with an
identical seed always maps to the identical latent (and hence embedding). This
is what makes self-conversion an exact flow round trip.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .audio import SpectrogramFrontEnd, Waveform
from .commons import masked_randn
from .data import Vocabulary
from .model import Synthesizer
from .phonemes import expand_to_frames, predict_durations, round_durations
from .vae import LatentSpeechSequence, sample_latent

MIN_REFERENCE_SECONDS = 0.5


class SynthesisError(ValueError):
    pass


@dataclass
class SynthesisRequest:
    mode: str                              # "tts" or "vc"
    reference_audio: Waveform
    phonemes: list[str] = field(default_factory=list)
    source_audio: Waveform | None = None
    pace: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("tts", "vc"):
            raise SynthesisError(f"unknown mode {self.mode!r}")
        if self.mode == "tts" and not self.phonemes:
            raise SynthesisError("TTS request needs phonemes")
        if self.mode == "vc" and self.source_audio is None:
            raise SynthesisError("VC request needs source audio")
        if self.pace <= 0:
            raise SynthesisError("pace must be positive")


@dataclass
class SynthesisResult:
    wave: Waveform
    frames: int
    durations: torch.Tensor | None = None


def _seeded(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed))


def _check_reference(wave: Waveform, what: str) -> None:
    if wave.duration < MIN_REFERENCE_SECONDS:
        raise SynthesisError(f"{what} audio is {wave.duration:.2f} s, need at least {MIN_REFERENCE_SECONDS} s")


def encode_audio(model: Synthesizer, wave: Waveform, seed: int | None = 0):
    """Spectrogram and latent for one waveform. ``seed=None`` returns the posterior mean."""
    frontend = SpectrogramFrontEnd.from_config(model.cfg)
    spec = frontend.linear(torch.from_numpy(wave.samples)[None])
    mask = torch.ones(1, 1, spec.shape[-1])
    stats = model.posterior_encoder(spec, mask)
    if seed is None:
        z = LatentSpeechSequence(stats.mu, mask)
    else:
        z = sample_latent(stats, _seeded(seed))
    return spec, z


def speaker_embedding(model: Synthesizer, wave: Waveform, seed: int | None = 0) -> torch.Tensor:
    """Embedding over the full utterance, shape [1, d_spk]."""
    spec, z = encode_audio(model, wave, seed)
    src = model.speaker_source(spec, z.values)
    return model.speaker_encoder(src, z.mask)


@torch.no_grad()
def tts(phonemes: list[str], reference: Waveform, model: Synthesizer, vocab: Vocabulary, seed: int = 0,
        pace: float = 1.0, temperature: float | None = None) -> SynthesisResult:
    if not phonemes:
        raise SynthesisError("empty phoneme sequence")
    _check_reference(reference, "reference")
    model.eval()
    cfg = model.cfg
    temperature = cfg.temperature if temperature is None else temperature
    s_ref = speaker_embedding(model, reference, seed)

    ids = torch.tensor([vocab.encode(phonemes)])
    pmask = torch.ones(1, 1, ids.shape[-1])
    x, m_p, logs_p = model.text_encoder(ids, pmask)
    w = predict_durations(model.duration_predictor(x, pmask, s_ref), pmask)
    durations = round_durations(w, pmask, pace)[:, 0]
    frames = int(durations.sum())
    m_f = expand_to_frames(m_p, durations, frames)
    logs_f = expand_to_frames(logs_p, durations, frames)
    eps = masked_randn(torch.tensor([frames]), m_f.shape[1], frames, _seeded(seed + 1))
    m = m_f + eps * torch.exp(logs_f) * temperature
    fmask = torch.ones(1, 1, frames)
    z, _ = model.flow(m, fmask, s_ref)
    y = model.decoder(z)[0]
    return SynthesisResult(Waveform(y.double().numpy(), cfg.sample_rate), frames, durations[0])


@torch.no_grad()
def vc(source: Waveform, reference: Waveform, model: Synthesizer, seed: int = 0) -> SynthesisResult:
    _check_reference(source, "source")
    _check_reference(reference, "reference")
    model.eval()
    spec_src, z_src = encode_audio(model, source, seed)
    s_src = model.speaker_encoder(model.speaker_source(spec_src, z_src.values), z_src.mask)
    s_ref = speaker_embedding(model, reference, seed)
    m_hat, _ = model.flow.reverse(z_src.values, z_src.mask, s_src)
    z_out, _ = model.flow(m_hat, z_src.mask, s_ref)
    y = model.decoder(z_out)[0]
    return SynthesisResult(Waveform(y.double().numpy(), model.cfg.sample_rate), z_src.values.shape[-1])


def run_request(request: SynthesisRequest, model: Synthesizer, vocab: Vocabulary) -> SynthesisResult:
    if request.mode == "tts":
        return tts(request.phonemes, request.reference_audio, model, vocab, request.seed, request.pace)
    return vc(request.source_audio, request.reference_audio, model, request.seed)
