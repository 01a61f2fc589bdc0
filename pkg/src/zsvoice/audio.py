"""Waveform I/O, resampling and spectrogram front end."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
from scipy.io import wavfile
from scipy.signal import resample_poly

SAMPLE_RATE = 22050
MEL_FLOOR = 1e-5


class AudioError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        if self.sample_rate <= 0:
            raise AudioError("sample_rate must be positive")
        if self.samples.size < 1:
            raise AudioError("waveform is empty")
        if not np.all(np.isfinite(self.samples)):
            raise AudioError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def trim(self, seconds: float) -> "Waveform":
        n = max(1, int(round(seconds * self.sample_rate)))
        return Waveform(self.samples[:n], self.sample_rate)


def read_wav(path: str | Path, target_rate: int = SAMPLE_RATE) -> Waveform:
    """Read a 16-bit PCM or float WAV file, resampled to ``target_rate``."""
    path = Path(path)
    if not path.exists():
        raise AudioError(f"audio file not found: {path}")
    rate, data = wavfile.read(str(path))
    if data.ndim > 1:
        data = data.mean(axis=1)
    if data.dtype == np.int16:
        data = data.astype(np.float32) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float32) / 2147483648.0
    elif data.dtype == np.uint8:
        data = (data.astype(np.float32) - 128.0) / 128.0
    else:
        data = data.astype(np.float32)
    return resample(Waveform(np.clip(data, -1.0, 1.0), rate), target_rate)


def write_wav(path: str | Path, wave: Waveform) -> None:
    """Write 16-bit PCM."""
    pcm = np.clip(np.round(wave.samples * 32767.0), -32768, 32767).astype(np.int16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), wave.sample_rate, pcm)


def wav_num_samples(path: str | Path) -> tuple[int, int]:
    rate, data = wavfile.read(str(path), mmap=True)
    return data.shape[0], rate


def resample(wave: Waveform, target_rate: int = SAMPLE_RATE) -> Waveform:
    if wave.sample_rate == target_rate:
        return wave
    g = math.gcd(wave.sample_rate, target_rate)
    up, down = target_rate // g, wave.sample_rate // g
    out = resample_poly(wave.samples.astype(np.float64), up, down, window=("kaiser", 5.0))
    return Waveform(out.astype(np.float32), target_rate)


def num_frames(num_samples: int, hop: int) -> int:
    return 1 + num_samples // hop


def _reflect_indices(n: int, pad: int) -> torch.Tensor:
    # Repeated reflection, so pads longer than the signal stay well defined.
    idx = torch.arange(-pad, n + pad)
    if n == 1:
        return torch.zeros_like(idx)
    period = 2 * (n - 1)
    idx = torch.remainder(idx, period)
    return torch.where(idx >= n, period - idx, idx)


def stft_magnitude(y: torch.Tensor, n_fft: int, hop: int, win: int) -> torch.Tensor:
    """Centered magnitude STFT. ``y`` is [B, N]; returns [B, n_fft//2+1, 1 + N//hop]."""
    if y.shape[-1] < 1:
        raise AudioError("waveform is empty")
    pad = n_fft // 2
    y = y[..., _reflect_indices(y.shape[-1], pad).to(y.device)]
    window = torch.hann_window(win, dtype=y.dtype, device=y.device)
    spec = torch.stft(y, n_fft, hop_length=hop, win_length=win, window=window,
                      center=False, return_complex=True)
    return spec.abs()


def hz_to_mel(f):
    # Slaney scale: linear below 1 kHz, logarithmic above.
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    mels = f / f_sp
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    return np.where(f >= min_log_hz, min_log_mel + np.log(np.maximum(f, 1e-10) / min_log_hz) / logstep, mels)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


@lru_cache(maxsize=16)
def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """Slaney-normalised triangular filters, shape [n_mels, n_fft//2+1]."""
    fft_freqs = np.linspace(0.0, sample_rate / 2, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    widths = np.diff(edges)
    ramps = edges[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / widths[:-1, None]
    upper = ramps[2:] / widths[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    weights.setflags(write=False)
    return weights


class SpectrogramFrontEnd:
    """Linear and log-mel spectrograms under one set of framing parameters."""

    def __init__(self, sample_rate: int = SAMPLE_RATE, n_fft: int = 1024, hop: int = 256,
                 win: int = 1024, mel_bins: int = 80, fmin: float = 0.0, fmax: float = 8000.0):
        if not hop <= win <= n_fft:
            raise AudioError("need hop <= win <= n_fft")
        self.sample_rate = sample_rate
        self.n_fft = n_fft
        self.hop = hop
        self.win = win
        self.mel_bins = mel_bins
        self.fmin = fmin
        self.fmax = fmax

    @classmethod
    def from_config(cls, cfg) -> "SpectrogramFrontEnd":
        return cls(cfg.sample_rate, cfg.n_fft, cfg.hop, cfg.win, cfg.mel_bins, cfg.mel_fmin, cfg.mel_fmax)

    @property
    def n_freq(self) -> int:
        return self.n_fft // 2 + 1

    def linear(self, y: torch.Tensor) -> torch.Tensor:
        return stft_magnitude(y, self.n_fft, self.hop, self.win)

    def log_mel(self, y: torch.Tensor) -> torch.Tensor:
        basis = mel_filterbank(self.sample_rate, self.n_fft, self.mel_bins, self.fmin, self.fmax)
        basis = torch.as_tensor(np.array(basis), dtype=y.dtype, device=y.device)
        mel = torch.matmul(basis, self.linear(y))
        return torch.log(torch.clamp(mel, min=MEL_FLOOR))


def compute_linear_spectrogram(wave: Waveform, n_fft: int = 1024, hop: int = 256, win: int = 1024) -> np.ndarray:
    """Magnitude spectrogram as [T_frames, n_fft//2+1]."""
    if wave.sample_rate != SAMPLE_RATE:
        wave = resample(wave, SAMPLE_RATE)
    y = torch.from_numpy(wave.samples)[None]
    return stft_magnitude(y, n_fft, hop, win)[0].T.numpy()
