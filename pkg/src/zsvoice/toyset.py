"""Deterministic synthetic two-speaker corpus for desk-scale runs.

Each "phoneme" is a formant pattern (or noise band, or silence). A speaker is
a pitch, a formant scaling, a spectral tilt and a speaking rate, so the corpus
carries separable content, timbre and rhythm, which is all the toy checks need.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import SAMPLE_RATE, Waveform, write_wav
from .data import UtteranceRecord, Vocabulary, write_manifest

HOP = 256

# (F1, F2, F3) in Hz, voicing amount, noise amount
PHONES: dict[str, tuple[tuple[float, float, float], float, float]] = {
    "a": ((730, 1090, 2440), 1.0, 0.0),
    "e": ((530, 1840, 2480), 1.0, 0.0),
    "i": ((270, 2290, 3010), 1.0, 0.0),
    "o": ((570, 840, 2410), 1.0, 0.0),
    "u": ((300, 870, 2240), 1.0, 0.0),
    "m": ((250, 1000, 2200), 0.35, 0.0),
    "s": ((4500, 5500, 6500), 0.0, 0.5),
    "sil": ((500, 1500, 2500), 0.0, 0.0),
}


@dataclass(frozen=True)
class ToySpeaker:
    name: str
    f0: float
    formant_scale: float
    tilt: float          # amplitude falloff per kHz
    frames: tuple[int, int]  # phoneme duration range, inclusive


SPEAKERS = (
    ToySpeaker("spkA", 110.0, 1.0, 0.35, (7, 12)),
    ToySpeaker("spkB", 215.0, 1.17, 0.15, (11, 17)),
)


def _smooth(track: np.ndarray, width: int) -> np.ndarray:
    kernel = np.hanning(width)
    kernel /= kernel.sum()
    padded = np.pad(track, (width, width), mode="edge")
    return np.convolve(padded, kernel, mode="same")[width:-width]


def synthesize(phonemes: list[str], durations: list[int], speaker: ToySpeaker, rng: np.random.Generator,
               sample_rate: int = SAMPLE_RATE) -> Waveform:
    """Render a phoneme sequence with per-phoneme frame ``durations``."""
    n = sum(durations) * HOP
    formants = np.zeros((3, n))
    voicing = np.zeros(n)
    noise_amt = np.zeros(n)
    pos = 0
    for p, d in zip(phonemes, durations):
        f, v, a = PHONES[p]
        seg = slice(pos, pos + d * HOP)
        formants[:, seg] = np.asarray(f)[:, None] * speaker.formant_scale
        voicing[seg] = v
        noise_amt[seg] = a
        pos += d * HOP
    width = HOP
    formants = np.stack([_smooth(f, width) for f in formants])
    voicing = _smooth(voicing, width)
    noise_amt = _smooth(noise_amt, width)

    t = np.arange(n) / sample_rate
    f0 = speaker.f0 * (1.0 + 0.03 * np.sin(2 * np.pi * 0.7 * t) - 0.05 * t / max(t[-1], 1e-9))
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    voiced = np.zeros(n)
    bandwidths = (90.0, 120.0, 160.0)
    gains = (1.0, 0.6, 0.3)
    for h in range(1, int(7600 // speaker.f0) + 1):
        fh = h * f0
        amp = sum(g * np.exp(-0.5 * ((fh - formants[k]) / bw) ** 2)
                  for k, (bw, g) in enumerate(zip(bandwidths, gains)))
        amp = amp * np.exp(-speaker.tilt * fh / 1000.0) + 0.02 / h
        voiced += amp * np.sin(h * phase)
    noise = rng.standard_normal(n)
    spectrum = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    spectrum *= ((freqs > 4000) & (freqs < 7500)) * 1.0
    hiss = np.fft.irfft(spectrum, n)
    hiss /= np.abs(hiss).max() + 1e-9
    y = voicing * voiced / (np.abs(voiced).max() + 1e-9) + noise_amt * hiss
    y += 1e-3 * rng.standard_normal(n)
    y = 0.5 * y / (np.abs(y).max() + 1e-9)
    return Waveform(y.astype(np.float32), sample_rate)


def random_sentence(rng: np.random.Generator, speaker: ToySpeaker, seconds: float) -> tuple[list[str], list[int]]:
    symbols = [p for p in PHONES if p != "sil"]
    target = int(seconds * SAMPLE_RATE / HOP)
    phonemes, durations = ["sil"], [int(rng.integers(4, 8))]
    while sum(durations) < target - 8:
        phonemes.append(symbols[int(rng.integers(len(symbols)))])
        durations.append(int(rng.integers(speaker.frames[0], speaker.frames[1] + 1)))
    phonemes.append("sil")
    durations.append(max(2, target - sum(durations)))
    return phonemes, durations


def make_toy_corpus(out_dir: str | Path, utterances_per_speaker: int = 4, seconds: float = 6.0,
                    seed: int = 7) -> Path:
    """Write wavs, ``train.txt`` manifest, ``vocab.txt`` and ``toy.cfg``; return the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "wavs").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for spk in SPEAKERS:
        for k in range(utterances_per_speaker):
            phonemes, durations = random_sentence(rng, spk, seconds)
            wave = synthesize(phonemes, durations, spk, rng)
            path = out_dir / "wavs" / f"{spk.name}_{k:02d}.wav"
            write_wav(path, wave)
            records.append(UtteranceRecord(str(path), spk.name, phonemes, wave.duration))
    manifest = out_dir / "train.txt"
    write_manifest(manifest, records)
    Vocabulary(list(PHONES)).save(out_dir / "vocab.txt")
    (out_dir / "toy.cfg").write_text(
        "include = toy\n"
        f"train_manifest = {manifest.name}\n"
        "vocab = vocab.txt\n",
        encoding="utf-8",
    )
    return manifest
