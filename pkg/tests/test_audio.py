import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from zsvoice.audio import (
    AudioError,
    SpectrogramFrontEnd,
    Waveform,
    compute_linear_spectrogram,
    mel_filterbank,
    num_frames,
    read_wav,
    resample,
    write_wav,
)
from zsvoice.vae import reconstruction_loss

SR = 22050


def test_frame_count_example():
    spec = compute_linear_spectrogram(Waveform(np.zeros(25600), SR), 1024, 256, 1024)
    assert spec.shape == (101, 513)


def test_zero_waveform_gives_zero_magnitudes():
    spec = compute_linear_spectrogram(Waveform(np.zeros(4096), SR))
    assert np.all(spec == 0.0)


def test_bin_center_sine_peaks_at_its_bin():
    k = 40
    f = k * SR / 1024
    t = np.arange(8192) / SR
    spec = compute_linear_spectrogram(Waveform(0.5 * np.sin(2 * np.pi * f * t), SR))
    middle = spec[spec.shape[0] // 2]
    # oracle: DFT of one Hann-windowed frame
    frame = 0.5 * np.sin(2 * np.pi * f * (np.arange(1024) + 2048) / SR) * np.hanning(1025)[:-1]
    assert np.argmax(np.abs(np.fft.rfft(frame))) == k
    assert np.argmax(middle) == k


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 6000), hop=st.sampled_from([64, 128, 256]))
def test_frame_count_formula(n, hop):
    y = torch.from_numpy(np.random.default_rng(n).uniform(-1, 1, n).astype(np.float32))
    spec = SpectrogramFrontEnd(n_fft=1024, hop=hop, win=1024).linear(y[None])
    assert spec.shape[-1] == num_frames(n, hop) == 1 + n // hop
    assert torch.all(spec >= 0) and torch.all(torch.isfinite(spec))


def test_empty_waveform_rejected():
    with pytest.raises(AudioError):
        Waveform(np.zeros(0), SR)


def test_non_finite_rejected():
    with pytest.raises(AudioError):
        Waveform(np.array([0.0, np.nan]), SR)


@pytest.mark.parametrize("rate", [8000, 16000, 24000, 44100, 48000])
def test_resample_preserves_duration(rate):
    wave = Waveform(np.random.default_rng(0).uniform(-0.5, 0.5, rate * 2 + 7), rate)
    out = resample(wave, SR)
    assert out.sample_rate == SR
    assert abs(out.duration - wave.duration) <= 1.0 / SR


def test_wav_round_trip_pcm16(tmp_path):
    wave = Waveform(0.3 * np.sin(np.linspace(0, 100, 5000)), SR)
    write_wav(tmp_path / "a.wav", wave)
    back = read_wav(tmp_path / "a.wav")
    np.testing.assert_allclose(back.samples, wave.samples, atol=1.0 / 32767)


def test_float_wav_is_resampled_on_read(tmp_path):
    from scipy.io import wavfile
    y = (0.2 * np.sin(np.linspace(0, 50, 16000))).astype(np.float32)
    wavfile.write(tmp_path / "f.wav", 16000, y)
    back = read_wav(tmp_path / "f.wav")
    assert back.sample_rate == SR
    assert abs(back.duration - 1.0) <= 1.0 / SR


def _oracle_filterbank(n_fft=1024, n_mels=80, fmax=8000.0):
    """Slaney mel triangles built one bin at a time."""

    def to_mel(f):
        return f / (200 / 3) if f < 1000 else 15 + np.log(f / 1000) / (np.log(6.4) / 27)

    def to_hz(m):
        return m * 200 / 3 if m < 15 else 1000 * np.exp((m - 15) * np.log(6.4) / 27)

    edges = [to_hz(m) for m in np.linspace(to_mel(0.0), to_mel(fmax), n_mels + 2)]
    freqs = np.arange(n_fft // 2 + 1) * SR / n_fft
    fb = np.zeros((n_mels, len(freqs)))
    for m in range(n_mels):
        lo, c, hi = edges[m], edges[m + 1], edges[m + 2]
        for k, f in enumerate(freqs):
            if lo < f <= c:
                fb[m, k] = (f - lo) / (c - lo)
            elif c < f < hi:
                fb[m, k] = (hi - f) / (hi - c)
        fb[m] *= 2.0 / (hi - lo)
    return fb


def _oracle_log_mel(y: np.ndarray) -> np.ndarray:
    n_fft, hop = 1024, 256
    padded = np.pad(y.astype(np.float64), n_fft // 2, mode="reflect")
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n_fft) / n_fft)
    frames = [padded[i * hop : i * hop + n_fft] * window for i in range(1 + len(y) // hop)]
    mag = np.abs(np.fft.rfft(np.array(frames), axis=1)).T
    return np.log(np.maximum(_oracle_filterbank() @ mag, 1e-5))


def test_filterbank_matches_loop_oracle():
    fb = np.asarray(mel_filterbank(SR, 1024, 80, 0.0, 8000.0), dtype=np.float64)
    assert fb.shape == (80, 513)
    np.testing.assert_allclose(fb, _oracle_filterbank(), rtol=1e-5, atol=1e-8)


def test_reconstruction_loss_against_oracle():
    t = np.arange(4096) / SR
    sine = (0.5 * np.sin(2 * np.pi * 440 * t)).astype(np.float32)
    zero = np.zeros_like(sine)
    expected = np.mean(np.abs(_oracle_log_mel(zero) - _oracle_log_mel(sine)))
    got = reconstruction_loss(Waveform(zero, SR), Waveform(sine, SR), SpectrogramFrontEnd())
    assert float(got) == pytest.approx(expected, rel=1e-4)


def test_reconstruction_loss_identity_and_symmetry():
    fe = SpectrogramFrontEnd()
    rng = np.random.default_rng(1)
    a = torch.from_numpy(rng.uniform(-0.5, 0.5, 3000).astype(np.float32))
    b = torch.from_numpy(rng.uniform(-0.5, 0.5, 3000).astype(np.float32))
    assert float(reconstruction_loss(a, a, fe)) == 0.0
    assert float(reconstruction_loss(a, b, fe)) == pytest.approx(float(reconstruction_loss(b, a, fe)))
    assert float(reconstruction_loss(a, b, fe)) > 0


def test_reconstruction_loss_length_mismatch():
    with pytest.raises(ValueError):
        reconstruction_loss(torch.zeros(100), torch.zeros(101), SpectrogramFrontEnd())
