import numpy as np
import pytest
import torch

from zsvoice.audio import Waveform, read_wav
from zsvoice.model import build_models
from zsvoice.pipelines import (
    SynthesisError,
    SynthesisRequest,
    encode_audio,
    run_request,
    speaker_embedding,
    tts,
    vc,
)


@pytest.fixture(scope="module")
def setup(toy_cfg, toy_vocab, toy_manifest):
    model, _ = build_models(toy_cfg, len(toy_vocab), seed=0)
    for c in model.flow.couplings:
        torch.nn.init.normal_(c.post.weight, std=0.05)
    model.eval()
    by_speaker = {}
    for rec in toy_manifest:
        by_speaker.setdefault(rec.speaker_id, []).append(read_wav(rec.audio_path).trim(2.0))
    return model, toy_vocab, by_speaker


PHONES = "sil m a s i sil".split()


def test_tts_length_matches_predicted_frames(setup):
    model, vocab, refs = setup
    out = tts(PHONES, refs["spkA"][0], model, vocab, seed=1)
    assert out.frames == int(out.durations.sum())
    assert len(out.wave.samples) == out.frames * model.cfg.hop
    assert torch.all(out.durations >= 1)
    assert np.all(np.abs(out.wave.samples) <= 1.0)


def test_pace_scales_durations(setup):
    model, vocab, refs = setup
    slow = tts(PHONES, refs["spkA"][0], model, vocab, pace=3.0)
    normal = tts(PHONES, refs["spkA"][0], model, vocab, pace=1.0)
    assert slow.frames >= normal.frames


def test_tts_is_deterministic_per_seed(setup):
    model, vocab, refs = setup
    a = tts(PHONES, refs["spkA"][0], model, vocab, seed=3).wave.samples
    b = tts(PHONES, refs["spkA"][0], model, vocab, seed=3).wave.samples
    c = tts(PHONES, refs["spkA"][0], model, vocab, seed=4).wave.samples
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_reference_changes_output(setup):
    model, vocab, refs = setup
    a = tts(PHONES, refs["spkA"][0], model, vocab, seed=3)
    b = tts(PHONES, refs["spkB"][0], model, vocab, seed=3)
    n = min(a.frames, b.frames) * model.cfg.hop
    assert not np.allclose(a.wave.samples[:n], b.wave.samples[:n])


def test_tts_input_errors(setup):
    model, vocab, refs = setup
    with pytest.raises(SynthesisError, match="empty"):
        tts([], refs["spkA"][0], model, vocab)
    with pytest.raises(SynthesisError, match="reference"):
        tts(PHONES, refs["spkA"][0].trim(0.3), model, vocab)
    with pytest.raises(KeyError, match="zz"):
        tts(["a", "zz"], refs["spkA"][0], model, vocab)


def test_embedding_and_latent_are_reproducible(setup):
    model, _, refs = setup
    wave = refs["spkB"][1]
    with torch.no_grad():
        assert torch.equal(speaker_embedding(model, wave, 5), speaker_embedding(model, wave, 5))
        _, z = encode_audio(model, wave, None)
        _, z_mean = encode_audio(model, wave, None)
    assert torch.equal(z.values, z_mean.values)


def test_vc_keeps_source_length(setup):
    model, _, refs = setup
    src = refs["spkA"][0].trim(1.3)
    out = vc(src, refs["spkB"][0], model)
    assert len(out.wave.samples) == out.frames * model.cfg.hop
    assert out.frames == 1 + len(src.samples) // model.cfg.hop


def test_self_conversion_is_reconstruction(setup):
    model, _, refs = setup
    wave = refs["spkA"][1]
    out = vc(wave, wave, model, seed=2)
    with torch.no_grad():
        _, z = encode_audio(model, wave, 2)
        direct = model.decoder(z.values)[0].double().numpy()
    np.testing.assert_allclose(out.wave.samples, direct, atol=1e-4)


def test_request_validation(setup):
    _, _, refs = setup
    with pytest.raises(SynthesisError):
        SynthesisRequest("tts", refs["spkA"][0])
    with pytest.raises(SynthesisError):
        SynthesisRequest("vc", refs["spkA"][0])
    with pytest.raises(SynthesisError):
        SynthesisRequest("sing", refs["spkA"][0])
    with pytest.raises(SynthesisError):
        SynthesisRequest("tts", refs["spkA"][0], PHONES, pace=0.0)


def test_run_request_dispatches(setup):
    model, vocab, refs = setup
    req = SynthesisRequest("tts", refs["spkA"][0], PHONES, seed=9)
    direct = tts(PHONES, refs["spkA"][0], model, vocab, seed=9)
    assert np.array_equal(run_request(req, model, vocab).wave.samples, direct.wave.samples)
    req = SynthesisRequest("vc", refs["spkA"][0], source_audio=refs["spkB"][0].trim(1.0))
    assert run_request(req, model, vocab).frames == 1 + int(1.0 * 22050) // 256


def test_silent_reference_still_synthesizes(setup):
    model, vocab, _ = setup
    out = tts(PHONES, Waveform(np.zeros(22050), 22050), model, vocab)
    assert np.all(np.isfinite(out.wave.samples))
