import logging
import sys

import numpy as np
import pytest

from zsvoice.audio import Waveform, read_wav
from zsvoice.evaluation import (
    CommandEmbedder,
    EvaluationError,
    ModelEmbedder,
    SweepItem,
    cosine_similarity,
    edit_distance,
    emit_embedding_plot_data,
    normalize_volume,
    project_2d,
    reference_length_sweep,
    smcs,
    summarize,
    wer_hook,
    word_error_rate,
)
from zsvoice.model import build_models
from zsvoice.pipelines import tts


def test_cosine_examples():
    assert cosine_similarity([1, 0], [2, 0]) == 1.0
    assert cosine_similarity([1, 0], [0, 3]) == 0.0
    assert cosine_similarity([1, 1], [-1, -1]) == pytest.approx(-1.0)
    assert cosine_similarity([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)


def test_cosine_scale_invariance():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=16), rng.normal(size=16)
    assert cosine_similarity(a, b) == pytest.approx(cosine_similarity(3.7 * a, 0.2 * b))


def test_cosine_errors():
    with pytest.raises(ValueError, match="zero"):
        cosine_similarity([0, 0], [1, 0])
    with pytest.raises(ValueError, match="mismatch"):
        cosine_similarity([1, 0], [1, 0, 0])


def _fake_embedder(wave: Waveform):
    y = wave.samples
    return np.array([y.mean() + 1.0, np.abs(y).mean(), y.std() + 0.1])


def _waves(n, seed=0):
    rng = np.random.default_rng(seed)
    return [Waveform(rng.uniform(-0.5, 0.5, 2000), 22050) for _ in range(n)]


def test_smcs_identical_sets_is_one():
    waves = _waves(4)
    result = smcs(waves, waves, _fake_embedder)
    assert result.mean == pytest.approx(1.0) and result.n == 4


def test_smcs_single_pair_is_degenerate():
    w = _waves(2)
    result = smcs(w[:1], w[1:], _fake_embedder)
    assert result.degenerate and result.ci95 == 0.0


def test_confidence_interval_oracle():
    values = [0.9, 0.7, 0.8, 0.95, 0.6]
    result = summarize([(str(i), v) for i, v in enumerate(values)])
    assert result.mean == pytest.approx(np.mean(values))
    assert result.ci95 == pytest.approx(1.96 * np.std(values, ddof=1) / np.sqrt(5))


def test_smcs_is_order_invariant():
    a, b = _waves(5, 1), _waves(5, 2)
    perm = [3, 0, 4, 1, 2]
    r1 = smcs(a, b, _fake_embedder)
    r2 = smcs([a[i] for i in perm], [b[i] for i in perm], _fake_embedder)
    assert r1.mean == pytest.approx(r2.mean)


def test_volume_normalization():
    wave = Waveform(np.array([0.1, -0.4, 0.2]), 22050)
    np.testing.assert_allclose(normalize_volume(wave).samples, [0.2375, -0.95, 0.475], rtol=1e-6)
    silent = Waveform(np.zeros(5), 22050)
    assert normalize_volume(silent) is silent


def test_normalized_smcs_ignores_gain():
    a, b = _waves(3, 1), _waves(3, 2)
    quiet = [Waveform(0.1 * w.samples, w.sample_rate) for w in a]
    loud = smcs(a, b, _fake_embedder, normalize=True)
    soft = smcs(quiet, b, _fake_embedder, normalize=True)
    assert loud.mean == pytest.approx(soft.mean, abs=1e-6)
    assert smcs(quiet, b, _fake_embedder).mean != pytest.approx(loud.mean, abs=1e-6)


def test_smcs_count_mismatch():
    with pytest.raises(EvaluationError):
        smcs(_waves(2), _waves(3), _fake_embedder)


@pytest.fixture(scope="module")
def sweep_setup(toy_cfg, toy_vocab, toy_manifest):
    model, _ = build_models(toy_cfg, len(toy_vocab), seed=0)
    model.eval()
    rec = toy_manifest[0]
    ref = read_wav(toy_manifest[1].audio_path).trim(2.0)
    return model, toy_vocab, SweepItem(rec.utt_id, rec.phonemes[:8], ref)


def test_sweep_at_full_length_equals_plain_smcs(sweep_setup):
    model, vocab, item = sweep_setup
    embedder = ModelEmbedder(model)
    rows = reference_length_sweep(model, vocab, [item], [item.reference.duration], embedder, seed=4)
    synth = tts(item.phonemes, item.reference, model, vocab, seed=4).wave
    expected = smcs([synth], [item.reference], embedder)
    assert rows[0].mean_smcs == pytest.approx(expected.mean, abs=1e-9)


def test_sweep_skips_short_references(sweep_setup, caplog, tmp_path):
    model, vocab, item = sweep_setup
    with caplog.at_level(logging.WARNING):
        rows = reference_length_sweep(model, vocab, [item], [1.0, 50.0], seed=0, out_path=tmp_path / "s.jsonl")
    assert (rows[0].n, rows[0].skipped) == (1, 0)
    assert (rows[1].n, rows[1].skipped) == (0, 1) and np.isnan(rows[1].mean_smcs)
    assert "skipped 1" in caplog.text
    assert len((tmp_path / "s.jsonl").read_text().splitlines()) == 2


def test_sweep_rejects_non_positive_lengths(sweep_setup):
    model, vocab, item = sweep_setup
    with pytest.raises(ValueError):
        reference_length_sweep(model, vocab, [item], [0.0])


def test_edit_distance_and_wer():
    assert edit_distance("a b c".split(), "a x c".split()) == 1
    assert edit_distance([], "a b".split()) == 2
    assert word_error_rate(["a b c"], ["a x c"]) == pytest.approx(1 / 3)
    assert word_error_rate(["a b", "c d"], ["a b", "c d"]) == 0.0


def _script(tmp_path, name, body):
    path = tmp_path / name
    path.write_text(body)
    return f"{sys.executable} {path} {{wav}}"


def test_wer_hook_with_external_command(tmp_path):
    cmd = _script(tmp_path, "asr.py", "print('a x c')\n")
    assert wer_hook(["a b c"], _waves(1), cmd) == pytest.approx(1 / 3)


def test_wer_hook_errors(tmp_path):
    with pytest.raises(EvaluationError, match="asr_command"):
        wer_hook(["a"], _waves(1), "")
    with pytest.raises(EvaluationError, match="empty"):
        wer_hook(["  "], _waves(1), "echo {wav}")
    failing = _script(tmp_path, "bad.py", "import sys\nsys.stderr.write('boom')\nsys.exit(3)\n")
    with pytest.raises(EvaluationError, match="boom"):
        wer_hook(["a"], _waves(1), failing)


def test_command_embedder(tmp_path):
    body = ("import sys\nfrom scipy.io import wavfile\n"
            "sr, y = wavfile.read(sys.argv[1])\nprint(len(y), sr)\n")
    emb = CommandEmbedder(_script(tmp_path, "emb.py", body))
    assert emb(Waveform(np.zeros(1234), 22050)).tolist() == [1234.0, 22050.0]
    with pytest.raises(ValueError):
        CommandEmbedder("echo nothing")


def test_projection_matches_eigen_oracle():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(12, 5)) * np.array([5.0, 3.0, 1.0, 0.5, 0.1])
    got = project_2d(x)
    centered = x - x.mean(0)
    vals, vecs = np.linalg.eigh(centered.T @ centered)
    expected = centered @ vecs[:, ::-1][:, :2]
    for k in range(2):
        sign = np.sign(got[:, k] @ expected[:, k])
        np.testing.assert_allclose(got[:, k], sign * expected[:, k], atol=1e-9)


def test_projection_of_identical_vectors(caplog):
    with caplog.at_level(logging.WARNING):
        pts = project_2d(np.ones((4, 3)))
    assert np.all(pts == 0) and "identical" in caplog.text


def test_plot_data_file(tmp_path):
    pts = emit_embedding_plot_data(["A", "A", "B"], np.eye(3), tmp_path / "p.jsonl")
    lines = (tmp_path / "p.jsonl").read_text().splitlines()
    assert len(lines) == 3 and pts.shape == (3, 2)
    with pytest.raises(ValueError):
        emit_embedding_plot_data(["A"], np.ones((1, 3)), tmp_path / "q.jsonl")


def test_model_embedder_returns_vector(sweep_setup):
    model, _, item = sweep_setup
    vec = ModelEmbedder(model)(item.reference)
    assert vec.shape == (model.cfg.d_spk,) and np.all(np.isfinite(vec))


def test_toy_embedder_separates_speakers(trained_toy, toy_manifest):
    embed = ModelEmbedder(trained_toy["model"])
    by_speaker = {}
    for rec in toy_manifest:
        by_speaker.setdefault(rec.speaker_id, []).append(read_wav(rec.audio_path))
    a, b = by_speaker["spkA"], by_speaker["spkB"]
    same = smcs(a[:-1] + b[:-1], a[1:] + b[1:], embed)
    cross = smcs(a, b, embed)
    assert cross.mean < same.mean
