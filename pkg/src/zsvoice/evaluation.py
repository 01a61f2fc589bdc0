"""Speaker-similarity evaluation, reference-length sweep, WER hook and
embedding projection for plotting."""

from __future__ import annotations

import json
import logging
import math
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .audio import Waveform, write_wav
from .data import Vocabulary
from .model import Synthesizer
from .pipelines import speaker_embedding, tts

log = logging.getLogger(__name__)

Embedder = Callable[[Waveform], np.ndarray]


class EvaluationError(RuntimeError):
    pass


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


@dataclass
class SimilarityResult:
    pairs: list[tuple[str, float]]
    mean: float
    ci95: float
    degenerate: bool = False

    @property
    def n(self) -> int:
        return len(self.pairs)


def summarize(pairs: list[tuple[str, float]]) -> SimilarityResult:
    if not pairs:
        raise EvaluationError("no pairs to summarize")
    values = np.array([c for _, c in pairs])
    mean = float(values.mean())
    if len(values) < 2:
        return SimilarityResult(pairs, mean, 0.0, degenerate=True)
    ci = 1.96 * float(values.std(ddof=1)) / math.sqrt(len(values))
    return SimilarityResult(pairs, mean, ci)


def normalize_volume(wave: Waveform, peak: float = 0.95) -> Waveform:
    """Scale to a fixed peak amplitude; silent audio is returned unchanged."""
    top = float(np.abs(wave.samples).max())
    if top == 0.0:
        return wave
    return Waveform(wave.samples * (peak / top), wave.sample_rate)


def smcs(synth_set: Sequence[Waveform], ref_set: Sequence[Waveform], embedder: Embedder,
         ids: Sequence[str] | None = None, normalize: bool = False) -> SimilarityResult:
    """Per-pair cosine between embeddings of synthesized and reference audio.

    ``normalize`` peak-normalizes both sides before embedding."""
    if len(synth_set) != len(ref_set):
        raise EvaluationError(f"{len(synth_set)} synthesized vs {len(ref_set)} references")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(synth_set))]
    if normalize:
        synth_set = [normalize_volume(w) for w in synth_set]
        ref_set = [normalize_volume(w) for w in ref_set]
    pairs = [(uid, cosine_similarity(embedder(s), embedder(r))) for uid, s, r in zip(ids, synth_set, ref_set)]
    return summarize(pairs)


class ModelEmbedder:
    """The model's own speaker encoder on posterior-mean latents."""

    def __init__(self, model: Synthesizer):
        self.model = model

    @torch.no_grad()
    def __call__(self, wave: Waveform) -> np.ndarray:
        self.model.eval()
        return speaker_embedding(self.model, wave, seed=None)[0].double().numpy()


class CommandEmbedder:
    """External embedder: ``template`` is a shell-style command with a ``{wav}``
    placeholder that prints the embedding as whitespace-separated floats."""

    def __init__(self, template: str, timeout: float = 120.0):
        if "{wav}" not in template:
            raise ValueError("embedder command template needs a {wav} placeholder")
        self.template = template
        self.timeout = timeout

    def __call__(self, wave: Waveform) -> np.ndarray:
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "in.wav"
            write_wav(path, wave)
            out = run_command(self.template, path, self.timeout)
        try:
            return np.array([float(v) for v in out.split()])
        except ValueError as exc:
            raise EvaluationError(f"embedder printed non-numeric output: {out[:200]!r}") from exc


def run_command(template: str, wav: Path, timeout: float) -> str:
    argv = [part.replace("{wav}", str(wav)) for part in shlex.split(template)]
    try:
        proc = subprocess.run(argv, capture_output=True, text=True, timeout=timeout)
    except (OSError, subprocess.TimeoutExpired) as exc:
        raise EvaluationError(f"external command failed: {argv[0]}: {exc}") from exc
    if proc.returncode != 0:
        raise EvaluationError(
            f"external command exited {proc.returncode}: {argv[0]}\nstderr: {proc.stderr.strip()[:2000]}")
    return proc.stdout.strip()


@dataclass
class SweepItem:
    uid: str
    phonemes: list[str]
    reference: Waveform


@dataclass
class SweepRow:
    length_s: float
    mean_smcs: float
    n: int
    skipped: int
    result: SimilarityResult | None = field(default=None, repr=False)


def reference_length_sweep(model: Synthesizer, vocab: Vocabulary, items: Sequence[SweepItem],
                           lengths: Sequence[float], embedder: Embedder | None = None, seed: int = 0,
                           out_path: str | Path | None = None) -> list[SweepRow]:
    """TTS with references trimmed to each length; SMCS against the untrimmed reference."""
    if any(length <= 0 for length in lengths):
        raise ValueError("sweep lengths must be positive")
    embedder = embedder or ModelEmbedder(model)
    ref_embeddings = {item.uid: embedder(item.reference) for item in items}
    rows = []
    for length in lengths:
        pairs, skipped = [], 0
        for item in items:
            if item.reference.duration + 1e-9 < length:
                skipped += 1
                continue
            synth = tts(item.phonemes, item.reference.trim(length), model, vocab, seed=seed).wave
            pairs.append((item.uid, cosine_similarity(embedder(synth), ref_embeddings[item.uid])))
        if skipped:
            log.warning("reference length %.2f s: skipped %d item(s) with shorter references", length, skipped)
        if pairs:
            result = summarize(pairs)
            rows.append(SweepRow(float(length), result.mean, result.n, skipped, result))
        else:
            rows.append(SweepRow(float(length), float("nan"), 0, skipped))
    if out_path is not None:
        with open(out_path, "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps({"kind": "sweep", "length_s": row.length_s, "mean_smcs": row.mean_smcs,
                                     "n": row.n, "skipped": row.skipped}) + "\n")
    return rows


def edit_distance(ref: Sequence[str], hyp: Sequence[str]) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def word_error_rate(expected: Sequence[str], hypotheses: Sequence[str]) -> float:
    """Corpus WER: total word edits over total expected words."""
    if len(expected) != len(hypotheses):
        raise EvaluationError("expected and hypothesis counts differ")
    words = [t.split() for t in expected]
    total = sum(len(w) for w in words)
    if total == 0:
        raise EvaluationError("expected transcripts are empty")
    edits = sum(edit_distance(w, h.split()) for w, h in zip(words, hypotheses))
    return edits / total


def wer_hook(transcripts: Sequence[str], audio: Sequence[Waveform], asr_command: str,
             timeout: float = 300.0) -> float:
    """Transcribe each waveform with an external ASR command (``{wav}`` placeholder) and score WER."""
    if not asr_command:
        raise EvaluationError("WER requested but no ASR command template configured (asr_command)")
    if any(not t.split() for t in transcripts):
        raise EvaluationError("empty expected transcript")
    hyps = []
    with tempfile.TemporaryDirectory() as tmp:
        for i, wave in enumerate(audio):
            path = Path(tmp) / f"utt{i}.wav"
            write_wav(path, wave)
            hyps.append(run_command(asr_command, path, timeout))
    return word_error_rate(transcripts, hyps)


def project_2d(vectors: np.ndarray) -> np.ndarray:
    """First two principal-component coordinates of the rows of ``vectors``."""
    x = np.asarray(vectors, dtype=np.float64)
    x = x - x.mean(axis=0, keepdims=True)
    if np.allclose(x, 0.0):
        log.warning("all embeddings identical; projecting every point to the origin")
        return np.zeros((x.shape[0], 2))
    u, s, _ = np.linalg.svd(x, full_matrices=False)
    coords = u * s
    if coords.shape[1] < 2:
        coords = np.pad(coords, ((0, 0), (0, 2 - coords.shape[1])))
    return coords[:, :2]


def emit_embedding_plot_data(labels: Sequence[str], embeddings, out_path: str | Path) -> np.ndarray:
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.shape[0] < 2:
        raise ValueError("need at least two embeddings to project")
    if len(labels) != embeddings.shape[0]:
        raise ValueError("one label per embedding required")
    points = project_2d(embeddings)
    with open(out_path, "w", encoding="utf-8") as fh:
        for label, (x, y) in zip(labels, points):
            fh.write(json.dumps({"kind": "point", "label": label, "x": float(x), "y": float(y)}) + "\n")
    return points
