"""Manifests, vocabulary, reference sampling and padded training batches.

Manifest lines look like::

    audio_path|speaker_id|ph1 ph2 ph3[|transcript]

Relative audio paths resolve against the manifest's directory.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .audio import SpectrogramFrontEnd, read_wav, wav_num_samples


class ManifestError(ValueError):
    pass


@dataclass
class UtteranceRecord:
    audio_path: str
    speaker_id: str
    phonemes: list[str]
    duration_s: float = 0.0
    text: str = ""

    @property
    def utt_id(self) -> str:
        return Path(self.audio_path).stem


@dataclass
class Manifest:
    records: list[UtteranceRecord]
    speakers: dict[str, list[int]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i: int) -> UtteranceRecord:
        return self.records[i]

    def speaker_records(self, speaker_id: str) -> list[UtteranceRecord]:
        return [self.records[i] for i in self.speakers[speaker_id]]


def build_speaker_index(records: list[UtteranceRecord]) -> dict[str, list[int]]:
    index: dict[str, list[int]] = defaultdict(list)
    for i, rec in enumerate(records):
        index[rec.speaker_id].append(i)
    return dict(index)


def parse_manifest_line(line: str, lineno: int, base_dir: Path) -> UtteranceRecord:
    parts = [p.strip() for p in line.split("|")]
    if len(parts) not in (3, 4):
        raise ManifestError(f"line {lineno}: expected 3 or 4 '|'-separated fields, got {len(parts)}")
    audio, speaker, phonemes = parts[:3]
    if not audio:
        raise ManifestError(f"line {lineno}: empty audio_path")
    if not speaker:
        raise ManifestError(f"line {lineno}: missing speaker_id")
    path = Path(audio)
    if not path.is_absolute():
        path = base_dir / path
    return UtteranceRecord(str(path), speaker, phonemes.split(),
                           text=parts[3] if len(parts) == 4 else "")


def load_manifest(path: str | Path, read_durations: bool = True) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        rec = parse_manifest_line(line, lineno, path.parent)
        if read_durations and Path(rec.audio_path).exists():
            n, rate = wav_num_samples(rec.audio_path)
            rec.duration_s = n / rate
        records.append(rec)
    if not records:
        raise ManifestError(f"manifest is empty: {path}")
    return Manifest(records, build_speaker_index(records))


def write_manifest(path: str | Path, records: list[UtteranceRecord]) -> None:
    path = Path(path)
    lines = []
    for rec in records:
        audio = Path(rec.audio_path)
        try:
            audio = audio.relative_to(path.parent)
        except ValueError:
            pass
        fields_ = [str(audio), rec.speaker_id, " ".join(rec.phonemes)]
        if rec.text:
            fields_.append(rec.text)
        lines.append("|".join(fields_))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


class Vocabulary:
    """Phoneme symbol table; index is the 0-based line number of the vocab file."""

    def __init__(self, symbols: list[str]):
        if len(set(symbols)) != len(symbols):
            raise ValueError("duplicate symbols in vocabulary")
        self.symbols = list(symbols)
        self._index = {s: i for i, s in enumerate(self.symbols)}

    def __len__(self) -> int:
        return len(self.symbols)

    def __contains__(self, symbol: str) -> bool:
        return symbol in self._index

    def encode(self, phonemes: list[str]) -> list[int]:
        ids = []
        for p in phonemes:
            if p not in self._index:
                raise KeyError(f"unknown phoneme symbol: {p!r}")
            ids.append(self._index[p])
        return ids

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln.strip() for ln in lines if ln.strip()])

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.symbols) + "\n", encoding="utf-8")

    @classmethod
    def from_records(cls, records) -> "Vocabulary":
        return cls(sorted({p for r in records for p in r.phonemes}))


def sample_reference(manifest: Manifest, speaker_id: str, rng: np.random.Generator,
                     exclude: UtteranceRecord | None = None) -> UtteranceRecord:
    """Pick a random utterance of ``speaker_id``; never ``exclude`` unless it is the only one."""
    if speaker_id not in manifest.speakers:
        raise KeyError(f"unknown speaker: {speaker_id!r}")
    candidates = manifest.speaker_records(speaker_id)
    if exclude is not None and len(candidates) > 1:
        candidates = [r for r in candidates if r is not exclude]
    return candidates[int(rng.integers(len(candidates)))]


@dataclass
class TrainingBatch:
    spec_gt: torch.Tensor        # [B, n_freq, T]
    spec_lengths: torch.Tensor   # [B]
    spec_ref: torch.Tensor       # [B, n_freq, T_ref]
    ref_lengths: torch.Tensor    # [B]
    phonemes: torch.Tensor       # [B, N] long
    phoneme_lengths: torch.Tensor
    waveform_gt: torch.Tensor    # [B, T * hop]
    speakers: list[str] = field(default_factory=list)
    ref_speakers: list[str] = field(default_factory=list)

    @property
    def frame_mask(self) -> torch.Tensor:
        return sequence_mask(self.spec_lengths, self.spec_gt.shape[-1])

    @property
    def ref_mask(self) -> torch.Tensor:
        return sequence_mask(self.ref_lengths, self.spec_ref.shape[-1])

    @property
    def phoneme_mask(self) -> torch.Tensor:
        return sequence_mask(self.phoneme_lengths, self.phonemes.shape[-1])

    def __len__(self) -> int:
        return self.spec_gt.shape[0]

    def repad(self, frames: int, ref_frames: int, phonemes: int, hop: int) -> "TrainingBatch":
        """Same content, padded out to larger maxima."""
        def pad_to(x, n):
            extra = n - x.shape[-1]
            if extra < 0:
                raise ValueError("repad can only grow the padding")
            return torch.nn.functional.pad(x, (0, extra))
        return TrainingBatch(
            pad_to(self.spec_gt, frames), self.spec_lengths,
            pad_to(self.spec_ref, ref_frames), self.ref_lengths,
            pad_to(self.phonemes, phonemes), self.phoneme_lengths,
            pad_to(self.waveform_gt, frames * hop),
            list(self.speakers), list(self.ref_speakers),
        )


def sequence_mask(lengths: torch.Tensor, max_len: int | None = None) -> torch.Tensor:
    if max_len is None:
        max_len = int(lengths.max())
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


def pad_stack(items: list[torch.Tensor], length: int | None = None) -> torch.Tensor:
    length = length or max(x.shape[-1] for x in items)
    out = items[0].new_zeros((len(items),) + tuple(items[0].shape[:-1]) + (length,))
    for i, x in enumerate(items):
        out[i, ..., : x.shape[-1]] = x
    return out


@dataclass
class _Item:
    wave: torch.Tensor
    spec: torch.Tensor
    ids: torch.Tensor


class SpeechDataset:
    """Loads a manifest's audio once and serves spectrogram/phoneme items."""

    def __init__(self, manifest: Manifest, vocab: Vocabulary, frontend: SpectrogramFrontEnd,
                 min_frames: int = 1):
        self.manifest = manifest
        self.vocab = vocab
        self.frontend = frontend
        self._items: list[_Item] = []
        for rec in manifest:
            if not rec.phonemes:
                raise ManifestError(f"{rec.audio_path}: training records need phonemes")
            wave = read_wav(rec.audio_path, frontend.sample_rate)
            y = torch.from_numpy(wave.samples)
            spec = frontend.linear(y[None])[0]
            if spec.shape[-1] < min_frames:
                raise ManifestError(
                    f"{rec.audio_path}: {spec.shape[-1]} frames, need at least {min_frames}")
            ids = torch.tensor(vocab.encode(rec.phonemes), dtype=torch.long)
            if ids.numel() > spec.shape[-1]:
                raise ManifestError(f"{rec.audio_path}: more phonemes than frames")
            self._items.append(_Item(y, spec, ids))

    def __len__(self) -> int:
        return len(self._items)

    def frames(self, i: int) -> int:
        return self._items[i].spec.shape[-1]

    def collate(self, gt_indices: list[int], ref_indices: list[int]) -> TrainingBatch:
        hop = self.frontend.hop
        gts = [self._items[i] for i in gt_indices]
        refs = [self._items[i] for i in ref_indices]
        spec_lengths = torch.tensor([g.spec.shape[-1] for g in gts])
        t_max = int(spec_lengths.max())
        waves = [g.wave[: g.spec.shape[-1] * hop] for g in gts]
        return TrainingBatch(
            spec_gt=pad_stack([g.spec for g in gts]),
            spec_lengths=spec_lengths,
            spec_ref=pad_stack([r.spec for r in refs]),
            ref_lengths=torch.tensor([r.spec.shape[-1] for r in refs]),
            phonemes=pad_stack([g.ids for g in gts]),
            phoneme_lengths=torch.tensor([g.ids.numel() for g in gts]),
            waveform_gt=pad_stack(waves, t_max * hop),
            speakers=[self.manifest[i].speaker_id for i in gt_indices],
            ref_speakers=[self.manifest[i].speaker_id for i in ref_indices],
        )


class BatchSampler:
    """Length-bucketed batches with same-speaker references.

    Each epoch draws from its own stream derived from ``(seed, epoch)`` so a run
    can resume mid-epoch from just ``(epoch, position)``.
    """

    def __init__(self, dataset: SpeechDataset, batch_size: int, seed: int, bucket_factor: int = 4):
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.bucket_factor = max(1, bucket_factor)

    def epoch_rng(self, epoch: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.seed, epoch]))

    def epoch_plan(self, epoch: int) -> list[tuple[list[int], list[int]]]:
        rng = self.epoch_rng(epoch)
        order = rng.permutation(len(self.dataset)).tolist()
        chunk = self.batch_size * self.bucket_factor
        batches = []
        for start in range(0, len(order), chunk):
            bucket = sorted(order[start : start + chunk], key=self.dataset.frames)
            batches += [bucket[i : i + self.batch_size] for i in range(0, len(bucket), self.batch_size)]
        batches = [batches[i] for i in rng.permutation(len(batches))]
        manifest = self.dataset.manifest
        position = {id(r): i for i, r in enumerate(manifest.records)}
        plan = []
        for gt in batches:
            refs = []
            for i in gt:
                ref = sample_reference(manifest, manifest[i].speaker_id, rng, exclude=manifest[i])
                refs.append(position[id(ref)])
            plan.append((gt, refs))
        return plan

    def batches(self, epoch: int, start: int = 0):
        for gt, refs in self.epoch_plan(epoch)[start:]:
            yield self.dataset.collate(gt, refs)

    def __len__(self) -> int:
        return len(self.epoch_plan(0))
