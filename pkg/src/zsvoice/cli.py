"""Command line entry point: ``zsvoice {train,tts,vc,batch,eval,sweep,inspect,make-toy}``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .audio import AudioError, read_wav, write_wav
from .config import ConfigError, RunConfig
from .data import (
    BatchSampler,
    ManifestError,
    SpeechDataset,
    Vocabulary,
    load_manifest,
    sample_reference,
)
from .audio import SpectrogramFrontEnd
from .evaluation import (
    CommandEmbedder,
    EvaluationError,
    ModelEmbedder,
    SweepItem,
    emit_embedding_plot_data,
    reference_length_sweep,
    smcs,
    wer_hook,
)
from .pipelines import SynthesisError, SynthesisRequest, run_request, tts, vc
from .training import (
    CheckpointError,
    NonFiniteLossError,
    init_state,
    load_checkpoint,
    read_checkpoint,
    run_training,
    save_checkpoint,
)

log = logging.getLogger("zsvoice")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _overrides(pairs: list[str]) -> dict:
    values = {}
    for item in pairs or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        values[key.strip()] = config_mod.coerce(key.strip(), raw)
    return values


def _resolve(path: str, base: Path | None) -> Path:
    p = Path(path)
    if p.is_absolute() or p.exists() or base is None:
        return p
    return base / p


def _load_run_config(args) -> tuple[RunConfig, Path | None]:
    base = Path(args.config).parent if args.config else None
    cfg = config_mod.load_config(args.config, _overrides(args.set))
    return cfg, base


def _load_model(checkpoint: str):
    state = load_checkpoint(checkpoint, restore_rng=False)
    state.model.eval()
    return state.model, state.vocab


def cmd_train(args) -> int:
    if args.resume:
        state = load_checkpoint(args.resume)
        overrides = _overrides(args.set)
        if "max_steps" in overrides:
            state.cfg = state.cfg.replace(max_steps=overrides["max_steps"])
        cfg = state.cfg
        base = Path(args.config).parent if args.config else None
    else:
        cfg, base = _load_run_config(args)
        state = None
    if not cfg.train_manifest:
        raise UsageError("config key train_manifest is required for training")
    # absolute data paths, so the checkpointed config resumes from anywhere
    cfg = cfg.replace(train_manifest=str(_resolve(cfg.train_manifest, base).resolve()),
                      vocab=str(_resolve(cfg.vocab, base).resolve()) if cfg.vocab else "")
    manifest = load_manifest(cfg.train_manifest)
    if state is None:
        vocab = Vocabulary.load(cfg.vocab) if cfg.vocab else Vocabulary.from_records(manifest.records)
        state = init_state(cfg, vocab)
    state.cfg = cfg
    out_dir = Path(args.out_dir or cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2), encoding="utf-8")
    dataset = SpeechDataset(manifest, state.vocab, SpectrogramFrontEnd.from_config(cfg),
                            min_frames=cfg.segment_frames)
    sampler = BatchSampler(dataset, cfg.batch_size, cfg.seed, cfg.bucket_factor)
    run_training(state, sampler, cfg.max_steps, metrics_path=out_dir / "metrics.jsonl",
                 checkpoint_dir=out_dir, checkpoint_every=cfg.checkpoint_every)
    save_checkpoint(state, out_dir / "last.pt")
    log.info("finished at step %d; checkpoint %s", state.step, out_dir / "last.pt")
    return EXIT_OK


def _phonemes_from_args(args) -> list[str]:
    if args.phonemes:
        return args.phonemes.split()
    if args.phoneme_file:
        path = Path(args.phoneme_file)
        if not path.exists():
            raise FileNotFoundError(f"phoneme file not found: {path}")
        return path.read_text(encoding="utf-8").split()
    raise UsageError("give --phonemes or --phoneme-file")


def cmd_tts(args) -> int:
    phonemes = _phonemes_from_args(args)
    model, vocab = _load_model(args.checkpoint)
    reference = read_wav(args.reference, model.cfg.sample_rate)
    result = tts(phonemes, reference, model, vocab, seed=args.seed, pace=args.pace)
    write_wav(args.out, result.wave)
    log.info("wrote %s (%d frames, %d samples)", args.out, result.frames, len(result.wave))
    return EXIT_OK


def cmd_vc(args) -> int:
    model, _ = _load_model(args.checkpoint)
    source = read_wav(args.source, model.cfg.sample_rate)
    reference = read_wav(args.reference, model.cfg.sample_rate)
    result = vc(source, reference, model, seed=args.seed)
    write_wav(args.out, result.wave)
    log.info("wrote %s (%d frames)", args.out, result.frames)
    return EXIT_OK


def cmd_batch(args) -> int:
    """One JSON object per line: mode, reference, out, and phonemes or source."""
    model, vocab = _load_model(args.checkpoint)
    base = Path(args.requests).parent
    for lineno, line in enumerate(Path(args.requests).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            spec = json.loads(line)
            request = SynthesisRequest(
                mode=spec["mode"],
                reference_audio=read_wav(_resolve(spec["reference"], base), model.cfg.sample_rate),
                phonemes=spec.get("phonemes", "").split(),
                source_audio=(read_wav(_resolve(spec["source"], base), model.cfg.sample_rate)
                              if spec.get("source") else None),
                pace=float(spec.get("pace", 1.0)),
                seed=int(spec.get("seed", args.seed)),
            )
        except (KeyError, json.JSONDecodeError) as exc:
            raise UsageError(f"{args.requests}:{lineno}: bad request: {exc}") from exc
        write_wav(_resolve(spec["out"], base), run_request(request, model, vocab).wave)
    return EXIT_OK


def _eval_items(manifest, seed: int):
    rng = np.random.default_rng(seed)
    items = []
    for rec in manifest:
        ref = sample_reference(manifest, rec.speaker_id, rng, exclude=rec)
        items.append((rec, ref))
    return items


def _lengths(text: str) -> list[float]:
    try:
        return [float(v) for v in text.replace(",", " ").split()]
    except ValueError as exc:
        raise UsageError(f"bad length list {text!r}") from exc


def cmd_eval(args) -> int:
    if args.wer and not args.asr_command:
        raise UsageError("--wer needs --asr-command (missing config: asr_command)")
    if not (args.smcs or args.sweep or args.wer or args.plot):
        args.smcs = True
    model = vocab = None
    if args.checkpoint:
        model, vocab = _load_model(args.checkpoint)
    elif not (args.pairs and args.embedder_command):
        raise UsageError("--checkpoint is required unless scoring --pairs with --embedder-command")
    embedder = CommandEmbedder(args.embedder_command) if args.embedder_command else ModelEmbedder(model)
    rate = model.cfg.sample_rate if model is not None else 22050
    out = open(args.out, "w", encoding="utf-8")
    try:
        if args.pairs:
            rows = [ln.split("|") for ln in Path(args.pairs).read_text(encoding="utf-8").splitlines() if ln.strip()]
            base = Path(args.pairs).parent
            synth = [read_wav(_resolve(r[0].strip(), base), rate) for r in rows]
            refs = [read_wav(_resolve(r[1].strip(), base), rate) for r in rows]
            _write_smcs(out, smcs(synth, refs, embedder, [Path(r[0].strip()).stem for r in rows],
                                  args.normalize_volume))
            return EXIT_OK
        if not args.manifest:
            raise UsageError("give --manifest or --pairs")
        manifest = load_manifest(args.manifest)
        items = _eval_items(manifest, args.seed)
        synth_cache = {}

        def synthesize(rec, ref_rec):
            key = rec.audio_path
            if key not in synth_cache:
                reference = read_wav(ref_rec.audio_path, rate)
                synth_cache[key] = tts(rec.phonemes, reference, model, vocab, seed=args.seed).wave
            return synth_cache[key]

        if args.smcs:
            synth = [synthesize(rec, ref) for rec, ref in items]
            refs = [read_wav(ref.audio_path, rate) for _, ref in items]
            _write_smcs(out, smcs(synth, refs, embedder, [rec.utt_id for rec, _ in items], args.normalize_volume))
        if args.sweep:
            sweep_items = [SweepItem(rec.utt_id, rec.phonemes, read_wav(ref.audio_path, rate)) for rec, ref in items]
            for row in reference_length_sweep(model, vocab, sweep_items, _lengths(args.sweep), embedder,
                                              seed=args.seed):
                out.write(json.dumps({"kind": "sweep", "length_s": row.length_s, "mean_smcs": row.mean_smcs,
                                      "n": row.n, "skipped": row.skipped}) + "\n")
        if args.wer:
            texts = [rec.text or " ".join(rec.phonemes) for rec, _ in items]
            audio = [synthesize(rec, ref) for rec, ref in items]
            out.write(json.dumps({"kind": "wer", "wer": wer_hook(texts, audio, args.asr_command),
                                  "n": len(audio)}) + "\n")
        if args.plot:
            vectors = [embedder(read_wav(rec.audio_path, rate)) for rec in manifest]
            emit_embedding_plot_data([rec.speaker_id for rec in manifest], np.stack(vectors), args.plot)
    finally:
        out.close()
    return EXIT_OK


def _write_smcs(out, result) -> None:
    for uid, cos in result.pairs:
        out.write(json.dumps({"kind": "pair", "id": uid, "cosine": cos}) + "\n")
    out.write(json.dumps({"kind": "summary", "metric": "smcs", "mean": result.mean, "ci95": result.ci95,
                          "n": result.n, "degenerate": result.degenerate}) + "\n")


def cmd_sweep(args) -> int:
    model, vocab = _load_model(args.checkpoint)
    manifest = load_manifest(args.manifest)
    rate = model.cfg.sample_rate
    items = [SweepItem(rec.utt_id, rec.phonemes, read_wav(ref.audio_path, rate))
             for rec, ref in _eval_items(manifest, args.seed)]
    rows = reference_length_sweep(model, vocab, items, _lengths(args.lengths), seed=args.seed, out_path=args.out)
    for row in rows:
        print(f"{row.length_s:6.2f} s  SMCS {row.mean_smcs:.4f}  n={row.n}  skipped={row.skipped}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    if args.checkpoint:
        payload = read_checkpoint(args.checkpoint)
        counts = {}
        for key in ("model", "discriminators"):
            for name, tensor in payload[key].items():
                top = f"{key}.{name.split('.')[0]}"
                counts[top] = counts.get(top, 0) + tensor.numel()
        print(json.dumps({"step": payload["step"], "epoch": payload["epoch"], "config": payload["config"],
                          "vocab_size": len(payload["vocab"]), "parameters": counts}, indent=2))
    else:
        cfg, _ = _load_run_config(args)
        print(json.dumps(cfg.to_dict(), indent=2))
    return EXIT_OK


def cmd_make_toy(args) -> int:
    from .toyset import make_toy_corpus

    manifest = make_toy_corpus(args.out_dir, args.per_speaker, args.seconds, args.seed)
    print(manifest)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="zsvoice", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train from a config file",
                       formatter_class=argparse.RawDescriptionHelpFormatter,
                       epilog="config keys (defaults):\n" + config_mod.describe_keys())
    p.add_argument("--config", help="flat key = value file; 'include = toy' pulls in the desk-scale preset")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--out-dir")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("tts", help="zero-shot text-to-speech")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--phonemes", help="space-separated phoneme symbols")
    p.add_argument("--phoneme-file")
    p.add_argument("--reference", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pace", type=float, default=1.0)
    p.set_defaults(func=cmd_tts)

    p = sub.add_parser("vc", help="zero-shot voice conversion")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_vc)

    p = sub.add_parser("batch", help="run a line-delimited JSON request file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("requests")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_batch)

    p = sub.add_parser("eval", help="SMCS / reference-length sweep / WER / embedding projection")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--pairs", help="lines of synth_wav|reference_wav to score directly")
    p.add_argument("--out", required=True, help="results, one JSON record per line")
    p.add_argument("--smcs", action="store_true")
    p.add_argument("--sweep", metavar="LENGTHS", help="reference lengths in seconds, e.g. 1,3,5")
    p.add_argument("--wer", action="store_true")
    p.add_argument("--asr-command", help="command template with {wav}; prints the transcript")
    p.add_argument("--embedder-command", help="command template with {wav}; prints an embedding")
    p.add_argument("--plot", metavar="PATH", help="write 2-D PCA points of manifest embeddings")
    p.add_argument("--normalize-volume", action="store_true", help="peak-normalize audio before SMCS")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="SMCS as a function of reference length")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--lengths", default="1,3,5")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("inspect", help="summarize a checkpoint or a resolved config")
    p.add_argument("--checkpoint")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("make-toy", help="write the synthetic two-speaker corpus")
    p.add_argument("out_dir")
    p.add_argument("--per-speaker", type=int, default=4)
    p.add_argument("--seconds", type=float, default=6.0)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_make_toy)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"zsvoice: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ManifestError, AudioError, CheckpointError, SynthesisError, EvaluationError, NonFiniteLossError,
            FileNotFoundError, KeyError, ValueError, RuntimeError) as exc:
        print(f"zsvoice: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
