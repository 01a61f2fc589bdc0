"""Joint single-stage training: inherited VAE/prior/duration terms plus the
leakage and timbre-residual adversaries, two AdamW optimizers, checkpoints."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import torch

from .adversarial import (
    frozen,
    gradient_reversal,
    leakage_discriminator_loss,
    speaker_encoder_adversarial_loss,
    timbre_residual_loss,
)
from .audio import SpectrogramFrontEnd
from .commons import length_mask, masked_randn, slice_segments
from .config import RunConfig
from .data import TrainingBatch, Vocabulary
from .model import Discriminators, Synthesizer, build_models
from .phonemes import duration_loss, expand_to_frames, monotonic_align, predict_durations
from .speaker import make_contrastive_pairs
from .vae import reconstruction_loss, sample_latent

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "zsvoice-checkpoint"
CHECKPOINT_VERSION = 1


class NonFiniteLossError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class LossReport:
    step: int
    recon: float
    kl_prior: float
    duration: float
    L_p: float
    L_se: float
    L_d: float
    gen_total: float
    disc_total: float
    lr: float

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainState:
    cfg: RunConfig
    vocab: Vocabulary
    model: Synthesizer
    discs: Discriminators
    opt_g: torch.optim.AdamW
    opt_d: torch.optim.AdamW
    generator: torch.Generator
    step: int = 0
    epoch: int = 0
    batch_in_epoch: int = 0

    @property
    def frontend(self) -> SpectrogramFrontEnd:
        return SpectrogramFrontEnd.from_config(self.cfg)


def learning_rate(cfg: RunConfig, epoch: int) -> float:
    return cfg.lr * cfg.lr_decay ** epoch


def set_learning_rate(state: TrainState) -> float:
    lr = learning_rate(state.cfg, state.epoch)
    for opt in (state.opt_g, state.opt_d):
        for group in opt.param_groups:
            group["lr"] = lr
    return lr


def make_optimizer(params, cfg: RunConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps,
                             weight_decay=cfg.weight_decay)


def init_state(cfg: RunConfig, vocab: Vocabulary) -> TrainState:
    torch.manual_seed(cfg.seed)
    model, discs = build_models(cfg, len(vocab))
    generator = torch.Generator().manual_seed(cfg.seed + 1)
    return TrainState(cfg, vocab, model, discs, make_optimizer(model.parameters(), cfg),
                      make_optimizer(discs.parameters(), cfg), generator)


def prior_matching_loss(z_p: torch.Tensor, logs_q: torch.Tensor, m_p: torch.Tensor, logs_p: torch.Tensor,
                        logdet_reverse: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Single-sample KL estimate between the posterior and the flow-pulled-back prior.

    ``z_p`` is the reverse-flow image of a posterior sample and ``logdet_reverse``
    the reverse map's log-determinant per item. The posterior's own log-density
    enters through its closed-form entropy. Normalised per real frame.
    """
    if not (z_p.shape == logs_q.shape == m_p.shape == logs_p.shape):
        raise ValueError("prior matching inputs must share one shape")
    kl = logs_p - logs_q - 0.5 + 0.5 * (z_p - m_p) ** 2 * torch.exp(-2.0 * logs_p)
    total = torch.sum(kl * mask) - torch.sum(logdet_reverse)
    return total / torch.sum(mask)


def timbre_adversarial_loss(model: Synthesizer, discs: Discriminators, z_gt: torch.Tensor, s_ref: torch.Tensor,
                            m_sample: torch.Tensor, mask: torch.Tensor, lambda_d: float,
                            reverse_grad: bool = True) -> torch.Tensor:
    """Timbre-residual loss with the flow on the reversed-gradient side.

    Only the flow and the discriminator receive gradients: the latent, speaker
    embedding and prior sample are detached here.
    """
    z_rev, _ = model.flow.reverse(z_gt.detach(), mask, s_ref.detach())
    if reverse_grad:
        z_rev = gradient_reversal(z_rev, lambda_d)
    d_m = discs.timbre(m_sample.detach(), mask)
    d_rev = discs.timbre(z_rev, mask)
    return timbre_residual_loss(d_m, d_rev)


def compute_losses(batch: TrainingBatch, state: TrainState) -> dict[str, torch.Tensor]:
    cfg, model, discs, g = state.cfg, state.model, state.discs, state.generator
    t_max = batch.spec_gt.shape[-1]
    fmask = length_mask(batch.spec_lengths, t_max)
    rmask = length_mask(batch.ref_lengths, batch.spec_ref.shape[-1])
    pmask = length_mask(batch.phoneme_lengths, batch.phonemes.shape[-1])

    post_gt = model.posterior_encoder(batch.spec_gt, fmask)
    z_gt = sample_latent(post_gt, g)
    post_ref = model.posterior_encoder(batch.spec_ref, rmask)
    z_ref = sample_latent(post_ref, g)

    pairs = make_contrastive_pairs(
        model.speaker_encoder,
        model.speaker_source(batch.spec_gt, z_gt.values), batch.spec_lengths,
        model.speaker_source(batch.spec_ref, z_ref.values), batch.ref_lengths,
        g, (cfg.rho_min, cfg.rho_max),
    )
    s_ref = pairs.s_downstream

    z_p, logdet_rev = model.flow.reverse(z_gt.values, fmask, s_ref)
    x, m_p, logs_p = model.text_encoder(batch.phonemes, pmask)
    durations = monotonic_align(m_p, logs_p, z_p, batch.phoneme_lengths, batch.spec_lengths)
    m_f = expand_to_frames(m_p, durations, t_max)
    logs_f = expand_to_frames(logs_p, durations, t_max)
    kl = prior_matching_loss(z_p, post_gt.log_sigma, m_f, logs_f, logdet_rev, fmask)

    log_w = model.duration_predictor(x.detach(), pmask, s_ref)
    target = durations.unsqueeze(1).to(log_w.dtype)
    dur = duration_loss(predict_durations(log_w, pmask), target, pmask)

    seg = cfg.segment_frames
    high = (batch.spec_lengths - seg + 1).clamp(min=1)
    starts = torch.stack([torch.randint(int(h), (), generator=g) for h in high])
    y_hat = model.decoder(slice_segments(z_gt.values, starts, seg))
    y = slice_segments(batch.waveform_gt, starts * cfg.hop, seg * cfg.hop)
    recon = reconstruction_loss(y_hat, y, state.frontend)

    d_contrast = discs.leakage(pairs.pair_contrast.detach())
    d_overlap = discs.leakage(pairs.pair_overlap.detach())
    l_p = leakage_discriminator_loss(d_contrast, d_overlap)
    l_se = speaker_encoder_adversarial_loss(frozen(discs.leakage, pairs.pair_overlap), cfg.lambda_se)

    eps = masked_randn(batch.spec_lengths, m_f.shape[1], t_max, g, m_f.dtype)
    m_sample = (m_f + eps * torch.exp(logs_f)) * fmask
    l_d = timbre_adversarial_loss(model, discs, z_gt.values, s_ref, m_sample, fmask, cfg.lambda_d)

    return {"recon": recon, "kl_prior": kl, "duration": dur, "L_p": l_p, "L_se": l_se, "L_d": l_d}


def training_step(batch: TrainingBatch, state: TrainState) -> LossReport:
    """One joint update: a single backward pass, then generator and discriminator steps."""
    cfg = state.cfg
    state.model.train()
    state.discs.train()
    lr = set_learning_rate(state)
    losses = compute_losses(batch, state)
    for name, value in losses.items():
        if not torch.isfinite(value):
            raise NonFiniteLossError(f"non-finite {name} loss at step {state.step + 1}: {value.item()}")

    # L_p and L_d only reach discriminator parameters except through the
    # reversal layer, so one sum serves both optimizers.
    total = (cfg.c_mel * losses["recon"] + cfg.c_kl * losses["kl_prior"] + cfg.c_dur * losses["duration"]
             + losses["L_se"] + losses["L_p"] + losses["L_d"])
    state.opt_g.zero_grad(set_to_none=True)
    state.opt_d.zero_grad(set_to_none=True)
    total.backward()
    torch.nn.utils.clip_grad_norm_(state.model.parameters(), cfg.grad_clip)
    torch.nn.utils.clip_grad_norm_(state.discs.parameters(), cfg.grad_clip)
    state.opt_g.step()
    state.opt_d.step()
    state.step += 1

    v = {k: float(t.detach()) for k, t in losses.items()}
    gen_total = (cfg.c_mel * v["recon"] + cfg.c_kl * v["kl_prior"] + cfg.c_dur * v["duration"]
                 + v["L_se"] - cfg.lambda_d * v["L_d"])
    return LossReport(step=state.step, gen_total=gen_total, disc_total=v["L_p"] + v["L_d"], lr=lr, **v)


def run_training(state: TrainState, sampler, max_steps: int, metrics_path: str | Path | None = None,
                 checkpoint_dir: str | Path | None = None, checkpoint_every: int = 0) -> list[LossReport]:
    reports = []
    metrics = open(metrics_path, "a", encoding="utf-8") if metrics_path else None
    try:
        while state.step < max_steps:
            plan = sampler.epoch_plan(state.epoch)
            while state.batch_in_epoch < len(plan) and state.step < max_steps:
                gt, refs = plan[state.batch_in_epoch]
                report = training_step(sampler.dataset.collate(gt, refs), state)
                state.batch_in_epoch += 1
                reports.append(report)
                if metrics:
                    metrics.write(json.dumps(report.as_dict()) + "\n")
                    metrics.flush()
                if report.step % 50 == 0:
                    log.info("step %d recon %.4f kl %.4f dur %.4f Lp %.4f Lse %.4f Ld %.4f", report.step,
                             report.recon, report.kl_prior, report.duration, report.L_p, report.L_se, report.L_d)
                if checkpoint_dir and checkpoint_every and state.step % checkpoint_every == 0:
                    save_checkpoint(state, Path(checkpoint_dir) / f"step_{state.step:07d}.pt")
            if state.batch_in_epoch >= len(plan):
                state.epoch += 1
                state.batch_in_epoch = 0
    finally:
        if metrics:
            metrics.close()
    return reports


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": state.cfg.to_dict(),
        "vocab": list(state.vocab.symbols),
        "model": state.model.state_dict(),
        "discriminators": state.discs.state_dict(),
        "opt_g": state.opt_g.state_dict(),
        "opt_d": state.opt_d.state_dict(),
        "step": state.step,
        "epoch": state.epoch,
        "batch_in_epoch": state.batch_in_epoch,
        "generator_state": state.generator.get_state(),
        "torch_rng_state": torch.get_rng_state(),
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def read_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # truncated or corrupt archives surface as assorted errors
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {payload.get('version')} not supported (expected {CHECKPOINT_VERSION})")
    return payload


def load_checkpoint(path: str | Path, restore_rng: bool = True) -> TrainState:
    payload = read_checkpoint(path)
    cfg = RunConfig.from_dict({k: tuple(v) if k == "upsample_rates" else v
                               for k, v in payload["config"].items()})
    vocab = Vocabulary(payload["vocab"])
    state = init_state(cfg, vocab)
    state.model.load_state_dict(payload["model"])
    state.discs.load_state_dict(payload["discriminators"])
    state.opt_g.load_state_dict(payload["opt_g"])
    state.opt_d.load_state_dict(payload["opt_d"])
    state.generator.set_state(payload["generator_state"])
    state.step = int(payload["step"])
    state.epoch = int(payload["epoch"])
    state.batch_in_epoch = int(payload["batch_in_epoch"])
    if restore_rng:
        torch.set_rng_state(payload["torch_rng_state"])
    return state


def is_finite_report(report: LossReport) -> bool:
    return all(math.isfinite(v) for v in report.as_dict().values())
