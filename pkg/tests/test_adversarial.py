import numpy as np
import pytest
import torch

from zsvoice.adversarial import (
    GradientReversal,
    LeakageDiscriminator,
    TimbreResidualDiscriminator,
    frozen,
    gradient_reversal,
    leakage_discriminator_loss,
    speaker_encoder_adversarial_loss,
    timbre_residual_loss,
)
from zsvoice.config import preset
from zsvoice.model import build_models
from zsvoice.training import compute_losses, init_state, timbre_adversarial_loss


def _t(*v):
    return torch.tensor(v, dtype=torch.float64)


def test_loss_examples():
    assert float(leakage_discriminator_loss(_t(1.0, 1.0), _t(0.0, 0.0))) == 0.0
    assert float(leakage_discriminator_loss(_t(0.0), _t(1.0))) == 2.0
    assert float(speaker_encoder_adversarial_loss(_t(1.0, 1.0), 8.0)) == 0.0
    assert float(speaker_encoder_adversarial_loss(_t(0.0, 0.0), 8.0)) == 8.0
    assert float(timbre_residual_loss(_t(1.0), _t(0.0))) == 0.0
    assert float(timbre_residual_loss(_t(0.5, 1.5), _t(0.5, -0.5))) == pytest.approx(0.5)


@pytest.mark.parametrize("seed", range(20))
def test_losses_match_numpy_oracle(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=rng.integers(1, 9)), rng.normal(size=rng.integers(1, 9))
    lam = float(rng.uniform(0, 10))
    assert float(leakage_discriminator_loss(torch.from_numpy(a), torch.from_numpy(b))) == pytest.approx(
        np.mean((a - 1) ** 2) + np.mean(b ** 2))
    assert float(speaker_encoder_adversarial_loss(torch.from_numpy(b), lam)) == pytest.approx(
        lam * np.mean((b - 1) ** 2))
    assert float(timbre_residual_loss(torch.from_numpy(a), torch.from_numpy(b))) == pytest.approx(
        np.mean((a - 1) ** 2) + np.mean(b ** 2))


def test_reversal_is_identity_forward():
    x = torch.randn(3, 4)
    assert torch.equal(gradient_reversal(x, 8.0), x)
    assert torch.equal(GradientReversal(8.0)(x), x)


def test_reversal_gradient_probe():
    x = torch.tensor(3.0, requires_grad=True)
    (gradient_reversal(x, 8.0) ** 2).backward()
    assert float(x.grad) == -48.0


def test_zero_lambda_blocks_gradient():
    x = torch.randn(5, requires_grad=True)
    (gradient_reversal(x, 0.0) ** 2).sum().backward()
    assert torch.all(x.grad == 0)


def test_negative_lambda_rejected():
    with pytest.raises(ValueError):
        GradientReversal(-1.0)


def test_frozen_call_only_reaches_inputs():
    disc = LeakageDiscriminator(4)
    pair = torch.randn(3, 8, requires_grad=True)
    frozen(disc, pair).sum().backward()
    assert pair.grad is not None and torch.any(pair.grad != 0)
    assert all(p.grad is None for p in disc.parameters())
    assert torch.allclose(frozen(disc, pair), disc(pair))


@pytest.mark.parametrize("t", [3, 50, 400])
def test_timbre_discriminator_scores_any_length(t):
    torch.manual_seed(0)
    disc = TimbreResidualDiscriminator(8, 16).eval()
    out = disc(torch.randn(2, 8, t), torch.ones(2, 1, t))
    assert out.shape == (2,) and torch.all(torch.isfinite(out))


def _timbre_grads(lambda_d, reverse_grad):
    cfg = preset("toy", lambda_d=lambda_d)
    model, discs = build_models(cfg, 8, seed=0)
    for c in model.flow.couplings:
        torch.nn.init.normal_(c.post.weight, std=0.05)
    g = torch.Generator().manual_seed(1)
    z = torch.randn(2, cfg.d_latent, 20, generator=g)
    s = torch.randn(2, cfg.d_spk, generator=g)
    m = torch.randn(2, cfg.d_latent, 20, generator=g)
    loss = timbre_adversarial_loss(model, discs, z, s, m, torch.ones(2, 1, 20), lambda_d, reverse_grad)
    loss.backward()
    flow = torch.cat([p.grad.flatten() for p in model.flow.parameters() if p.grad is not None])
    disc = torch.cat([p.grad.flatten() for p in discs.timbre.parameters() if p.grad is not None])
    return flow, disc


def test_flow_ascends_discriminator_descends():
    # one backward through the reversal layer equals -lambda_d times the plain gradient
    # for the flow and the plain gradient for the discriminator
    flow_rev, disc_rev = _timbre_grads(8.0, True)
    flow_plain, disc_plain = _timbre_grads(8.0, False)
    assert torch.allclose(flow_rev, -8.0 * flow_plain, rtol=1e-5, atol=1e-9)
    assert torch.allclose(disc_rev, disc_plain)
    assert flow_plain.abs().max() > 0


def test_zero_lambda_leaves_flow_untouched_by_timbre_loss():
    flow_grad, disc_grad = _timbre_grads(0.0, True)
    assert torch.all(flow_grad == 0)
    assert disc_grad.abs().max() > 0


def _grad_owners(state, loss):
    state.model.zero_grad(set_to_none=True)
    state.discs.zero_grad(set_to_none=True)
    loss.backward(retain_graph=True)
    owners = set()
    for prefix, module in (("model", state.model), ("discs", state.discs)):
        for name, p in module.named_parameters():
            if p.grad is not None and torch.any(p.grad != 0):
                owners.add(f"{prefix}.{name.split('.')[0]}")
    return owners


def test_gradient_isolation(toy_batch, toy_cfg, toy_vocab):
    state = init_state(toy_cfg, toy_vocab)
    for c in state.model.flow.couplings:
        torch.nn.init.normal_(c.post.weight, std=0.05)
    losses = compute_losses(toy_batch, state)
    assert _grad_owners(state, losses["L_p"]) == {"discs.leakage"}
    se = _grad_owners(state, losses["L_se"])
    assert "model.speaker_encoder" in se
    assert not any(o.startswith("discs") for o in se)
    assert _grad_owners(state, losses["L_d"]) == {"model.flow", "discs.timbre"}
