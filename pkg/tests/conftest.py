import numpy as np
import pytest
import torch

from beliefrl.config import EvalConfig, ExperimentConfig, ModelConfig, SimConfig, TrainConfig

torch.set_num_threads(2)


@pytest.fixture(autouse=True)
def _seed_everything():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture
def tiny_sim() -> SimConfig:
    return SimConfig(
        n_episodes=24, horizon=6, sub_steps_per_decision=2, n_structured=5,
        text_embed_dim=4, seed=11,
    ).validate()


@pytest.fixture
def tiny_model(tiny_sim) -> ModelConfig:
    return ModelConfig(
        n_structured=tiny_sim.n_structured,
        text_embed_dim=tiny_sim.text_embed_dim,
        hidden_dim=12, latent_dim=4, psi_embed_dim=8, attn_dim=8, attn_heads=2,
        decoder_hidden_dim=12, outcome_hidden_dim=8, dropout=0.0,
    ).validate()


@pytest.fixture
def tiny_experiment(tiny_model) -> ExperimentConfig:
    return ExperimentConfig(
        model=tiny_model,
        train=TrainConfig(stage1_epochs=2, stage2_epochs=2, stage3_epochs=1, batch_size=16, val_fqe_every=2),
        eval=EvalConfig(fqe_iterations=4, fqe_hidden_dims=(16,), fqe_steps_per_iteration=4, n_bootstrap=100),
    ).validate()


def finite_difference_gradients(loss_fn, params, step=1e-6):
    """Central finite differences of a scalar loss over a list of tensors."""
    grads = []
    for p in params:
        g = torch.zeros_like(p)
        flat = p.detach().view(-1)
        gflat = g.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            hi = float(loss_fn().detach())
            flat[i] = orig - step
            lo = float(loss_fn().detach())
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def relative_gradient_error(analytic, numeric) -> float:
    num = torch.cat([a.reshape(-1) for a in analytic])
    fd = torch.cat([n.reshape(-1) for n in numeric])
    denom = max(float(num.norm()), float(fd.norm()), 1e-12)
    return float((num - fd).norm()) / denom
