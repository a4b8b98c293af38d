"""Offline policy optimization: double Q, expectile value regression, and
advantage-weighted behavioral cloning, with latent-marginal action selection."""

from __future__ import annotations

from typing import Dict, Optional, Tuple

import torch

from .config import RLConfig
from .dynamics import BeliefDynamics, sample_latent
from .model import RLHeads


def bootstrap_target(
    rewards: torch.Tensor,
    dones: torch.Tensor,
    v_next: torch.Tensor,
    gamma: float,
    durations: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """y = r + gamma^dt * (1 - d) * V_tgt(s'); terminal steps bootstrap nothing.

    `durations` carries per-step interval lengths in decision units for the
    variable-interval variant; on the uniform grid it is all ones and the
    exponent is the plain discount.
    """
    disc = gamma if durations is None else gamma**durations
    return rewards + disc * (1.0 - dones) * v_next


def expectile_weight(diff: torch.Tensor, tau: float) -> torch.Tensor:
    """|tau - 1[diff < 0]|: tau on the high side, 1 - tau on the low side."""
    return torch.abs(tau - (diff < 0).to(diff.dtype))


def value_loss(
    heads: RLHeads,
    states: torch.Tensor,
    actions: torch.Tensor,
    valid: torch.Tensor,
    tau: float,
) -> torch.Tensor:
    """Expectile regression of V toward min(Q1, Q2) at the logged actions."""
    with torch.no_grad():
        q1, q2 = heads.q_values(states, actions)
        q_min = torch.min(q1, q2)
    diff = q_min - heads.value(states)
    per = expectile_weight(diff, tau) * diff**2
    return (per * valid).sum() / torch.clamp(valid.sum(), min=1.0)


def q_loss(
    heads: RLHeads,
    states: torch.Tensor,
    actions: torch.Tensor,
    targets: torch.Tensor,
    valid: torch.Tensor,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Squared error of each critic to the shared bootstrap target."""
    q1, q2 = heads.q_values(states, actions)
    denom = torch.clamp(valid.sum(), min=1.0)
    l1 = (((q1 - targets) ** 2) * valid).sum() / denom
    l2 = (((q2 - targets) ** 2) * valid).sum() / denom
    return l1, l2


def policy_loss(
    heads: RLHeads,
    states: torch.Tensor,
    actions: torch.Tensor,
    valid: torch.Tensor,
    beta: float,
    w_max: float,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Advantage-weighted behavioral cloning with clipped exponential weights.

    Weights are computed under no_grad so the advantage path carries no
    gradient. Returns (loss, mean policy entropy over valid steps).
    """
    with torch.no_grad():
        q1, q2 = heads.q_values(states, actions)
        adv = torch.min(q1, q2) - heads.value(states)
        weights = torch.clamp(torch.exp(adv / beta), max=w_max)
    logits = heads.policy(states)
    log_probs = torch.log_softmax(logits, dim=-1)
    log_pi_a = log_probs.gather(-1, actions.unsqueeze(-1)).squeeze(-1)
    denom = torch.clamp(valid.sum(), min=1.0)
    loss = -((weights * log_pi_a) * valid).sum() / denom
    with torch.no_grad():
        probs = torch.softmax(logits, dim=-1)
        ent = -(probs * torch.clamp(probs, min=1e-12).log()).sum(-1)
        mean_entropy = (ent * valid).sum() / denom
    return loss, mean_entropy


def polyak_update(target: torch.nn.Module, online: torch.nn.Module, tau_target: float) -> None:
    """target <- tau * online + (1 - tau) * target, in place."""
    with torch.no_grad():
        for tp, p in zip(target.parameters(), online.parameters()):
            tp.mul_(1.0 - tau_target).add_(p, alpha=tau_target)
        for tb, b in zip(target.buffers(), online.buffers()):
            tb.copy_(b)


def policy_entropy(probs: torch.Tensor) -> torch.Tensor:
    """Shannon entropy in nats along the last dimension (0 log 0 = 0)."""
    return -torch.special.xlogy(probs, probs).sum(-1)


def select_action(
    heads: RLHeads,
    dynamics: BeliefDynamics,
    phi: torch.Tensor,  # [B, d_h]
    mu: torch.Tensor,  # [B, d_z] belief mean
    sigma: torch.Tensor,  # [B, d_z] belief scale
    n_samples: int = 32,
    mode: str = "sample",
    generator: Optional[torch.Generator] = None,
) -> Dict[str, torch.Tensor]:
    """Marginalize the policy over latent draws from the belief.

    sample: average pi over n sampled latents, then draw an action;
    argmax: mode of the averaged distribution; mean_latent: single pass
    at z = mu.
    """
    if mode not in ("sample", "argmax", "mean_latent"):
        raise ValueError(f"unknown mode {mode}")
    if mode == "mean_latent":
        probs = heads.policy_probs(dynamics.combine_state(phi, mu))
    else:
        acc = None
        for _ in range(n_samples):
            eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
            s = dynamics.combine_state(phi, sample_latent(mu, sigma, eps))
            p = heads.policy_probs(s)
            acc = p if acc is None else acc + p
        probs = acc / n_samples
    out = {"probs": probs, "entropy": policy_entropy(probs)}
    if mode == "argmax":
        out["action"] = probs.argmax(dim=-1)
    elif mode == "sample":
        out["action"] = torch.multinomial(probs, 1, generator=generator).squeeze(-1)
    else:
        out["action"] = probs.argmax(dim=-1)
    return out


def rl_losses(
    heads: RLHeads,
    states: torch.Tensor,  # [B, H, d_s]
    batch: Dict[str, torch.Tensor],
    cfg: RLConfig,
    semi_mdp: bool = False,
) -> Dict[str, torch.Tensor]:
    """All three losses on a padded batch of transitions."""
    valid = batch["step_mask"]
    actions = batch["actions"]
    next_states = torch.zeros_like(states)
    next_states[:, :-1] = states[:, 1:]
    durations = batch.get("durations") if semi_mdp else None
    with torch.no_grad():
        v_next = heads.target_value(next_states)
        targets = bootstrap_target(batch["rewards"], batch["dones"], v_next, cfg.gamma, durations)
    l_q1, l_q2 = q_loss(heads, states, actions, targets, valid)
    l_v = value_loss(heads, states, actions, valid, cfg.expectile)
    l_pi, entropy = policy_loss(heads, states, actions, valid, cfg.beta, cfg.w_max)
    return {"q1": l_q1, "q2": l_q2, "v": l_v, "policy": l_pi, "entropy": entropy}
