"""Action-conditioned latent belief dynamics and reconstruction heads.

The prior predicts the next latent from (z, phi, action embedding); the
posterior filters it from the next-step observation embedding and static
features. States combine the observation embedding with a linear
projection of the latent. Reconstruction heads verify that states retain
the observations and their observation process.
"""

from __future__ import annotations

from typing import Dict, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig


def kl_diag_gaussian(
    mu_q: torch.Tensor,
    sigma_q: torch.Tensor,
    mu_p: torch.Tensor,
    sigma_p: torch.Tensor,
) -> torch.Tensor:
    """KL(q || p) between diagonal Gaussians, summed over the last dim.

    0.5 * sum(log(sp^2/sq^2) + sq^2/sp^2 + (mq - mp)^2/sp^2 - 1)
    """
    var_q = sigma_q**2
    var_p = sigma_p**2
    return 0.5 * (torch.log(var_p / var_q) + var_q / var_p + (mu_q - mu_p) ** 2 / var_p - 1.0).sum(-1)


def kl_per_dim(mu_q, sigma_q, mu_p, sigma_p) -> torch.Tensor:
    """Per-dimension KL terms (no sum), for collapse diagnostics/free bits."""
    var_q = sigma_q**2
    var_p = sigma_p**2
    return 0.5 * (torch.log(var_p / var_q) + var_q / var_p + (mu_q - mu_p) ** 2 / var_p - 1.0)


def sample_latent(mu: torch.Tensor, sigma: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    return mu + sigma * eps


def dynamics_consistency_loss(z_post: torch.Tensor, z_pred: torch.Tensor) -> torch.Tensor:
    """Squared distance between inferred and predicted latents, batch mean."""
    return ((z_post - z_pred) ** 2).sum(-1).mean()


class BeliefDynamics(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d_z, d_h = cfg.latent_dim, cfg.hidden_dim
        self.action_embed = nn.Embedding(cfg.action_count, cfg.action_embed_dim)
        self.prior_net = nn.Sequential(
            nn.Linear(d_z + d_h + cfg.action_embed_dim, 128),
            nn.ReLU(),
            nn.Linear(128, 64),
            nn.ReLU(),
            nn.Linear(64, 2 * d_z),
        )
        post_in = d_h + cfg.static_dim
        if cfg.posterior_conditioning == "phi_x_a_z":
            post_in += cfg.action_embed_dim + d_z
        self.posterior_net = nn.Sequential(
            nn.Linear(post_in, 128),
            nn.ReLU(),
            nn.Linear(128, 64),
            nn.ReLU(),
            nn.Linear(64, 2 * d_z),
        )
        self.proj = nn.Linear(d_z, d_h)
        self.double()

    def _split(self, out: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        mu, logvar = out.chunk(2, dim=-1)
        sigma = torch.clamp(torch.exp(0.5 * logvar), min=self.cfg.sigma_floor)
        return mu, sigma

    def embed_action(self, actions: torch.Tensor) -> torch.Tensor:
        """Action embedding; zeroed when action conditioning is ablated."""
        if actions.max() >= self.cfg.action_count or actions.min() < 0:
            raise ValueError("action index out of range")
        emb = self.action_embed(actions)
        if not self.cfg.action_conditioning:
            emb = torch.zeros_like(emb)
        return emb

    def prior_step(
        self, z: torch.Tensor, phi: torch.Tensor, actions: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        emb = self.embed_action(actions)
        return self._split(self.prior_net(torch.cat([z, phi, emb], dim=-1)))

    def posterior(
        self,
        phi_next: torch.Tensor,
        static: torch.Tensor,
        actions: Optional[torch.Tensor] = None,
        z_prev: Optional[torch.Tensor] = None,
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        parts = [phi_next, static]
        if self.cfg.posterior_conditioning == "phi_x_a_z":
            if actions is None or z_prev is None:
                raise ValueError("phi_x_a_z posterior needs actions and previous latent")
            parts += [self.embed_action(actions), z_prev]
        return self._split(self.posterior_net(torch.cat(parts, dim=-1)))

    def combine_state(self, phi: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        return phi + self.proj(z)


class Decoders(nn.Module):
    """MLP heads reconstructing step observations from the state."""

    def __init__(self, cfg: ModelConfig, sub_steps_per_decision: int):
        super().__init__()
        self.cfg = cfg
        self.n_sub = sub_steps_per_decision
        D = cfg.n_structured
        hid = cfg.decoder_hidden_dim
        d_h = cfg.hidden_dim
        out = sub_steps_per_decision * D
        self.value_head = nn.Sequential(nn.Linear(d_h, hid), nn.ReLU(), nn.Linear(hid, out))
        self.mask_head = nn.Sequential(nn.Linear(d_h, hid), nn.ReLU(), nn.Linear(hid, out))
        self.text_head = nn.Sequential(
            nn.Linear(d_h, hid), nn.ReLU(), nn.Linear(hid, cfg.n_text_modalities * cfg.text_embed_dim)
        )
        self.eta_head = nn.Sequential(nn.Linear(d_h, hid), nn.ReLU(), nn.Linear(hid, d_h))
        self.double()

    def forward(self, states: torch.Tensor) -> Dict[str, torch.Tensor]:
        lead = states.shape[:-1]
        D = self.cfg.n_structured
        return {
            "values": self.value_head(states).view(*lead, self.n_sub, D),
            "mask_logits": self.mask_head(states).view(*lead, self.n_sub, D),
            "text": self.text_head(states).view(*lead, self.cfg.n_text_modalities, self.cfg.text_embed_dim),
            "eta": self.eta_head(states),
        }


def reconstruction_loss(
    recon: Dict[str, torch.Tensor],
    value_targets: torch.Tensor,  # [B, H, sub, D] observed values, imputed elsewhere
    observed: torch.Tensor,  # [B, H, sub, D] observation mask
    text_targets: Optional[torch.Tensor],  # [B, H, M, d_e] post-substitution keys
    eta_targets: Optional[torch.Tensor],  # [B, H, d_h]
    step_mask: torch.Tensor,  # [B, H]
    lambda_obs: float,
    lambda_mask: float,
    lambda_text: float,
    unobserved_weight: float,
) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """Weighted sum of value, mask, and text terms, averaged over valid steps.

    Squared value errors cover every entry; unobserved entries use the
    imputed targets with a down-weight. Mask reconstruction is BCE on
    logits over all entries. Text terms (content and process embedding)
    apply only when the text channel is enabled; targets are detached by
    the caller.
    """
    valid = step_mask.unsqueeze(-1).unsqueeze(-1)
    n_valid_entries = torch.clamp((valid.expand_as(value_targets)).sum(), min=1.0)

    w = observed + unobserved_weight * (1.0 - observed)
    value_term = ((recon["values"] - value_targets) ** 2 * w * valid).sum() / n_valid_entries
    mask_term = (
        F.binary_cross_entropy_with_logits(recon["mask_logits"], observed, reduction="none") * valid
    ).sum() / n_valid_entries

    breakdown = {"values": value_term, "mask": mask_term}
    total = lambda_obs * value_term + lambda_mask * mask_term

    if text_targets is not None:
        v2 = step_mask.unsqueeze(-1).unsqueeze(-1)
        n_text = torch.clamp(v2.expand_as(text_targets).sum(), min=1.0)
        text_term = ((recon["text"] - text_targets) ** 2 * v2).sum() / n_text
        breakdown["text"] = text_term
        total = total + lambda_text * text_term
    if eta_targets is not None:
        v1 = step_mask.unsqueeze(-1)
        n_eta = torch.clamp(v1.expand_as(eta_targets).sum(), min=1.0)
        eta_term = ((recon["eta"] - eta_targets) ** 2 * v1).sum() / n_eta
        breakdown["eta"] = eta_term
        total = total + lambda_text * eta_term

    return total, breakdown
