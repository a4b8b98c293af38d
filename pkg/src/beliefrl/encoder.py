"""Decay-gated recurrent encoder over the irregular structured grid.

Stale inputs and the hidden state are exponentially down-weighted by
learned functions of time-since-last-observation; explicit observation-
process features (time gaps, cumulative counts, missing rates, windowed
frequencies) enter the gates through their own embedding branch.
"""

from __future__ import annotations

from typing import Tuple

import numpy as np
import torch
import torch.nn as nn

from .config import ModelConfig

# fixed input conditioning for the observation-process features:
# [delta (hours); cumulative count; missing rate; windowed frequency]
_PSI_DELTA_SCALE = 1.0 / 24.0
_PSI_COUNT_SCALE = 1.0 / 24.0


def mnar_features(
    delta: np.ndarray,
    cum_counts: np.ndarray,
    miss_rates: np.ndarray,
    window_freq: np.ndarray,
) -> np.ndarray:
    """Concatenate per-variable observation-process features to [..., 4D]."""
    return np.concatenate([delta, cum_counts, miss_rates, window_freq], axis=-1)


class StructuredEncoder(nn.Module):
    """GRU-D-style encoder with decay, mean imputation, and gate updates.

    All parameters are float64; forward passes are pure functions of the
    inputs and parameters (dropout only active in train mode).
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        D = cfg.n_structured
        d_h = cfg.hidden_dim
        self.cfg = cfg
        self.d_hidden = d_h

        # decay: scalar hidden-state map on mean(delta), per-variable input map
        self.w_phi_decay = nn.Parameter(torch.zeros(()))
        self.b_phi_decay = nn.Parameter(torch.zeros(()))
        self.w_y_decay = nn.Parameter(torch.zeros(D))
        self.b_y_decay = nn.Parameter(torch.zeros(D))

        if cfg.psi_embedding == "mlp":
            self.psi_dim = cfg.psi_embed_dim
            self.psi_mlp = nn.Sequential(
                nn.Linear(4 * D, cfg.psi_embed_dim),
                nn.ReLU(),
                nn.Linear(cfg.psi_embed_dim, cfg.psi_embed_dim),
            )
        else:
            self.psi_dim = 4 * D
            self.psi_mlp = None

        self.reset_y = nn.Linear(D, d_h, bias=False)
        self.reset_h = nn.Linear(d_h, d_h, bias=False)
        self.reset_psi = nn.Linear(self.psi_dim, d_h, bias=False)
        self.reset_bias = nn.Parameter(torch.zeros(d_h))
        self.update_y = nn.Linear(D, d_h, bias=False)
        self.update_h = nn.Linear(d_h, d_h, bias=False)
        self.update_psi = nn.Linear(self.psi_dim, d_h, bias=False)
        self.update_bias = nn.Parameter(torch.zeros(d_h))
        self.cand_y = nn.Linear(D, d_h, bias=False)
        self.cand_h = nn.Linear(d_h, d_h, bias=False)
        self.cand_psi = nn.Linear(self.psi_dim, d_h, bias=False)
        self.cand_bias = nn.Parameter(torch.zeros(d_h))
        self.cand_dropout = nn.Dropout(cfg.dropout)

        self.double()

    def decay_factors(self, delta: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """(hidden decay scalar in (0,1], per-variable input decay in (0,1]^D).

        xi = exp(-max(0, w * delta + b)); the hidden factor uses the
        unweighted mean of the per-variable gaps.
        """
        mean_delta = delta.mean(dim=-1, keepdim=True)
        xi_phi = torch.exp(-torch.clamp(self.w_phi_decay * mean_delta + self.b_phi_decay, min=0.0))
        xi_y = torch.exp(-torch.clamp(self.w_y_decay * delta + self.b_y_decay, min=0.0))
        return xi_phi, xi_y

    @staticmethod
    def impute(
        values: torch.Tensor,
        mask: torch.Tensor,
        last_obs: torch.Tensor,
        xi_y: torch.Tensor,
        mean: torch.Tensor,
    ) -> torch.Tensor:
        """Observed values pass through; missing ones decay toward the mean."""
        return mask * values + (1.0 - mask) * (xi_y * last_obs + (1.0 - xi_y) * mean)

    def embed_psi(self, psi: torch.Tensor) -> torch.Tensor:
        scaled = self._scale_psi(psi)
        if not self.cfg.mnar_features:
            scaled = torch.zeros_like(scaled)
        if self.psi_mlp is not None:
            return self.psi_mlp(scaled)
        return scaled

    def _scale_psi(self, psi: torch.Tensor) -> torch.Tensor:
        D = self.cfg.n_structured
        delta, counts, rest = psi[..., :D], psi[..., D : 2 * D], psi[..., 2 * D :]
        return torch.cat([delta * _PSI_DELTA_SCALE, counts * _PSI_COUNT_SCALE, rest], dim=-1)

    def step(
        self,
        h_prev: torch.Tensor,
        y_hat: torch.Tensor,
        psi_emb: torch.Tensor,
        xi_phi: torch.Tensor,
    ) -> torch.Tensor:
        """One gated update on the decayed hidden state."""
        if not torch.isfinite(h_prev).all() or not torch.isfinite(y_hat).all():
            raise ValueError("non-finite encoder inputs")
        h_dec = xi_phi * h_prev
        r = torch.sigmoid(self.reset_y(y_hat) + self.reset_h(h_dec) + self.reset_psi(psi_emb) + self.reset_bias)
        eta = torch.sigmoid(self.update_y(y_hat) + self.update_h(h_dec) + self.update_psi(psi_emb) + self.update_bias)
        cand = torch.tanh(self.cand_y(y_hat) + self.cand_h(r * h_dec) + self.cand_psi(psi_emb) + self.cand_bias)
        cand = self.cand_dropout(cand)
        return (1.0 - eta) * h_dec + eta * cand

    def forward(
        self,
        values: torch.Tensor,  # [B, T, D] normalized, 0 where unobserved
        mask: torch.Tensor,  # [B, T, D]
        delta: torch.Tensor,  # [B, T, D] hours
        psi: torch.Tensor,  # [B, T, 4D] raw features
        sub_valid: torch.Tensor,  # [B, T]
        sub_steps_per_decision: int,
    ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Run the fine grid; emit the hidden state at the last sub-step of
        each decision step.

        Returns (phi_bar [B, H, d_h], h_seq [B, T, d_h], imputed [B, T, D]).
        """
        B, T, D = values.shape
        if T % sub_steps_per_decision != 0:
            raise ValueError("grid length must be a multiple of sub_steps_per_decision")
        h = values.new_zeros(B, self.d_hidden)
        last_obs = values.new_zeros(B, D)  # empirical mean is 0 in z-space
        mean = values.new_zeros(B, D)
        h_seq = []
        imputed = []
        for t in range(T):
            m_t = mask[:, t]
            xi_phi, xi_y = self.decay_factors(delta[:, t])
            y_hat = self.impute(values[:, t], m_t, last_obs, xi_y, mean)
            psi_emb = self.embed_psi(psi[:, t])
            h_new = self.step(h, y_hat, psi_emb, xi_phi)
            valid = sub_valid[:, t].unsqueeze(-1)
            h = valid * h_new + (1.0 - valid) * h
            last_obs = m_t * values[:, t] + (1.0 - m_t) * last_obs
            h_seq.append(h)
            imputed.append(y_hat)
        h_seq = torch.stack(h_seq, dim=1)
        idx = torch.arange(sub_steps_per_decision - 1, T, sub_steps_per_decision)
        return h_seq[:, idx], h_seq, torch.stack(imputed, dim=1)
