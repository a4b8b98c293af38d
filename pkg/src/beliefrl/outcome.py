"""Outcome prediction from the terminal state (full-horizon survivors only)."""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F


class OutcomeHead(nn.Module):
    """Two-layer MLP per outcome; default single binary outcome."""

    def __init__(self, cfg, n_outcomes: int = 1):
        super().__init__()
        self.heads = nn.ModuleList(
            [
                nn.Sequential(
                    nn.Linear(cfg.hidden_dim, cfg.outcome_hidden_dim),
                    nn.ReLU(),
                    nn.Linear(cfg.outcome_hidden_dim, 1),
                )
                for _ in range(n_outcomes)
            ]
        )
        # zero output layer: an untrained head predicts exactly 0.5 rather
        # than a random readout of the state
        for head in self.heads:
            nn.init.zeros_(head[-1].weight)
            nn.init.zeros_(head[-1].bias)
        self.double()

    def logits(self, states: torch.Tensor, k: int = 0) -> torch.Tensor:
        return self.heads[k](states).squeeze(-1)

    def predict(self, states: torch.Tensor, k: int = 0) -> torch.Tensor:
        return torch.sigmoid(self.logits(states, k))


def outcome_loss(
    head: OutcomeHead,
    terminal_states: torch.Tensor,  # [B, d_s]
    labels: torch.Tensor,  # [B] in {0,1}, junk where ineligible
    eligible: torch.Tensor,  # [B] 1 for full-horizon survivors
    weights: Sequence[float] = (1.0,),
) -> torch.Tensor:
    """Weighted sum of mean BCE terms over the eligible episodes."""
    idx = eligible > 0.5
    if not bool(idx.any()):
        return terminal_states.new_zeros(())
    s = terminal_states[idx]
    y = labels[idx]
    if bool(((y != 0) & (y != 1)).any()):
        raise ValueError("outcome labels must be 0/1")
    total = terminal_states.new_zeros(())
    for k, lam in enumerate(weights):
        total = total + lam * F.binary_cross_entropy_with_logits(head.logits(s, k), y)
    return total
