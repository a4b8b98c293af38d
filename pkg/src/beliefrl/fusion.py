"""Text-side fusion: documentation-process factor, cross-attention, gate.

The documentation factor is built only from the observation process (note
presence, recency, density) and never from note content; content enters
through cross-attention from the structured embedding to the per-modality
text rows, and a sigmoid gate decides how far the fused representation
moves from the structured embedding toward the text-enhanced one.
"""

from __future__ import annotations

import math
from typing import Tuple

import torch
import torch.nn as nn

from .config import ModelConfig


class DocProcess(nn.Module):
    """Recurrent summary of documentation behavior (content-independent)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d_h = cfg.hidden_dim
        in_dim = cfg.n_text_modalities + 2  # presence vector, recency, density
        self.mlp = nn.Sequential(nn.Linear(in_dim, 64), nn.ReLU(), nn.Linear(64, d_h))
        # explicit gate parameters of the recurrent update
        self.gru_ih = nn.Linear(d_h, 3 * d_h)
        self.gru_hh = nn.Linear(d_h, 3 * d_h)
        self.d_hidden = d_h
        self.double()

    def step(
        self,
        f_prev: torch.Tensor,
        text_mask: torch.Tensor,
        recency: torch.Tensor,
        density: torch.Tensor,
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """(eta, F) from process features only; one recurrent update."""
        x = torch.cat([text_mask, recency.unsqueeze(-1), density.unsqueeze(-1)], dim=-1)
        eta = self.mlp(x)
        gi = self.gru_ih(eta)
        gh = self.gru_hh(f_prev)
        i_r, i_z, i_n = gi.chunk(3, dim=-1)
        h_r, h_z, h_n = gh.chunk(3, dim=-1)
        r = torch.sigmoid(i_r + h_r)
        z = torch.sigmoid(i_z + h_z)
        n = torch.tanh(i_n + r * h_n)
        f_new = (1.0 - z) * n + z * f_prev
        return eta, f_new

    def forward(
        self,
        text_mask: torch.Tensor,  # [B, H, M]
        recency: torch.Tensor,  # [B, H]
        density: torch.Tensor,  # [B, H]
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        B, H, _ = text_mask.shape
        f = text_mask.new_zeros(B, self.d_hidden)
        etas, fs = [], []
        for h in range(H):
            eta, f = self.step(f, text_mask[:, h], recency[:, h], density[:, h])
            etas.append(eta)
            fs.append(f)
        return torch.stack(etas, dim=1), torch.stack(fs, dim=1)


class CrossAttention(nn.Module):
    """Multi-head attention with the structured embedding as single query
    and the per-modality text rows as keys/values; absent modalities are
    replaced by learned missing embeddings."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.attn_heads
        self.head_dim = cfg.attn_dim // cfg.attn_heads
        self.attn_dim = cfg.attn_dim
        self.w_q = nn.Linear(cfg.hidden_dim, cfg.attn_dim, bias=False)
        self.w_k = nn.Linear(cfg.text_embed_dim, cfg.attn_dim, bias=False)
        self.w_v = nn.Linear(cfg.text_embed_dim, cfg.attn_dim, bias=False)
        self.w_o = nn.Linear(cfg.attn_dim, cfg.hidden_dim, bias=False)
        self.missing_embed = nn.Parameter(0.02 * torch.randn(cfg.n_text_modalities, cfg.text_embed_dim))
        self.double()

    def substitute_missing(self, text_embeds: torch.Tensor, text_mask: torch.Tensor) -> torch.Tensor:
        """Rows with no observed text become the learned missing embedding."""
        m = text_mask.unsqueeze(-1)
        return m * text_embeds + (1.0 - m) * self.missing_embed

    def forward(self, query: torch.Tensor, keys: torch.Tensor) -> torch.Tensor:
        """query [..., d_h], keys [..., M, d_e] -> [..., d_h]."""
        lead = query.shape[:-1]
        M = keys.shape[-2]
        q = self.w_q(query).view(*lead, self.n_heads, 1, self.head_dim)
        k = self.w_k(keys).view(*lead, M, self.n_heads, self.head_dim).transpose(-3, -2)
        v = self.w_v(keys).view(*lead, M, self.n_heads, self.head_dim).transpose(-3, -2)
        scores = (q * k).sum(-1, keepdim=True).transpose(-2, -1) / math.sqrt(self.head_dim)
        attn = torch.softmax(scores, dim=-1)
        mixed = (attn.transpose(-2, -1) * v).sum(dim=-2)  # [..., heads, head_dim]
        return self.w_o(mixed.reshape(*lead, self.attn_dim))


class GatedFusion(nn.Module):
    """Residual-gated combination of structured and text paths."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d_h = cfg.hidden_dim
        self.w_d = nn.Linear(d_h, d_h, bias=False)
        self.gate = nn.Linear(3 * d_h, d_h)
        self.norm = nn.LayerNorm(d_h)
        self.double()

    def forward(
        self, phi_s: torch.Tensor, phi_t: torch.Tensor, f_doc: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        phi_t_hat = phi_t + self.w_d(f_doc)
        g = torch.sigmoid(self.gate(torch.cat([phi_s, phi_t_hat, f_doc], dim=-1)))
        fused = self.norm(phi_s + g * (phi_t_hat - phi_s))
        return fused, g


class TextFusion(nn.Module):
    """Full text branch. With `doc_factor` off a zero factor is routed into
    the gate and the text-hat path (content-only design); with
    `text_channel` off the caller bypasses this module entirely."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.doc = DocProcess(cfg)
        self.attn = CrossAttention(cfg)
        self.fuse = GatedFusion(cfg)

    def forward(
        self,
        phi_s: torch.Tensor,  # [B, H, d_h]
        text_embeds: torch.Tensor,  # [B, H, M, d_e]
        text_mask: torch.Tensor,  # [B, H, M]
        recency: torch.Tensor,  # [B, H] normalized
        density: torch.Tensor,  # [B, H] normalized
    ):
        eta, f_doc = self.doc(text_mask, recency, density)
        if not self.cfg.doc_factor:
            f_doc = torch.zeros_like(f_doc)
        keys = self.attn.substitute_missing(text_embeds, text_mask)
        phi_t = self.attn(phi_s, keys)
        fused, gate = self.fuse(phi_s, phi_t, f_doc)
        return fused, eta, f_doc, gate
