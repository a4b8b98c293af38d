"""Episode batching: pad, normalize, and assemble torch tensors."""

from __future__ import annotations

from typing import Dict, Iterator, Sequence

import numpy as np
import torch

from .config import SimConfig
from .simulator import Episode, NormalizationStats, compute_summaries


def episodes_to_batch(
    episodes: Sequence[Episode],
    stats: NormalizationStats,
    config: SimConfig,
) -> Dict[str, torch.Tensor]:
    """Build a padded batch over full horizon H with masks for validity.

    Values are z-scored per variable; unobserved entries become 0 after
    normalization (masks stay authoritative). The mnar feature block is
    [delta; cum_count; miss_rate; window_freq] per sub-step, raw units.
    """
    H = config.horizon
    n_sub = config.sub_steps_per_decision
    T = H * n_sub
    D = config.n_structured
    M = config.n_text_modalities
    d_e = config.text_embed_dim
    B = len(episodes)
    horizon_hours = H * config.decision_interval_hours

    values = np.zeros((B, T, D))
    mask = np.zeros((B, T, D))
    delta = np.zeros((B, T, D))
    psi = np.zeros((B, T, 4 * D))
    sub_valid = np.zeros((B, T))
    text_embeds = np.zeros((B, H, M, d_e))
    text_mask = np.zeros((B, H, M))
    text_counts = np.zeros((B, H, M))
    recency = np.zeros((B, H))
    density = np.zeros((B, H))
    static = np.zeros((B, len(episodes[0].static)))
    actions = np.zeros((B, H), dtype=np.int64)
    rewards = np.zeros((B, H))
    dones = np.zeros((B, H))
    step_mask = np.zeros((B, H))
    outcome = np.full(B, -1.0)
    outcome_mask = np.zeros(B)
    severity = np.zeros((B, H))

    for i, ep in enumerate(episodes):
        L = len(ep.steps)
        Tl = L * n_sub
        ep_mask = np.concatenate([s.mask for s in ep.steps])
        ep_vals = np.concatenate([s.values for s in ep.steps])
        ep_counts = np.stack([s.text_counts for s in ep.steps])
        summ = compute_summaries(
            ep_mask,
            ep_counts,
            config.kappa_window_steps,
            config.omega_window_hours,
            config.sub_step_hours,
            config.decision_interval_hours,
            horizon_hours,
        )
        z = (np.nan_to_num(ep_vals, nan=0.0) - stats.value_mean) / stats.value_std
        values[i, :Tl] = np.where(ep_mask > 0, z, 0.0)
        mask[i, :Tl] = ep_mask
        delta[i, :Tl] = summ.delta
        psi[i, :Tl] = np.concatenate(
            [summ.delta, summ.cum_counts, summ.miss_rates, summ.window_freq], axis=1
        )
        sub_valid[i, :Tl] = 1.0
        for h, st in enumerate(ep.steps):
            emb = np.where(st.text_mask[:, None] > 0, np.nan_to_num(st.text_embeds, nan=0.0), 0.0)
            text_embeds[i, h] = emb
            text_mask[i, h] = st.text_mask
            text_counts[i, h] = st.text_counts
        recency[i, :L] = summ.text_recency
        density[i, :L] = summ.doc_density
        static[i] = ep.static
        actions[i, :L] = ep.actions
        rewards[i, :L] = ep.rewards
        dones[i, :L] = ep.dones
        step_mask[i, :L] = 1.0
        severity[i, :L] = ep.true_severity
        if ep.outcome is not None:
            outcome[i] = float(ep.outcome)
            outcome_mask[i] = 1.0

    recency_z = (recency - stats.recency_mean) / stats.recency_std
    density_z = (density - stats.kappa_mean) / stats.kappa_std

    t = lambda a: torch.as_tensor(a, dtype=torch.float64)
    return {
        "values": t(values),
        "mask": t(mask),
        "delta": t(delta),
        "psi": t(psi),
        "sub_valid": t(sub_valid),
        "text_embeds": t(text_embeds),
        "text_mask": t(text_mask),
        "text_counts": t(text_counts),
        "text_recency": t(recency_z),
        "doc_density": t(density_z),
        "static": t(static),
        "actions": torch.as_tensor(actions),
        "rewards": t(rewards),
        "dones": t(dones),
        "step_mask": t(step_mask),
        "durations": t(np.ones((B, H))),
        "outcome": t(outcome),
        "outcome_mask": t(outcome_mask),
        "true_severity": t(severity),
        "episode_ids": torch.as_tensor([ep.episode_id for ep in episodes]),
    }


def slice_batch(batch: Dict[str, torch.Tensor], idx) -> Dict[str, torch.Tensor]:
    return {k: v[idx] for k, v in batch.items()}


def iterate_minibatches(
    batch: Dict[str, torch.Tensor],
    batch_size: int,
    rng: np.random.Generator,
    shuffle: bool = True,
) -> Iterator[Dict[str, torch.Tensor]]:
    n = batch["step_mask"].shape[0]
    order = rng.permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = torch.as_tensor(order[start : start + batch_size])
        yield slice_batch(batch, idx)
