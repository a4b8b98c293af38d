"""Synthetic multimodal cohort generator with severity-driven observation.

A scalar (or low-dimensional) latent severity follows linear-Gaussian
dynamics with an additive treatment-mismatch effect. Everything the agent
sees is driven by it: per-channel observation probabilities and note
presence are logistic in severity (the MNAR mechanism under test), note
counts are Poisson in severity, the behavior policy is a softmax over a
severity-matching score, and death hazard is logistic in severity.

All draws come from per-(episode, step, purpose) substreams so that
perturbing future severities leaves earlier steps bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .config import ConfigError, SimConfig

# substream purposes; keyed as (seed, episode, stream, step)
_S_STATIC = 0
_S_SEV_INIT = 1
_S_SEV_NOISE = 2
_S_OBS_MASK = 3
_S_OBS_VALUE = 4
_S_TEXT_PRESENCE = 5
_S_TEXT_COUNT = 6
_S_TEXT_EMBED = 7
_S_ACTION = 8
_S_DEATH = 9
_S_OUTCOME = 10


@dataclass
class StepObservation:
    """One decision step: fine-grid structured data plus step-level text.

    Unobserved entries of `values` hold NaN; the mask is authoritative.
    `text_embeds` rows are NaN where the modality is absent.
    """

    values: np.ndarray  # [sub_steps, D] float64, NaN where mask == 0
    mask: np.ndarray  # [sub_steps, D] uint8
    time_gaps: np.ndarray  # [sub_steps, D] float64, hours since last observed
    text_embeds: np.ndarray  # [M, d_e] float64, NaN rows where text_mask == 0
    text_counts: np.ndarray  # [M] int64
    text_mask: np.ndarray  # [M] uint8, 1 iff count > 0
    text_recency: float  # hours since last note, any modality
    doc_density: float  # mean notes/step over trailing K decision steps

    def check(self) -> None:
        assert np.all((self.text_counts > 0) == (self.text_mask == 1))
        assert np.all(np.isnan(self.values[self.mask == 0]))
        assert self.doc_density >= 0.0


@dataclass
class Episode:
    """One trajectory: static features, steps, actions, terminal reward."""

    episode_id: int
    static: np.ndarray  # [S] float64
    steps: List[StepObservation]
    actions: np.ndarray  # [L] int64
    rewards: np.ndarray  # [L] float64, single nonzero entry at the end
    dones: np.ndarray  # [L] uint8
    true_severity: np.ndarray  # [L] float64 (ground truth, evaluation only)
    outcome: Optional[int]  # post-horizon mortality; None unless full horizon

    def __len__(self) -> int:
        return len(self.steps)

    def check(self, horizon: int) -> None:
        L = len(self.steps)
        assert 1 <= L <= horizon
        nz = np.nonzero(self.rewards)[0]
        assert len(nz) == 1 and nz[0] == L - 1
        assert self.rewards[L - 1] in (-1.0, 1.0)
        assert self.dones[L - 1] == 1 and not np.any(self.dones[: L - 1])
        assert (self.outcome is not None) == (L == horizon and self.rewards[-1] > 0)


@dataclass
class SummaryFeatures:
    """Derived observation-process summaries for one episode."""

    delta: np.ndarray  # [T, D] hours since last observation
    cum_counts: np.ndarray  # [T, D] cumulative observation counts
    miss_rates: np.ndarray  # [T, D] 1 - c_t / t
    window_freq: np.ndarray  # [T, D] trailing-window count / window hours
    text_recency: np.ndarray  # [H] hours since last note
    doc_density: np.ndarray  # [H] trailing mean notes per decision step


@dataclass
class NormalizationStats:
    """Observed-entry train-split statistics used to standardize inputs."""

    value_mean: np.ndarray  # [D]
    value_std: np.ndarray  # [D], floored > 0
    kappa_mean: float
    kappa_std: float
    recency_mean: float
    recency_std: float


def _rng(seed: int, episode: int, stream: int, step: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, episode, stream, step])
    return np.random.Generator(np.random.PCG64(ss))


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def action_intensity(action_count: int) -> np.ndarray:
    """Scalar treatment intensity in [0, 1] for each discrete action.

    For a square action grid (e.g. 3x3 fluid x vasopressor levels) the
    intensity is the normalized level sum; otherwise the action index rank.
    """
    k = int(round(math.sqrt(action_count)))
    if k * k == action_count and k >= 2:
        a = np.arange(action_count)
        return ((a // k) + (a % k)) / (2.0 * (k - 1))
    return np.arange(action_count) / (action_count - 1)


def _need(severity: float) -> float:
    """Treatment intensity that keeps severity stable at this acuity."""
    return float(_sigmoid(1.2 * severity - 0.2))


def behavior_action_probs(config: SimConfig, severity: float) -> np.ndarray:
    """Ground-truth behavior policy: softmax over severity-matching scores."""
    u = action_intensity(config.action_count)
    scores = -((u - _need(severity)) ** 2) / config.behavior_temperature
    scores = scores - scores.max()
    p = np.exp(scores)
    return p / p.sum()


def _channel_loadings(d: int) -> np.ndarray:
    return np.linspace(0.4, 1.1, d)


def _channel_base_logits(config: SimConfig) -> np.ndarray:
    offsets = 0.3 * ((np.arange(config.n_structured) % 3) - 1.0)
    return config.obs_base_logit + offsets


def _text_band(severity: float) -> int:
    if severity < -0.3:
        return 0
    if severity < 0.8:
        return 1
    return 2


def _text_mean(modality: int, band: int, d_e: int) -> np.ndarray:
    alt = np.where(np.arange(d_e) % 2 == 0, 1.0, -1.0)
    mean = 0.9 * (band - 1) * alt
    mean[modality % d_e] += 0.4
    return mean


def compute_summaries(
    mask: np.ndarray,
    text_counts: np.ndarray,
    kappa_window_steps: int,
    omega_window_hours: float,
    sub_step_hours: float,
    decision_interval_hours: float,
    initial_recency_hours: float,
) -> SummaryFeatures:
    """Observation-process summaries from raw masks and note counts.

    delta resets to 0 at an observation and grows by the sub-step duration
    otherwise; c is the running count; the missing rate is 1 - c_t/t with
    the empty-history value defined as 1; omega is the trailing-window
    count divided by the window length in hours. Text recency is per
    decision step, capped at `initial_recency_hours` before the first note;
    doc density averages total note counts over the trailing K steps.
    """
    if kappa_window_steps < 1 or omega_window_hours < 1:
        raise ConfigError("summary windows must be >= 1")
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be [T, D], got shape {mask.shape}")
    T, D = mask.shape
    m = mask.astype(np.float64)

    delta = np.zeros((T, D))
    prev = np.zeros(D)
    for t in range(T):
        cur = np.where(m[t] > 0, 0.0, prev + sub_step_hours)
        delta[t] = cur
        prev = cur

    cum = np.cumsum(m, axis=0)
    t_idx = np.arange(1, T + 1, dtype=np.float64)[:, None]
    miss = 1.0 - cum / t_idx

    n_w = max(int(round(omega_window_hours / sub_step_hours)), 1)
    padded = np.concatenate([np.zeros((n_w - 1, D)), m], axis=0)
    csum = np.concatenate([np.zeros((1, D)), np.cumsum(padded, axis=0)], axis=0)
    win_counts = csum[n_w:] - csum[:-n_w]
    omega = win_counts / omega_window_hours

    counts = np.asarray(text_counts)
    if counts.ndim != 2:
        raise ValueError(f"text_counts must be [H, M], got shape {counts.shape}")
    H = counts.shape[0]
    any_note = counts.sum(axis=1) > 0
    recency = np.zeros(H)
    prev_r = initial_recency_hours
    for h in range(H):
        r = 0.0 if any_note[h] else min(prev_r + decision_interval_hours, initial_recency_hours)
        recency[h] = r
        prev_r = r

    totals = counts.sum(axis=1).astype(np.float64)
    kappa = np.zeros(H)
    for h in range(H):
        lo = max(0, h - kappa_window_steps + 1)
        kappa[h] = totals[lo : h + 1].sum() / kappa_window_steps

    return SummaryFeatures(delta, cum, miss, omega, recency, kappa)


def _generate_episode(
    config: SimConfig,
    episode_id: int,
    severity_override: Optional[np.ndarray] = None,
) -> Episode:
    """Generate one episode; `severity_override` replaces the per-step
    acuity where finite (leakage-probe harness, not for production use)."""
    seed = config.seed
    H = config.horizon
    n_sub = config.sub_steps_per_decision
    D = config.n_structured
    M = config.n_text_modalities
    d_e = config.text_embed_dim
    sev_dim = config.latent_severity_dim
    u_map = action_intensity(config.action_count)
    loadings = _channel_loadings(D)
    base_logits = _channel_base_logits(config)
    text_bases = np.asarray(config.text_base_logits, dtype=np.float64)
    horizon_hours = H * config.decision_interval_hours

    g = _rng(seed, episode_id, _S_STATIC)
    static = np.array([g.normal(), float(g.integers(0, 2)), g.normal()])

    g = _rng(seed, episode_id, _S_SEV_INIT)
    sev_vec = 0.35 * static[2] + 0.6 * g.normal(size=sev_dim)

    raw_mask = np.zeros((H * n_sub, D), dtype=np.uint8)
    raw_values = np.full((H * n_sub, D), np.nan)
    text_counts = np.zeros((H, M), dtype=np.int64)
    text_embeds = np.full((H, M, d_e), np.nan)

    actions = np.zeros(H, dtype=np.int64)
    severities = np.zeros(H)
    length = H
    died = False

    for h in range(H):
        if severity_override is not None and np.isfinite(severity_override[h]):
            sev_vec = np.full(sev_dim, severity_override[h])
        s = float(sev_vec.mean())
        severities[h] = s

        g = _rng(seed, episode_id, _S_OBS_MASK, h)
        p_obs = _sigmoid(base_logits[None, :] + config.mnar_steepness * s)
        m = (g.random((n_sub, D)) < p_obs).astype(np.uint8)
        g = _rng(seed, episode_id, _S_OBS_VALUE, h)
        vals = loadings[None, :] * s + config.value_noise * g.normal(size=(n_sub, D))
        raw_mask[h * n_sub : (h + 1) * n_sub] = m
        raw_values[h * n_sub : (h + 1) * n_sub] = np.where(m > 0, vals, np.nan)

        g = _rng(seed, episode_id, _S_TEXT_PRESENCE, h)
        p_note = _sigmoid(text_bases + config.doc_mnar_steepness * s)
        present = g.random(M) < p_note
        g = _rng(seed, episode_id, _S_TEXT_COUNT, h)
        extra = g.poisson(np.exp(config.note_rate_log + 0.5 * config.doc_mnar_steepness * s), size=M)
        counts = np.where(present, np.minimum(1 + extra, config.max_notes_per_step), 0)
        text_counts[h] = counts

        g = _rng(seed, episode_id, _S_TEXT_EMBED, h)
        band = _text_band(s)
        for j in range(M):
            if counts[j] > 0:
                notes = _text_mean(j, band, d_e)[None, :] + 0.3 * g.normal(size=(int(counts[j]), d_e))
                text_embeds[h, j] = notes.mean(axis=0)

        g = _rng(seed, episode_id, _S_ACTION, h)
        probs = behavior_action_probs(config, s)
        a = int(g.choice(config.action_count, p=probs))
        actions[h] = a

        g = _rng(seed, episode_id, _S_SEV_NOISE, h)
        # 0.05 centers the mismatch penalty at the behavior policy's typical
        # quantization error, so matched care holds severity stationary
        mismatch = (u_map[a] - _need(s)) ** 2 - 0.05
        sev_vec = (
            config.severity_persistence * sev_vec
            + config.severity_drift
            + config.mismatch_effect * mismatch
            + config.severity_noise * g.normal(size=sev_dim)
        )

        if h < H - 1:
            g = _rng(seed, episode_id, _S_DEATH, h)
            p_death = _sigmoid(config.death_slope * float(sev_vec.mean()) - config.death_threshold)
            if g.random() < p_death:
                length = h + 1
                died = True
                break

    summaries = compute_summaries(
        raw_mask[: length * n_sub],
        text_counts[:length],
        config.kappa_window_steps,
        config.omega_window_hours,
        config.sub_step_hours,
        config.decision_interval_hours,
        horizon_hours,
    )

    steps = []
    for h in range(length):
        sl = slice(h * n_sub, (h + 1) * n_sub)
        counts = text_counts[h]
        steps.append(
            StepObservation(
                values=raw_values[sl].copy(),
                mask=raw_mask[sl].copy(),
                time_gaps=summaries.delta[sl].copy(),
                text_embeds=text_embeds[h].copy(),
                text_counts=counts.copy(),
                text_mask=(counts > 0).astype(np.uint8),
                text_recency=float(summaries.text_recency[h]),
                doc_density=float(summaries.doc_density[h]),
            )
        )

    rewards = np.zeros(length)
    rewards[-1] = -1.0 if died else 1.0
    dones = np.zeros(length, dtype=np.uint8)
    dones[-1] = 1

    outcome = None
    if not died:
        g = _rng(seed, episode_id, _S_OUTCOME)
        p_out = _sigmoid(config.outcome_slope * float(sev_vec.mean()) - config.outcome_threshold)
        outcome = int(g.random() < p_out)

    return Episode(
        episode_id=episode_id,
        static=static,
        steps=steps,
        actions=actions[:length].copy(),
        rewards=rewards,
        dones=dones,
        true_severity=severities[:length].copy(),
        outcome=outcome,
    )


def generate_cohort(config: SimConfig) -> List[Episode]:
    """Generate `n_episodes` independent episodes, deterministic in seed."""
    config.validate()
    return [_generate_episode(config, i) for i in range(config.n_episodes)]


def split_cohort(
    episodes: Sequence[Episode],
    fractions: Sequence[float],
    seed: int,
) -> Tuple[List[Episode], ...]:
    """Disjoint episode-level partition: floor sizes for the first k-1
    splits, remainder to the last; shuffled deterministically by seed."""
    fracs = [float(f) for f in fractions]
    if any(f <= 0 for f in fracs) or abs(sum(fracs) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be positive and sum to 1, got {fracs}")
    n = len(episodes)
    if n < len(fracs):
        raise ValueError(f"cannot split {n} episodes into {len(fracs)} parts")
    order = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, 0xC0]))).permutation(n)
    sizes = [int(math.floor(f * n)) for f in fracs[:-1]]
    sizes.append(n - sum(sizes))
    out = []
    start = 0
    for size in sizes:
        out.append([episodes[i] for i in order[start : start + size]])
        start += size
    return tuple(out)


def compute_normalization_stats(episodes: Sequence[Episode]) -> NormalizationStats:
    """Per-variable mean/std over observed entries, plus doc-feature stats."""
    if not episodes:
        raise ValueError("need at least one episode")
    D = episodes[0].steps[0].values.shape[1]
    tot = np.zeros(D)
    tot_sq = np.zeros(D)
    cnt = np.zeros(D)
    kappas = []
    recencies = []
    for ep in episodes:
        for st in ep.steps:
            obs = st.mask > 0
            vals = np.where(obs, st.values, 0.0)
            tot += vals.sum(axis=0)
            tot_sq += (vals**2).sum(axis=0)
            cnt += obs.sum(axis=0)
            kappas.append(st.doc_density)
            recencies.append(st.text_recency)
    cnt_safe = np.maximum(cnt, 1.0)
    mean = tot / cnt_safe
    var = tot_sq / cnt_safe - mean**2
    std = np.sqrt(np.maximum(var, 0.0))
    std = np.maximum(std, 1e-6)
    kap = np.asarray(kappas)
    rec = np.asarray(recencies)
    return NormalizationStats(
        value_mean=mean,
        value_std=std,
        kappa_mean=float(kap.mean()),
        kappa_std=float(max(kap.std(), 1e-6)),
        recency_mean=float(rec.mean()),
        recency_std=float(max(rec.std(), 1e-6)),
    )
