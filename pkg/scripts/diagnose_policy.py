"""Diagnose policy quality against simulator ground truth.

Trains one variant, then: (a) reports advantage/weight spreads on logged
transitions, (b) checks whether the policy matches treatment intensity to
severity better than the behavior policy, (c) rolls the policy out in the
simulator for a ground-truth value estimate.
"""

import json
import sys
import time

import numpy as np
import torch

sys.path.insert(0, "src")
torch.set_num_threads(1)

from beliefrl.config import EvalConfig, ExperimentConfig, ModelConfig, SimConfig, TrainConfig
from beliefrl.data import episodes_to_batch
from beliefrl.evaluation import evaluate_bundle
from beliefrl.iql import select_action
from beliefrl.simulator import (
    _need,
    _rng,
    _sigmoid,
    _channel_base_logits,
    _channel_loadings,
    _text_band,
    _text_mean,
    action_intensity,
    behavior_action_probs,
    compute_summaries,
    generate_cohort,
    split_cohort,
    Episode,
    StepObservation,
)
from beliefrl.trainer import run_training


def simulate_policy(bundle, config, n_episodes, policy_mode, seed_offset=900000, greedy=True):
    """Ground-truth rollout: the trained policy acts in the simulator."""
    H = config.horizon
    n_sub = config.sub_steps_per_decision
    u_map = action_intensity(config.action_count)
    loadings = _channel_loadings(config.n_structured)
    base_logits = _channel_base_logits(config)
    text_bases = np.asarray(config.text_base_logits)
    horizon_hours = H * config.decision_interval_hours
    gen = torch.Generator().manual_seed(0)

    alive = list(range(n_episodes))
    sev = {}
    static = {}
    partial = {}
    returns = np.zeros(n_episodes)
    matched_sq = []

    for i in range(n_episodes):
        g = _rng(config.seed, seed_offset + i, 0)
        static[i] = np.array([g.normal(), float(g.integers(0, 2)), g.normal()])
        g = _rng(config.seed, seed_offset + i, 1)
        sev[i] = 0.35 * static[i][2] + 0.6 * g.normal(size=config.latent_severity_dim)
        partial[i] = []

    for h in range(H):
        if not alive:
            break
        # observations at step h for each alive episode
        for i in alive:
            s = float(sev[i].mean())
            g = _rng(config.seed, seed_offset + i, 3, h)
            p_obs = _sigmoid(base_logits[None, :] + config.mnar_steepness * s)
            m = (g.random((n_sub, config.n_structured)) < p_obs).astype(np.uint8)
            g = _rng(config.seed, seed_offset + i, 4, h)
            vals = loadings[None, :] * s + config.value_noise * g.normal(size=(n_sub, config.n_structured))
            g = _rng(config.seed, seed_offset + i, 5, h)
            present = g.random(config.n_text_modalities) < _sigmoid(text_bases + config.doc_mnar_steepness * s)
            g = _rng(config.seed, seed_offset + i, 6, h)
            extra = g.poisson(np.exp(config.note_rate_log + 0.5 * config.doc_mnar_steepness * s), size=config.n_text_modalities)
            counts = np.where(present, np.minimum(1 + extra, config.max_notes_per_step), 0)
            g = _rng(config.seed, seed_offset + i, 7, h)
            emb = np.full((config.n_text_modalities, config.text_embed_dim), np.nan)
            band = _text_band(s)
            for j in range(config.n_text_modalities):
                if counts[j] > 0:
                    notes = _text_mean(j, band, config.text_embed_dim)[None, :] + 0.3 * g.normal(size=(int(counts[j]), config.text_embed_dim))
                    emb[j] = notes.mean(axis=0)
            partial[i].append((np.where(m > 0, vals, np.nan), m, emb, counts))

        # batch-encode prefixes and select actions
        episodes = []
        for i in alive:
            steps = []
            raw_mask = np.concatenate([p[1] for p in partial[i]])
            raw_counts = np.stack([p[3] for p in partial[i]])
            summ = compute_summaries(raw_mask, raw_counts, config.kappa_window_steps,
                                     config.omega_window_hours, config.sub_step_hours,
                                     config.decision_interval_hours, horizon_hours)
            for k, (v, m, e, c) in enumerate(partial[i]):
                sl = slice(k * n_sub, (k + 1) * n_sub)
                steps.append(StepObservation(
                    values=v, mask=m, time_gaps=summ.delta[sl], text_embeds=e,
                    text_counts=c, text_mask=(c > 0).astype(np.uint8),
                    text_recency=float(summ.text_recency[k]), doc_density=float(summ.doc_density[k]),
                ))
            episodes.append(Episode(
                episode_id=i, static=static[i], steps=steps,
                actions=np.zeros(len(steps), dtype=np.int64),
                rewards=np.zeros(len(steps)), dones=np.zeros(len(steps), dtype=np.uint8),
                true_severity=np.zeros(len(steps)), outcome=None,
            ))
        batch = episodes_to_batch(episodes, bundle.stats, config)
        with torch.no_grad():
            phi, mu, sigma = bundle.model.belief_predictive(batch, h)
            out = select_action(bundle.rl, bundle.model.dynamics, phi, mu, sigma,
                                n_samples=16, mode=policy_mode, generator=gen)
        acts = out["action"].numpy()

        # transition + death
        next_alive = []
        for idx, i in enumerate(alive):
            s = float(sev[i].mean())
            a = int(acts[idx])
            matched_sq.append((u_map[a] - _need(s)) ** 2)
            g = _rng(config.seed, seed_offset + i, 2, h)
            mismatch = (u_map[a] - _need(s)) ** 2 - 0.05
            sev[i] = (config.severity_persistence * sev[i] + config.severity_drift
                      + config.mismatch_effect * mismatch
                      + config.severity_noise * g.normal(size=config.latent_severity_dim))
            if h < H - 1:
                g = _rng(config.seed, seed_offset + i, 9, h)
                p_death = _sigmoid(config.death_slope * float(sev[i].mean()) - config.death_threshold)
                if g.random() < p_death:
                    returns[i] = -(config.discount ** h)
                    continue
            if h == H - 1:
                returns[i] = config.discount ** h
            next_alive.append(i)
        alive = next_alive

    return float(returns.mean()), float(np.mean(matched_sq))


def main():
    variant = sys.argv[1] if len(sys.argv) > 1 else "full"
    stage2 = int(sys.argv[2]) if len(sys.argv) > 2 else 60
    beta = float(sys.argv[3]) if len(sys.argv) > 3 else 0.5
    sim_kw = json.loads(sys.argv[4]) if len(sys.argv) > 4 else {}
    train_seed = int(sys.argv[5]) if len(sys.argv) > 5 else 0

    sim = SimConfig(n_episodes=2500, mnar_steepness=4.0, seed=0, **sim_kw).validate()
    episodes = generate_cohort(sim)
    train_eps, test_eps = split_cohort(episodes, (0.8, 0.2), seed=0)
    overrides = {"mnar_off": {"mnar_features": False}, "doc_off": {"doc_factor": False}}.get(variant, {})
    exp = ExperimentConfig(
        model=ModelConfig(hidden_dim=32, latent_dim=8, psi_embed_dim=16, attn_dim=16, attn_heads=4,
                          decoder_hidden_dim=32, outcome_hidden_dim=16, dropout=0.0, **overrides),
        train=TrainConfig(stage1_epochs=24, stage2_epochs=stage2, stage3_epochs=0, batch_size=256, seed=train_seed),
        eval=EvalConfig(fqe_iterations=40, fqe_hidden_dims=(64, 64), fqe_steps_per_iteration=30,
                        n_bootstrap=500, seed=train_seed),
    ).validate()
    exp.rl.beta = beta
    t0 = time.time()
    result = run_training(train_eps, [], sim, exp)
    bundle = result.bundle

    # (a) advantage / weight structure on logged transitions
    batch = episodes_to_batch(test_eps, bundle.stats, sim)
    with torch.no_grad():
        states = bundle.model.encode_states(batch)
        q1, q2 = bundle.rl.q_values_all(states)
        qmin = torch.min(q1, q2)
        v = bundle.rl.value(states)
        adv_all = qmin - v.unsqueeze(-1)
        probs = bundle.rl.policy_probs(states)
    valid = batch["step_mask"] > 0.5
    adv_spread = (adv_all.max(-1).values - adv_all.min(-1).values)[valid]
    print(f"per-state adv spread: mean={float(adv_spread.mean()):.4f} p90={float(adv_spread.quantile(0.9)):.4f}")

    # (b) intensity matching: policy vs behavior (on true severity)
    u = torch.tensor(action_intensity(sim.action_count))
    pol_u = (probs * u).sum(-1)[valid].numpy()
    sev_flat = batch["true_severity"][valid].numpy()
    need = 1.0 / (1.0 + np.exp(-(1.2 * sev_flat - 0.2)))
    beh_u = np.array([
        (behavior_action_probs(sim, s) * action_intensity(sim.action_count)).sum() for s in sev_flat
    ])
    print(f"E|pol_u - need|={np.abs(pol_u - need).mean():.4f}  E|beh_u - need|={np.abs(beh_u - need).mean():.4f}")

    # (c) ground-truth rollout value
    gt_policy, gt_mismatch = simulate_policy(bundle, sim, 400, "sample")
    ret = np.array([(sim.discount ** np.arange(len(e.rewards)) * e.rewards).sum() for e in test_eps])
    print(f"ground-truth policy value={gt_policy:.4f} (behavior MC={ret.mean():.4f}); "
          f"policy E[(u-need)^2]={gt_mismatch:.4f}")

    report = evaluate_bundle(bundle, test_eps, seed=0)
    fqe = report.get("fqe")
    print(f"variant={variant} stage2={stage2} beta={beta}: fqe={fqe['value']:.4f} "
          f"ci=[{fqe['ci_lower']:.4f},{fqe['ci_upper']:.4f}] auroc={report.get('auroc')['value']:.4f} "
          f"({time.time()-t0:.0f}s)")


if __name__ == "__main__":
    main()
