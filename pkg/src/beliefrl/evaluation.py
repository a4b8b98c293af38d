"""End-to-end evaluation of a trained bundle on a cohort split."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .config import EvalConfig, config_hash
from .data import episodes_to_batch
from .model import ModelBundle
from .ope import (
    auroc,
    bootstrap_ci,
    fit_behavior_cloning,
    run_fqe,
    transitions_from_batch,
    wis,
)
from .iql import policy_entropy
from .simulator import Episode, behavior_action_probs
from .trainer import collapse_diagnostics


@dataclass
class EvalReport:
    """Structured metric records plus raw curves for reporting."""

    records: List[Dict] = field(default_factory=list)
    kl_per_dim: List[float] = field(default_factory=list)

    def add(self, name: str, value: float, ci=None, n: Optional[int] = None, **extra) -> None:
        rec = {"name": name, "value": float(value)}
        if ci is not None:
            rec["ci_lower"], rec["ci_upper"] = float(ci[0]), float(ci[1])
        if n is not None:
            rec["n"] = int(n)
        rec.update(extra)
        self.records.append(rec)

    def get(self, name: str) -> Dict:
        for rec in self.records:
            if rec["name"] == name:
                return rec
        raise KeyError(name)


def evaluate_bundle(
    bundle: ModelBundle,
    episodes: Sequence[Episode],
    eval_config: Optional[EvalConfig] = None,
    seed: Optional[int] = None,
) -> EvalReport:
    """FQE with bootstrap CI, WIS/ESS, behavior MC value, outcome AUROC,
    policy entropy, and posterior-collapse diagnostics on one split."""
    cfg = eval_config or bundle.experiment.eval
    seed = cfg.seed if seed is None else seed
    gamma = bundle.experiment.rl.gamma
    chash = config_hash(bundle.experiment)

    bundle.model.eval()
    batch = episodes_to_batch(episodes, bundle.stats, bundle.sim_config)
    with torch.no_grad():
        states = bundle.model.encode_states(batch)
        probs_all = bundle.rl.policy_probs(states)  # [B, H, A]

    report = EvalReport()
    dataset = transitions_from_batch(states, batch)

    def policy_fn(s: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return bundle.rl.policy_probs(s)

    fqe_res = run_fqe(dataset, policy_fn, cfg, gamma, seed=seed)
    init_vals = fqe_res.initial_values
    point, lo, hi = bootstrap_ci(
        len(init_vals), lambda idx: float(init_vals[idx].mean()), cfg.n_bootstrap, cfg.alpha, seed
    )
    report.add("fqe", point, ci=(lo, hi), n=len(init_vals), config_hash=chash, seed=seed)

    # behavior probabilities for WIS
    step_mask = batch["step_mask"].numpy() > 0.5
    actions = batch["actions"].numpy()
    pi_probs, beta_probs, rewards_seq = [], [], []
    if cfg.behavior_source == "fitted-bc":
        bc_fn = fit_behavior_cloning(dataset.states, dataset.actions, bundle.rl.action_count, seed=seed)
    for i, ep in enumerate(episodes):
        L = int(step_mask[i].sum())
        pi_probs.append(probs_all[i, :L].numpy()[np.arange(L), actions[i, :L]])
        if cfg.behavior_source == "simulator-truth":
            bp = np.array(
                [behavior_action_probs(bundle.sim_config, ep.true_severity[h])[actions[i, h]] for h in range(L)]
            )
        else:
            probs = bc_fn(states[i, :L].numpy())
            bp = probs[np.arange(L), actions[i, :L]]
        beta_probs.append(bp)
        rewards_seq.append(ep.rewards)
    wis_res = wis(pi_probs, beta_probs, rewards_seq, gamma)
    report.add("wis", wis_res.value, n=len(episodes), config_hash=chash, seed=seed)
    report.add("ess", wis_res.ess, n=len(episodes), config_hash=chash, seed=seed)

    returns = wis_res.returns
    point_b, lo_b, hi_b = bootstrap_ci(
        len(returns), lambda idx: float(returns[idx].mean()), cfg.n_bootstrap, cfg.alpha, seed + 1
    )
    report.add("behavior_value_mc", point_b, ci=(lo_b, hi_b), n=len(returns), config_hash=chash, seed=seed)

    # outcome AUROC over full-horizon survivors
    eligible = batch["outcome_mask"].numpy() > 0.5
    if eligible.sum() >= 2 and len(set(batch["outcome"].numpy()[eligible])) == 2:
        with torch.no_grad():
            scores = bundle.model.outcome.predict(states[:, -1]).numpy()[eligible]
        labels = batch["outcome"].numpy()[eligible].astype(int)
        report.add("auroc", auroc(scores, labels), n=int(eligible.sum()), config_hash=chash, seed=seed)

    with torch.no_grad():
        ent = policy_entropy(probs_all)
    mean_ent = float((ent * batch["step_mask"]).sum() / batch["step_mask"].sum())
    report.add("policy_entropy", mean_ent, config_hash=chash, seed=seed)

    diag = collapse_diagnostics(bundle, batch)
    report.add("mean_kl", diag["mean_kl"], config_hash=chash, seed=seed)
    report.add("active_dims", diag["active_dims"], config_hash=chash, seed=seed)
    report.add("mutual_info", diag["mutual_info"], config_hash=chash, seed=seed)
    report.kl_per_dim = diag["kl_per_dim"]
    return report
