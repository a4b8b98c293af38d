"""Three-stage training: representation pre-training, frozen-encoder RL,
and joint fine-tuning, with entropy monitoring/rollback and
posterior-collapse diagnostics."""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .config import EvalConfig, ExperimentConfig, SimConfig, TrainConfig
from .data import episodes_to_batch, iterate_minibatches, slice_batch
from .dynamics import kl_per_dim, reconstruction_loss
from .iql import polyak_update, rl_losses
from .model import ModelBundle, Rollout, save_checkpoint
from .ope import run_fqe, transitions_from_batch
from .outcome import outcome_loss
from .simulator import Episode, compute_normalization_stats


class TrainingDiverged(RuntimeError):
    """A loss went non-finite; carries the last good checkpoint reference."""

    def __init__(self, message: str, last_good: Optional[str] = None):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class CollapseDecision:
    status: str  # healthy | collapse
    rollback_epoch: Optional[int] = None
    new_lr_factor: Optional[float] = None
    new_beta_factor: Optional[float] = None


class EntropyMonitor:
    """Flags policy-entropy collapse: absolute floor or a relative drop
    within a trailing window; recovery rolls back to the last healthy
    checkpoint, halves the learning rate, and raises the AWBC temperature."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.history: List[Tuple[int, float]] = []  # (epoch, entropy)
        self.healthy_epochs: List[int] = []

    def observe(self, epoch: int, entropy: float) -> CollapseDecision:
        self.history.append((epoch, entropy))
        if entropy > self.cfg.entropy_healthy:
            self.healthy_epochs.append(epoch)
        if self._is_collapsed(entropy):
            rollback = self.healthy_epochs[-1] if self.healthy_epochs else None
            return CollapseDecision(
                status="collapse",
                rollback_epoch=rollback,
                new_lr_factor=self.cfg.recovery_lr_factor,
                new_beta_factor=self.cfg.recovery_beta_factor,
            )
        return CollapseDecision(status="healthy")

    def _is_collapsed(self, entropy: float) -> bool:
        if entropy < self.cfg.entropy_collapse_abs:
            return True
        window = [e for ep, e in self.history[-(self.cfg.entropy_collapse_window + 1) :]]
        if len(window) >= 2:
            peak = max(window[:-1])
            if peak > 0 and (peak - entropy) / peak > self.cfg.entropy_collapse_rel:
                return True
        return False


def parameter_checksum(module: torch.nn.Module) -> str:
    """SHA-256 over named parameters in canonical float64 little-endian bytes."""
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().astype("<f8").tobytes())
    return h.hexdigest()


class PatienceTracker:
    """Early stopping: fires exactly when the metric fails to improve for
    `patience` consecutive evaluations."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -float("inf")
        self.misses = 0

    def update(self, value: float) -> Tuple[bool, bool]:
        """Returns (improved, should_stop)."""
        if value > self.best:
            self.best = value
            self.misses = 0
            return True, False
        self.misses += 1
        return False, self.misses >= self.patience


def apply_recovery(optimizer: torch.optim.Optimizer, rl_cfg, decision: CollapseDecision) -> None:
    """Collapse recovery: scale every learning rate and the AWBC temperature."""
    for group in optimizer.param_groups:
        group["lr"] *= decision.new_lr_factor
    rl_cfg.beta *= decision.new_beta_factor


def collapse_diagnostics(bundle: ModelBundle, batch: Dict[str, torch.Tensor]) -> Dict[str, float]:
    """Appendix-style latent-usage report: mean KL per transition, active
    dimensions at 0.01 nats/dim, and a mutual-information proxy (mean KL
    between per-sample posteriors and the moment-matched aggregate)."""
    model = bundle.model
    was_training = model.training
    model.eval()
    with torch.no_grad():
        roll = model.rollout(batch, sample=False)
        trans_mask = batch["step_mask"][:, 1:]
        kl_pd = kl_per_dim(roll.post_mu, roll.post_sigma, roll.prior_mu, roll.prior_sigma)
        w = trans_mask.unsqueeze(-1)
        denom = torch.clamp(trans_mask.sum(), min=1.0)
        kl_dim_mean = (kl_pd * w).sum(dim=(0, 1)) / denom
        mean_kl = float(kl_dim_mean.sum())
        active = int((kl_dim_mean > 0.01).sum())

        flat_mu = roll.post_mu[trans_mask > 0.5]
        flat_sigma = roll.post_sigma[trans_mask > 0.5]
        n = min(1024, flat_mu.shape[0])
        mu_s, sig_s = flat_mu[:n], flat_sigma[:n]
        agg_mu = mu_s.mean(0)
        agg_var = (sig_s**2 + mu_s**2).mean(0) - agg_mu**2
        agg_sigma = torch.sqrt(torch.clamp(agg_var, min=1e-12))
        from .dynamics import kl_diag_gaussian

        mi = float(kl_diag_gaussian(mu_s, sig_s, agg_mu.expand_as(mu_s), agg_sigma.expand_as(sig_s)).mean())
    if was_training:
        model.train()
    return {"mean_kl": mean_kl, "active_dims": active, "mutual_info": mi, "kl_per_dim": kl_dim_mean.tolist()}


def representation_losses(
    bundle: ModelBundle,
    batch: Dict[str, torch.Tensor],
    cfg: TrainConfig,
    kl_weight: float,
    sample: bool,
    generator: Optional[torch.Generator] = None,
) -> Tuple[torch.Tensor, Dict[str, float], Rollout]:
    """Stage-1 composite: reconstruction + dynamics + KL(free bits) + outcome."""
    model = bundle.model
    roll = model.rollout(batch, sample=sample, generator=generator)
    B, H, _ = roll.phi.shape
    n_sub = model.n_sub
    D = model.cfg.n_structured

    observed = batch["mask"].view(B, H, n_sub, D)
    value_targets = torch.where(
        observed > 0, batch["values"].view(B, H, n_sub, D), roll.imputed.detach().view(B, H, n_sub, D)
    )
    text_targets = roll.text_keys.detach() if roll.text_keys is not None else None
    eta_targets = roll.eta.detach() if (roll.eta is not None and model.cfg.doc_factor) else None
    recon = model.decoders(roll.states)
    l_recon, parts = reconstruction_loss(
        recon,
        value_targets,
        observed,
        text_targets,
        eta_targets,
        batch["step_mask"],
        cfg.lambda_obs,
        cfg.lambda_mask,
        cfg.lambda_text,
        model.cfg.unobserved_target_weight,
    )

    trans_mask = batch["step_mask"][:, 1:]
    denom = torch.clamp(trans_mask.sum(), min=1.0)
    l_dyn = (((roll.z[:, 1:] - roll.prior_mu) ** 2).sum(-1) * trans_mask).sum() / denom

    kl_pd = kl_per_dim(roll.post_mu, roll.post_sigma, roll.prior_mu, roll.prior_sigma)
    kl_fb = torch.clamp(kl_pd, min=cfg.free_bits).sum(-1)
    l_kl = (kl_fb * trans_mask).sum() / denom
    raw_kl = (kl_pd.sum(-1) * trans_mask).sum() / denom

    terminal_states = roll.states[:, -1]
    l_out = outcome_loss(model.outcome, terminal_states, batch["outcome"], batch["outcome_mask"])

    total = l_recon + cfg.lambda_dyn * l_dyn + kl_weight * l_kl + cfg.lambda_out * l_out
    detail = {
        "recon": float(l_recon.detach()),
        "dyn": float(l_dyn.detach()),
        "kl": float(raw_kl.detach()),
        "kl_weight": kl_weight,
        "outcome": float(l_out.detach()),
        "total": float(total.detach()),
    }
    for k, v in parts.items():
        detail[f"recon_{k}"] = float(v.detach())
    return total, detail, roll


def _clip_gradients(params, max_norm: float) -> float:
    return float(torch.nn.utils.clip_grad_norm_(params, max_norm))


@dataclass
class TrainingResult:
    bundle: ModelBundle
    records: List[Dict]
    checkpoints: Dict[str, str] = field(default_factory=dict)


def _representation_params(bundle: ModelBundle):
    return list(bundle.model.parameters())


def _validation_fqe(bundle: ModelBundle, val_batch, eval_cfg: EvalConfig, gamma: float, seed: int) -> float:
    bundle.model.eval()
    with torch.no_grad():
        states = bundle.model.encode_states(val_batch)
    dataset = transitions_from_batch(states, val_batch)

    def probs_fn(s: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return bundle.rl.policy_probs(s)

    result = run_fqe(dataset, probs_fn, eval_cfg, gamma, seed=seed)
    return result.value


def run_training(
    train_episodes: Sequence[Episode],
    val_episodes: Sequence[Episode],
    sim_config: SimConfig,
    experiment: ExperimentConfig,
    out_dir: Optional[str] = None,
    log: Optional[callable] = None,
) -> TrainingResult:
    """Run the full three-stage procedure on a cohort split.

    Deterministic given the config seed and a fixed thread count. Emits one
    metrics record per epoch and checkpoints at stage boundaries plus the
    best validation-FQE epoch when `out_dir` is given.
    """
    cfg = experiment.train
    torch.manual_seed(cfg.seed)
    np_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed & 0xFFFFFFFFFFFFFFFF, 0xF0])))
    gen = torch.Generator().manual_seed(cfg.seed + 1)

    stats = compute_normalization_stats(train_episodes)
    bundle = ModelBundle.create(sim_config, experiment, stats)
    train_batch = episodes_to_batch(train_episodes, stats, sim_config)
    val_batch = episodes_to_batch(val_episodes, stats, sim_config) if val_episodes else None

    records: List[Dict] = []
    checkpoints: Dict[str, str] = {}
    beta = experiment.rl.beta
    rl_cfg = copy.deepcopy(experiment.rl)

    def emit(rec: Dict) -> None:
        records.append(rec)
        if log is not None:
            log(rec)

    def save_stage(tag: str, stage: int, epoch: int, metrics: Dict[str, float]) -> None:
        if out_dir is None:
            return
        from pathlib import Path

        path = str(Path(out_dir) / f"checkpoint_{tag}.bin")
        save_checkpoint(path, bundle, stage=stage, epoch=epoch, metrics=metrics)
        checkpoints[tag] = path

    def check_finite(value: float, where: str) -> None:
        if not math.isfinite(value):
            last = checkpoints.get("best_val") or checkpoints.get("stage1") or None
            raise TrainingDiverged(f"non-finite loss in {where}", last_good=last)

    # ---------------- Stage 1: representation pre-training ----------------
    bundle.model.train()
    opt1 = torch.optim.AdamW(_representation_params(bundle), lr=cfg.stage1_lr, weight_decay=cfg.weight_decay)
    n_train = len(train_episodes)
    steps_per_epoch = max(1, math.ceil(n_train / cfg.batch_size))
    total_steps = max(1, cfg.stage1_epochs * steps_per_epoch)
    anneal_steps = max(1, int(cfg.kl_anneal_fraction * total_steps))
    step = 0
    for epoch in range(cfg.stage1_epochs):
        agg: Dict[str, float] = {}
        for mb in iterate_minibatches(train_batch, cfg.batch_size, np_rng):
            kl_w = cfg.lambda_kl * min(1.0, step / anneal_steps)
            total, detail, _ = representation_losses(bundle, mb, cfg, kl_w, sample=True, generator=gen)
            check_finite(detail["total"], f"stage1 epoch {epoch}")
            opt1.zero_grad()
            total.backward()
            _clip_gradients(_representation_params(bundle), cfg.grad_clip)
            opt1.step()
            step += 1
            for k, v in detail.items():
                agg[k] = agg.get(k, 0.0) + v / steps_per_epoch
        diag = collapse_diagnostics(bundle, slice_batch(train_batch, torch.arange(min(256, n_train))))
        bundle.model.train()
        emit({"stage": 1, "epoch": epoch, **agg,
              "mean_kl": diag["mean_kl"], "active_dims": diag["active_dims"], "mutual_info": diag["mutual_info"]})
    save_stage("stage1", 1, cfg.stage1_epochs, {})

    # ---------------- Stage 2: frozen-encoder RL ----------------
    bundle.model.eval()
    for p in bundle.model.parameters():
        p.requires_grad_(False)
    encoder_checksum_before = parameter_checksum(bundle.model)

    with torch.no_grad():
        frozen_states = bundle.model.encode_states(train_batch)
    opt2 = torch.optim.AdamW(
        [p for p in bundle.rl.parameters() if p.requires_grad], lr=cfg.stage2_lr, weight_decay=cfg.weight_decay
    )
    monitor = EntropyMonitor(cfg)
    healthy_snapshot = None
    patience = PatienceTracker(cfg.patience)
    lr_scale = 1.0
    stop = False
    for epoch in range(cfg.stage2_epochs):
        if stop:
            break
        ent_sum, n_mb = 0.0, 0
        last_losses = {}
        for mb_idx in _index_minibatches(n_train, cfg.batch_size, np_rng):
            mb = slice_batch(train_batch, mb_idx)
            losses = rl_losses(bundle.rl, frozen_states[mb_idx], mb, rl_cfg,
                               semi_mdp=experiment.model.semi_mdp)
            total = losses["q1"] + losses["q2"] + losses["v"] + losses["policy"]
            check_finite(float(total.detach()), f"stage2 epoch {epoch}")
            opt2.zero_grad()
            total.backward()
            _clip_gradients([p for p in bundle.rl.parameters() if p.requires_grad], cfg.grad_clip)
            opt2.step()
            polyak_update(bundle.rl.v_target, bundle.rl.v, rl_cfg.tau_target)
            ent_sum += float(losses["entropy"])
            n_mb += 1
            last_losses = {k: float(v.detach()) for k, v in losses.items()}
        entropy = ent_sum / max(n_mb, 1)
        decision = monitor.observe(epoch, entropy)
        rec = {"stage": 2, "epoch": epoch, "entropy": entropy,
               "q1": last_losses.get("q1"), "v": last_losses.get("v"), "policy": last_losses.get("policy"),
               "beta": rl_cfg.beta, "lr_scale": lr_scale}
        if decision.status == "collapse" and healthy_snapshot is not None:
            bundle.rl.load_state_dict(healthy_snapshot["rl"])
            apply_recovery(opt2, rl_cfg, decision)
            lr_scale *= decision.new_lr_factor
            rec["collapse"] = {"rollback_epoch": healthy_snapshot["epoch"],
                               "lr_factor": decision.new_lr_factor,
                               "beta_factor": decision.new_beta_factor}
        elif entropy > cfg.entropy_healthy:
            healthy_snapshot = {"rl": copy.deepcopy(bundle.rl.state_dict()), "epoch": epoch}
        if val_batch is not None and (epoch + 1) % cfg.val_fqe_every == 0:
            val_fqe = _validation_fqe(bundle, val_batch, experiment.eval, rl_cfg.gamma, seed=cfg.seed + epoch)
            rec["val_fqe"] = val_fqe
            improved, should_stop = patience.update(val_fqe)
            if improved:
                save_stage("best_val", 2, epoch, {"val_fqe": val_fqe})
            elif should_stop:
                rec["early_stop"] = True
                stop = True
        emit(rec)
    encoder_checksum_after = parameter_checksum(bundle.model)
    if encoder_checksum_before != encoder_checksum_after:
        raise TrainingDiverged("encoder parameters changed during stage 2 (freeze contract)")
    save_stage("stage2", 2, cfg.stage2_epochs, {"encoder_checksum": encoder_checksum_after[:16]})

    # ---------------- Stage 3: joint fine-tuning ----------------
    for p in bundle.model.parameters():
        p.requires_grad_(True)
    bundle.model.train()
    opt3 = torch.optim.AdamW(
        [
            {"params": _representation_params(bundle), "lr": cfg.stage3_encoder_lr * lr_scale},
            {"params": [p for p in bundle.rl.parameters() if p.requires_grad], "lr": cfg.stage3_rl_lr * lr_scale},
        ],
        weight_decay=cfg.weight_decay,
    )
    patience = PatienceTracker(cfg.patience)
    stop = False
    for epoch in range(cfg.stage3_epochs):
        if stop:
            break
        ent_sum, n_mb = 0.0, 0
        agg = {}
        for mb in iterate_minibatches(train_batch, cfg.batch_size, np_rng):
            rep_total, detail, roll = representation_losses(
                bundle, mb, cfg, cfg.lambda_kl, sample=True, generator=gen
            )
            losses = rl_losses(bundle.rl, roll.states, mb, rl_cfg, semi_mdp=experiment.model.semi_mdp)
            total = rep_total + losses["q1"] + losses["q2"] + losses["v"] + losses["policy"]
            check_finite(float(total.detach()), f"stage3 epoch {epoch}")
            opt3.zero_grad()
            total.backward()
            all_params = _representation_params(bundle) + [p for p in bundle.rl.parameters() if p.requires_grad]
            _clip_gradients(all_params, cfg.grad_clip)
            opt3.step()
            polyak_update(bundle.rl.v_target, bundle.rl.v, rl_cfg.tau_target)
            ent_sum += float(losses["entropy"])
            n_mb += 1
            for k, v in detail.items():
                agg[k] = agg.get(k, 0.0) + v / steps_per_epoch
        entropy = ent_sum / max(n_mb, 1)
        decision = monitor.observe(cfg.stage2_epochs + epoch, entropy)
        rec = {"stage": 3, "epoch": epoch, "entropy": entropy, **agg, "beta": rl_cfg.beta}
        if decision.status == "collapse" and healthy_snapshot is not None:
            bundle.rl.load_state_dict(healthy_snapshot["rl"])
            apply_recovery(opt3, rl_cfg, decision)
            rec["collapse"] = {"rollback_epoch": healthy_snapshot["epoch"],
                               "lr_factor": decision.new_lr_factor,
                               "beta_factor": decision.new_beta_factor}
        elif entropy > cfg.entropy_healthy:
            healthy_snapshot = {"rl": copy.deepcopy(bundle.rl.state_dict()), "epoch": cfg.stage2_epochs + epoch}
        if val_batch is not None and (epoch + 1) % cfg.val_fqe_every == 0:
            val_fqe = _validation_fqe(bundle, val_batch, experiment.eval, rl_cfg.gamma, seed=cfg.seed + 7000 + epoch)
            bundle.model.train()
            rec["val_fqe"] = val_fqe
            improved, should_stop = patience.update(val_fqe)
            if improved:
                save_stage("best_val", 3, epoch, {"val_fqe": val_fqe})
            elif should_stop:
                rec["early_stop"] = True
                stop = True
        emit(rec)
    bundle.model.eval()
    save_stage("stage3", 3, cfg.stage3_epochs, {})
    return TrainingResult(bundle=bundle, records=records, checkpoints=checkpoints)


def _index_minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield torch.as_tensor(order[start : start + batch_size])
