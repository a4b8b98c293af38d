"""Full state model: encoder + fusion + belief dynamics + decoders + heads.

Also owns the checkpoint format: a single self-describing binary archive
with a JSON manifest and named float64 tensors, bit-exact on round trip.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from .config import ExperimentConfig, SimConfig, config_hash, experiment_config_from_dict, sim_config_from_dict, to_dict
from .dynamics import BeliefDynamics, Decoders, sample_latent
from .encoder import StructuredEncoder
from .fusion import TextFusion
from .outcome import OutcomeHead
from .serialize import FormatError, read_block, write_block
from .simulator import NormalizationStats

_CKPT_MAGIC = b"BRLCKPT1"


@dataclass
class Rollout:
    """Per-step representation quantities for one batch."""

    phi: torch.Tensor  # [B, H, d_h]
    states: torch.Tensor  # [B, H, d_h]
    z: torch.Tensor  # [B, H, d_z]
    prior_mu: torch.Tensor  # [B, H-1, d_z] for transitions h -> h+1
    prior_sigma: torch.Tensor
    post_mu: torch.Tensor  # [B, H-1, d_z]
    post_sigma: torch.Tensor
    eta: Optional[torch.Tensor]  # [B, H, d_h] doc-process embedding
    f_doc: Optional[torch.Tensor]
    gate: Optional[torch.Tensor]
    text_keys: Optional[torch.Tensor]  # post-substitution attention keys
    imputed: torch.Tensor  # [B, T, D] decayed-imputation inputs


class BeliefStateModel(nn.Module):
    def __init__(self, model_cfg, sub_steps_per_decision: int):
        super().__init__()
        self.cfg = model_cfg
        self.n_sub = sub_steps_per_decision
        self.encoder = StructuredEncoder(model_cfg)
        self.fusion = TextFusion(model_cfg) if model_cfg.text_channel else None
        self.dynamics = BeliefDynamics(model_cfg)
        self.decoders = Decoders(model_cfg, sub_steps_per_decision)
        self.outcome = OutcomeHead(model_cfg)

    def observation_embeddings(self, batch: Dict[str, torch.Tensor]):
        phi_bar, _, imputed = self.encoder(
            batch["values"], batch["mask"], batch["delta"], batch["psi"],
            batch["sub_valid"], self.n_sub,
        )
        if self.fusion is None:
            return phi_bar, None, None, None, None, imputed
        fused, eta, f_doc, gate = self.fusion(
            phi_bar, batch["text_embeds"], batch["text_mask"],
            batch["text_recency"], batch["doc_density"],
        )
        keys = self.fusion.attn.substitute_missing(batch["text_embeds"], batch["text_mask"])
        return fused, eta, f_doc, gate, keys, imputed

    def rollout(
        self,
        batch: Dict[str, torch.Tensor],
        sample: bool,
        generator: Optional[torch.Generator] = None,
    ) -> Rollout:
        """Filtered representation pass over the padded horizon.

        With sample=False every latent is pinned to its mean (z0 = 0) and
        the pass is deterministic; with sample=True latents are drawn by
        reparameterization.
        """
        phi, eta, f_doc, gate, keys, imputed = self.observation_embeddings(batch)
        B, H, _ = phi.shape
        d_z = self.cfg.latent_dim
        actions = batch["actions"]
        static = batch["static"]

        def noise(shape):
            if not sample:
                return phi.new_zeros(shape)
            return torch.randn(shape, generator=generator, dtype=phi.dtype)

        z = noise((B, d_z))  # z0 prior is standard normal
        zs = [z]
        states = [self.dynamics.combine_state(phi[:, 0], z)]
        prior_mu, prior_sigma, post_mu, post_sigma = [], [], [], []
        for h in range(H - 1):
            p_mu, p_sig = self.dynamics.prior_step(z, phi[:, h], actions[:, h])
            q_mu, q_sig = self.dynamics.posterior(
                phi[:, h + 1], static,
                actions=actions[:, h] if self.cfg.posterior_conditioning == "phi_x_a_z" else None,
                z_prev=z if self.cfg.posterior_conditioning == "phi_x_a_z" else None,
            )
            z = sample_latent(q_mu, q_sig, noise((B, d_z)))
            zs.append(z)
            states.append(self.dynamics.combine_state(phi[:, h + 1], z))
            prior_mu.append(p_mu)
            prior_sigma.append(p_sig)
            post_mu.append(q_mu)
            post_sigma.append(q_sig)

        return Rollout(
            phi=phi,
            states=torch.stack(states, dim=1),
            z=torch.stack(zs, dim=1),
            prior_mu=torch.stack(prior_mu, dim=1),
            prior_sigma=torch.stack(prior_sigma, dim=1),
            post_mu=torch.stack(post_mu, dim=1),
            post_sigma=torch.stack(post_sigma, dim=1),
            eta=eta,
            f_doc=f_doc,
            gate=gate,
            text_keys=keys,
            imputed=imputed,
        )

    @torch.no_grad()
    def encode_states(self, batch: Dict[str, torch.Tensor]) -> torch.Tensor:
        """Deterministic states (eps pinned to 0) for RL and evaluation."""
        return self.rollout(batch, sample=False).states

    @torch.no_grad()
    def belief_predictive(
        self, batch: Dict[str, torch.Tensor], step: int
    ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """One-step-ahead belief at `step`: filter with posterior means up
        to step-1, then push through the prior. Returns (phi_h, mu, sigma)."""
        phi = self.observation_embeddings(batch)[0]
        B = phi.shape[0]
        d_z = self.cfg.latent_dim
        z = phi.new_zeros(B, d_z)
        mu, sigma = phi.new_zeros(B, d_z), phi.new_ones(B, d_z)
        for h in range(step):
            mu, sigma = self.dynamics.prior_step(z, phi[:, h], batch["actions"][:, h])
            q_mu, _ = self.dynamics.posterior(
                phi[:, h + 1], batch["static"],
                actions=batch["actions"][:, h] if self.cfg.posterior_conditioning == "phi_x_a_z" else None,
                z_prev=z if self.cfg.posterior_conditioning == "phi_x_a_z" else None,
            )
            z = q_mu
        return phi[:, step], mu, sigma


class RLHeads(nn.Module):
    """Double Q, expectile value, softmax policy, and the Polyak target V."""

    def __init__(self, state_dim: int, action_count: int, hidden: int = 256):
        super().__init__()
        self.action_count = action_count

        def mlp(in_dim, out_dim):
            return nn.Sequential(
                nn.Linear(in_dim, hidden), nn.ReLU(),
                nn.Linear(hidden, hidden), nn.ReLU(),
                nn.Linear(hidden, out_dim),
            )

        self.q1 = mlp(state_dim + action_count, 1)
        self.q2 = mlp(state_dim + action_count, 1)
        self.v = mlp(state_dim, 1)
        self.v_target = mlp(state_dim, 1)
        self.policy = mlp(state_dim, action_count)
        self.double()
        self.v_target.load_state_dict(self.v.state_dict())
        for p in self.v_target.parameters():
            p.requires_grad_(False)

    def q_values(self, states: torch.Tensor, actions: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        onehot = torch.nn.functional.one_hot(actions, self.action_count).to(states.dtype)
        x = torch.cat([states, onehot], dim=-1)
        return self.q1(x).squeeze(-1), self.q2(x).squeeze(-1)

    def q_values_all(self, states: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        lead = states.shape[:-1]
        A = self.action_count
        eye = torch.eye(A, dtype=states.dtype)
        s = states.unsqueeze(-2).expand(*lead, A, states.shape[-1])
        oh = eye.expand(*lead, A, A)
        x = torch.cat([s, oh], dim=-1)
        return self.q1(x).squeeze(-1), self.q2(x).squeeze(-1)

    def value(self, states: torch.Tensor) -> torch.Tensor:
        return self.v(states).squeeze(-1)

    def target_value(self, states: torch.Tensor) -> torch.Tensor:
        return self.v_target(states).squeeze(-1)

    def policy_probs(self, states: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.policy(states), dim=-1)


@dataclass
class ModelBundle:
    """Everything needed to run and evaluate: model, heads, stats, configs."""

    model: BeliefStateModel
    rl: RLHeads
    stats: NormalizationStats
    sim_config: SimConfig
    experiment: ExperimentConfig

    @staticmethod
    def create(sim_config: SimConfig, experiment: ExperimentConfig, stats: NormalizationStats) -> "ModelBundle":
        mc = experiment.model
        model = BeliefStateModel(mc, sim_config.sub_steps_per_decision)
        rl = RLHeads(mc.hidden_dim, mc.action_count)
        return ModelBundle(model=model, rl=rl, stats=stats, sim_config=sim_config, experiment=experiment)


def _named_tensors(bundle: ModelBundle) -> Dict[str, np.ndarray]:
    out = {}
    for prefix, module in (("model", bundle.model), ("rl", bundle.rl)):
        for name, tensor in module.state_dict().items():
            out[f"{prefix}.{name}"] = tensor.detach().cpu().numpy().astype(np.float64)
    st = bundle.stats
    out["stats.value_mean"] = st.value_mean.astype(np.float64)
    out["stats.value_std"] = st.value_std.astype(np.float64)
    out["stats.doc"] = np.array([st.kappa_mean, st.kappa_std, st.recency_mean, st.recency_std])
    return out


def save_checkpoint(
    path: Union[str, Path],
    bundle: ModelBundle,
    stage: int = 0,
    epoch: int = 0,
    metrics: Optional[Dict[str, float]] = None,
) -> None:
    header = {
        "format_version": 1,
        "sim_config": to_dict(bundle.sim_config),
        "experiment": to_dict(bundle.experiment),
        "config_hash": config_hash(bundle.experiment),
        "stage": stage,
        "epoch": epoch,
        "metrics": metrics or {},
    }
    arrays = _named_tensors(bundle)
    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC)
    write_block(buf, header, arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: Union[str, Path]) -> Tuple[ModelBundle, Dict]:
    raw = Path(path).read_bytes()
    if raw[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise FormatError(f"not a checkpoint file: {path}")
    header, arrays = read_block(io.BytesIO(raw[len(_CKPT_MAGIC) :]))
    sim_config = sim_config_from_dict(header["sim_config"])
    experiment = experiment_config_from_dict(header["experiment"])
    doc = arrays["stats.doc"]
    stats = NormalizationStats(
        value_mean=arrays["stats.value_mean"],
        value_std=arrays["stats.value_std"],
        kappa_mean=float(doc[0]),
        kappa_std=float(doc[1]),
        recency_mean=float(doc[2]),
        recency_std=float(doc[3]),
    )
    bundle = ModelBundle.create(sim_config, experiment, stats)
    for prefix, module in (("model", bundle.model), ("rl", bundle.rl)):
        sd = {}
        for name, tensor in module.state_dict().items():
            key = f"{prefix}.{name}"
            if key not in arrays:
                raise FormatError(f"checkpoint missing tensor {key}")
            arr = arrays[key]
            if list(arr.shape) != list(tensor.shape):
                raise FormatError(f"shape mismatch for {key}: {arr.shape} vs {tuple(tensor.shape)}")
            sd[name] = torch.as_tensor(arr, dtype=tensor.dtype)
        module.load_state_dict(sd)
    return bundle, header
