"""Configuration dataclasses, YAML loading, and validation."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import yaml


class ConfigError(ValueError):
    """Raised when a configuration violates its invariants."""


@dataclass
class SimConfig:
    """Synthetic cohort generator settings.

    The generator realizes a finite-horizon POMDP with a scalar latent
    severity driving observation intensity, documentation behavior, the
    behavior policy, and death hazard.
    """

    n_episodes: int = 200
    horizon: int = 18
    sub_steps_per_decision: int = 4
    n_structured: int = 16
    n_text_modalities: int = 2
    text_embed_dim: int = 8
    latent_severity_dim: int = 1
    action_count: int = 9
    mnar_steepness: float = 4.0
    doc_mnar_steepness: float = 2.0
    behavior_temperature: float = 0.6
    discount: float = 0.99
    seed: int = 0

    # decision grid is the 4-hour clinical convention; sub-grid divides it
    decision_interval_hours: float = 4.0

    # summary windows: K decision steps for doc density, W hours for
    # windowed observation frequency
    kappa_window_steps: int = 6
    omega_window_hours: float = 6.0

    # ground-truth model constants (see simulator module)
    severity_persistence: float = 0.85
    severity_drift: float = 0.0
    mismatch_effect: float = 1.2
    severity_noise: float = 0.30
    value_noise: float = 2.5
    obs_base_logit: float = -1.0
    death_slope: float = 2.6
    death_threshold: float = 6.5
    outcome_slope: float = 6.5
    outcome_threshold: float = 2.2
    text_base_logits: Tuple[float, ...] = (-0.5, -1.5)
    note_rate_log: float = -0.7
    max_notes_per_step: int = 4

    def validate(self) -> "SimConfig":
        if self.horizon < 2:
            raise ConfigError(f"horizon must be >= 2, got {self.horizon}")
        if self.n_structured < 1:
            raise ConfigError(f"n_structured must be >= 1, got {self.n_structured}")
        if self.action_count < 2:
            raise ConfigError(f"action_count must be >= 2, got {self.action_count}")
        if self.sub_steps_per_decision < 1:
            raise ConfigError("sub_steps_per_decision must be >= 1")
        if self.n_episodes < 1:
            raise ConfigError("n_episodes must be >= 1")
        for name in ("mnar_steepness", "doc_mnar_steepness", "behavior_temperature"):
            v = getattr(self, name)
            if not _is_finite(v):
                raise ConfigError(f"{name} must be finite, got {v}")
        if not 0.0 <= self.discount < 1.0:
            raise ConfigError(f"discount must be in [0,1), got {self.discount}")
        if len(self.text_base_logits) != self.n_text_modalities:
            raise ConfigError("text_base_logits length must equal n_text_modalities")
        if self.kappa_window_steps < 1 or self.omega_window_hours < 1:
            raise ConfigError("summary windows must be >= 1")
        return self

    @property
    def sub_step_hours(self) -> float:
        return self.decision_interval_hours / self.sub_steps_per_decision

    @property
    def total_sub_steps(self) -> int:
        return self.horizon * self.sub_steps_per_decision


@dataclass
class ModelConfig:
    """Architecture dimensions and ablation switches for the state model."""

    n_structured: int = 16
    n_text_modalities: int = 2
    text_embed_dim: int = 8
    static_dim: int = 3
    action_count: int = 9

    hidden_dim: int = 128
    latent_dim: int = 32
    psi_embed_dim: int = 32
    attn_heads: int = 4
    attn_dim: int = 128
    action_embed_dim: int = 16
    outcome_hidden_dim: int = 64
    decoder_hidden_dim: int = 128
    dropout: float = 0.1
    sigma_floor: float = 1e-3
    unobserved_target_weight: float = 0.2

    # ablation switches: each toggles exactly one mechanism
    mnar_features: bool = True
    doc_factor: bool = True
    text_channel: bool = True
    action_conditioning: bool = True
    semi_mdp: bool = False

    psi_embedding: str = "mlp"  # {mlp, linear}
    posterior_conditioning: str = "phi_x"  # {phi_x, phi_x_a_z}

    def validate(self) -> "ModelConfig":
        if self.psi_embedding not in ("mlp", "linear"):
            raise ConfigError(f"psi_embedding must be mlp|linear, got {self.psi_embedding}")
        if self.posterior_conditioning not in ("phi_x", "phi_x_a_z"):
            raise ConfigError(
                f"posterior_conditioning must be phi_x|phi_x_a_z, got {self.posterior_conditioning}"
            )
        if self.attn_dim % self.attn_heads != 0:
            raise ConfigError("attn_dim must be divisible by attn_heads")
        for name in ("hidden_dim", "latent_dim", "psi_embed_dim", "action_embed_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.sigma_floor <= 0:
            raise ConfigError("sigma_floor must be > 0")
        return self


@dataclass
class RLConfig:
    """Expectile value learning and policy extraction settings."""

    expectile: float = 0.7
    beta: float = 3.0
    w_max: float = 20.0
    tau_target: float = 0.005
    gamma: float = 0.99

    def validate(self) -> "RLConfig":
        if not 0.5 < self.expectile < 1.0:
            raise ConfigError(f"expectile must be in (0.5, 1), got {self.expectile}")
        if self.beta <= 0:
            raise ConfigError("beta must be > 0")
        if self.w_max < 1:
            raise ConfigError("w_max must be >= 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must be in [0,1)")
        return self


@dataclass
class TrainConfig:
    """Three-stage schedule, loss weights, and collapse-handling thresholds."""

    stage1_epochs: int = 50
    stage2_epochs: int = 100
    stage3_epochs: int = 50
    stage1_lr: float = 1e-3
    stage2_lr: float = 3e-4
    stage3_encoder_lr: float = 1e-4
    stage3_rl_lr: float = 3e-4

    lambda_obs: float = 1.0
    lambda_mask: float = 0.5
    lambda_text: float = 0.3
    lambda_dyn: float = 1.0
    lambda_kl: float = 0.1
    lambda_out: float = 1.0

    weight_decay: float = 1e-5
    batch_size: int = 256
    grad_clip: float = 1.0
    patience: int = 10
    val_fqe_every: int = 5

    kl_anneal_fraction: float = 0.4
    free_bits: float = 0.05

    entropy_collapse_abs: float = 0.5
    entropy_collapse_rel: float = 0.5
    entropy_collapse_window: int = 10
    entropy_healthy: float = 1.0
    recovery_lr_factor: float = 0.5
    recovery_beta_factor: float = 1.5

    seed: int = 0

    def validate(self) -> "TrainConfig":
        for name in ("stage1_epochs", "stage2_epochs", "stage3_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 <= self.kl_anneal_fraction <= 1.0:
            raise ConfigError("kl_anneal_fraction must be in [0,1]")
        return self


@dataclass
class EvalConfig:
    """Off-policy evaluation settings."""

    fqe_iterations: int = 50
    fqe_function_class: str = "mlp"  # {mlp, linear, tabular}
    fqe_hidden_dims: Tuple[int, ...] = (256, 256)
    fqe_lr: float = 1e-3
    fqe_steps_per_iteration: int = 20
    fqe_target_clip: float = 0.0  # 0 disables; returns here are bounded by 1
    fqe_ridge: float = 1e-4
    fqe_random_features: int = 0  # fixed ReLU expansion for the linear class
    n_bootstrap: int = 1000
    alpha: float = 0.05
    behavior_source: str = "simulator-truth"  # {simulator-truth, fitted-bc}
    latent_samples: int = 1
    seed: int = 0

    def validate(self) -> "EvalConfig":
        if self.fqe_function_class not in ("mlp", "linear", "tabular"):
            raise ConfigError("fqe_function_class must be mlp|linear|tabular")
        if self.behavior_source not in ("simulator-truth", "fitted-bc"):
            raise ConfigError("behavior_source must be simulator-truth|fitted-bc")
        if self.n_bootstrap < 100:
            raise ConfigError("n_bootstrap must be >= 100 for CI output")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must be in (0,1)")
        return self


@dataclass
class ExperimentConfig:
    """Top-level config tree used by the train/evaluate/ablate commands."""

    model: ModelConfig = field(default_factory=ModelConfig)
    rl: RLConfig = field(default_factory=RLConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "ExperimentConfig":
        self.model.validate()
        self.rl.validate()
        self.train.validate()
        self.eval.validate()
        return self


_SECTION_TYPES = {
    "model": ModelConfig,
    "rl": RLConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


def _is_finite(x: float) -> bool:
    return x == x and abs(x) != float("inf")


def _build_dataclass(cls, tree: Dict[str, Any], path: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(tree) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {path or cls.__name__}")
    kwargs = {}
    for name, value in tree.items():
        f = known[name]
        if dataclasses.is_dataclass(f.type) or f.type in _SECTION_TYPES.values():
            raise ConfigError(f"nested section {name} must be a mapping")
        if isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad value in {path or cls.__name__}: {exc}") from exc


def sim_config_from_dict(tree: Dict[str, Any]) -> SimConfig:
    if not isinstance(tree, dict):
        raise ConfigError("sim config must be a mapping")
    return _build_dataclass(SimConfig, tree, "sim").validate()


def experiment_config_from_dict(tree: Dict[str, Any]) -> ExperimentConfig:
    if not isinstance(tree, dict):
        raise ConfigError("experiment config must be a mapping")
    unknown = set(tree) - set(_SECTION_TYPES)
    if unknown:
        raise ConfigError(f"unknown section(s) {sorted(unknown)}; expected {sorted(_SECTION_TYPES)}")
    sections = {}
    for name, cls in _SECTION_TYPES.items():
        sub = tree.get(name, {})
        if not isinstance(sub, dict):
            raise ConfigError(f"section {name} must be a mapping")
        sections[name] = _build_dataclass(cls, sub, name)
    return ExperimentConfig(**sections).validate()


def load_yaml(path: Union[str, Path]) -> Dict[str, Any]:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    with open(p, "r", encoding="utf-8") as fh:
        tree = yaml.safe_load(fh)
    if tree is None:
        tree = {}
    if not isinstance(tree, dict):
        raise ConfigError(f"config root must be a mapping: {p}")
    return tree


def load_sim_config(path: Union[str, Path]) -> SimConfig:
    return sim_config_from_dict(load_yaml(path))


def load_experiment_config(path: Union[str, Path]) -> ExperimentConfig:
    return experiment_config_from_dict(load_yaml(path))


def to_dict(cfg) -> Dict[str, Any]:
    """Dataclass tree -> plain dict (tuples become lists for YAML/JSON)."""
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def config_hash(cfg) -> str:
    """Stable short hash of a config tree, used in manifests."""
    payload = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]
