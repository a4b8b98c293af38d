"""Off-policy evaluation: fitted Q-evaluation, weighted importance
sampling with effective sample size, episode-level bootstrap confidence
intervals, and AUROC."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
from scipy.optimize import minimize
from scipy.stats import rankdata

from .config import EvalConfig


class FQEDivergence(RuntimeError):
    """Fitted Q iteration left the feasible value range."""


class SupportViolation(ValueError):
    """Behavior policy assigns zero probability to a logged action."""


@dataclass
class TransitionDataset:
    """Flat (s, a, r, s', d) rows plus initial-state row indices.

    `states` is [N, d] float for function approximation or [N] int for the
    tabular class; `initial_rows` marks the first decision step of each
    episode; `episode_ids` groups rows for episode-level bootstrap.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    episode_ids: np.ndarray
    initial_rows: np.ndarray


def transitions_from_batch(states: torch.Tensor, batch: Dict[str, torch.Tensor]) -> TransitionDataset:
    """Flatten a padded batch into valid transitions."""
    s = states.detach().cpu().numpy()
    valid = batch["step_mask"].cpu().numpy() > 0.5
    B, H = valid.shape
    nxt = np.zeros_like(s)
    nxt[:, :-1] = s[:, 1:]
    rows_s, rows_a, rows_r, rows_n, rows_d, rows_e, init = [], [], [], [], [], [], []
    actions = batch["actions"].cpu().numpy()
    rewards = batch["rewards"].cpu().numpy()
    dones = batch["dones"].cpu().numpy()
    eids = batch["episode_ids"].cpu().numpy()
    k = 0
    for i in range(B):
        for h in range(H):
            if not valid[i, h]:
                break
            rows_s.append(s[i, h])
            rows_a.append(actions[i, h])
            rows_r.append(rewards[i, h])
            rows_n.append(nxt[i, h])
            rows_d.append(dones[i, h])
            rows_e.append(eids[i])
            if h == 0:
                init.append(k)
            k += 1
    return TransitionDataset(
        states=np.asarray(rows_s),
        actions=np.asarray(rows_a, dtype=np.int64),
        rewards=np.asarray(rows_r),
        next_states=np.asarray(rows_n),
        dones=np.asarray(rows_d),
        episode_ids=np.asarray(rows_e, dtype=np.int64),
        initial_rows=np.asarray(init, dtype=np.int64),
    )


@dataclass
class FQEResult:
    value: float
    initial_values: np.ndarray  # per-episode E_{a~pi} Q(s0, a)
    episode_ids: np.ndarray
    iterations: int


def _check_divergence(q_max: float, gamma: float, r_max: float) -> None:
    bound = r_max / max(1.0 - gamma, 1e-9) + 10.0
    if not np.isfinite(q_max) or q_max > bound:
        raise FQEDivergence(f"|Q| reached {q_max:.3g}, beyond feasible bound {bound:.3g}")


def fqe_tabular(
    dataset: TransitionDataset,
    policy_probs: np.ndarray,  # [n_states, n_actions]
    gamma: float,
    iterations: int = 200,
) -> FQEResult:
    """Fitted Q-evaluation with a tabular function class.

    Each iteration fully solves the regression: Q[s, a] becomes the mean
    bootstrap target over the dataset rows that visit (s, a).
    """
    n_states, n_actions = policy_probs.shape
    s = dataset.states.astype(np.int64)
    a = dataset.actions
    q = np.zeros((n_states, n_actions))
    r_max = float(np.abs(dataset.rewards).max()) if len(dataset.rewards) else 1.0
    flat = s * n_actions + a
    counts = np.bincount(flat, minlength=n_states * n_actions).astype(np.float64)
    for it in range(iterations):
        v_next = (policy_probs[dataset.next_states.astype(np.int64)] * q[dataset.next_states.astype(np.int64)]).sum(-1)
        targets = dataset.rewards + gamma * (1.0 - dataset.dones) * v_next
        sums = np.bincount(flat, weights=targets, minlength=n_states * n_actions)
        q_new = np.where(counts > 0, sums / np.maximum(counts, 1.0), 0.0).reshape(n_states, n_actions)
        _check_divergence(float(np.abs(q_new).max()), gamma, r_max)
        q = q_new
    s0 = s[dataset.initial_rows]
    init_vals = (policy_probs[s0] * q[s0]).sum(-1)
    return FQEResult(
        value=float(init_vals.mean()),
        initial_values=init_vals,
        episode_ids=dataset.episode_ids[dataset.initial_rows],
        iterations=iterations,
    )


class _QNet(nn.Module):
    def __init__(self, state_dim: int, n_actions: int, hidden: Sequence[int]):
        super().__init__()
        dims = [state_dim + n_actions, *hidden, 1]
        layers = []
        for i in range(len(dims) - 1):
            layers.append(nn.Linear(dims[i], dims[i + 1]))
            if i < len(dims) - 2:
                layers.append(nn.ReLU())
        self.net = nn.Sequential(*layers)
        self.n_actions = n_actions
        self.double()

    def forward(self, states: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
        onehot = torch.nn.functional.one_hot(actions, self.n_actions).to(states.dtype)
        return self.net(torch.cat([states, onehot], dim=-1)).squeeze(-1)

    def all_actions(self, states: torch.Tensor) -> torch.Tensor:
        n = states.shape[0]
        a = self.n_actions
        s = states.unsqueeze(1).expand(n, a, states.shape[-1])
        oh = torch.eye(a, dtype=states.dtype).unsqueeze(0).expand(n, a, a)
        return self.net(torch.cat([s, oh], dim=-1)).squeeze(-1)


def fqe_mlp(
    dataset: TransitionDataset,
    policy_probs_fn: Callable[[torch.Tensor], torch.Tensor],
    config: EvalConfig,
    gamma: float,
    seed: int = 0,
) -> FQEResult:
    """Fitted Q-evaluation with its own independent MLP critic.

    Each fitted iteration freezes the bootstrap targets from the previous
    iterate and runs a fixed number of Adam steps on the regression.
    Optional target clipping enforces known value bounds.
    """
    gen = torch.Generator().manual_seed(seed)
    states = torch.as_tensor(dataset.states, dtype=torch.float64)
    actions = torch.as_tensor(dataset.actions)
    rewards = torch.as_tensor(dataset.rewards, dtype=torch.float64)
    next_states = torch.as_tensor(dataset.next_states, dtype=torch.float64)
    dones = torch.as_tensor(dataset.dones, dtype=torch.float64)
    n_actions = int(policy_probs_fn(states[:1]).shape[-1])
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = _QNet(states.shape[-1], n_actions, config.fqe_hidden_dims)
    opt = torch.optim.Adam(net.parameters(), lr=config.fqe_lr)
    r_max = float(rewards.abs().max().item()) if len(rewards) else 1.0
    n = len(rewards)
    batch = min(1024, n)
    with torch.no_grad():
        pi_next = policy_probs_fn(next_states)
    for it in range(config.fqe_iterations):
        with torch.no_grad():
            q_next = net.all_actions(next_states)
            targets = rewards + gamma * (1.0 - dones) * (pi_next * q_next).sum(-1)
            if config.fqe_target_clip > 0:
                targets = targets.clamp(-config.fqe_target_clip, config.fqe_target_clip)
            _check_divergence(float(q_next.abs().max().item()), gamma, r_max)
        for _ in range(config.fqe_steps_per_iteration):
            idx = torch.randint(0, n, (batch,), generator=gen)
            loss = ((net(states[idx], actions[idx]) - targets[idx]) ** 2).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
    with torch.no_grad():
        s0 = states[torch.as_tensor(dataset.initial_rows)]
        q0 = net.all_actions(s0)
        init_vals = (policy_probs_fn(s0) * q0).sum(-1).cpu().numpy()
    return FQEResult(
        value=float(init_vals.mean()),
        initial_values=init_vals,
        episode_ids=dataset.episode_ids[dataset.initial_rows],
        iterations=config.fqe_iterations,
    )


def run_fqe(
    dataset: TransitionDataset,
    policy_probs_fn: Callable[[torch.Tensor], torch.Tensor],
    config: EvalConfig,
    gamma: float,
    seed: int = 0,
) -> FQEResult:
    """Dispatch on the configured function class (mlp or linear)."""
    if config.fqe_function_class == "linear":
        return fqe_linear(dataset, policy_probs_fn, config, gamma, seed)
    return fqe_mlp(dataset, policy_probs_fn, config, gamma, seed)


def _feature_map(states: np.ndarray, config: EvalConfig, seed: int):
    """Identity-plus-bias features, optionally expanded with a fixed random
    ReLU basis. The basis depends only on (dimension, seed), never on the
    data, so the fitted iteration keeps a unique ridge fixed point."""
    n, d = states.shape
    base = [states, np.ones((n, 1))]
    if config.fqe_random_features > 0:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, 0xFE])))
        W = rng.standard_normal((d, config.fqe_random_features)) / np.sqrt(d)
        b = rng.uniform(-1.0, 1.0, size=config.fqe_random_features)
        base.append(np.maximum(states @ W + b, 0.0))
    return np.concatenate(base, axis=1)


def fqe_linear(
    dataset: TransitionDataset,
    policy_probs_fn: Callable[[torch.Tensor], torch.Tensor],
    config: EvalConfig,
    gamma: float,
    seed: int = 0,
) -> FQEResult:
    """Fitted Q-evaluation with a per-action ridge-regression function class
    over fixed (optionally random-ReLU-expanded) state features.

    Every iteration solves the regression exactly, so given the feature
    basis the procedure is deterministic with a unique fixed point; there
    is no optimizer-seed lottery to propagate through the bootstrap.
    """
    states = np.asarray(dataset.states, dtype=np.float64)
    next_states = np.asarray(dataset.next_states, dtype=np.float64)
    with torch.no_grad():
        pi_next = policy_probs_fn(torch.as_tensor(next_states)).cpu().numpy()
        pi_init = policy_probs_fn(torch.as_tensor(states[dataset.initial_rows])).cpu().numpy()
    n_actions = pi_next.shape[-1]
    n = states.shape[0]
    X = _feature_map(states, config, seed)
    Xn = _feature_map(next_states, config, seed)
    d_feat = X.shape[1]
    w = np.zeros((n_actions, d_feat))
    r_max = float(np.abs(dataset.rewards).max()) if n else 1.0
    ridge = config.fqe_ridge * np.eye(d_feat)
    solves = []
    for a in range(n_actions):
        rows = dataset.actions == a
        Xa = X[rows]
        solves.append((rows, np.linalg.inv(Xa.T @ Xa + max(len(Xa), 1) * ridge) @ Xa.T if len(Xa) else None))
    for _ in range(config.fqe_iterations):
        v_next = (pi_next * (Xn @ w.T)).sum(-1)
        targets = dataset.rewards + gamma * (1.0 - dataset.dones) * v_next
        if config.fqe_target_clip > 0:
            targets = np.clip(targets, -config.fqe_target_clip, config.fqe_target_clip)
        _check_divergence(float(np.abs(Xn @ w.T).max()) if n else 0.0, gamma, r_max)
        for a, (rows, solver) in enumerate(solves):
            if solver is not None:
                w[a] = solver @ targets[rows]
    q0 = X[dataset.initial_rows] @ w.T
    init_vals = (pi_init * q0).sum(-1)
    return FQEResult(
        value=float(init_vals.mean()),
        initial_values=init_vals,
        episode_ids=dataset.episode_ids[dataset.initial_rows],
        iterations=config.fqe_iterations,
    )


@dataclass
class WISResult:
    value: float
    weights: np.ndarray  # per-episode normalized ratio products
    ess: float
    returns: np.ndarray


def wis(
    pi_probs: Sequence[np.ndarray],  # per episode: [L] eval-policy prob of logged action
    beta_probs: Sequence[np.ndarray],  # per episode: [L] behavior prob of logged action
    rewards: Sequence[np.ndarray],  # per episode: [L]
    gamma: float,
) -> WISResult:
    """Self-normalized importance sampling over whole episodes."""
    ws, gs = [], []
    for i, (p, b, r) in enumerate(zip(pi_probs, beta_probs, rewards)):
        p = np.asarray(p, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if np.any(b <= 0.0):
            raise SupportViolation(f"episode {i}: behavior probability 0 on a logged action")
        ws.append(float(np.prod(p / b)))
        steps = np.arange(len(r))
        gs.append(float((gamma**steps * np.asarray(r)).sum()))
    w = np.asarray(ws)
    g = np.asarray(gs)
    denom = w.sum()
    if denom <= 0:
        raise ValueError("all importance weights are zero")
    value = float((w * g).sum() / denom)
    ess = float(denom**2 / (w**2).sum())
    return WISResult(value=value, weights=w, ess=ess, returns=g)


def bootstrap_ci(
    n_episodes: int,
    estimator: Callable[[np.ndarray], float],
    n_bootstrap: int = 1000,
    alpha: float = 0.05,
    seed: int = 0,
) -> Tuple[float, float, float]:
    """Percentile CI from episode-level resamples, deterministic in seed.

    The estimator maps an index array (with repetitions) to a scalar; the
    point estimate uses the identity resample.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, 0xB5])))
    point = float(estimator(np.arange(n_episodes)))
    stats = np.empty(n_bootstrap)
    for b in range(n_bootstrap):
        idx = rng.integers(0, n_episodes, size=n_episodes)
        stats[b] = estimator(idx)
    lo, hi = np.quantile(stats, [alpha / 2.0, 1.0 - alpha / 2.0])
    return point, float(lo), float(hi)


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-statistic AUROC with half credit for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n1 = int((labels == 1).sum())
    n0 = int((labels == 0).sum())
    if n1 == 0 or n0 == 0:
        raise ValueError("need both classes for AUROC")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def fit_logistic(features: np.ndarray, labels: np.ndarray, l2: float = 1e-3) -> Tuple[np.ndarray, float]:
    """L2-regularized logistic regression via L-BFGS; returns (weights, bias)."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    n, d = X.shape

    def loss_grad(wb):
        w, b = wb[:d], wb[d]
        z = X @ w + b
        p = 1.0 / (1.0 + np.exp(-z))
        eps = 1e-12
        nll = -(y * np.log(p + eps) + (1 - y) * np.log(1 - p + eps)).mean() + 0.5 * l2 * (w @ w)
        g_z = (p - y) / n
        return nll, np.concatenate([X.T @ g_z + l2 * w, [g_z.sum()]])

    res = minimize(loss_grad, np.zeros(d + 1), jac=True, method="L-BFGS-B")
    return res.x[:d], float(res.x[d])


def predict_logistic(features: np.ndarray, weights: np.ndarray, bias: float) -> np.ndarray:
    z = np.asarray(features) @ weights + bias
    return 1.0 / (1.0 + np.exp(-z))


def dp_policy_evaluation(
    transition: np.ndarray,  # [S, A, S]
    reward: np.ndarray,  # [S, A]
    policy: np.ndarray,  # [S, A]
    gamma: float,
) -> np.ndarray:
    """Exact policy evaluation by solving (I - gamma * P_pi) v = r_pi."""
    S = transition.shape[0]
    p_pi = np.einsum("sa,sat->st", policy, transition)
    r_pi = (policy * reward).sum(-1)
    return np.linalg.solve(np.eye(S) - gamma * p_pi, r_pi)


def fit_behavior_cloning(
    states: np.ndarray,
    actions: np.ndarray,
    n_actions: int,
    epochs: int = 200,
    lr: float = 1e-2,
    seed: int = 0,
) -> Callable[[np.ndarray], np.ndarray]:
    """Softmax behavioral cloning fallback for the behavior policy."""
    gen = torch.Generator().manual_seed(seed)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = nn.Sequential(
            nn.Linear(states.shape[-1], 64), nn.ReLU(), nn.Linear(64, n_actions)
        ).double()
    s = torch.as_tensor(states, dtype=torch.float64)
    a = torch.as_tensor(actions)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    ce = nn.CrossEntropyLoss()
    n = len(a)
    batch = min(1024, n)
    for _ in range(epochs):
        idx = torch.randint(0, n, (batch,), generator=gen)
        loss = ce(net(s[idx]), a[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()

    def probs(x: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            return torch.softmax(net(torch.as_tensor(x, dtype=torch.float64)), dim=-1).numpy()

    return probs
