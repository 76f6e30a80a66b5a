"""Proximal Policy Optimization for the estimator MDP.

Defaults mirror common PPO settings (clip 0.2, GAE lambda 0.95, 10 epochs,
minibatches of 64, Adam at 3e-4, grad-norm clip 0.5) with gamma = 0.75.
Episodes end by time limit only, so the last step of each episode bootstraps
from the value of the terminal observation unless ``bootstrap_time_limit`` is
switched off.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .burgers import Dataset
from .env import EnvConfig, VecEstimationEnv, env_rngs
from .nn import (
    PolicyParams,
    backward,
    forward,
    forward_cached,
    gaussian_entropy,
    gaussian_log_prob,
    init_policy,
    normalizer_update,
    RunningNormalizer,
)
from .rom import Rom

log = logging.getLogger(__name__)

__all__ = [
    "PpoConfig",
    "RolloutBuffer",
    "Adam",
    "TrainingError",
    "collect_rollouts",
    "compute_gae",
    "ppo_loss_and_grads",
    "ppo_update",
    "evaluate_policy",
    "train",
]


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.75
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    epochs_per_update: int = 10
    minibatch_size: int = 64
    learning_rate: float = 3e-4
    rollout_episodes: int = 10
    episode_length: int = 200
    total_timesteps: int = 1_000_000
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    max_grad_norm: float = 0.5
    eval_episodes: int = 20
    seed: int = 0
    log_std_init: float = 0.0
    adam_eps: float = 1e-5
    bootstrap_time_limit: bool = True
    normalize_reward: bool = True

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError("gae_lambda must be in [0, 1]")
        if not self.clip_eps > 0:
            raise ValueError("clip_eps must be positive")
        if self.minibatch_size < 1 or self.rollout_episodes < 1 or self.episode_length < 1:
            raise ValueError("sizes must be positive")
        if self.epochs_per_update < 0:
            raise ValueError("epochs_per_update must be non-negative")

    @property
    def rollout_steps(self) -> int:
        return self.rollout_episodes * self.episode_length

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RolloutBuffer:
    """Rollout data, time-major with shape (T, num_envs, ...)."""

    obs: np.ndarray  # normalized observations seen by the policy
    actions: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    log_probs: np.ndarray
    dones: np.ndarray
    terminal_values: np.ndarray  # V(terminal obs) on done steps, 0 elsewhere
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self):
        return self.rewards.size

    def flat(self):
        """Per-sample arrays with the time and env axes merged."""
        n = len(self)
        return (
            self.obs.reshape(n, -1),
            self.actions.reshape(n, -1),
            self.log_probs.reshape(n),
            self.advantages.reshape(n),
            self.returns.reshape(n),
        )


class ReturnScaler:
    """Divides rewards by a running std of the discounted return."""

    def __init__(self, num_envs: int, gamma: float, clip: float = 10.0, eps: float = 1e-8):
        self.gamma, self.clip, self.eps = gamma, clip, eps
        self.ret = np.zeros(num_envs)
        self.stats = RunningNormalizer(np.zeros(1), np.ones(1))

    def __call__(self, reward, done):
        self.ret = self.ret * self.gamma + reward
        self.stats = normalizer_update(self.stats, self.ret[:, None])
        if done:
            self.ret[:] = 0.0
        return np.clip(reward / np.sqrt(self.stats.var[0] + self.eps), -self.clip, self.clip)


def collect_rollouts(policy: PolicyParams, env: VecEstimationEnv, config: PpoConfig, rng,
                     update_normalizer: bool = True, reward_scaler: ReturnScaler | None = None) -> RolloutBuffer:
    """Run one full episode in every environment with stochastic actions.

    The running normalizer absorbs each batch of raw observations before they
    are normalized and fed to the policy.
    """
    T, E = config.episode_length, env.num_envs
    if env.config.episode_length != T:
        raise ValueError("environment and PPO config disagree on episode length")
    obs_buf = np.empty((T, E, env.obs_dim))
    act_buf = np.empty((T, E, policy.action_dim))
    rew_buf, val_buf, logp_buf = np.empty((T, E)), np.empty((T, E)), np.empty((T, E))
    done_buf = np.zeros((T, E), dtype=bool)
    term_buf = np.zeros((T, E))
    std = np.exp(policy.log_std)

    raw = env.reset()
    for t in range(T):
        if update_normalizer:
            policy.normalizer = normalizer_update(policy.normalizer, raw)
        obs = policy.normalizer(raw)
        mean = forward(policy.mean_net, obs)
        value = forward(policy.value_net, obs)[:, 0]
        action = mean + std * rng.standard_normal(mean.shape)
        raw, reward, done = env.step(action)
        if not (np.all(np.isfinite(reward)) and np.all(np.isfinite(raw))):
            raise TrainingError(f"non-finite reward/observation at step {t}: max|a|={np.abs(action).max():.3g}")
        if reward_scaler is not None:
            reward = reward_scaler(reward, done)
        obs_buf[t], act_buf[t], rew_buf[t], val_buf[t] = obs, action, reward, value
        logp_buf[t] = gaussian_log_prob(action, mean, policy.log_std)
        if done:
            done_buf[t] = True
            term_buf[t] = policy.value(raw)
    return RolloutBuffer(obs_buf, act_buf, rew_buf, val_buf, logp_buf, done_buf, term_buf)


def compute_gae(rewards, values, dones, gamma: float, lam: float, terminal_values=None):
    """Generalized advantage estimates along axis 0 (time).

    ``terminal_values`` (same shape as ``rewards``) adds ``gamma * V(terminal)``
    on done steps, i.e. treats episode ends as truncations.
    Returns ``(advantages, returns)``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    adv = np.zeros_like(rewards)
    next_adv = np.zeros_like(rewards[0])
    next_value = np.zeros_like(rewards[0])
    for t in reversed(range(rewards.shape[0])):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        if terminal_values is not None:
            delta = delta + gamma * np.asarray(terminal_values[t]) * dones[t]
        next_adv = delta + gamma * lam * live * next_adv
        adv[t] = next_adv
        next_value = values[t]
    return adv, adv + values


def ppo_loss_and_grads(policy: PolicyParams, obs, actions, old_log_probs, advantages, returns, config: PpoConfig):
    """Clipped-surrogate PPO loss and its exact gradient.

    ``obs`` are already normalized and ``advantages`` already standardized.
    Gradients come back as a list aligned with ``policy.arrays()``.
    """
    N = obs.shape[0]
    eps = config.clip_eps
    mean, cache_m = forward_cached(policy.mean_net, obs)
    v_out, cache_v = forward_cached(policy.value_net, obs)
    v = v_out[:, 0]
    log_std = policy.log_std
    inv_var = np.exp(-2.0 * log_std)

    diff = actions - mean
    logp = gaussian_log_prob(actions, mean, log_std)
    ratio = np.exp(logp - old_log_probs)
    surr1 = ratio * advantages
    surr2 = np.clip(ratio, 1.0 - eps, 1.0 + eps) * advantages
    policy_loss = -np.mean(np.minimum(surr1, surr2))
    value_loss = np.mean((returns - v) ** 2)
    entropy = gaussian_entropy(log_std)
    loss = policy_loss + config.value_coef * value_loss - config.entropy_coef * entropy

    # min picks surr1 unless the clipped branch is strictly smaller, which can
    # only happen with the ratio outside the clip interval (zero slope there)
    inside = (ratio > 1.0 - eps) & (ratio < 1.0 + eps)
    active = (surr1 <= surr2) | inside
    g_logp = -(advantages * active) * ratio / N
    g_mean = g_logp[:, None] * diff * inv_var
    g_log_std = g_logp @ (diff**2 * inv_var - 1.0) - config.entropy_coef
    g_v = config.value_coef * 2.0 * (v - returns) / N

    gm, _ = backward(policy.mean_net, cache_m, g_mean)
    gv, _ = backward(policy.value_net, cache_v, g_v[:, None])
    grads = gm.arrays() + gv.arrays() + [g_log_std]

    log_ratio = logp - old_log_probs
    info = {
        "loss": float(loss),
        "policy_loss": float(policy_loss),
        "value_loss": float(value_loss),
        "entropy": entropy,
        "approx_kl": float(np.mean((ratio - 1.0) - log_ratio)),
        "clip_fraction": float(np.mean(~inside)),
        "ratio_max_dev": float(np.max(np.abs(ratio - 1.0))),
    }
    return loss, info, grads


class Adam:
    """Adam with bias correction, updating arrays in place."""

    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-5):
        self.params = params
        self.lr, self.eps = lr, eps
        self.b1, self.b2 = betas
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _clip_grad_norm(grads, max_norm):
    total = float(np.sqrt(sum(np.sum(g * g) for g in grads)))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        grads = [g * scale for g in grads]
    return grads, total


def ppo_update(policy: PolicyParams, buffer: RolloutBuffer, config: PpoConfig, optimizer: Adam, rng):
    """Several epochs of minibatch Adam steps on the clipped objective.

    A trailing partial minibatch is kept.  Returns ``(policy, diagnostics)``;
    the policy arrays are updated in place.
    """
    if buffer.advantages is None:
        raise ValueError("compute advantages before updating")
    obs, actions, old_logp, adv, ret = buffer.flat()
    N = obs.shape[0]
    infos = []
    first_ratio_dev = None
    for epoch in range(config.epochs_per_update):
        order = rng.permutation(N)
        for start in range(0, N, config.minibatch_size):
            idx = order[start:start + config.minibatch_size]
            a = adv[idx]
            if a.size > 1:
                a = (a - a.mean()) / (a.std(ddof=1) + 1e-8)
            loss, info, grads = ppo_loss_and_grads(policy, obs[idx], actions[idx], old_logp[idx], a, ret[idx], config)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss in epoch {epoch}, minibatch starting at {start}")
            if first_ratio_dev is None:
                first_ratio_dev = info["ratio_max_dev"]
            grads, info["grad_norm"] = _clip_grad_norm(grads, config.max_grad_norm)
            optimizer.step(grads)
            infos.append(info)
    diag = {k: float(np.mean([i[k] for i in infos])) for k in infos[0]} if infos else {}
    diag["first_ratio_dev"] = first_ratio_dev if first_ratio_dev is not None else 0.0
    diag["gradient_steps"] = len(infos)
    return policy, diag


def evaluate_policy(policy: PolicyParams, env: VecEstimationEnv):
    """Deterministic episode returns (undiscounted) for every env in ``env``."""
    raw = env.reset()
    total = np.zeros(env.num_envs)
    while True:
        action = policy.mean_action(raw)
        raw, reward, done = env.step(action)
        total += reward
        if done:
            return total


@dataclass
class LearningCurve:
    timesteps: list = field(default_factory=list)
    mean_return: list = field(default_factory=list)
    std_return: list = field(default_factory=list)
    best_return: list = field(default_factory=list)

    def append(self, t, mean, std, best):
        self.timesteps.append(int(t))
        self.mean_return.append(float(mean))
        self.std_return.append(float(std))
        self.best_return.append(float(best))

    def rows(self):
        return list(zip(self.timesteps, self.mean_return, self.std_return, self.best_return))


def train(dataset: Dataset, rom: Rom, env_config: EnvConfig, ppo_config: PpoConfig,
          on_improve: Callable | None = None, on_update: Callable | None = None,
          initial_policy: PolicyParams | None = None):
    """Train the estimator policy and return ``(best_policy, learning_curve)``.

    After every update the policy is run deterministically on a fixed set of
    ``eval_episodes`` episodes (drawn from their own seed stream, separate from
    training) and kept if its mean return beats the best so far.
    ``on_improve(policy, info)`` is called on every new best.
    """
    cfg = ppo_config
    if env_config.episode_length != cfg.episode_length:
        raise ValueError("env_config.episode_length must equal ppo_config.episode_length")
    if cfg.total_timesteps < cfg.rollout_steps:
        raise ValueError(f"total_timesteps must cover one rollout ({cfg.rollout_steps} steps)")

    seq = np.random.SeedSequence(cfg.seed)
    init_rng, sample_rng, shuffle_rng = (np.random.default_rng(s) for s in seq.spawn(3))
    policy = initial_policy.copy() if initial_policy is not None else init_policy(
        rom.p + rom.r, rom.r, init_rng, cfg.log_std_init)
    optimizer = Adam(policy.arrays(), lr=cfg.learning_rate, eps=cfg.adam_eps)
    env = VecEstimationEnv(dataset, rom, env_config, env_rngs(cfg.seed, cfg.rollout_episodes, stream=0))

    scaler = ReturnScaler(cfg.rollout_episodes, cfg.gamma) if cfg.normalize_reward else None
    curve = LearningCurve()
    best_policy, best_return = None, -np.inf
    timesteps = 0
    t0 = time.time()
    while timesteps < cfg.total_timesteps:
        buf = collect_rollouts(policy, env, cfg, sample_rng, reward_scaler=scaler)
        buf.advantages, buf.returns = compute_gae(
            buf.rewards, buf.values, buf.dones, cfg.gamma, cfg.gae_lambda,
            buf.terminal_values if cfg.bootstrap_time_limit else None,
        )
        timesteps += len(buf)
        policy, diag = ppo_update(policy, buf, cfg, optimizer, shuffle_rng)

        eval_env = VecEstimationEnv(dataset, rom, env_config, env_rngs(cfg.seed, cfg.eval_episodes, stream=1))
        returns = evaluate_policy(policy, eval_env)
        mean_ret = float(returns.mean())
        if mean_ret > best_return:
            best_return, best_policy = mean_ret, policy.copy()
            if on_improve is not None:
                on_improve(best_policy, {"timesteps": timesteps, "eval_return": mean_ret})
        curve.append(timesteps, mean_ret, returns.std(), best_return)
        if on_update is not None:
            on_update(timesteps, mean_ret, diag)
        log.debug("t=%d eval=%.4g best=%.4g kl=%.3g (%.0fs)", timesteps, mean_ret, best_return,
                  diag.get("approx_kl", 0.0), time.time() - t0)
    return best_policy, curve
