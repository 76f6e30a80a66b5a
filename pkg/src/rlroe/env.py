"""Stationary augmented-state MDP for training the estimator policy.

State ``s_k = (x_hat_{k-1}, z_k, mu)``; the agent sees ``o_k = (y_k, x_hat_{k-1})``
with ``y_k = C z_k + noise``.  Reference snapshots are replayed from the stored
trajectories, so the PDE is never re-solved during training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .burgers import Dataset, Trajectory
from .rom import Rom

__all__ = ["EnvConfig", "AugmentedState", "reward_fn", "reset", "step", "VecEstimationEnv", "env_rngs"]


@dataclass(frozen=True)
class EnvConfig:
    episode_length: int = 200
    lambda_reg: float = 0.0
    initial_estimate_std: float = 1.0
    observation_noise_std: float = 0.0

    def __post_init__(self):
        if self.episode_length < 1:
            raise ValueError("episode_length must be >= 1")
        if self.lambda_reg < 0 or self.initial_estimate_std < 0 or self.observation_noise_std < 0:
            raise ValueError("lambda_reg and the standard deviations must be non-negative")

    def check(self, dataset: Dataset):
        if self.episode_length > dataset.num_snapshots - 1:
            raise ValueError(
                f"episode_length={self.episode_length} needs at least {self.episode_length + 1} snapshots, "
                f"dataset has {dataset.num_snapshots}"
            )


@dataclass(frozen=True)
class AugmentedState:
    x_hat_prev: np.ndarray
    z: np.ndarray
    mu: float
    k: int
    traj: Trajectory


def env_rngs(seed: int, count: int, stream: int = 0) -> list[np.random.Generator]:
    """Independent per-environment generators keyed by (seed, stream, index)."""
    return [np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream, i))) for i in range(count)]


def reward_fn(z, x_hat, action, rom: Rom, lambda_reg: float):
    """-||z - U x_hat||^2 - lambda ||a||^2 (batched over a leading axis)."""
    err = np.asarray(z) - np.asarray(x_hat) @ rom.U.T
    r = -np.sum(err * err, axis=-1)
    if lambda_reg:
        r = r - lambda_reg * np.sum(np.asarray(action) ** 2, axis=-1)
    return r


def _measure(z, rom: Rom, config: EnvConfig, rng):
    y = np.asarray(z)[..., list(rom.sensor_indices)]
    if config.observation_noise_std > 0:
        y = y + config.observation_noise_std * rng.standard_normal(y.shape)
    return y


def _snapshot(traj: Trajectory, k: int):
    # the terminal observation past the stored window reuses the last snapshot
    return traj.states[min(k, traj.num_snapshots - 1)]


def reset(dataset: Dataset, rom: Rom, config: EnvConfig, rng):
    """Start an episode: draw mu uniformly from the dataset and x_hat_0 ~ N(0, std^2 I)."""
    config.check(dataset)
    traj = dataset.trajectories[int(rng.integers(len(dataset)))]
    x0 = config.initial_estimate_std * rng.standard_normal(rom.r)
    z1 = traj.states[1]
    state = AugmentedState(x0, z1, traj.mu, 1, traj)
    obs = np.concatenate([_measure(z1, rom, config, rng), x0])
    return state, obs


def step(state: AugmentedState, action, rom: Rom, config: EnvConfig, rng):
    """Advance one step; returns ``(next_state, observation, reward, done)``.

    On the final step the returned observation is built from the next stored
    snapshot (or the last one if the window is exhausted) and is only meant for
    value bootstrapping.
    """
    if state.k > config.episode_length:
        raise RuntimeError("episode is finished; call reset()")
    action = np.asarray(action, dtype=np.float64)
    x_hat = state.x_hat_prev @ rom.A_r.T + action
    reward = float(reward_fn(state.z, x_hat, action, rom, config.lambda_reg))
    k = state.k + 1
    done = state.k == config.episode_length
    z_next = _snapshot(state.traj, k)
    obs = np.concatenate([_measure(z_next, rom, config, rng), x_hat])
    return AugmentedState(x_hat, z_next, state.mu, k, state.traj), obs, reward, done


class VecEstimationEnv:
    """Several episodes stepped in lock-step, one generator per environment.

    All episodes have the same length, so they start and finish together.
    """

    def __init__(self, dataset: Dataset, rom: Rom, config: EnvConfig, rngs):
        config.check(dataset)
        self.dataset, self.rom, self.config = dataset, rom, config
        self.rngs = list(rngs)
        self.num_envs = len(self.rngs)
        self._data = np.stack([t.states for t in dataset.trajectories])
        self._sensors = list(rom.sensor_indices)
        self.k = None

    @property
    def obs_dim(self) -> int:
        return self.rom.p + self.rom.r

    def _observe(self, z, x_hat):
        y = z[:, self._sensors]
        sigma = self.config.observation_noise_std
        if sigma > 0:
            y = y + sigma * np.stack([g.standard_normal(y.shape[1]) for g in self.rngs])
        return np.concatenate([y, x_hat], axis=1)

    def reset(self):
        r = self.rom.r
        self.traj_index = np.array([int(g.integers(len(self.dataset))) for g in self.rngs])
        self.x_hat = np.stack([self.config.initial_estimate_std * g.standard_normal(r) for g in self.rngs])
        self.k = 1
        self.z = self._data[self.traj_index, 1]
        return self._observe(self.z, self.x_hat)

    @property
    def mus(self):
        return np.asarray(self.dataset.mus)[self.traj_index]

    def step(self, actions):
        """Returns ``(obs, rewards, done)``; after ``done`` the obs is terminal."""
        if self.k is None or self.k > self.config.episode_length:
            raise RuntimeError("episode is finished; call reset()")
        actions = np.asarray(actions, dtype=np.float64)
        self.x_hat = self.x_hat @ self.rom.A_r.T + actions
        rewards = reward_fn(self.z, self.x_hat, actions, self.rom, self.config.lambda_reg)
        done = self.k == self.config.episode_length
        self.k += 1
        self.z = self._data[self.traj_index, min(self.k, self._data.shape[1] - 1)]
        return self._observe(self.z, self.x_hat), rewards, done
