"""Reduced-order estimators sharing the recursion x_k = A_r x_{k-1} + a_k.

The correction ``a_k`` comes either from a time-varying Kalman gain (KF-ROE)
or from a trained policy (RL-ROE).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .burgers import Dataset
from .nn import PolicyParams
from .rom import Rom

__all__ = [
    "KfState",
    "SingularInnovationError",
    "roe_step",
    "kf_covariance_update",
    "kf_step",
    "kf_init",
    "kf_init_covariance",
    "kf_gain_sequence",
    "rlroe_step",
    "reconstruct",
]

COND_LIMIT = 1e12


class SingularInnovationError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class KfState:
    x_hat: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    R: np.ndarray


def roe_step(x_hat_prev, action, rom: Rom):
    x_hat_prev = np.asarray(x_hat_prev, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    if x_hat_prev.shape[-1] != rom.r or action.shape[-1] != rom.r:
        raise ValueError(f"expected vectors of length r={rom.r}")
    return x_hat_prev @ rom.A_r.T + action


def kf_covariance_update(P, Q, R, rom: Rom):
    """Covariance half of one Kalman step; returns ``(K, P_posterior)``."""
    A, C = rom.A_r, rom.C_r
    P_prior = A @ P @ A.T + Q
    S = C @ P_prior @ C.T + R
    if np.linalg.cond(S) > COND_LIMIT:
        raise SingularInnovationError(f"innovation covariance is singular (cond > {COND_LIMIT:g}); increase R")
    # K = P- C^T S^-1, solved as S K^T = C P-  (S, P- symmetric)
    K = np.linalg.solve(S, C @ P_prior).T
    P_post = (np.eye(rom.r) - K @ C) @ P_prior
    P_post = 0.5 * (P_post + P_post.T)
    return K, P_post


def kf_step(state: KfState, y, rom: Rom) -> KfState:
    K, P = kf_covariance_update(state.P, state.Q, state.R, rom)
    x_pred = rom.A_r @ state.x_hat
    action = K @ (np.asarray(y) - rom.C_r @ x_pred)
    return replace(state, x_hat=x_pred + action, P=P)


def kf_init(x_hat0, P0, beta_q: float, beta_r: float, rom: Rom) -> KfState:
    if not (beta_q > 0 and beta_r > 0):
        raise ValueError("beta_q and beta_r must be positive")
    return KfState(
        x_hat=np.asarray(x_hat0, dtype=np.float64),
        P=np.asarray(P0, dtype=np.float64),
        Q=beta_q * np.eye(rom.r),
        R=beta_r * np.eye(rom.p),
    )


def kf_init_covariance(initial_estimate_std: float, rom: Rom, dataset: Dataset):
    """cov(U^T z_0 - x_hat_0) with z_0 over the dataset and x_hat_0 ~ N(0, std^2 I)."""
    if initial_estimate_std < 0:
        raise ValueError("initial_estimate_std must be non-negative")
    x0 = np.array([rom.project(t.states[0]) for t in dataset.trajectories])
    if x0.shape[0] > 1:
        cov = np.atleast_2d(np.cov(x0, rowvar=False))
    else:
        cov = np.zeros((rom.r, rom.r))
    return cov + initial_estimate_std**2 * np.eye(rom.r)


def kf_gain_sequence(P0, beta_q: float, beta_r: float, rom: Rom, steps: int):
    """Kalman gains K_1..K_steps; they do not depend on the measurements."""
    Q, R = beta_q * np.eye(rom.r), beta_r * np.eye(rom.p)
    gains = np.empty((steps, rom.r, rom.p))
    P = np.asarray(P0, dtype=np.float64)
    for k in range(steps):
        gains[k], P = kf_covariance_update(P, Q, R, rom)
    return gains


def rlroe_step(x_hat_prev, y, policy: PolicyParams, rom: Rom, deterministic: bool = True, rng=None):
    """One RL-ROE step; returns ``(x_hat, action)``.

    Works on single vectors or on batches stacked along a leading axis.
    """
    x_hat_prev = np.asarray(x_hat_prev, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    obs = np.concatenate([y, x_hat_prev], axis=-1)
    if obs.shape[-1] != policy.obs_dim or policy.action_dim != rom.r:
        raise ValueError(
            f"policy expects obs dim {policy.obs_dim} / action dim {policy.action_dim}, "
            f"got p + r = {obs.shape[-1]} / r = {rom.r}"
        )
    action = policy.mean_action(obs)
    if not deterministic:
        if rng is None:
            raise ValueError("stochastic step needs an rng")
        action = action + np.exp(policy.log_std) * rng.standard_normal(action.shape)
    return roe_step(x_hat_prev, action, rom), action


def reconstruct(x_hat, rom: Rom):
    return np.asarray(x_hat) @ rom.U.T
