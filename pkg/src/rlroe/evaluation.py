"""Experiments comparing RL-ROE and KF-ROE on reference trajectories.

Every comparison feeds both estimators the same initial estimates and the same
measurement sequences: for seed index ``s`` the initial estimate comes from the
stream ``(base_seed, 0, s)`` and the measurement noise for the ``i``-th
reference trajectory from ``(base_seed, 1, i, s)``.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .burgers import BurgersConfig, Dataset, Trajectory, generate_dataset
from .env import EnvConfig
from .estimators import SingularInnovationError, kf_gain_sequence, kf_init_covariance
from .nn import PolicyParams, RunningNormalizer
from .rom import Rom

__all__ = [
    "DIVERGENCE_THRESHOLD",
    "EvalReport",
    "KfEstimator",
    "RlroeEstimator",
    "NoiseSample",
    "normalized_l2_error",
    "projection_lower_bound",
    "reference_trajectories",
    "evaluate_estimator",
    "tune_kf",
    "error_vs_mu",
    "error_vs_p",
    "policy_jacobian_norms",
    "jacobian_frobenius",
    "sample_process_noise",
    "add_observation_noise",
    "write_csv",
]

DIVERGENCE_THRESHOLD = 1e6
ZERO_NORM = 1e-14
DEFAULT_TEST_MUS = (0.15, 0.55, 0.95)
DEFAULT_BETA_Q_GRID = tuple(10.0**e for e in range(-2, 13))
DEFAULT_BETA_R_GRID = tuple(10.0**e for e in range(-2, 3))


def normalized_l2_error(z, z_hat):
    """||z_hat - z|| / ||z|| along the last axis; NaN where ||z|| is ~0."""
    z = np.asarray(z, dtype=np.float64)
    num = np.linalg.norm(np.asarray(z_hat) - z, axis=-1)
    den = np.linalg.norm(z, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(den > ZERO_NORM, num / np.where(den > ZERO_NORM, den, 1.0), np.nan)
    return float(out) if out.ndim == 0 else out


def projection_lower_bound(z, rom: Rom):
    """Error of the orthogonal projection onto span(U)."""
    z = np.asarray(z, dtype=np.float64)
    return normalized_l2_error(z, (z @ rom.U) @ rom.U.T)


def add_observation_noise(y, sigma: float, rng):
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    y = np.asarray(y, dtype=np.float64)
    if sigma == 0:
        return y.copy()
    return y + sigma * rng.standard_normal(y.shape)


@dataclass
class EvalReport:
    """Normalized errors for every (reference trajectory, seed, time) triple.

    ``errors`` and ``lower_bound`` have shape (num_mus, num_seeds, K); time
    index k = 1..K maps to column k - 1.
    """

    mus: np.ndarray
    seeds: np.ndarray
    errors: np.ndarray
    lower_bound: np.ndarray
    label: str = ""

    @property
    def diverged(self) -> np.ndarray:
        """(num_mus, num_seeds) flags for runs that blew past the threshold."""
        e = self.errors
        return np.any(~np.isfinite(e) & ~np.isnan(e), axis=-1) | np.any(e > DIVERGENCE_THRESHOLD, axis=-1)

    @property
    def undefined_count(self) -> int:
        return int(np.isnan(self.lower_bound).sum())

    @property
    def num_runs(self) -> int:
        return self.errors.shape[0] * self.errors.shape[1]

    def _valid(self):
        e = np.where(self.diverged[..., None], np.nan, self.errors)
        return e

    def mean_over_seeds(self):
        """(num_mus, K) mean and std over seeds, diverged runs excluded."""
        e = self._valid()
        return np.nanmean(e, axis=1), np.nanstd(e, axis=1)

    def time_average(self):
        """(num_mus,) time-averaged error, averaged over seeds."""
        return np.nanmean(np.nanmean(self._valid(), axis=2), axis=1)

    def time_average_std(self):
        return np.nanstd(np.nanmean(self._valid(), axis=2), axis=1)

    def overall(self) -> float:
        """Average over time, seeds and mu (inf if any run diverged)."""
        if np.any(self.diverged):
            return math.inf
        return float(np.mean(self.time_average()))

    def lower_bound_time_average(self):
        return np.nanmean(self.lower_bound[:, 0, :], axis=1)

    def lower_bound_overall(self) -> float:
        return float(np.mean(self.lower_bound_time_average()))

    def records(self):
        """Yields ``(mu, seed, k, error, lower_bound)`` tuples."""
        for i, mu in enumerate(self.mus):
            for j, s in enumerate(self.seeds):
                for k in range(self.errors.shape[2]):
                    yield float(mu), int(s), k + 1, float(self.errors[i, j, k]), float(self.lower_bound[i, j, k])


class KfEstimator:
    """Time-varying Kalman gain on the ROM with Q = beta_q I, R = beta_r I."""

    label = "kf"

    def __init__(self, beta_q: float, beta_r: float, P0):
        self.beta_q, self.beta_r = float(beta_q), float(beta_r)
        self.P0 = np.asarray(P0, dtype=np.float64)
        self._gains = {}

    def gains(self, rom: Rom, steps: int):
        key = (id(rom), steps)
        if key not in self._gains:
            self._gains = {key: kf_gain_sequence(self.P0, self.beta_q, self.beta_r, rom, steps)}
        return self._gains[key]

    def run(self, rom: Rom, x0, ys):
        """x0: (S, r); ys: (S, K, p) -> estimates (S, K, r)."""
        K = ys.shape[1]
        gains = self.gains(rom, K)
        x = np.array(x0, dtype=np.float64)
        out = np.empty((x.shape[0], K, rom.r))
        CA = rom.C_r @ rom.A_r
        for k in range(K):
            innovation = ys[:, k] - x @ CA.T
            x = x @ rom.A_r.T + innovation @ gains[k].T
            out[:, k] = x
        return out


class RlroeEstimator:
    """Trained policy with stochasticity off and the normalizer frozen."""

    label = "rlroe"

    def __init__(self, policy: PolicyParams):
        self.policy = policy

    def run(self, rom: Rom, x0, ys):
        K = ys.shape[1]
        x = np.array(x0, dtype=np.float64)
        out = np.empty((x.shape[0], K, rom.r))
        for k in range(K):
            action = self.policy.mean_action(np.concatenate([ys[:, k], x], axis=1))
            x = x @ rom.A_r.T + action
            out[:, k] = x
        return out


def reference_trajectories(test_mus: Sequence[float], dataset: Dataset | None = None,
                           config: BurgersConfig | None = None) -> list[Trajectory]:
    """Trajectories for ``test_mus``: taken from ``dataset`` when present, simulated otherwise."""
    found = {}
    if dataset is not None:
        for t in dataset.trajectories:
            found[round(t.mu, 12)] = t
    missing = sorted({float(m) for m in test_mus if round(float(m), 12) not in found})
    if missing:
        cfg = config or (dataset.config if dataset is not None else None) or BurgersConfig()
        for t in generate_dataset(missing, cfg).trajectories:
            found[round(t.mu, 12)] = t
    return [found[round(float(m), 12)] for m in test_mus]


def _initial_estimates(num_seeds, r, std, base_seed):
    out = np.empty((num_seeds, r))
    for s in range(num_seeds):
        rng = np.random.default_rng(np.random.SeedSequence(base_seed, spawn_key=(0, s)))
        out[s] = std * rng.standard_normal(r)
    return out


def _measurements(traj: Trajectory, rom: Rom, K, num_seeds, sigma, base_seed, index):
    y = traj.states[1:K + 1][:, list(rom.sensor_indices)]
    ys = np.broadcast_to(y, (num_seeds, *y.shape)).copy()
    if sigma > 0:
        for s in range(num_seeds):
            rng = np.random.default_rng(np.random.SeedSequence(base_seed, spawn_key=(1, index, s)))
            ys[s] = add_observation_noise(ys[s], sigma, rng)
    return ys


def _run_one(estimator, traj: Trajectory, rom: Rom, env_config: EnvConfig, x0, base_seed, index):
    K = env_config.episode_length
    z = traj.states[1:K + 1]
    ys = _measurements(traj, rom, K, x0.shape[0], env_config.observation_noise_std, base_seed, index)
    with np.errstate(over="ignore", invalid="ignore"):
        x_hat = estimator.run(rom, x0, ys)
        err = normalized_l2_error(z[None], x_hat @ rom.U.T)
    return err, projection_lower_bound(z, rom)


def evaluate_estimator(estimator, trajectories: Sequence[Trajectory], rom: Rom, env_config: EnvConfig,
                       num_seeds: int = 20, base_seed: int = 0, workers: int = 1) -> EvalReport:
    """Run ``estimator`` along each reference trajectory for ``num_seeds`` initial estimates.

    Uses only the (optionally noisy) measurements; errors are recorded at
    k = 1..episode_length.  With ``workers > 1`` trajectories are fanned out to
    a process pool; every random draw is keyed by (base_seed, trajectory, seed),
    so the result does not depend on ``workers``.
    """
    K = env_config.episode_length
    for t in trajectories:
        if t.num_snapshots < K + 1:
            raise ValueError(f"trajectory mu={t.mu} has {t.num_snapshots} snapshots, need {K + 1}")
    x0 = _initial_estimates(num_seeds, rom.r, env_config.initial_estimate_std, base_seed)
    args = [(estimator, traj, rom, env_config, x0, base_seed, i) for i, traj in enumerate(trajectories)]
    if workers > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, *zip(*args)))
    else:
        results = [_run_one(*a) for a in args]
    M = len(trajectories)
    errors = np.empty((M, num_seeds, K))
    lower = np.empty((M, num_seeds, K))
    for i, (err, lb) in enumerate(results):
        errors[i] = err
        lower[i] = lb[None]
    return EvalReport(
        mus=np.array([t.mu for t in trajectories]),
        seeds=np.arange(num_seeds),
        errors=errors,
        lower_bound=lower,
        label=getattr(estimator, "label", ""),
    )


def tune_kf(rom: Rom, dataset: Dataset, env_config: EnvConfig,
            beta_q_grid: Sequence[float] = DEFAULT_BETA_Q_GRID,
            beta_r_grid: Sequence[float] = DEFAULT_BETA_R_GRID,
            num_seeds: int = 5, base_seed: int = 0, workers: int = 1):
    """Grid search for (beta_q, beta_r) minimizing the mean error over the dataset.

    Returns ``(beta_q, beta_r, table)`` where ``table`` maps each pair to its
    averaged error (inf for pairs that diverge or make S singular).
    """
    if not beta_q_grid or not beta_r_grid:
        raise ValueError("candidate grids must be nonempty")
    P0 = kf_init_covariance(env_config.initial_estimate_std, rom, dataset)
    table = {}
    for bq in beta_q_grid:
        for br in beta_r_grid:
            try:
                report = evaluate_estimator(KfEstimator(bq, br, P0), dataset.trajectories, rom, env_config,
                                            num_seeds, base_seed, workers)
                table[(bq, br)] = report.overall()
            except SingularInnovationError:
                table[(bq, br)] = math.inf
    best = min(table, key=lambda key: (table[key], key))
    return best[0], best[1], table


def error_vs_mu(report: EvalReport, training_mus: Sequence[float]):
    """Rows of ``(mu, time-averaged error, std over seeds, in_training)``."""
    train = {round(float(m), 9) for m in training_mus}
    avg, std = report.time_average(), report.time_average_std()
    return [(float(m), float(a), float(s), round(float(m), 9) in train) for m, a, s in zip(report.mus, avg, std)]


def error_vs_p(reports: dict):
    """``{p: (rlroe_report, kf_report)}`` -> rows ``(p, rlroe, kf, lower_bound)`` sorted by p."""
    rows = []
    for p in sorted(reports):
        rl, kf = reports[p]
        rows.append((int(p), rl.overall(), kf.overall(), rl.lower_bound_overall()))
    return rows


def jacobian_frobenius(fn, u, h: float = 1e-5, scale=None) -> float:
    """Frobenius norm of d fn / d u by central differences.

    With ``scale`` the Jacobian is taken with respect to ``u * scale`` instead,
    i.e. column j is divided by ``scale[j]``.
    """
    u = np.asarray(u, dtype=np.float64)
    E = np.eye(u.size) * h
    cols = (fn(u + E) - fn(u - E)) / (2.0 * h)  # row j = column j of the Jacobian
    if scale is not None:
        cols = cols / np.asarray(scale)[:, None]
    return float(np.sqrt(np.sum(cols**2)))


@dataclass
class LinearPolicy:
    """Affine map of the normalized observation; control case for nonlinearity checks."""

    W: np.ndarray
    b: np.ndarray
    normalizer: RunningNormalizer

    def mean_action(self, obs, normalized=False):
        x = obs if normalized else self.normalizer(obs)
        return x @ self.W.T + self.b


def policy_jacobian_norms(policy, rom: Rom, trajectory: Trajectory, sample_times: Sequence[int] | None = None,
                          x0=None, h: float = 1e-5, episode_length: int | None = None):
    """Frobenius norms of the mean-policy Jacobian w.r.t. (y, x_hat) along an RL-ROE run.

    Finite differences are taken on the normalized input and mapped back to
    raw coordinates; clipped inputs have zero derivative.
    """
    K = episode_length or trajectory.num_snapshots - 1
    times = list(range(1, K + 1)) if sample_times is None else sorted(sample_times)
    x = np.zeros(rom.r) if x0 is None else np.asarray(x0, dtype=np.float64)
    norm = policy.normalizer
    scale = np.sqrt(norm.var + norm.eps)
    sensors = list(rom.sensor_indices)
    out = []
    wanted = set(times)
    for k in range(1, K + 1):
        obs = np.concatenate([trajectory.states[k][sensors], x])
        if k in wanted:
            u = (obs - norm.mean) / scale
            inside = np.abs(u) < norm.clip
            fn = lambda v: policy.mean_action(np.clip(v, -norm.clip, norm.clip), normalized=True)  # noqa: E731
            norm_k = jacobian_frobenius(fn, np.clip(u, -norm.clip, norm.clip), h, scale=scale / inside.clip(1e-300))
            out.append(norm_k)
        x = x @ rom.A_r.T + policy.mean_action(obs)
    return np.array(out)


@dataclass
class NoiseSample:
    """Per-mu process-noise samples, each of shape (num_transitions, r)."""

    samples: dict = field(default_factory=dict)

    def summary(self):
        """Rows of ``(mu, component, mean, std, count)``."""
        rows = []
        for mu, w in self.samples.items():
            for i in range(w.shape[1]):
                rows.append((mu, i, float(w[:, i].mean()), float(w[:, i].std(ddof=1)), w.shape[0]))
        return rows


def sample_process_noise(rom: Rom, dataset: Dataset) -> NoiseSample:
    """Residuals of the reduced dynamics, w = U^T z_k - A_r U^T z_{k-1}."""
    out = NoiseSample()
    for t in dataset.trajectories:
        x = t.states @ rom.U
        out.samples[float(t.mu)] = x[1:] - x[:-1] @ rom.A_r.T
    return out


def write_csv(path, header: Sequence[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    def fmt(v):
        if isinstance(v, (bool, np.bool_)):
            return int(v)
        if isinstance(v, (float, np.floating)):
            return format(float(v), ".17g")
        return v

    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    tmp.replace(path)
    return path
