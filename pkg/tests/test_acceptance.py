"""Acceptance checks, one test per criterion.

Each test prints a ``[criterion N] PASS|FAIL`` line.  The Burgers checks need
trained policies (about 1M timesteps per sensor count); these are cached under
``$RLROE_ACCEPTANCE_CACHE`` (default ``tests/.cache``) keyed by the config hash,
so only the first run pays for training.
"""

import json
import math
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from rlroe.burgers import Dataset, generate_dataset, load_dataset, save_dataset
from rlroe.config import RunConfig
from rlroe.env import EnvConfig
from rlroe.estimators import kf_gain_sequence, kf_init, kf_init_covariance, kf_step
from rlroe.evaluation import (
    KfEstimator,
    LinearPolicy,
    RlroeEstimator,
    add_observation_noise,
    evaluate_estimator,
    policy_jacobian_norms,
    sample_process_noise,
    tune_kf,
)
from rlroe.nn import forward, gaussian_entropy, gaussian_log_prob, init_policy, load_policy, save_policy
from rlroe.ppo import PpoConfig, ppo_loss_and_grads, train
from rlroe.rom import Rom, build_observation_matrix, build_rom

from conftest import linear_dataset

CACHE = Path(os.environ.get("RLROE_ACCEPTANCE_CACHE", Path(__file__).parent / ".cache"))
SENSOR_COUNTS = (1, 2, 4, 12)
NOISE_STD = 0.1


def verdict(capsys, name, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {name}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


# 1. DMD exactness

def test_criterion_1_dmd_exact(capsys):
    t0 = time.perf_counter()
    ds, _, _ = linear_dataset(n=50, r=5, steps=40, num_traj=4, seed=11)
    rom = build_rom(ds, build_observation_matrix(5, 50), 5)
    worst = 0.0
    for t in ds.trajectories:
        pred = (t.states[:-1] @ rom.U) @ rom.A_r.T @ rom.U.T
        rel = np.linalg.norm(pred - t.states[1:], axis=1) / np.linalg.norm(t.states[1:], axis=1)
        worst = max(worst, float(rel.max()))
    elapsed = time.perf_counter() - t0
    verdict(capsys, "1", worst <= 1e-8 and elapsed < 1.0,
            f"max relative transition error {worst:.2e} (<= 1e-8), {elapsed:.3f}s (< 1s)")


# 2. KF against a textbook recursion

def textbook_kf(x, P, ys, A, C, Q, R):
    xs, Ps = [], []
    I = np.eye(len(x))
    for y in ys:
        x_pred = A @ x
        P_pred = A @ P @ A.T + Q
        K = P_pred @ C.T @ np.linalg.inv(C @ P_pred @ C.T + R)
        x = x_pred + K @ (y - C @ x_pred)
        P = (I - K @ C) @ P_pred
        xs.append(x)
        Ps.append(P)
    return xs, Ps


def test_criterion_2_kf_oracle(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    r, p = 5, 2
    A = rng.standard_normal((r, r))
    A *= 0.95 / np.max(np.abs(np.linalg.eigvals(A)))
    C = rng.standard_normal((p, r))
    rom = Rom(U=np.eye(r), A_r=A, C_r=C, singular_values=np.ones(r), sensor_indices=tuple(range(p)))
    bq, br = 0.3, 0.7
    x0, P0 = rng.standard_normal(r), 2.0 * np.eye(r)
    ys = rng.standard_normal((100, p))
    xs, Ps = textbook_kf(x0, P0, ys, A, C, bq * np.eye(r), br * np.eye(p))
    state = kf_init(x0, P0, bq, br, rom)
    dx = dP = 0.0
    for k, y in enumerate(ys):
        state = kf_step(state, y, rom)
        dx = max(dx, float(np.max(np.abs(state.x_hat - xs[k]))))
        dP = max(dP, float(np.max(np.abs(state.P - Ps[k]))))
    # steady-state gain versus the algebraic Riccati equation for the prior covariance
    gains = kf_gain_sequence(P0, bq, br, rom, 500)
    P = Ps[-1]
    for _ in range(400):
        P_pred = A @ P @ A.T + bq * np.eye(r)
        K = P_pred @ C.T @ np.linalg.inv(C @ P_pred @ C.T + br * np.eye(p))
        P = (np.eye(r) - K @ C) @ P_pred
    Pm = A @ P @ A.T + bq * np.eye(r)
    S = C @ Pm @ C.T + br * np.eye(p)
    residual = float(np.max(np.abs(A @ (Pm - Pm @ C.T @ np.linalg.solve(S, C @ Pm)) @ A.T + bq * np.eye(r) - Pm)))
    gain_gap = float(np.max(np.abs(gains[-1] - Pm @ C.T @ np.linalg.inv(S))))
    elapsed = time.perf_counter() - t0
    ok = dx <= 1e-10 and dP <= 1e-10 and residual <= 1e-8 and gain_gap <= 1e-8 and elapsed < 1.0
    verdict(capsys, "2", ok, f"|dx|={dx:.1e} |dP|={dP:.1e} (<= 1e-10), Riccati residual {residual:.1e}, "
                             f"gain gap {gain_gap:.1e} (<= 1e-8), {elapsed:.3f}s")


# 3. PPO loss gradients

def test_criterion_3_ppo_gradients(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    obs_dim, act_dim, n = 14, 10, 64
    pol = init_policy(obs_dim, act_dim, rng, log_std_init=-0.5)
    # move away from the near-zero initial head so every term is exercised
    for net in (pol.mean_net, pol.value_net):
        net.weights[-1] += 0.3 * rng.standard_normal(net.weights[-1].shape)
        for b in net.biases:
            b[:] = 0.1 * rng.standard_normal(b.shape)
    obs = rng.standard_normal((n, obs_dim))
    mean = pol.mean_action(obs, normalized=True)
    actions = mean + np.exp(pol.log_std) * rng.standard_normal(mean.shape)
    old = gaussian_log_prob(actions, mean, pol.log_std) + 0.3 * rng.standard_normal(n)
    batch = (obs, actions, old, rng.standard_normal(n), rng.standard_normal(n))
    cfg = PpoConfig(entropy_coef=0.01)
    loss, _, grads = ppo_loss_and_grads(pol, *batch, cfg)

    def loss_only():
        # forward-only restatement of the clipped objective
        logp = gaussian_log_prob(actions, forward(pol.mean_net, obs), pol.log_std)
        ratio = np.exp(logp - old)
        adv, ret = batch[3], batch[4]
        surr = np.minimum(ratio * adv, np.clip(ratio, 1 - cfg.clip_eps, 1 + cfg.clip_eps) * adv)
        v = forward(pol.value_net, obs)[:, 0]
        return (-np.mean(surr) + cfg.value_coef * np.mean((ret - v) ** 2)
                - cfg.entropy_coef * gaussian_entropy(pol.log_std))

    assert abs(loss_only() - loss) <= 1e-12 * max(1.0, abs(loss))
    h = 1e-6
    num = den = 0.0
    for arr, g in zip(pol.arrays(), grads):
        for idx in np.ndindex(arr.shape):
            v0 = arr[idx]
            arr[idx] = v0 + h
            fp = loss_only()
            arr[idx] = v0 - h
            fm = loss_only()
            arr[idx] = v0
            fd = (fp - fm) / (2 * h)
            num += (g[idx] - fd) ** 2
            den += fd**2
    rel = math.sqrt(num / den)
    elapsed = time.perf_counter() - t0
    count = sum(a.size for a in pol.arrays())
    verdict(capsys, "3", rel <= 1e-4 and elapsed < 10.0,
            f"relative gradient error {rel:.2e} over {count} parameters (<= 1e-4), {elapsed:.1f}s (< 10s)")


# 4. scalar toy MDP

def ar1_dataset(num, K, seed, a=0.95, q=0.2):
    rng = np.random.default_rng(seed)
    states = []
    for _ in range(num):
        z = [rng.standard_normal()]
        for _ in range(K):
            z.append(a * z[-1] + q * rng.standard_normal())
        states.append(np.array(z)[:, None])
    return Dataset.from_arrays(np.linspace(0.0, 1.0, num), states)


def episode_returns(estimator, rom, Z, ys, x0):
    est = np.concatenate([estimator.run(rom, x0[i:i + 1], ys[i:i + 1]) for i in range(len(Z))])
    return -np.sum((Z - est @ rom.U.T) ** 2, axis=(1, 2))


def test_criterion_4_toy_mdp(capsys):
    """AR(1) state, one noisy sensor, rank-1 ROM; the estimate starts at the prior mean."""
    t0 = time.perf_counter()
    K, sigma = 200, 0.5
    train_ds, test_ds = ar1_dataset(11, K, 0), ar1_dataset(20, K, 1)
    rom = build_rom(train_ds, build_observation_matrix(1, 1), 1)
    env = EnvConfig(K, observation_noise_std=sigma, initial_estimate_std=0.0)
    policy, _ = train(train_ds, rom, env, PpoConfig(total_timesteps=100_000, gamma=0.75))

    rng = np.random.default_rng(123)
    Z = np.stack([t.states[1:K + 1] for t in test_ds.trajectories])
    ys = add_observation_noise(Z[:, :, list(rom.sensor_indices)], sigma, rng)
    x0 = np.zeros((len(Z), 1))
    P0 = kf_init_covariance(0.0, rom, train_ds)
    kf_ret = max(float(np.mean(episode_returns(KfEstimator(bq, sigma**2, P0), rom, Z, ys, x0)))
                 for bq in 10.0 ** np.arange(-4.0, 2.01, 0.25))
    rl_ret = float(np.mean(episode_returns(RlroeEstimator(policy), rom, Z, ys, x0)))
    ratio = kf_ret / rl_ret  # both negative: KF cost over RL cost
    elapsed = time.perf_counter() - t0
    verdict(capsys, "4", ratio >= 0.9 and elapsed < 300,
            f"mean return RL {rl_ret:.3f} vs tuned KF {kf_ret:.3f}, ratio {ratio:.3f} (>= 0.9), {elapsed:.0f}s")


# 5-8. Burgers

def _timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0


def _trained(pdir, train_ds, rom, env, ppo, tune=False):
    """Policy (and tuned KF parameters) for one configuration, trained once and cached in ``pdir``."""
    pdir.mkdir(exist_ok=True)
    meta_path = pdir / "meta.json"
    if meta_path.exists():
        return load_policy(pdir / "policy.bin"), json.loads(meta_path.read_text())
    (policy, _), train_time = _timed(train, train_ds, rom, env, ppo)
    meta = {"train_seconds": train_time}
    if tune:
        meta["beta_q"], meta["beta_r"], _ = tune_kf(rom, train_ds, env)
    save_policy(policy, pdir / "policy.bin")
    meta_path.write_text(json.dumps(meta))
    return policy, meta


@pytest.fixture(scope="module")
def burgers():
    """Datasets, ROMs, trained policies and tuned KF parameters for each p (cached on disk)."""
    base = RunConfig()
    root = CACHE / base.hash()
    root.mkdir(parents=True, exist_ok=True)
    train_path, test_path = root / "train_ds", root / "test_ds"
    if not (train_path / "manifest.json").exists():
        save_dataset(generate_dataset(base.train_mus, base.burgers), train_path, force=True)
    if not (test_path / "manifest.json").exists():
        save_dataset(generate_dataset(base.test_mus, base.burgers), test_path, force=True)
    train_ds, test_ds = load_dataset(train_path), load_dataset(test_path)
    runs = {}
    for p in SENSOR_COUNTS:
        rom = build_rom(train_ds, build_observation_matrix(p, train_ds.n), base.rank)
        policy, meta = _trained(root / f"p{p}", train_ds, rom, base.env, base.ppo, tune=True)
        P0 = kf_init_covariance(base.env.initial_estimate_std, rom, train_ds)
        runs[p] = {"rom": rom, "policy": policy, "kf": KfEstimator(meta["beta_q"], meta["beta_r"], P0), **meta}
    # same p=4 problem with noisy sensors during training
    noisy_env = replace(base.env, observation_noise_std=NOISE_STD)
    runs["p4_noisy"] = {"policy": _trained(root / "p4_noisy", train_ds, runs[4]["rom"], noisy_env, base.ppo)[0],
                        "env": noisy_env}
    return {"config": base, "train": train_ds, "test": test_ds, "runs": runs}


@pytest.fixture(scope="module")
def reports(burgers):
    """RL-ROE and KF-ROE reports on the unseen parameter values for every p."""
    cfg, out = burgers["config"], {}
    for p in SENSOR_COUNTS:
        run = burgers["runs"][p]
        args = (burgers["test"].trajectories, run["rom"], cfg.env, cfg.eval_seeds)
        out[p] = (evaluate_estimator(RlroeEstimator(run["policy"]), *args),
                  evaluate_estimator(run["kf"], *args))
    return out


def test_criterion_5a_rl_beats_kf(burgers, reports, capsys):
    rl, kf = reports[4]
    a, b = rl.overall(), kf.overall()
    verdict(capsys, "5a", a <= 0.5 * b, f"p=4: RL-ROE {a:.4f} vs KF-ROE {b:.4f}, ratio {a / b:.3f} (<= 0.5)")


def test_criterion_5b_near_lower_bound(burgers, reports, capsys):
    rl, _ = reports[4]
    a, lb = rl.overall(), rl.lower_bound_overall()
    verdict(capsys, "5b", a <= 3.0 * lb, f"p=4: RL-ROE {a:.4f} vs projection bound {lb:.4f}, "
                                         f"ratio {a / lb:.2f} (<= 3)")


def test_criterion_5c_ordering_in_p(burgers, reports, capsys):
    errs = {p: (rl.overall(), kf.overall()) for p, (rl, kf) in reports.items()}
    ok = all(errs[p][0] < errs[p][1] for p in (1, 2, 4)) and errs[12][1] <= 1.5 * errs[12][0]
    slow = max(burgers["runs"][p]["train_seconds"] for p in SENSOR_COUNTS)
    ok = ok and slow <= 7200
    detail = ", ".join(f"p={p}: RL {a:.4f} KF {b:.4f}" for p, (a, b) in sorted(errs.items()))
    verdict(capsys, "5c", ok, f"{detail}; slowest training {slow:.0f}s (<= 2h)")


def test_criterion_5d_generalization(burgers, reports, capsys):
    cfg, run = burgers["config"], burgers["runs"][4]
    unseen = dict(zip(reports[4][0].mus, reports[4][0].time_average()))
    seen = evaluate_estimator(RlroeEstimator(run["policy"]), burgers["train"].trajectories, run["rom"],
                              cfg.env, cfg.eval_seeds)
    seen = dict(zip(seen.mus, seen.time_average()))
    parts, ok = [], True
    for mu, err in unseen.items():
        dist = min(abs(mu - m) for m in seen)
        # ties (0.15 sits between 0.1 and 0.2) compare against the better neighbour
        ref = min(e for m, e in seen.items() if abs(abs(mu - m) - dist) < 1e-9)
        ok &= err <= 2.0 * ref
        parts.append(f"mu={mu:g}: {err:.4f} vs {ref:.4f}")
    verdict(capsys, "5d", ok, "; ".join(parts) + " (<= 2x nearest training mu)")


def test_criterion_6_process_noise(burgers, capsys):
    t0 = time.perf_counter()
    rom = burgers["runs"][4]["rom"]
    rows = sample_process_noise(rom, burgers["train"]).summary()
    ratios = np.array([abs(m) / s for _, _, m, s, _ in rows])
    elapsed = time.perf_counter() - t0
    bad = int(np.sum(ratios > 0.05))
    verdict(capsys, "6", bad == 0 and elapsed < 10,
            f"max |mean|/std {ratios.max():.3f}, {bad}/{len(ratios)} (mu, component) pairs above 0.05, "
            f"{elapsed:.2f}s")


def test_criterion_7_nonlinearity(burgers, capsys):
    t0 = time.perf_counter()
    run = burgers["runs"][4]
    policy, rom = run["policy"], run["rom"]
    K = burgers["config"].env.episode_length
    trained = np.concatenate([policy_jacobian_norms(policy, rom, t, episode_length=K)
                              for t in burgers["test"].trajectories])
    rng = np.random.default_rng(7)
    linear = LinearPolicy(0.01 * rng.standard_normal((rom.r, rom.p + rom.r)), np.zeros(rom.r), policy.normalizer)
    control = np.concatenate([policy_jacobian_norms(linear, rom, t, episode_length=K)
                              for t in burgers["test"].trajectories])
    spread = float(trained.std() / trained.mean())
    control_spread = float(control.std() / control.mean())
    elapsed = time.perf_counter() - t0
    verdict(capsys, "7", spread > 0.1 and control_spread <= 1e-9 and elapsed < 60,
            f"relative spread trained {spread:.3f} (> 0.1), linear control {control_spread:.1e} (<= 1e-9), "
            f"{elapsed:.1f}s")


def test_criterion_8_noise_robustness(burgers, reports, capsys):
    """The estimator is trained and evaluated with noisy sensors, then compared with the noise-free one."""
    t0 = time.perf_counter()
    cfg, runs = burgers["config"], burgers["runs"]
    test = burgers["test"].trajectories
    noisy = evaluate_estimator(RlroeEstimator(runs["p4_noisy"]["policy"]), test, runs[4]["rom"],
                               runs["p4_noisy"]["env"], cfg.eval_seeds).overall()
    elapsed = time.perf_counter() - t0
    # for reference only: the noise-free policy fed noisy measurements
    zero_shot = evaluate_estimator(RlroeEstimator(runs[4]["policy"]), test, runs[4]["rom"],
                                   runs["p4_noisy"]["env"], cfg.eval_seeds).overall()
    clean = reports[4][0].overall()
    rise = noisy / clean - 1.0
    verdict(capsys, "8", rise < 0.5 and elapsed < 600,
            f"p=4 RL-ROE {clean:.4f} clean vs {noisy:.4f} with sigma={NOISE_STD}, increase {100 * rise:.1f}% "
            f"(< 50%), {elapsed:.1f}s; noise-free policy on noisy sensors: {zero_shot:.4f}")
