import numpy as np
import pytest

from rlroe.burgers import Dataset
from rlroe.env import EnvConfig, VecEstimationEnv, env_rngs, reset, reward_fn, step

K = 20


@pytest.fixture()
def cfg():
    return EnvConfig(episode_length=K)


def test_reset_zero_std(small_dataset, small_rom):
    rng = np.random.default_rng(0)
    state, obs = reset(small_dataset, small_rom, EnvConfig(K, initial_estimate_std=0.0), rng)
    np.testing.assert_array_equal(state.x_hat_prev, np.zeros(4))
    assert state.k == 1
    np.testing.assert_array_equal(state.z, state.traj.states[1])
    np.testing.assert_array_equal(obs[:3], state.z[list(small_rom.sensor_indices)])
    np.testing.assert_array_equal(obs[3:], np.zeros(4))


def test_reset_deterministic(small_dataset, small_rom, cfg):
    a = reset(small_dataset, small_rom, cfg, np.random.default_rng(5))
    b = reset(small_dataset, small_rom, cfg, np.random.default_rng(5))
    assert a[0].mu == b[0].mu
    np.testing.assert_array_equal(a[1], b[1])


def test_reset_mu_uniform(small_rom):
    # 11 parameter values, 1e4 resets; each frequency within 5 sigma of uniform
    z = np.ones((K + 1, small_rom.n))
    ds = Dataset.from_arrays(np.round(np.linspace(0, 1, 11), 10), [z] * 11)
    rng = np.random.default_rng(0)
    counts = {}
    for _ in range(10_000):
        mu = reset(ds, small_rom, EnvConfig(K), rng)[0].mu
        counts[mu] = counts.get(mu, 0) + 1
    p = 1 / 11
    sigma = np.sqrt(10_000 * p * (1 - p))
    assert len(counts) == 11
    assert all(abs(c - 10_000 * p) <= 5 * sigma for c in counts.values())


def test_reward_examples(small_dataset, small_rom):
    z = small_dataset.trajectories[0].states[3]
    r = reward_fn(z, np.zeros(4), np.zeros(4), small_rom, 0.0)
    assert r == pytest.approx(-np.sum(z**2))
    rng = np.random.default_rng(1)
    x, a = rng.standard_normal((2, 4))
    expected = -np.sum((z - small_rom.U @ x) ** 2) - 0.1 * np.sum(a**2)
    assert reward_fn(z, x, a, small_rom, 0.1) == pytest.approx(expected, rel=1e-12)


def test_perfect_action_gives_zero_reward(small_dataset, small_rom):
    # replay a trajectory lying inside span(U)
    rng = np.random.default_rng(0)
    states = rng.standard_normal((K + 1, 4)) @ small_rom.U.T
    ds = Dataset.from_arrays([0.0], [states])
    state, _ = reset(ds, small_rom, EnvConfig(K), rng)
    for _ in range(5):
        a = small_rom.project(state.z) - small_rom.A_r @ state.x_hat_prev
        state, _, reward, _ = step(state, a, small_rom, EnvConfig(K), rng)
        assert abs(reward) < 1e-20 + 1e-24 * np.sum(states**2)


def test_episode_length_and_done(small_dataset, small_rom, cfg):
    rng = np.random.default_rng(0)
    state, obs = reset(small_dataset, small_rom, cfg, rng)
    dones = []
    for _ in range(K):
        assert obs.shape == (small_rom.p + small_rom.r,)
        state, obs, reward, done = step(state, np.zeros(4), small_rom, cfg, rng)
        assert reward <= 0
        dones.append(done)
    assert dones == [False] * (K - 1) + [True]
    with pytest.raises(RuntimeError):
        step(state, np.zeros(4), small_rom, cfg, rng)


def test_step_follows_replay(small_dataset, small_rom, cfg):
    rng = np.random.default_rng(2)
    state, _ = reset(small_dataset, small_rom, cfg, rng)
    traj = state.traj
    a = rng.standard_normal(4)
    nxt, obs, _, _ = step(state, a, small_rom, cfg, rng)
    np.testing.assert_allclose(nxt.x_hat_prev, small_rom.A_r @ state.x_hat_prev + a)
    np.testing.assert_array_equal(nxt.z, traj.states[2])
    np.testing.assert_array_equal(obs[:3], traj.states[2][list(small_rom.sensor_indices)])


def test_reward_time_invariant(small_dataset, small_rom, cfg):
    rng = np.random.default_rng(0)
    s1, _ = reset(small_dataset, small_rom, cfg, rng)
    for _ in range(6):
        s1, _, _, _ = step(s1, np.zeros(4), small_rom, cfg, rng)
    s0 = type(s1)(s1.x_hat_prev, s1.z, s1.mu, 1, s1.traj)
    a = rng.standard_normal(4)
    assert step(s0, a, small_rom, cfg, rng)[2] == step(s1, a, small_rom, cfg, rng)[2]


def test_observation_noise(small_dataset, small_rom):
    cfg = EnvConfig(K, observation_noise_std=0.1)
    state, obs = reset(small_dataset, small_rom, cfg, np.random.default_rng(0))
    clean = state.z[list(small_rom.sensor_indices)]
    assert not np.array_equal(obs[:3], clean)
    assert np.all(np.abs(obs[:3] - clean) < 1.0)


def test_config_validation(small_dataset):
    with pytest.raises(ValueError):
        EnvConfig(episode_length=0)
    with pytest.raises(ValueError):
        EnvConfig(lambda_reg=-1.0)
    with pytest.raises(ValueError):
        EnvConfig(episode_length=41).check(small_dataset)
    EnvConfig(episode_length=40).check(small_dataset)


def test_vec_env_matches_single(small_dataset, small_rom, cfg):
    vec = VecEstimationEnv(small_dataset, small_rom, cfg, env_rngs(3, 4))
    obs = vec.reset()
    assert obs.shape == (4, vec.obs_dim)
    singles = [reset(small_dataset, small_rom, cfg, g) for g in env_rngs(3, 4)]
    np.testing.assert_array_equal(obs, np.stack([o for _, o in singles]))
    states = [s for s, _ in singles]
    rng = np.random.default_rng(0)
    for t in range(K):
        a = rng.standard_normal((4, 4))
        obs, rew, done = vec.step(a)
        out = [step(s, ai, small_rom, cfg, None) for s, ai in zip(states, a)]
        states = [o[0] for o in out]
        np.testing.assert_allclose(obs, np.stack([o[1] for o in out]), atol=1e-12)
        np.testing.assert_allclose(rew, [o[2] for o in out], rtol=1e-12)
        assert done == out[0][3] == (t == K - 1)
    with pytest.raises(RuntimeError):
        vec.step(np.zeros((4, 4)))


def test_env_rngs_independent_streams():
    a = [g.random() for g in env_rngs(0, 3, stream=0)]
    b = [g.random() for g in env_rngs(0, 3, stream=1)]
    c = [g.random() for g in env_rngs(0, 3, stream=0)]
    assert a == c and len(set(a + b)) == 6
