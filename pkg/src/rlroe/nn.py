"""Two-hidden-layer tanh MLPs with hand-written backprop, Gaussian policy head,
and a running observation normalizer.

Weights are stored as (out, in) matrices; inputs are row vectors or batches of
row vectors, ``h = x @ W.T + b``.
"""

from __future__ import annotations

import copy
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "MlpParams",
    "RunningNormalizer",
    "PolicyParams",
    "init_mlp",
    "forward",
    "forward_cached",
    "backward",
    "gaussian_log_prob",
    "gaussian_entropy",
    "normalizer_update",
    "init_policy",
    "save_policy",
    "load_policy",
]

HIDDEN = (64, 64)
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def hidden(self) -> tuple[int, ...]:
        return tuple(w.shape[0] for w in self.weights[:-1])

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    @classmethod
    def zeros(cls, in_dim, out_dim, hidden=HIDDEN) -> "MlpParams":
        dims = (in_dim, *hidden, out_dim)
        return cls(
            [np.zeros((o, i)) for i, o in zip(dims[:-1], dims[1:])],
            [np.zeros(o) for o in dims[1:]],
        )


def _orthogonal(shape, gain, rng):
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def init_mlp(in_dim: int, out_dim: int, out_gain: float, rng, hidden=HIDDEN) -> MlpParams:
    """Orthogonal init, gain sqrt(2) on hidden layers, zero biases."""
    net = MlpParams.zeros(in_dim, out_dim, hidden)
    n_layers = len(net.weights)
    for i, w in enumerate(net.weights):
        gain = out_gain if i == n_layers - 1 else math.sqrt(2.0)
        net.weights[i] = _orthogonal(w.shape, gain, rng)
    return net


def forward_cached(net: MlpParams, x):
    x = np.asarray(x, dtype=np.float64)
    acts = [x]
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w.T + b
        if i < last:
            h = np.tanh(h)
        acts.append(h)
    return h, acts


def forward(net: MlpParams, x):
    return forward_cached(net, x)[0]


def backward(net: MlpParams, cache, output_grad):
    """Reverse-mode gradients for one forward pass.

    ``cache`` is the second return of :func:`forward_cached`.  Gradients are
    summed over a leading batch axis if present.  Returns ``(grads, input_grad)``
    where ``grads`` is an :class:`MlpParams` of the same shapes.
    """
    g = np.asarray(output_grad, dtype=np.float64)
    batched = g.ndim == 2
    gw, gb = [None] * len(net.weights), [None] * len(net.weights)
    for i in reversed(range(len(net.weights))):
        a_in = cache[i]
        if batched:
            gw[i] = g.T @ a_in
            gb[i] = g.sum(axis=0)
        else:
            gw[i] = np.outer(g, a_in)
            gb[i] = g.copy()
        g = g @ net.weights[i]
        if i > 0:
            g = g * (1.0 - a_in**2)
    return MlpParams(gw, gb), g


def gaussian_log_prob(action, mean, log_std):
    """Diagonal Gaussian log-density summed over the last axis."""
    z = (np.asarray(action) - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z**2 - log_std - 0.5 * LOG_2PI, axis=-1)


def gaussian_entropy(log_std):
    return float(np.sum(log_std + 0.5 * (LOG_2PI + 1.0)))


@dataclass
class RunningNormalizer:
    mean: np.ndarray
    var: np.ndarray
    count: float = 1e-4
    clip: float = 10.0
    eps: float = 1e-8

    @classmethod
    def create(cls, dim: int) -> "RunningNormalizer":
        return cls(np.zeros(dim), np.ones(dim))

    def __call__(self, x):
        return np.clip((np.asarray(x) - self.mean) / np.sqrt(self.var + self.eps), -self.clip, self.clip)

    def copy(self) -> "RunningNormalizer":
        return copy.deepcopy(self)


def normalizer_update(norm: RunningNormalizer, batch) -> RunningNormalizer:
    """Merge a batch into the running moments (Chan et al. parallel update)."""
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    b_count = batch.shape[0]
    b_mean = batch.mean(axis=0)
    b_var = batch.var(axis=0)
    delta = b_mean - norm.mean
    total = norm.count + b_count
    mean = norm.mean + delta * b_count / total
    m2 = norm.var * norm.count + b_var * b_count + delta**2 * norm.count * b_count / total
    return RunningNormalizer(mean, m2 / total, total, norm.clip, norm.eps)


@dataclass
class PolicyParams:
    mean_net: MlpParams
    value_net: MlpParams
    log_std: np.ndarray
    normalizer: RunningNormalizer = field(default=None)

    def __post_init__(self):
        if self.mean_net.in_dim != self.value_net.in_dim:
            raise ValueError("policy and value networks must share the input dimension")
        if self.normalizer is None:
            self.normalizer = RunningNormalizer.create(self.obs_dim)

    @property
    def obs_dim(self) -> int:
        return self.mean_net.in_dim

    @property
    def action_dim(self) -> int:
        return self.mean_net.out_dim

    def arrays(self) -> list[np.ndarray]:
        """Trainable arrays, in a fixed order shared with gradients."""
        return self.mean_net.arrays() + self.value_net.arrays() + [self.log_std]

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.mean_net.copy(), self.value_net.copy(), self.log_std.copy(), self.normalizer.copy())

    def mean_action(self, obs, normalized=False):
        x = obs if normalized else self.normalizer(obs)
        return forward(self.mean_net, x)

    def value(self, obs, normalized=False):
        x = obs if normalized else self.normalizer(obs)
        return forward(self.value_net, x)[..., 0]


def init_policy(obs_dim: int, action_dim: int, rng, log_std_init: float = 0.0) -> PolicyParams:
    return PolicyParams(
        mean_net=init_mlp(obs_dim, action_dim, 0.01, rng),
        value_net=init_mlp(obs_dim, 1, 1.0, rng),
        log_std=np.full(action_dim, float(log_std_init)),
    )


# ---------------------------------------------------------------------------
# checkpoint format, little-endian:
#   8 bytes  magic b"RLROEPOL"
#   int64    input_dim, n_hidden, hidden sizes..., action_dim, value_dim
#   float64  mean net (W1, b1, W2, b2, W3, b3), value net (same), log_std,
#            normalizer count, mean, var

POLICY_MAGIC = b"RLROEPOL"


def save_policy(policy: PolicyParams, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    hidden = policy.mean_net.hidden
    if policy.value_net.hidden != hidden:
        raise ValueError("checkpoint format assumes equal hidden sizes")
    header = [policy.obs_dim, len(hidden), *hidden, policy.action_dim, policy.value_net.out_dim]
    norm = policy.normalizer
    floats = policy.arrays() + [np.array([norm.count]), norm.mean, norm.var]
    blob = POLICY_MAGIC + struct.pack(f"<{len(header)}q", *header)
    blob += b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in floats)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return path


def load_policy(path) -> PolicyParams:
    buf = Path(path).read_bytes()
    if buf[:8] != POLICY_MAGIC:
        raise ValueError(f"{path}: not a policy checkpoint")
    off = 8
    in_dim, n_hidden = struct.unpack_from("<2q", buf, off)
    off += 16
    rest = struct.unpack_from(f"<{n_hidden + 2}q", buf, off)
    off += 8 * (n_hidden + 2)
    hidden, action_dim, value_dim = tuple(rest[:n_hidden]), rest[-2], rest[-1]

    def take(shape):
        nonlocal off
        count = int(np.prod(shape))
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(shape)
        off += 8 * count
        return arr

    def take_net(out_dim):
        net = MlpParams.zeros(in_dim, out_dim, hidden)
        for i in range(len(net.weights)):
            net.weights[i] = take(net.weights[i].shape)
            net.biases[i] = take(net.biases[i].shape)
        return net

    mean_net = take_net(action_dim)
    value_net = take_net(value_dim)
    log_std = take((action_dim,))
    count = float(take((1,))[0])
    norm = RunningNormalizer(take((in_dim,)), take((in_dim,)), count)
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes")
    return PolicyParams(mean_net, value_net, log_std, norm)
