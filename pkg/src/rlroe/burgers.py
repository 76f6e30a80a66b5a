"""Pseudospectral solver for the forced, periodic Burgers equation.

    u_t + u u_x - nu u_xx = f(x, t)
    f(x, t) = 2 sin(w t - k x) + 2 sin(3 w t - k x) + 2 sin(5 w t - k x),  k = 2 pi / L

Viscosity and forcing frequency are tied to a scalar parameter ``mu`` in [0, 1]
by linear interpolation.  Trajectories start from rest, are integrated through a
transient, and then sampled every ``snapshot_dt``.

Time stepping uses the Dormand-Prince fifth-order tableau with a fixed step.
The generic :func:`rk5_step` works on any right-hand side; the production
integrator applies the same tableau in Fourier space with the diffusion term
handled by an integrating factor, since explicit diffusion at ``nu = 0.1`` and
``n = 256`` would need steps two orders of magnitude below ``snapshot_dt / 10``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "BurgersConfig",
    "Trajectory",
    "Dataset",
    "BlowUpError",
    "map_mu_to_physical",
    "forcing",
    "spectral_rhs",
    "rk5_step",
    "integrate",
    "generate_dataset",
    "save_dataset",
    "load_dataset",
]


class BlowUpError(RuntimeError):
    """Raised when the solution stops being finite."""

    def __init__(self, mu, time):
        self.mu = mu
        self.time = time
        super().__init__(f"non-finite solution for mu={mu} at t={time:.6g}")


@dataclass(frozen=True)
class BurgersConfig:
    domain_length: float = 1.0
    grid_size: int = 256
    nu1: float = 0.01
    nu2: float = 0.1
    omega1: float = 0.2 * math.pi
    omega2: float = 0.4 * math.pi
    snapshot_dt: float = 0.05
    integrator_dt: float = 0.005
    transient_time: float = 50.0
    num_snapshots: int = 201

    def __post_init__(self):
        if not self.domain_length > 0:
            raise ValueError("domain_length must be positive")
        n = self.grid_size
        if n < 8 or n & (n - 1):
            raise ValueError(f"grid_size must be a power of two >= 8, got {n}")
        if not 0 < self.nu1 <= self.nu2:
            raise ValueError("need 0 < nu1 <= nu2")
        if self.num_snapshots < 2:
            raise ValueError("num_snapshots must be >= 2")
        if self.transient_time < 0:
            raise ValueError("transient_time must be non-negative")
        if not 0 < self.integrator_dt <= self.snapshot_dt:
            raise ValueError("need 0 < integrator_dt <= snapshot_dt")
        ratio = self.snapshot_dt / self.integrator_dt
        if abs(ratio - round(ratio)) > 1e-9 * ratio:
            raise ValueError("integrator_dt must divide snapshot_dt")

    @property
    def substeps(self) -> int:
        return int(round(self.snapshot_dt / self.integrator_dt))

    @property
    def wavenumber(self) -> float:
        return 2.0 * math.pi / self.domain_length

    @property
    def grid(self) -> np.ndarray:
        # periodic grid, x = L is the same point as x = 0 and is excluded
        return np.arange(self.grid_size) * (self.domain_length / self.grid_size)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BurgersConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class Trajectory:
    mu: float
    states: np.ndarray  # (num_snapshots, n), row k is z_k

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim != 2:
            raise ValueError("states must be a 2-D (time, space) array")
        if not np.all(np.isfinite(self.states)):
            raise ValueError(f"trajectory for mu={self.mu} has non-finite entries")

    @property
    def num_snapshots(self) -> int:
        return self.states.shape[0]

    @property
    def n(self) -> int:
        return self.states.shape[1]


@dataclass
class Dataset:
    """Post-transient trajectories, one per parameter value.

    ``config`` is ``None`` for snapshots produced outside this package.
    """

    trajectories: list[Trajectory]
    config: BurgersConfig | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.trajectories:
            raise ValueError("dataset needs at least one trajectory")
        mus = [t.mu for t in self.trajectories]
        if any(b <= a for a, b in zip(mus, mus[1:])):
            raise ValueError("mu values must be strictly increasing")
        shapes = {t.states.shape for t in self.trajectories}
        if len(shapes) != 1:
            raise ValueError(f"trajectories disagree in shape: {sorted(shapes)}")

    @classmethod
    def from_arrays(cls, mus: Sequence[float], states: Sequence[np.ndarray], **kwargs) -> "Dataset":
        """Wrap raw (time, space) arrays, e.g. snapshots from another solver."""
        return cls([Trajectory(float(m), z) for m, z in zip(mus, states)], **kwargs)

    @property
    def mus(self) -> list[float]:
        return [t.mu for t in self.trajectories]

    @property
    def n(self) -> int:
        return self.trajectories[0].n

    @property
    def num_snapshots(self) -> int:
        return self.trajectories[0].num_snapshots

    def __len__(self):
        return len(self.trajectories)


def map_mu_to_physical(mu: float, config: BurgersConfig) -> tuple[float, float]:
    """Return ``(nu, omega)`` for parameter ``mu``; extrapolation is allowed."""
    nu = config.nu1 + (config.nu2 - config.nu1) * mu
    omega = config.omega1 + (config.omega2 - config.omega1) * mu
    return nu, omega


def forcing(x, t, omega, k):
    phase = omega * t
    return 2.0 * (np.sin(phase - k * x) + np.sin(3 * phase - k * x) + np.sin(5 * phase - k * x))


class _Spectral:
    """Wavenumbers and dealiasing mask for a real periodic grid."""

    def __init__(self, config: BurgersConfig):
        n = config.grid_size
        self.n = n
        self.x = config.grid
        self.k = config.wavenumber * np.arange(n // 2 + 1)
        # 2/3 rule: keep |m| < n/3
        self.keep = np.arange(n // 2 + 1) < n / 3.0
        self.ik = 1j * self.k
        self.ik_keep = self.ik * self.keep
        self.k2 = self.k**2

    def nonlinear(self, u_hat):
        """Fourier coefficients of ``-u u_x`` with 2/3 dealiasing."""
        u = np.fft.irfft(u_hat * self.keep, self.n, axis=-1)
        return -0.5 * self.ik_keep * np.fft.rfft(u * u, axis=-1)


def spectral_rhs(state, t, nu, omega, config: BurgersConfig, forced: bool = True):
    """Physical-space time derivative of the Burgers equation."""
    sp = _Spectral(config)
    u_hat = np.fft.rfft(np.asarray(state, dtype=np.float64), axis=-1)
    rhs_hat = sp.nonlinear(u_hat) - nu * sp.k2 * u_hat
    out = np.fft.irfft(rhs_hat, sp.n, axis=-1)
    if forced:
        out = out + forcing(sp.x, t, omega, config.wavenumber)
    if not np.all(np.isfinite(out)):
        raise BlowUpError(mu=None, time=t)
    return out


# Dormand-Prince 5(4), fifth-order weights
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0])
_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
)
_DP_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])


def rk5_step(state, t, dt, rhs_fn: Callable):
    """One fixed Dormand-Prince step of ``y' = rhs_fn(y, t)``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    y = np.asarray(state, dtype=np.float64)
    stages = []
    for c, row in zip(_DP_C, _DP_A):
        yi = y
        for a, kj in zip(row, stages):
            yi = yi + dt * a * kj
        stages.append(rhs_fn(yi, t + c * dt))
    out = y
    for b, kj in zip(_DP_B, stages):
        if b:
            out = out + dt * b * kj
    return out


class _IFStepper:
    """Dormand-Prince applied to exp(nu k^2 t) u_hat (Lawson integrating factor).

    Works on a batch of parameter values at once; ``nu`` and ``omega`` are
    arrays of shape (batch, 1).
    """

    def __init__(self, config: BurgersConfig, nu, omega):
        self.sp = _Spectral(config)
        self.dt = config.integrator_dt
        self.omega = np.asarray(omega, dtype=np.float64).reshape(-1, 1)
        nu = np.asarray(nu, dtype=np.float64).reshape(-1, 1)
        lin = -nu * self.sp.k2
        dt = self.dt
        c = _DP_C
        # all exponents are non-positive since c is non-decreasing
        self.e_stage = [np.exp(lin * ci * dt) for ci in c]
        self.e_couple = [[np.exp(lin * (c[i] - c[j]) * dt) for j in range(i)] for i in range(6)]
        self.e_final = [np.exp(lin * (1.0 - cj) * dt) for cj in c]
        kx = config.wavenumber * self.sp.x
        # forcing = Im[exp(i (m w t)) exp(-i k x)] summed over m = 1, 3, 5
        self.f_spatial = np.fft.rfft(np.exp(-1j * kx).real), np.fft.rfft(np.exp(-1j * kx).imag)

    def _forcing_hat(self, t):
        ph = self.omega * t
        cos_hat, sin_hat = self.f_spatial
        # sin(a - kx) = sin a cos kx - cos a sin kx ; exp(-ikx).imag = -sin kx
        s = np.sin(ph) + np.sin(3 * ph) + np.sin(5 * ph)
        co = np.cos(ph) + np.cos(3 * ph) + np.cos(5 * ph)
        return 2.0 * (s * cos_hat + co * sin_hat)

    def _n(self, u_hat, t):
        return self.sp.nonlinear(u_hat) + self._forcing_hat(t)

    def step(self, u_hat, t):
        dt = self.dt
        stages = []
        for i in range(6):
            v = self.e_stage[i] * u_hat
            for j, a in enumerate(_DP_A[i]):
                v = v + (dt * a) * self.e_couple[i][j] * stages[j]
            stages.append(self._n(v, t + _DP_C[i] * dt))
        out = self.e_stage[5] * u_hat
        for j, b in enumerate(_DP_B):
            if b:
                out = out + (dt * b) * self.e_final[j] * stages[j]
        return out


def _check_finite(u_hat, mus, t):
    bad = ~np.all(np.isfinite(u_hat), axis=-1)
    if np.any(bad):
        raise BlowUpError(mu=float(np.asarray(mus)[np.argmax(bad)]), time=t)


@np.errstate(over="ignore", invalid="ignore")
def integrate(state, t0: float, duration: float, mu, config: BurgersConfig):
    """Advance physical-space ``state`` (shape (n,) or (batch, n)) by ``duration``.

    ``duration`` must be a whole number of integrator steps.
    """
    state = np.asarray(state, dtype=np.float64)
    squeeze = state.ndim == 1
    state = np.atleast_2d(state)
    mus = np.broadcast_to(np.asarray(mu, dtype=np.float64), (state.shape[0],))
    nu, omega = map_mu_to_physical(mus, config)
    stepper = _IFStepper(config, nu, omega)
    nsteps = duration / config.integrator_dt
    if abs(nsteps - round(nsteps)) > 1e-9 * max(nsteps, 1.0):
        raise ValueError("duration must be a multiple of integrator_dt")
    u_hat = np.fft.rfft(state, axis=-1)
    t = t0
    for i in range(int(round(nsteps))):
        u_hat = stepper.step(u_hat, t)
        t = t0 + (i + 1) * config.integrator_dt
    _check_finite(u_hat, mus, t)
    out = np.fft.irfft(u_hat, config.grid_size, axis=-1)
    return out[0] if squeeze else out


@np.errstate(over="ignore", invalid="ignore")
def generate_dataset(mu_values: Sequence[float], config: BurgersConfig | None = None, seed: int = 0) -> Dataset:
    """Simulate one post-transient trajectory per ``mu``.

    The simulation is deterministic; ``seed`` is only recorded in the metadata.
    All parameter values are integrated together as a batch.
    """
    config = config or BurgersConfig()
    mus = np.asarray(list(mu_values), dtype=np.float64)
    if mus.size == 0:
        raise ValueError("mu_values must be nonempty")
    if np.any(np.diff(mus) <= 0):
        raise ValueError("mu_values must be strictly increasing")
    nu, omega = map_mu_to_physical(mus, config)
    stepper = _IFStepper(config, nu, omega)
    dt = config.integrator_dt
    u_hat = np.zeros((mus.size, config.grid_size // 2 + 1), dtype=np.complex128)

    step_count = 0
    n_transient = int(round(config.transient_time / dt))
    for _ in range(n_transient):
        u_hat = stepper.step(u_hat, step_count * dt)
        step_count += 1
        if step_count % 1000 == 0:
            _check_finite(u_hat, mus, step_count * dt)

    out = np.empty((mus.size, config.num_snapshots, config.grid_size))
    for s in range(config.num_snapshots):
        _check_finite(u_hat, mus, step_count * dt)
        out[:, s] = np.fft.irfft(u_hat, config.grid_size, axis=-1)
        if s == config.num_snapshots - 1:
            break
        for _ in range(config.substeps):
            u_hat = stepper.step(u_hat, step_count * dt)
            step_count += 1

    trajectories = [Trajectory(mu=float(m), states=out[i]) for i, m in enumerate(mus)]
    return Dataset(trajectories=trajectories, config=config, metadata={"seed": seed})


# ---------------------------------------------------------------------------
# on-disk format
#
# <dir>/manifest.json
#   {"n": int, "snapshot_dt": float, "num_snapshots": int,
#    "entries": [{"mu": float, "file": "traj_000.bin"}, ...],
#    "config": {...} | null, "metadata": {...}}
# each trajectory file: num_snapshots * n float64 little-endian, row-major,
# row k = snapshot k.  No header.

MANIFEST = "manifest.json"


def save_dataset(dataset: Dataset, out_dir, force: bool = False) -> Path:
    out_dir = Path(out_dir)
    manifest_path = out_dir / MANIFEST
    if manifest_path.exists() and not force:
        raise FileExistsError(f"{manifest_path} exists (use force to overwrite)")
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, traj in enumerate(dataset.trajectories):
        name = f"traj_{i:03d}.bin"
        tmp = out_dir / (name + ".tmp")
        tmp.write_bytes(np.ascontiguousarray(traj.states, dtype="<f8").tobytes())
        os.replace(tmp, out_dir / name)
        entries.append({"mu": traj.mu, "file": name})
    snapshot_dt = dataset.config.snapshot_dt if dataset.config else dataset.metadata.get("snapshot_dt")
    manifest = {
        "n": dataset.n,
        "snapshot_dt": snapshot_dt,
        "num_snapshots": dataset.num_snapshots,
        "entries": entries,
        "config": dataset.config.to_dict() if dataset.config else None,
        "metadata": dataset.metadata,
    }
    tmp = manifest_path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    os.replace(tmp, manifest_path)
    return manifest_path


def load_dataset(path) -> Dataset:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    manifest = json.loads(path.read_text())
    n, m = int(manifest["n"]), int(manifest["num_snapshots"])
    trajectories = []
    for entry in manifest["entries"]:
        raw = np.fromfile(path.parent / entry["file"], dtype="<f8")
        if raw.size != n * m:
            raise ValueError(f"{entry['file']}: expected {n * m} values, found {raw.size}")
        trajectories.append(Trajectory(mu=float(entry["mu"]), states=raw.reshape(m, n).astype(np.float64)))
    cfg = manifest.get("config")
    metadata = dict(manifest.get("metadata") or {})
    if manifest.get("snapshot_dt") is not None:
        metadata.setdefault("snapshot_dt", manifest["snapshot_dt"])
    return Dataset(
        trajectories=trajectories,
        config=BurgersConfig.from_dict(cfg) if cfg else None,
        metadata=metadata,
    )
