"""DMD reduced-order model and sparse point-sensor observation operators."""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .burgers import Dataset

__all__ = [
    "ObservationMatrix",
    "Rom",
    "RankError",
    "build_observation_matrix",
    "build_time_shifted",
    "truncated_svd",
    "build_rom",
    "save_rom",
    "load_rom",
]

RANK_TOL = 1e-10


class RankError(ValueError):
    """Requested rank exceeds the numerical rank of the snapshot matrix."""

    def __init__(self, r, singular_values):
        self.r = r
        self.singular_values = np.asarray(singular_values)
        s = self.singular_values
        head = ", ".join(f"{v:.3e}" for v in s[: max(r, 1) + 2])
        super().__init__(
            f"rank r={r} violates S_r > {RANK_TOL:g} * S_1; leading singular values: [{head}]"
        )


@dataclass(frozen=True)
class ObservationMatrix:
    """Point sensors: y = z[sensor_indices]."""

    sensor_indices: tuple[int, ...]
    n: int

    def __post_init__(self):
        idx = tuple(int(i) for i in self.sensor_indices)
        object.__setattr__(self, "sensor_indices", idx)
        if not idx:
            raise ValueError("need at least one sensor")
        if len(set(idx)) != len(idx):
            raise ValueError(f"duplicate sensor indices: {idx}")
        if any(i < 0 or i >= self.n for i in idx):
            raise ValueError(f"sensor index out of range [0, {self.n}): {idx}")
        if list(idx) != sorted(idx):
            raise ValueError("sensor indices must be strictly increasing")

    @property
    def p(self) -> int:
        return len(self.sensor_indices)

    def dense(self) -> np.ndarray:
        C = np.zeros((self.p, self.n))
        C[np.arange(self.p), list(self.sensor_indices)] = 1.0
        return C

    def apply(self, z):
        return np.asarray(z)[..., list(self.sensor_indices)]


def build_observation_matrix(p: int, n: int, placement="equally_spaced") -> ObservationMatrix:
    """Sensors at ``floor(j n / p)`` or at an explicit list of grid indices."""
    if not 1 <= p <= n:
        raise ValueError(f"need 1 <= p <= n, got p={p}, n={n}")
    if isinstance(placement, str):
        if placement != "equally_spaced":
            raise ValueError(f"unknown placement {placement!r}")
        idx = [(j * n) // p for j in range(p)]
    else:
        idx = [int(i) for i in placement]
        if len(idx) != p:
            raise ValueError(f"explicit placement has {len(idx)} indices, expected {p}")
        if len(set(idx)) != p:
            raise ValueError(f"duplicate sensor indices: {idx}")
        idx = sorted(idx)
    return ObservationMatrix(tuple(idx), n)


def build_time_shifted(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Stack snapshot pairs (z_k, z_{k+1}) from every trajectory as columns."""
    ns = {t.n for t in dataset.trajectories}
    if len(ns) != 1:
        raise ValueError(f"inconsistent state dimension across trajectories: {sorted(ns)}")
    if any(t.num_snapshots < 2 for t in dataset.trajectories):
        raise ValueError("each trajectory needs at least 2 snapshots")
    X = np.concatenate([t.states[:-1] for t in dataset.trajectories], axis=0).T
    Y = np.concatenate([t.states[1:] for t in dataset.trajectories], axis=0).T
    return np.ascontiguousarray(X), np.ascontiguousarray(Y)


def truncated_svd(X, r: int):
    """Rank-``r`` SVD ``X ~ U diag(S) V^T``.

    Signs are fixed so the largest-magnitude entry of each column of U is
    positive.  Returns ``(U, S, V)`` with V of shape (M, r).
    """
    X = np.asarray(X, dtype=np.float64)
    if not 1 <= r <= min(X.shape):
        raise ValueError(f"need 1 <= r <= min{X.shape}, got r={r}")
    if not np.all(np.isfinite(X)):
        raise ValueError("X has non-finite entries")
    U, S, Vt = np.linalg.svd(X, full_matrices=False)
    U, S, V = U[:, :r], S[:r], Vt[:r].T
    pivot = np.argmax(np.abs(U), axis=0)
    sign = np.sign(U[pivot, np.arange(r)])
    sign[sign == 0] = 1.0
    U = U * sign
    V = V * sign
    if S[0] > 0 and S[-1] <= RANK_TOL * S[0]:
        warnings.warn(
            f"trailing singular values below {RANK_TOL:g} * S_1 (S_r/S_1 = {S[-1] / S[0]:.2e})",
            RuntimeWarning,
            stacklevel=2,
        )
    return U, S, V


@dataclass(frozen=True)
class Rom:
    U: np.ndarray  # (n, r), orthonormal columns
    A_r: np.ndarray  # (r, r)
    C_r: np.ndarray  # (p, r)
    singular_values: np.ndarray  # (r,)
    sensor_indices: tuple[int, ...]

    @property
    def n(self) -> int:
        return self.U.shape[0]

    @property
    def r(self) -> int:
        return self.U.shape[1]

    @property
    def p(self) -> int:
        return self.C_r.shape[0]

    @property
    def observation(self) -> ObservationMatrix:
        return ObservationMatrix(self.sensor_indices, self.n)

    def project(self, z):
        return np.asarray(z) @ self.U

    def with_sensors(self, obs: ObservationMatrix) -> "Rom":
        """Same basis and dynamics, different sensor layout."""
        return Rom(self.U, self.A_r, self.U[list(obs.sensor_indices)].copy(), self.singular_values, obs.sensor_indices)


def build_rom(dataset: Dataset, obs: ObservationMatrix, r: int) -> Rom:
    """DMD projected onto the leading ``r`` left singular vectors of X.

    A_r = U^T Y V S^-1 and C_r = C U; the n x n operator is never formed.
    """
    if obs.n != dataset.n:
        raise ValueError(f"observation operator is for n={obs.n}, dataset has n={dataset.n}")
    X, Y = build_time_shifted(dataset)
    if not 1 <= r <= min(X.shape):
        raise ValueError(f"need 1 <= r <= {min(X.shape)}, got r={r}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        U, S, V = truncated_svd(X, r)
    if not S[-1] > RANK_TOL * S[0]:
        raise RankError(r, S)
    A_r = (U.T @ Y @ V) / S
    C_r = U[list(obs.sensor_indices)].copy()
    return Rom(U=U, A_r=A_r, C_r=C_r, singular_values=S, sensor_indices=obs.sensor_indices)


# ---------------------------------------------------------------------------
# file format, all little-endian:
#   8 bytes   magic b"RLROEROM"
#   3 x int64 n, r, p
#   p x int64 sensor indices
#   float64   U (n*r), A_r (r*r), C_r (p*r), singular_values (r); row-major

ROM_MAGIC = b"RLROEROM"


def save_rom(rom: Rom, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    parts = [
        ROM_MAGIC,
        struct.pack("<3q", rom.n, rom.r, rom.p),
        struct.pack(f"<{rom.p}q", *rom.sensor_indices),
    ]
    for arr in (rom.U, rom.A_r, rom.C_r, rom.singular_values):
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)
    return path


def load_rom(path) -> Rom:
    buf = Path(path).read_bytes()
    if buf[:8] != ROM_MAGIC:
        raise ValueError(f"{path}: not a ROM file")
    n, r, p = struct.unpack_from("<3q", buf, 8)
    off = 8 + 24
    idx = struct.unpack_from(f"<{p}q", buf, off)
    off += 8 * p

    def take(count, shape):
        nonlocal off
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(shape)
        off += 8 * count
        return arr

    U = take(n * r, (n, r))
    A_r = take(r * r, (r, r))
    C_r = take(p * r, (p, r))
    S = take(r, (r,))
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes")
    return Rom(U=U, A_r=A_r, C_r=C_r, singular_values=S, sensor_indices=tuple(idx))

