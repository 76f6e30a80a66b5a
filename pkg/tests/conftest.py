import numpy as np
import pytest

from rlroe.burgers import BurgersConfig, Dataset, generate_dataset
from rlroe.rom import build_observation_matrix, build_rom


def linear_dataset(n=50, r=5, steps=30, num_traj=3, seed=0):
    """Trajectories of z_{k+1} = A z_k with A acting inside a random r-dim subspace."""
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.standard_normal((n, r)))
    # stable small-r map with rotation, so snapshots stay well scaled
    M = rng.standard_normal((r, r))
    M = 0.97 * M / np.max(np.abs(np.linalg.eigvals(M)))
    A = basis @ M @ basis.T
    states = []
    for _ in range(num_traj):
        z = basis @ rng.standard_normal(r)
        traj = [z]
        for _ in range(steps - 1):
            z = A @ z
            traj.append(z)
        states.append(np.array(traj))
    return Dataset.from_arrays(np.linspace(0.0, 1.0, num_traj), states), A, basis


@pytest.fixture(scope="session")
def small_config():
    return BurgersConfig(grid_size=64, transient_time=2.0, num_snapshots=41)


@pytest.fixture(scope="session")
def small_dataset(small_config):
    return generate_dataset([0.0, 0.5, 1.0], small_config)


@pytest.fixture(scope="session")
def small_rom(small_dataset):
    return build_rom(small_dataset, build_observation_matrix(3, small_dataset.n), 4)
