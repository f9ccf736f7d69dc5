import os
import sys

import pytest

# Ensure repository root is on sys.path so tests can import project modules
ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from chaos_kernel import normalization_constant  # noqa: E402
from spectral import build_line_grid, chaos_matrices, chaos_matrix  # noqa: E402
from chaos_kernel import TimePartition  # noqa: E402


@pytest.fixture(scope="session")
def ctx75():
    return normalization_constant(0.75)


@pytest.fixture(scope="session")
def line_grid(ctx75):
    return build_line_grid(ctx75, [1.0], n=128)


@pytest.fixture(scope="session")
def matrix_1(ctx75, line_grid):
    return chaos_matrix(ctx75, 1.0, line_grid)


@pytest.fixture(scope="session")
def matrices_12(ctx75):
    partition = TimePartition.from_positive([1.0, 2.0])
    grid = build_line_grid(ctx75, partition, n=128)
    return chaos_matrices(ctx75, partition, grid)


@pytest.fixture
def small_config(tmp_path):
    """RunConfig small enough for end-to-end pipeline tests."""
    from config import RunConfig

    return RunConfig.model_validate({
        "H": 0.75,
        "times": [1.0],
        "grid": {"n": 64, "operator_n": 32},
        "sampling": {"n_samples": 1500, "seed": 11, "block_size": 512},
        "spectrum": {"rank_sizes": [16, 32]},
        "density": {"grid_len": 201, "method": "both"},
        "malliavin": {"n_samples": 300, "n_boot": 20},
        "out_dir": str(tmp_path / "run"),
        "threads": 1,
    })
