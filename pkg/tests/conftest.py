import numpy as np
import pytest

from gancompose import composer as cp
from gancompose import genmodel as gm
from gancompose import kernels

kernels.tune_allocator()


@pytest.fixture(scope="session")
def small_gens():
    """Reduced canvas (128 px) and inset (64 px) pair for fast tests."""
    canvas = gm.canvas_spec(seed=1, resolution=128, n_layers=12, latent_dim=8, channels=6)
    inset = gm.inset_spec(seed=2, resolution=64, n_layers=10, latent_dim=8, channels=6)
    return cp.Generators.build(canvas, [inset], n_avg=2000)


@pytest.fixture(scope="session")
def full_gens():
    return cp.Generators.build(gm.canvas_spec(), [gm.inset_spec()])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


SMALL_JOB = {
    "canvas": {"seed": 1, "resolution": 128, "n_layers": 12, "latent_dim": 8, "channels": 6},
    "insets": [{"seed": 2, "resolution": 64, "n_layers": 10, "latent_dim": 8, "channels": 6}],
    "n_avg": 500,
    "truncation": {"table": list(gm.ADAPTIVE_TRUNCATION[:12])},
    "schedule": {"max_iters": 30, "bbox_reeval_until": 25},
    "walk": {"frames_per_segment": 3, "iters_per_frame": 2, "cyclic": False},
    "eval": {"n_samples": 6, "k": 2},
}


@pytest.fixture
def small_job(tmp_path):
    """Write a fast job config and return its path."""
    import json

    path = tmp_path / "job.json"
    path.write_text(json.dumps(SMALL_JOB))
    return path


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
