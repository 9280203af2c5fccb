import numpy as np
import pytest

from splatreg.coarse import CoarseProblem
from splatreg.model import GaussianMap
from splatreg.rotations import random_quat

# Lines collected by the acceptance module, echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_map(rng, n=50, dim=8, n_rest=6, label="m") -> GaussianMap:
    return GaussianMap(
        means=rng.normal(size=(n, 3)) * 3.0,
        quats=random_quat(rng, n),
        scales=np.exp(rng.uniform(-3, 0, size=(n, 3))),
        opacities=rng.uniform(0.01, 0.99, size=n),
        sh_dc=rng.normal(size=(n, 3)),
        sh_rest=rng.normal(size=(n, n_rest)),
        embeddings=rng.normal(size=(n, dim)) if dim else None,
        frame_label=label,
    )


def random_coarse_problem(rng, n=30, noise=0.05, covariance=True, zero_weights=0) -> CoarseProblem:
    """Noisy correspondences under a random similarity, with random weights."""
    from splatreg.synth import random_similarity

    T = random_similarity(rng, translation_scale=5.0)
    R = T.rotation_matrix
    p = rng.normal(size=(n, 3)) * 2.0
    q = T.scale * p @ R.T + T.translation + rng.normal(scale=noise, size=(n, 3))
    w = rng.uniform(0.1, 1.0, size=n)
    if zero_weights:
        w[rng.choice(n, size=zero_weights, replace=False)] = 0.0
    if not covariance:
        return CoarseProblem(p, q, w)
    hp = np.stack([np.linalg.qr(rng.normal(size=(3, 3)))[0] for _ in range(n)]) * rng.uniform(0.05, 0.3, (n, 1, 3))
    hq = T.scale * np.einsum("ab,nbc->nac", R, hp) + rng.normal(scale=noise * 0.1, size=(n, 3, 3))
    return CoarseProblem(p, q, w, hp, hq)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
