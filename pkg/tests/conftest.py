import numpy as np
import pytest
import torch

torch.set_num_threads(1)


def smooth_image(h=32, w=32, seed=0):
    """Low-frequency RGB test image in [0, 1]."""
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:h, 0:w] / max(h, w)
    out = np.zeros((h, w, 3))
    for c in range(3):
        for _ in range(3):
            fx, fy, ph = rng.uniform(0.5, 2.5), rng.uniform(0.5, 2.5), rng.uniform(0, 2 * np.pi)
            out[..., c] += np.sin(2 * np.pi * (fx * x + fy * y) + ph)
    out -= out.min()
    return out / out.max()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def smooth():
    return smooth_image


AFFINE_ITERS = 2000


@pytest.fixture(scope="session")
def texture_images():
    from metastab.data import texture_corpus

    return texture_corpus(64, size=96, seed=0)


@pytest.fixture(scope="session")
def trained_affine(texture_images):
    """Affine estimator trained once per session on 64x64 synthetic pairs."""
    from metastab.affine import AffineEstimator

    return AffineEstimator(patch_size=64, iters=AFFINE_ITERS, seed=0).fit(texture_images)


# ------------------------------------------------------------- acceptance
ACCEPTANCE_LINES: dict = {}


def emit_criterion(number: int, name: str, ok: bool, detail: str):
    line = f"CRITERION {number:>2} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
