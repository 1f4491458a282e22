import numpy as np
import pytest

from cmap_lab.numerics import RngStream


@pytest.fixture
def rng():
    return RngStream(1234, 0).generator()


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


@pytest.fixture(scope="session")
def shapes_small():
    """Small shape-image train/test split shared by module tests."""
    from cmap_lab.data import SyntheticSpec, generate, train_test_split
    return train_test_split(generate(SyntheticSpec(count=1500, seed=3)), 1200)


@pytest.fixture(scope="session")
def clf_small(shapes_small):
    from cmap_lab.classifier import ClfConfig, train_clf
    return train_clf(shapes_small[0], ClfConfig(epochs=15, hidden=(64, 64)))[0]


@pytest.fixture(scope="session")
def analytic_image_cm(shapes_small):
    """Moment-matched analytic consistency model on 16x16 images."""
    from cmap_lab.consistency import analytic_cm
    x = shapes_small[0].flat()
    mu = x.mean(axis=0)
    return analytic_cm(mu, float(np.sqrt(((x - mu) ** 2).mean())))


ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
