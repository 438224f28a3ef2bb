import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from noisec import models

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def tiny_classifier():
    """Untrained 3x8x8 classifier; gradients are all the attack contracts need."""
    return models.build_classifier((3, 8, 8), 4, feature_dim=16, seed=3, channels=(4, 8), strides=(1, 2))


@pytest.fixture(scope="session")
def tiny_autoencoder():
    return models.build_autoencoder((3, 8, 8), bottleneck=32, channels=(4, 4, 8), seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_task():
    """A quickly trained 3x8x8 classifier with its (train, test) data."""
    from noisec import data

    train, test = data.generate_synthetic(data.SyntheticSpec(num_samples=600, image_size=8, seed=11))
    clf = models.build_classifier((3, 8, 8), 4, feature_dim=16, seed=2, channels=(8, 16), strides=(1, 2))
    models.train_classifier(clf, train, models.TrainConfig(epochs=8, batch_size=16, lr=0.05, seed=2))
    return clf, train, test


# criterion number -> list of (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, list[tuple[bool, str]]] = {}


@pytest.fixture
def criterion():
    def record(number: int, passed: bool, detail: str) -> bool:
        ACCEPTANCE.setdefault(number, []).append((bool(passed), detail))
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[number]
        verdict = "PASS" if all(ok for ok, _ in parts) else "FAIL"
        details = "; ".join(detail for _, detail in parts)
        terminalreporter.write_line(f"criterion {number:2d}: {verdict}  {details}")
