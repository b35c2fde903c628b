import numpy as np
import pytest

from fedsim.data import DomainShiftSpec, generate_federation
from fedsim.numerics import MlpConfig, MlpModel, init_model, loss_and_grad, unflatten

ACCEPTANCE_LINES: list[str] = []


def central_differences(w, config, x, y, eps=1e-5):
    """Independent oracle: loss re-evaluated at w +/- eps along every axis."""
    num = np.zeros_like(w)
    for i in range(w.size):
        step = np.zeros_like(w)
        step[i] = eps
        up, _ = loss_and_grad(unflatten(w + step, config), x, y, training=False)
        down, _ = loss_and_grad(unflatten(w - step, config), x, y, training=False)
        num[i] = (up - down) / (2 * eps)
    return num


def random_model(config, rng):
    """Glorot weights plus small random biases, so no pre-activation sits exactly on a ReLU kink."""
    base = init_model(config)
    return MlpModel(config, base.weights, [rng.normal(0.0, 0.1, b.shape) for b in base.biases])


def max_relative_error(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-8)))


@pytest.fixture
def small_fed():
    spec = DomainShiftSpec(num_clients=4, num_classes=3, feature_dim=6, samples_per_client=40,
                           shift_scale=0.5, label_skew=0.0, seed=11)
    return generate_federation(spec)


@pytest.fixture
def small_model(small_fed):
    return MlpConfig(small_fed.feature_dim, (5,), small_fed.num_classes, 0.0, seed=5)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
