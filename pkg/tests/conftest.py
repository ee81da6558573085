import math

import numpy as np
import pytest

from conformal_sde.models import build_model

RIGID_BODY = {
    "I": [2.0, 1.0, 2.0 / 3.0],
    "Ihat": [1.0, 2.0, 3.0],
    "damping": "cosine",
    "damping_amplitude": 0.5,
    "damping_frequency": 2.0,
}
RIGID_BODY_Y0 = [math.cos(1.1), 0.0, math.sin(1.1)]
PENDULUM = {"c": 1.0, "damping": "constant", "damping_amplitude": 2.0}
PENDULUM_Y0 = [0.2, 1.0]
LOTKA_VOLTERRA = {"a": -1.0, "b": -2.0, "c": 1.0, "damping": "sine", "damping_amplitude": 1.0}
LOTKA_VOLTERRA_Y0 = [0.2, 0.4, 0.6]
MAXWELL_BLOCH = {"damping": "linear", "damping_amplitude": 1.0}
SINE_POISSON = {"c": 0.5, "damping": "constant", "damping_amplitude": 0.5}

MODEL_SETUPS = {
    "pendulum": PENDULUM,
    "rigid_body": RIGID_BODY,
    "lotka_volterra": LOTKA_VOLTERRA,
    "maxwell_bloch": MAXWELL_BLOCH,
    "sine_poisson": SINE_POISSON,
}


def model(name, **overrides):
    return build_model(name, {**MODEL_SETUPS[name], **overrides})


def domain_points(name, n, rng, radius=1.5):
    """Random admissible states for a model."""
    d = model(name).dimension
    if name == "lotka_volterra":
        return rng.uniform(0.1, 3.0, size=(n, d))
    return rng.uniform(-radius, radius, size=(n, d))


def segment_pairs(name, n, rng):
    """Endpoint pairs for discrete-gradient checks.

    States are uniform in the ball of radius 3, or in ``[0.1, 3]^3`` for the
    Lotka-Volterra orthant.
    """
    if name == "lotka_volterra":
        return rng.uniform(0.1, 3.0, (n, 3)), rng.uniform(0.1, 3.0, (n, 3))
    d = model(name).dimension

    def ball():
        x = rng.standard_normal((n, d))
        r = 3.0 * rng.uniform(0, 1, (n, 1)) ** (1 / d)
        return r * x / np.linalg.norm(x, axis=1, keepdims=True)

    return ball(), ball()


# one "criterion N: PASS/FAIL ..." line per acceptance check, echoed at the end
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=sorted(MODEL_SETUPS))
def model_name(request):
    return request.param
