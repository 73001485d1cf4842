"""Shared fixtures for the test suite."""

from __future__ import annotations

import math
import os

# one BLAS thread so repeated runs are bitwise reproducible
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402
from hypothesis import HealthCheck, settings  # noqa: E402

from torus_macrospec.metric_field import make_metric  # noqa: E402

settings.register_profile(
    "default",
    max_examples=25,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")

# one summary line per acceptance criterion, filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])


CONFORMAL_FACTOR = {"const": 1.0, "terms": [{"coef": 0.5, "k": [1, 1], "funcs": ["sin", "sin"]}]}
LAMINATE_LOG = {"terms": [{"coef": 1.0, "k": [1], "funcs": ["sin"]}]}


def conformal_spec():
    return {"family": "conformal", "factor": CONFORMAL_FACTOR}


def laminate_spec(axis: int = 1):
    return {"family": "laminate", "axis": axis, "log_profile": LAMINATE_LOG}


def conformal_factor(y):
    y = np.asarray(y, dtype=float)
    return 1.0 + 0.5 * np.sin(2 * math.pi * y[..., 0]) * np.sin(2 * math.pi * y[..., 1])


@pytest.fixture(scope="session")
def flat_identity():
    return make_metric({"family": "flat"}, 32)


@pytest.fixture(scope="session")
def conformal128():
    return make_metric(conformal_spec(), 128)


@pytest.fixture(scope="session")
def laminate128():
    return make_metric(laminate_spec(), 128)
