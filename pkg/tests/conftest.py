from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from radarodo.geom import Pose, Quat

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

# acceptance lines collected by tests/test_acceptance.py and echoed in the summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_quat(rng: np.random.Generator) -> Quat:
    return Quat.from_array(rng.normal(size=4))


def random_pose(rng: np.random.Generator, scale: float = 5.0, t: float = 0.0) -> Pose:
    return Pose(t, rng.normal(scale=scale, size=3), random_quat(rng))


finite = st.floats(min_value=-10.0, max_value=10.0, allow_nan=False, allow_infinity=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)
quats = (
    st.tuples(finite, finite, finite, finite)
    .filter(lambda q: np.linalg.norm(q) > 1e-3)
    .map(Quat.from_array)
)
poses = st.builds(lambda t, q: Pose(0.0, t, q), vec3, quats)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)

