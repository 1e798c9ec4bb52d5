import numpy as np
import pytest
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from vprcalib.geometry import Pose


def random_pose(rng, max_angle=3.0, scale=5.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    R = Rotation.from_rotvec(axis * angle).as_matrix()
    return Pose.from_rt(R, rng.uniform(-scale, scale, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


seeds = st.integers(min_value=0, max_value=2**32 - 1)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
