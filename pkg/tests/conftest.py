import numpy as np
import pytest
from hypothesis import settings

from dnlab.geometry import MetricField, build_annulus, build_disk, build_disk_with_inclusion

settings.register_profile("dnlab", deadline=None, max_examples=25, derandomize=True)
settings.load_profile("dnlab")


@pytest.fixture(scope="session")
def disk32():
    return build_disk(1.0, 32)


@pytest.fixture(scope="session")
def disk64():
    return build_disk(1.0, 64)


@pytest.fixture(scope="session")
def core_disk32():
    return build_disk(1.0, 32, sigma1_radius=0.5)


@pytest.fixture(scope="session")
def inclusion32():
    return build_disk_with_inclusion(1.0, (0.2, 0.0), 0.25, 32)


@pytest.fixture(scope="session")
def inclusion64():
    return build_disk_with_inclusion(1.0, (0.2, 0.0), 0.25, 64)


@pytest.fixture(scope="session")
def annulus64():
    return build_annulus(0.5, 1.0, 64)


def euclid(mesh):
    return MetricField.euclidean(mesh.n_triangles)


def theta_of(mesh, loop="outer"):
    xy = mesh.nodes[mesh.loop(loop)]
    return np.arctan2(xy[:, 1], xy[:, 0])


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
