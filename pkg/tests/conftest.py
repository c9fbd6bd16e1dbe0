import numpy as np
import pytest

from ssc import fem_core as fc


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def line64():
    return fc.build_interval_mesh(64)


@pytest.fixture
def square8():
    return fc.build_square_mesh(8)


def smooth_load(mesh):
    X = mesh.vertices
    vals = np.cos(np.pi * X[:, 0])
    if mesh.dim == 2:
        vals = vals + np.cos(np.pi * X[:, 1])
    return fc.make_compatible(fc.load_of(fc.FeFunction(mesh, vals)))


def sine_start(mesh):
    X = mesh.vertices
    vals = np.sin(2 * np.pi * X[:, 0])
    if mesh.dim == 2:
        vals = vals * np.cos(np.pi * X[:, 1])
    return fc.FeFunction(mesh, vals)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
