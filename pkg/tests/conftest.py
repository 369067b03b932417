import numpy as np
import pytest

from rodspring import presets
from rodspring.sim import sample_dataset

# (label, passed, detail) lines recorded by the acceptance suite
CRITERIA = []


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running end-to-end checks")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for label, ok, detail in CRITERIA:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}")


@pytest.fixture
def record():
    """Record one acceptance line and echo it to stdout."""

    def _record(label, ok, detail):
        ok = bool(ok)
        CRITERIA.append((label, ok, detail))
        print(f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
        return ok

    return _record


@pytest.fixture(scope="session")
def simple_config():
    return presets.simple()


@pytest.fixture(scope="session")
def icosa_config():
    return presets.icosa_uniform()


@pytest.fixture(scope="session")
def simple_data(simple_config):
    return sample_dataset(simple_config, None, n_traj=20, n_steps=500, seed=0)


@pytest.fixture(scope="session")
def icosa_data(icosa_config):
    return sample_dataset(icosa_config, None, n_traj=8, n_steps=300, seed=0)


@pytest.fixture(scope="session")
def nonuniform_config():
    return presets.icosa_nonuniform(seed=0, sigma_frac=0.2)


@pytest.fixture(scope="session")
def nonuniform_data(nonuniform_config):
    return sample_dataset(nonuniform_config, None, n_traj=20, n_steps=500, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
