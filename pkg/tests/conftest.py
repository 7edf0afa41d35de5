import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from bitfuzz.device import fixtures_dir, load_device  # noqa: E402

FIX = fixtures_dir()

# shared CI boxes are noisy; correctness, not per-example latency, is under test
settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def fix():
    return FIX


@pytest.fixture
def default_device():
    return load_device("default")


@pytest.fixture
def open_device():
    return load_device("open")


@pytest.fixture
def nokey_device():
    return load_device("nokey")


def spec_path(name):
    return FIX / "fuzzers" / f"{name}.json"


def template_path(name):
    return FIX / "templates" / f"{name}.json"


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
