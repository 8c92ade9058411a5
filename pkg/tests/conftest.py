import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from phenoflow.data import SyntheticConfig, generate_synthetic_dataset

settings.register_profile(
    "phenoflow", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("phenoflow")


@pytest.fixture(scope="session")
def small_dataset():
    return generate_synthetic_dataset(SyntheticConfig(n_plots=10, years=(2014, 2016), seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def report(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        request.config.acceptance_lines.append(line)
        assert ok, line

    return report
