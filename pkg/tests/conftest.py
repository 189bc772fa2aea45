import sys

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=100, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def corpus():
    from bear.fixtures import synthetic_corpus

    return list(synthetic_corpus())


@pytest.fixture(scope="session")
def labeled():
    from bear.fixtures import labeled_fixtures

    return labeled_fixtures()


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    verdicts = getattr(module, "VERDICTS", None)
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for line in verdicts:
            terminalreporter.write_line(line)
