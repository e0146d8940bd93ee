import pytest
from hypothesis import HealthCheck, settings

from crossfit_att import Dataset, RngStream

settings.register_profile(
    "default",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("default")

# filled by tests/test_acceptance.py, echoed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


def random_dataset(seed, n=60, d=3, p_treat=0.4, p_case=0.3):
    gen = RngStream(seed).generator()
    x = gen.uniform(-1, 1, size=(n, d))
    a = (gen.random(n) < p_treat).astype(int)
    y = (gen.random(n) < p_case).astype(float)
    return Dataset(x, a, y)


@pytest.fixture
def small_dataset():
    return random_dataset(11)
