import numpy as np
import pytest

from magchan.periodic import FieldConfig, PeriodicFunction

SIN = PeriodicFunction(0.0, (), (1.0,))


def sin_field() -> FieldConfig:
    return FieldConfig(SIN, PeriodicFunction(), "sin")


def const_field(c: float = -1.0) -> FieldConfig:
    return FieldConfig(PeriodicFunction(c), PeriodicFunction(), f"const({c})")


def random_field(rng: np.random.Generator, modes: int = 2, v_scale: float = 0.3, zero_flux: bool = False,
                 b_const: float = 0.0) -> FieldConfig:
    """A smooth field with a few random harmonics; b always has zeros when b_const is 0."""
    bc = rng.normal(size=modes) / np.arange(1, modes + 1)
    bs = rng.normal(size=modes) / np.arange(1, modes + 1)
    vc = v_scale * rng.normal(size=modes) / np.arange(1, modes + 1) ** 2
    vs = v_scale * rng.normal(size=modes) / np.arange(1, modes + 1) ** 2
    c0 = 0.0 if zero_flux else b_const
    return FieldConfig(PeriodicFunction(c0, bc, bs), PeriodicFunction(0.0, vc, vs), "random")


# one line per acceptance criterion, printed at the end of the session
_ACCEPTANCE = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("acceptance")
    if marker is None or call.when != "call":
        return
    n, title = marker.args
    _ACCEPTANCE[n] = (title, "PASS" if call.excinfo is None else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        title, status = _ACCEPTANCE[n]
        terminalreporter.write_line(f"AC{n:<2d} {status}  {title}")


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, title): acceptance criterion n")
    config.addinivalue_line("markers", "slow: takes more than a few seconds")


@pytest.fixture
def rng():
    return np.random.default_rng(20261016)
