import pytest

from isorec.schedule import linear_schedule


@pytest.fixture(scope="session")
def schedule1000():
    return linear_schedule(1000)


@pytest.fixture(scope="session")
def schedule50():
    """Small schedule for chain tests that walk every step."""
    return linear_schedule(50, 0.004, 0.05)
