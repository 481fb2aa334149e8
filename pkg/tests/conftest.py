import pytest

from apesim.calibration import default_lofamo, default_platform, load_calibration


@pytest.fixture(scope="session")
def cal():
    return load_calibration()


@pytest.fixture(scope="session")
def platform(cal):
    return default_platform(cal)


@pytest.fixture(scope="session")
def lofamo_cfg(cal):
    return default_lofamo(cal)
