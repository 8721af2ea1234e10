import pytest
from hypothesis import HealthCheck, settings

from mccm.descriptors import load_cnn, load_platform

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

BOARDS_BY_MEMORY = ("zc706", "vcu110", "vcu108", "zcu102")
CNNS = ("resnet152", "resnet50", "xception", "densenet121", "mobilenetv2")


@pytest.fixture(scope="session")
def resnet50():
    return load_cnn("resnet50")


@pytest.fixture(scope="session")
def xception():
    return load_cnn("xception")


@pytest.fixture(scope="session")
def mobilenetv2():
    return load_cnn("mobilenetv2")


@pytest.fixture(scope="session")
def zc706():
    return load_platform("zc706")


@pytest.fixture(scope="session")
def boards():
    return [load_platform(b) for b in BOARDS_BY_MEMORY]
