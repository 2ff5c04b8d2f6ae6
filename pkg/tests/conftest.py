import pytest

from app.core.constructive import build_family_learner, build_single_learner
from app.core.numeric import RngStream
from app.core.sequences import BINARY, Constant
from app.core.transformer import build_random_model


@pytest.fixture(scope="session")
def single_zero():
    """Single learner de 0^omega com eta = 0.1"""
    return build_single_learner(Constant("0"), eta=0.1)


@pytest.fixture(scope="session")
def family_235():
    """Family learner dos períodos {2, 3, 5} com beta = 20"""
    return build_family_learner([2, 3, 5], sharpness=20.0)


@pytest.fixture
def random_model():
    """Modelo compacto aleatório pequeno (d=8, k=2, rotary)"""
    return build_random_model(BINARY, 8, 2, RngStream(11))


@pytest.fixture
def sinusoidal_model():
    return build_random_model(BINARY, 8, 2, RngStream(12), pe_kind="sinusoidal")
