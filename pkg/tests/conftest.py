import pytest

from core.anisotropy import ConstantStabilizer, EnergyMatrixParams, builtin_density
from core.curve import PolygonalCurve


@pytest.fixture
def isotropic():
    return builtin_density("isotropic")


@pytest.fixture
def case_one():
    return builtin_density("m-fold", [1 / 7, 3, 0.0])


@pytest.fixture
def case_two():
    return builtin_density("caseII")


@pytest.fixture
def l4():
    return builtin_density("l4norm")


@pytest.fixture
def unit_square():
    return PolygonalCurve([(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)])


@pytest.fixture
def isotropic_params():
    return EnergyMatrixParams(0.0, ConstantStabilizer(1.0))
