import numpy as np
import pytest
from hypothesis import given, strategies as st

from congestmfg.congestion import (
    CongestionModel, RegionError, capacity, conjugate, conjugate_deriv,
)

MODELS = [
    CongestionModel("hard_cap", cap=1.0),
    CongestionModel("hard_cap", cap=2.5),
    CongestionModel("hard_cap_two_region", cap=1.0, outside_cap=1e-3),
    CongestionModel("power", exponent=2.0),
    CongestionModel("power", exponent=3.0),
    CongestionModel("quadratic", strong_convexity=2.0),
]


def legendre(model, p, region="inside"):
    rho = np.linspace(0, 20, 400_001)
    f = model.integrand(rho, region)
    return np.max(p * rho - f)


def test_examples():
    hc = CongestionModel()
    assert conjugate(hc, -3.0) == 0
    assert conjugate(hc, 2.0) == 2
    assert conjugate_deriv(hc, 0.5) == 1
    q = CongestionModel("quadratic", strong_convexity=2.0)
    assert conjugate_deriv(q, 4.0) == pytest.approx(2.0)
    h = 1e-6
    assert (conjugate(q, 4 + h) - conjugate(q, 4 - h)) / (2 * h) == pytest.approx(2.0, rel=1e-6)
    for m in MODELS:
        assert conjugate_deriv(m, -1.0) == 0
        assert conjugate(m, 0.0) == 0


def test_power_two_matches_legendre():
    m = CongestionModel("power", exponent=2.0)
    assert conjugate(m, 3.0) == pytest.approx(legendre(m, 3.0), rel=1e-6)
    assert conjugate(m, 3.0) == pytest.approx(4.5)
    # same f as quadratic with c = 1
    assert conjugate(CongestionModel("quadratic"), 3.0) == conjugate(m, 3.0)


@pytest.mark.parametrize("model", MODELS, ids=lambda m: f"{m.kind}")
def test_legendre_oracle(model):
    for p in (-2.0, 0.3, 1.7, 4.0):
        assert conjugate(model, p) == pytest.approx(legendre(model, p), rel=1e-5, abs=1e-8)


@pytest.mark.parametrize("model", MODELS, ids=lambda m: f"{m.kind}")
@given(rho=st.floats(0, 10), p=st.floats(-10, 10))
def test_fenchel_young(model, rho, p):
    f = model.integrand(rho)
    assert f + conjugate(model, p) >= p * rho - 1e-9


@pytest.mark.parametrize("model", MODELS, ids=lambda m: f"{m.kind}")
def test_equality_on_subgradient(model):
    for p in (0.5, 1.0, 3.0):
        rho = conjugate_deriv(model, p)
        assert model.integrand(rho) + conjugate(model, p) == pytest.approx(p * rho, abs=1e-12)


@pytest.mark.parametrize("model", MODELS, ids=lambda m: f"{m.kind}")
def test_convex_monotone_and_derivative(model):
    p = np.linspace(-5, 5, 1001)
    v = conjugate(model, p)
    assert np.all(np.diff(v) >= -1e-12)
    assert np.all(np.diff(v, 2) >= -1e-9)
    d = conjugate_deriv(model, p)
    assert np.all(d >= 0) and np.all(np.diff(d) >= -1e-12)
    h = 1e-6
    away = np.abs(p) > 1e-3
    fd = (conjugate(model, p + h) - conjugate(model, p - h)) / (2 * h)
    assert np.allclose(fd[away], d[away], atol=1e-6 * max(1, d.max()))


def test_regions():
    two = CongestionModel("hard_cap_two_region", cap=1.0, outside_cap=0.1)
    assert conjugate(two, 2.0, "outside") == pytest.approx(0.2)
    assert conjugate_deriv(two, 2.0, "outside") == pytest.approx(0.1)
    with pytest.raises(RegionError):
        conjugate(CongestionModel(), 1.0, "outside")
    with pytest.raises(ValueError):
        CongestionModel("hard_cap", cap=0)
    with pytest.raises(ValueError):
        CongestionModel("nope")


def test_capacity():
    assert capacity(CongestionModel(cap=2), 10, 12) == 20
    assert capacity(CongestionModel("hard_cap_two_region", cap=1, outside_cap=0.5), 10, 12) == 11
    assert capacity(CongestionModel("quadratic"), 10, 12) == np.inf
