import numpy as np
import pytest

from congestmfg.congestion import CongestionModel
from congestmfg.energy import (
    Energy, LagrangianSpec, QuadraticPotential, RingPotential, TrajectoryEnsemble, ZeroPotential, evaluate,
)
from congestmfg.grid import build_grid
from congestmfg.optimizer import check_gradient

BOX = build_grid([[0, 0, 10, 10]], 8)


def random_ensemble(rng, n=5, M=4, lo=3, hi=7, mass=0.3, T=1.0):
    return TrajectoryEnsemble(rng.uniform(lo, hi, size=(M + 1, n, 2)), mass, T)


def test_stationary_spread_is_free():
    xs = np.linspace(1, 9, 4)
    X, Y = np.meshgrid(xs, xs)
    p0 = np.stack([X.ravel(), Y.ravel()], 1)
    ens = TrajectoryEnsemble(np.tile(p0, (5, 1, 1)), 0.2, 1.0)
    b = evaluate(ens, LagrangianSpec(), CongestionModel(), BOX, 0.05)
    assert b.kinetic == 0
    # isolated particles: each slice costs only the disk quantization N w^2 / (4 pi eps)
    floor = 16 * 0.2**2 / (4 * np.pi * 0.05)
    assert b.congestion == pytest.approx(3 * 0.25 * floor, rel=1e-9)
    assert len(b.per_slice_moreau) == 3
    assert b.total == b.kinetic + b.congestion + b.running_potential + b.terminal_potential


def test_lq_endpoint():
    # one particle from 0, Phi = |x - a|^2: optimum is a straight line to a/(1 + 2T)... in discrete form
    a, T, M = np.array([3.0, 1.0]), 1.0, 4
    e = Energy(None, None, 1.0, terminal=QuadraticPotential(tuple(a)))
    xT = 2 * T * a / (1 + 2 * T)  # minimizes |x|^2/(2T) + |x - a|^2
    s = np.linspace(0, 1, M + 1)[:, None, None]
    best = TrajectoryEnsemble(s * xT, 1.0, T)
    b0 = e.evaluate(best)
    assert np.max(np.abs(b0.gradient)) < 1e-12
    pert = TrajectoryEnsemble(best.positions + 0.01 * np.r_[0, 1, 0, 0, 0][:, None, None], 1.0, T)
    assert e.evaluate(pert).total > b0.total


@pytest.mark.parametrize("model", [CongestionModel(), CongestionModel("quadratic"), None],
                         ids=["hard", "quadratic", "off"])
def test_gradient_fd(model, rng):
    ens = random_ensemble(rng)
    e = Energy(BOX, model, 0.1, running=RingPotential((5, 5), 1.5, 0.1), terminal=QuadraticPotential((8, 5)), dual_tol=1e-11)
    err = check_gradient(ens, e, n_coords=40)
    assert err < (1e-7 if model is None else 1e-3)


def test_lagrangian_power(rng):
    lag = LagrangianSpec(3.0)
    p = rng.normal(size=(6, 2))
    h = 1e-6
    for k in range(2):
        d = np.zeros(2)
        d[k] = h
        fd = (lag.value(p + d) - lag.value(p - d)) / (2 * h)
        assert np.allclose(fd, lag.grad(p)[:, k], atol=1e-8)
    assert np.all(lag.grad(np.zeros((1, 2))) == 0)
    with pytest.raises(ValueError):
        LagrangianSpec(1.0)


def test_time_refinement_kinetic():
    a = np.array([[0.0, 0.0], [1.0, 2.0]])
    b = np.array([[3.0, 1.0], [2.0, 2.0]])
    for M in (2, 4, 8):
        s = np.linspace(0, 1, M + 1)[:, None, None]
        ens = TrajectoryEnsemble(a + s * (b - a), 0.5, 2.0)
        k = Energy(None, None, 1.0).evaluate(ens).kinetic
        assert k == pytest.approx(0.5 * np.sum((b - a) ** 2) / (2 * 2.0), rel=1e-12)


def test_separable_without_congestion(rng):
    ens = random_ensemble(rng, n=6, M=3)
    e = Energy(None, None, 1.0, running=RingPotential((5, 5), 2.0), terminal=QuadraticPotential((1, 2)))
    perm = rng.permutation(6)
    other = TrajectoryEnsemble(ens.positions[:, perm], ens.mass, ens.horizon)
    assert e.evaluate(ens).total == pytest.approx(e.evaluate(other).total, rel=1e-13)


def test_potentials_gradients(rng):
    p = rng.normal(size=(5, 2)) * 3
    for pot in (ZeroPotential(), QuadraticPotential((1, 2), 0.7), RingPotential((6, 6), 3)):
        v, g = pot(p)
        h = 1e-6
        for k in range(2):
            d = np.zeros(2)
            d[k] = h
            assert np.allclose((pot(p + d)[0] - pot(p - d)[0]) / (2 * h), g[:, k], rtol=1e-6, atol=1e-6)


def test_ensemble_validation():
    with pytest.raises(ValueError):
        TrajectoryEnsemble(np.zeros((1, 3, 2)), 1.0, 1.0)
    with pytest.raises(ValueError):
        TrajectoryEnsemble(np.full((2, 3, 2), np.inf), 1.0, 1.0)
    ens = TrajectoryEnsemble(np.zeros((3, 2, 2)), 1.0, 1.0)
    assert ens.delta == 0.5 and ens.steps == 2 and ens.n == 2


def test_infeasible_propagates():
    ens = TrajectoryEnsemble(np.full((3, 2, 2), 5.0) + np.array([[0, 0], [1, 0]]), 80.0, 1.0)
    with pytest.raises(ValueError):
        Energy(BOX, CongestionModel(), 0.1).evaluate(ens)


def test_threaded_matches_serial(rng):
    ens = random_ensemble(rng, n=6, M=5)
    a = Energy(BOX, CongestionModel(), 0.1, workers=1).evaluate(ens)
    b = Energy(BOX, CongestionModel(), 0.1, workers=3).evaluate(ens)
    assert a.total == b.total and np.array_equal(a.gradient, b.gradient)
