"""Fully discrete trajectory objective and its gradient.

For N particles of mass w sampled at M + 1 times t_k = k delta,

    J = w sum_i sum_{k<M} delta L((x_i^{k+1} - x_i^k) / delta)     kinetic
      + delta sum_{k=1}^{M-1} F_eps(mu^k)                           congestion
      + w delta sum_i sum_{k=1}^{M-1} V(x_i^k)                      running
      + w sum_i Phi(x_i^M)                                           terminal

with L(p) = |p|^r / r.  Slice 0 is the fixed initial configuration.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .congestion import CongestionModel
from .grid import GridDomain
from .moreau import DiscreteMeasure, DualStalledError, MoreauSolution, solve_dual

THREADS_ENV = "CONGESTMFG_THREADS"


@dataclass(frozen=True)
class LagrangianSpec:
    exponent: float = 2.0

    def __post_init__(self):
        if not self.exponent > 1:
            raise ValueError("Lagrangian exponent must exceed 1")

    def value(self, p):
        r = self.exponent
        return np.linalg.norm(p, axis=-1) ** r / r

    def grad(self, p):
        r = self.exponent
        if r == 2.0:
            return np.array(p, dtype=float)
        n = np.linalg.norm(p, axis=-1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(n > 0, n ** (r - 2.0), 0.0)
        return scale * p


# -- potentials: callables mapping (K, 2) points to (values, gradients) ------


@dataclass(frozen=True)
class ZeroPotential:
    def __call__(self, pts):
        pts = np.atleast_2d(pts)
        return np.zeros(len(pts)), np.zeros_like(pts, dtype=float)


@dataclass(frozen=True)
class QuadraticPotential:
    """scale * |x - center|^2"""

    center: tuple[float, float]
    scale: float = 1.0

    def __call__(self, pts):
        d = np.atleast_2d(pts) - np.asarray(self.center)
        return self.scale * np.sum(d * d, axis=1), 2.0 * self.scale * d


@dataclass(frozen=True)
class RingPotential:
    """scale * (|x - center|^2 - radius^2)^2, a well along a circle."""

    center: tuple[float, float]
    radius: float
    scale: float = 1.0

    def __call__(self, pts):
        d = np.atleast_2d(pts) - np.asarray(self.center)
        u = np.sum(d * d, axis=1) - self.radius**2
        return self.scale * u * u, (4.0 * self.scale * u)[:, None] * d


@dataclass(frozen=True)
class TrajectoryEnsemble:
    positions: np.ndarray  # (M + 1, N, 2)
    mass: float
    horizon: float

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        if pos.ndim != 3 or pos.shape[2] != 2 or pos.shape[0] < 2:
            raise ValueError("positions must have shape (M + 1, N, 2) with M >= 1")
        if not np.all(np.isfinite(pos)):
            raise ValueError("positions must be finite")
        object.__setattr__(self, "positions", pos)

    @property
    def steps(self) -> int:
        return self.positions.shape[0] - 1

    @property
    def n(self) -> int:
        return self.positions.shape[1]

    @property
    def delta(self) -> float:
        return self.horizon / self.steps

    def with_free(self, free: np.ndarray) -> "TrajectoryEnsemble":
        pos = self.positions.copy()
        pos[1:] = np.asarray(free).reshape(pos[1:].shape)
        return TrajectoryEnsemble(pos, self.mass, self.horizon)


@dataclass
class EnergyBreakdown:
    kinetic: float
    congestion: float
    running_potential: float
    terminal_potential: float
    total: float
    gradient: np.ndarray  # (M, N, 2) for slices 1..M
    per_slice_moreau: list = field(default_factory=list)  # slices 1..M-1


@dataclass
class Energy:
    """Evaluation context for J; keeps per-slice dual warm starts."""

    grid: GridDomain | None
    model: CongestionModel | None  # None disables congestion
    epsilon: float
    lagrangian: LagrangianSpec = field(default_factory=LagrangianSpec)
    running: object = field(default_factory=ZeroPotential)
    terminal: object = field(default_factory=ZeroPotential)
    dual_tol: float = 1e-9
    workers: int | None = None
    warm: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.model is not None and self.grid is None:
            raise ValueError("congestion needs a grid domain")
        if self.workers is None:
            self.workers = int(os.environ.get(THREADS_ENV, "1"))

    def _slice(self, k, pts, mass) -> MoreauSolution:
        measure = DiscreteMeasure(pts, mass)
        init = self.warm.get(k)
        if init is not None and len(init) != len(pts):
            init = None
        try:
            sol = solve_dual(self.grid, self.model, measure, self.epsilon, init=init, tol=self.dual_tol)
        except DualStalledError:
            if init is None:
                raise
            sol = solve_dual(self.grid, self.model, measure, self.epsilon, tol=self.dual_tol)
        self.warm[k] = sol.weights
        return sol

    def evaluate(self, ens: TrajectoryEnsemble) -> EnergyBreakdown:
        x = ens.positions
        w, dt, M = ens.mass, ens.delta, ens.steps
        lag = self.lagrangian

        vel = np.diff(x, axis=0) / dt  # (M, N, 2)
        kinetic = w * dt * float(np.sum(lag.value(vel)))
        gL = lag.grad(vel)
        grad = np.zeros((M,) + x.shape[1:])
        grad += w * gL  # from the interval ending at slice k
        grad[:-1] -= w * gL[1:]  # from the interval starting at slice k

        interior = x[1:M].reshape(-1, 2)
        vals, vgrad = self.running(interior)
        running = w * dt * float(np.sum(vals))
        grad[:-1] += w * dt * vgrad.reshape(M - 1, -1, 2)

        tvals, tgrad = self.terminal(x[M])
        terminal = w * float(np.sum(tvals))
        grad[-1] += w * tgrad

        congestion = 0.0
        sols = []
        if self.model is not None and M > 1:
            ks = range(1, M)
            if self.workers > 1:
                with ThreadPoolExecutor(self.workers) as pool:
                    sols = list(pool.map(lambda k: self._slice(k, x[k], w), ks))
            else:
                sols = [self._slice(k, x[k], w) for k in ks]
            for k, sol in zip(ks, sols):
                congestion += dt * sol.value
                grad[k - 1] += dt * sol.position_gradient

        total = kinetic + congestion + running + terminal
        return EnergyBreakdown(kinetic, congestion, running, terminal, total, grad, sols)

    def value_and_grad(self, ens: TrajectoryEnsemble, free: np.ndarray):
        b = self.evaluate(ens.with_free(free))
        return b.total, b.gradient.ravel(), b


def evaluate(ensemble, lagrangian, model, grid, epsilon, running=None, terminal=None, warm_starts=None):
    """One-shot evaluation of J; see :class:`Energy`."""
    e = Energy(
        grid, model, epsilon, lagrangian,
        running if running is not None else ZeroPotential(),
        terminal if terminal is not None else ZeroPotential(),
    )
    if warm_starts:
        e.warm.update(warm_starts)
    return e.evaluate(ensemble)
