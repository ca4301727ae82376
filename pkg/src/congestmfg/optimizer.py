"""Limited-memory quasi-Newton minimization of the trajectory energy."""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist

from .energy import Energy, EnergyBreakdown, TrajectoryEnsemble

log = logging.getLogger(__name__)

CONVERGED = "converged"
MAX_ITERS = "max_iters"
LINE_SEARCH_FAILURE = "line_search_failure"


@dataclass(frozen=True)
class OptimizerConfig:
    memory: int = 10
    max_iters: int = 2000
    grad_tol: float | None = None  # sup-norm; None means 1e-5 * w * N
    wolfe_c1: float = 1e-4
    wolfe_c2: float = 0.9
    init_strategy: str = "stationary"
    max_step: float = 1.0  # largest coordinate move of a line-search trial
    max_line_search: int = 30

    def __post_init__(self):
        if not 0 < self.wolfe_c1 < self.wolfe_c2 < 1:
            raise ValueError("need 0 < wolfe_c1 < wolfe_c2 < 1")
        if self.memory < 1 or self.max_iters < 0:
            raise ValueError("memory must be >= 1 and max_iters >= 0")
        if self.init_strategy not in ("stationary", "straight_to_target"):
            raise ValueError(f"unknown init_strategy {self.init_strategy!r}")


@dataclass
class OptimizeReport:
    iterations: int
    final: EnergyBreakdown
    objective_history: list
    grad_norm_history: list
    termination: str
    evaluations: int = 0
    trace: list = field(default_factory=list)  # (kinetic, congestion, running, terminal, total, |g|)
    hull_drift: float = 0.0  # largest distance of a trajectory point outside conv(Omega)


def _two_loop(g, mem):
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(mem):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if mem:
        s, y, _ = mem[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(mem, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def _cubic_min(a, fa, ga, b, fb, gb):
    """Minimizer of the cubic interpolant on [a, b], or None."""
    d1 = ga + gb - 3.0 * (fa - fb) / (a - b)
    rad = d1 * d1 - ga * gb
    if rad < 0:
        return None
    d2 = np.sign(b - a) * np.sqrt(rad)
    t = b - (b - a) * (gb + d2 - d1) / (gb - ga + 2.0 * d2)
    return t if np.isfinite(t) else None


class _LineSearch:
    """Strong Wolfe search (bracketing then zoom)."""

    def __init__(self, fun, x, f0, g0, d, cfg, amax):
        self.fun, self.x, self.d, self.cfg = fun, x, d, cfg
        self.f0, self.slope0 = f0, float(g0 @ d)
        self.amax = amax
        self.evals = 0
        self.best = None  # (f, a, g, extra) lowest Armijo-satisfying point

    def phi(self, a):
        f, g, extra = self.fun(self.x + a * self.d)
        self.evals += 1
        slope = float(g @ self.d)
        if np.isfinite(f) and f <= self.f0 + self.cfg.wolfe_c1 * a * self.slope0:
            if self.best is None or f < self.best[0]:
                self.best = (f, a, g, extra)
        return f, slope, g, extra

    def wolfe(self, f, a, slope):
        c1, c2 = self.cfg.wolfe_c1, self.cfg.wolfe_c2
        return f <= self.f0 + c1 * a * self.slope0 and abs(slope) <= -c2 * self.slope0

    def run(self, a1):
        a_prev, f_prev, s_prev = 0.0, self.f0, self.slope0
        a = min(a1, self.amax)
        while self.evals < self.cfg.max_line_search:
            f, slope, g, extra = self.phi(a)
            if not np.isfinite(f) or f > self.f0 + self.cfg.wolfe_c1 * a * self.slope0 or (
                self.evals > 1 and f >= f_prev
            ):
                return self.zoom(a_prev, f_prev, s_prev, a, f, slope)
            if abs(slope) <= -self.cfg.wolfe_c2 * self.slope0:
                return f, a, g, extra
            if slope >= 0:
                return self.zoom(a, f, slope, a_prev, f_prev, s_prev)
            if a >= self.amax:
                return f, a, g, extra
            a_prev, f_prev, s_prev = a, f, slope
            a = min(2.0 * a, self.amax)
        return self.best

    def zoom(self, lo, flo, slo, hi, fhi, shi):
        while self.evals < self.cfg.max_line_search:
            t = None
            if np.isfinite(fhi):
                t = _cubic_min(lo, flo, slo, hi, fhi, shi)
            left, right = min(lo, hi), max(lo, hi)
            margin = 0.1 * (right - left)
            if t is None or not (left + margin <= t <= right - margin):
                t = 0.5 * (lo + hi)
            if right - left <= 1e-14 * max(right, 1e-300):
                break
            f, slope, g, extra = self.phi(t)
            if not np.isfinite(f) or f > self.f0 + self.cfg.wolfe_c1 * t * self.slope0 or f >= flo:
                hi, fhi, shi = t, f, slope
            else:
                if abs(slope) <= -self.cfg.wolfe_c2 * self.slope0:
                    return f, t, g, extra
                if slope * (hi - lo) >= 0:
                    hi, fhi, shi = lo, flo, slo
                lo, flo, slo = t, f, slope
        return self.best


def minimize(ens0: TrajectoryEnsemble, energy: Energy, config: OptimizerConfig = OptimizerConfig(), callback=None):
    """L-BFGS (two-loop recursion) over slices 1..M; slice 0 stays fixed.

    Returns the best iterate and an :class:`OptimizeReport`.
    """
    grad_tol = config.grad_tol
    if grad_tol is None:
        grad_tol = 1e-5 * ens0.mass * ens0.n
    nevals = 0

    def fun(free):
        nonlocal nevals
        nevals += 1
        try:
            f, g, b = energy.value_and_grad(ens0, free)
        except (ValueError, RuntimeError, FloatingPointError) as exc:
            log.debug("evaluation failed: %s", exc)
            return np.inf, np.zeros_like(free), None
        if not np.all(np.isfinite(g)):
            return np.inf, np.zeros_like(free), None
        return f, g, b

    x = ens0.positions[1:].ravel().copy()
    f, g, b = fun(x)
    if b is None:
        raise RuntimeError("objective is not finite at the initial ensemble")
    mem = deque(maxlen=config.memory)
    fh, gh = [f], [float(np.max(np.abs(g)))]
    trace = [_trace_row(b, gh[-1])]
    reason = MAX_ITERS
    it = 0
    while True:
        gnorm = gh[-1]
        if callback is not None:
            callback(it, ens0.with_free(x), b)
        if gnorm <= grad_tol:
            reason = CONVERGED
            break
        if it >= config.max_iters:
            reason = MAX_ITERS
            break
        result = None
        for attempt in range(2):
            d = _two_loop(g, mem)
            if not float(g @ d) < 0:
                mem.clear()
                d = -g
            dmax = float(np.max(np.abs(d)))
            amax = config.max_step / dmax
            a1 = 1.0 if mem else min(1.0, 0.1 / dmax)
            ls = _LineSearch(fun, x, f, g, d, config, amax)
            result = ls.run(a1)
            if result is not None or not mem:
                break
            mem.clear()  # retry along steepest descent
        if result is None:
            reason = LINE_SEARCH_FAILURE
            break
        f_new, a, g_new, b_new = result
        s = a * d
        yv = g_new - g
        sy = float(s @ yv)
        if sy > 1e-12 * float(yv @ yv) and sy > 0:
            mem.append((s, yv, 1.0 / sy))
        x = x + s
        f, g, b = f_new, g_new, b_new
        it += 1
        fh.append(f)
        gh.append(float(np.max(np.abs(g))))
        trace.append(_trace_row(b, gh[-1]))
        log.info("iter %d  J=%.10g  |g|=%.3e  step=%.3e", it, f, gh[-1], a)
    out = ens0.with_free(x)
    drift = 0.0
    if energy.grid is not None:
        drift = float(np.max(energy.grid.distance_outside_hull(out.positions.reshape(-1, 2))))
    report = OptimizeReport(it, b, fh, gh, reason, nevals, trace, drift)
    return out, report


def _trace_row(b, gnorm):
    return (b.kinetic, b.congestion, b.running_potential, b.terminal_potential, b.total, gnorm)


def check_gradient(ens: TrajectoryEnsemble, energy: Energy, step: float = 1e-4, n_coords: int = 50, seed: int = 0) -> float:
    """Worst central-difference mismatch of the analytic gradient.

    Compares on a random subset of at least ``n_coords`` free coordinates
    (all of them if fewer) and returns max |fd - g| / max |g| over the subset.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    for k in range(ens.steps + 1):
        if ens.n > 1 and np.min(pdist(ens.positions[k])) <= 0.0:
            raise ValueError(f"coincident particles at slice {k}; the gradient is undefined there")
    x = ens.positions[1:].ravel()
    _, g, _ = energy.value_and_grad(ens, x)
    rng = np.random.default_rng(seed)
    idx = np.arange(len(x)) if len(x) <= n_coords else np.sort(rng.choice(len(x), n_coords, replace=False))
    fd = np.empty(len(idx))
    for m, k in enumerate(idx):
        xp, xm = x.copy(), x.copy()
        xp[k] += step
        xm[k] -= step
        fd[m] = (energy.value_and_grad(ens, xp)[0] - energy.value_and_grad(ens, xm)[0]) / (2 * step)
    scale = np.max(np.abs(g[idx]))
    if scale == 0:
        return float(np.max(np.abs(fd)))
    return float(np.max(np.abs(fd - g[idx])) / scale)
