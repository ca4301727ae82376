"""Moreau envelope of a congestion functional at a discrete measure.

``F_eps(mu) = min_rho W_2^2(rho, mu) / (2 eps) + int f(rho)`` is evaluated
through its concave dual in the Laguerre weights phi,

    D(phi) = sum_i [ w phi_i - int_{Lag_i} f*(phi_i - |x - y_i|^2 / (2 eps)) dx ],

maximized by a damped Newton method.  At the optimum every cell carries
exactly the particle mass w and the gradient in the positions is
``w (y_i - b_i) / eps`` with b_i the barycenter of the projected density
on cell i.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import _laguerre
from .congestion import CongestionModel, capacity, conjugate, conjugate_deriv
from .grid import GridDomain, assign_cells

log = logging.getLogger(__name__)

MASS_TOL = 1e-3
DENSITY_TOL = 1e-2
MAX_ITER = 500


class InfeasibleMassError(ValueError):
    """Total mass exceeds what the congestion constraint can hold."""


class DualStalledError(RuntimeError):
    """Dual ascent hit its iteration cap; ``solution`` holds the best iterate."""

    def __init__(self, message, solution):
        super().__init__(message)
        self.solution = solution


@dataclass(frozen=True)
class DiscreteMeasure:
    positions: np.ndarray  # (N, 2)
    mass: float  # per particle

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        object.__setattr__(self, "positions", pos)
        if not self.mass > 0:
            raise ValueError("particle mass must be positive")
        if not np.all(np.isfinite(pos)):
            raise ValueError("positions must be finite")

    @property
    def n(self) -> int:
        return len(self.positions)

    @property
    def total_mass(self) -> float:
        return self.n * self.mass


@dataclass(frozen=True)
class MoreauSolution:
    value: float
    weights: np.ndarray
    cell_mass: np.ndarray
    barycenter: np.ndarray
    position_gradient: np.ndarray
    max_density: float
    residual: float  # max_i |cell_mass_i - w| / w
    iterations: int


@dataclass(frozen=True)
class _Cells:
    value: float
    mass: np.ndarray
    moment: np.ndarray  # first moment of the density, absolute coordinates
    hessian: np.ndarray | None
    peak: np.ndarray


def _pieces(grid: GridDomain, model: CongestionModel):
    """Convex integration pieces with their (alpha, q, sign)."""
    polys, params = [], []
    a_in, q_in = model.power_form("inside")
    for x0, y0, x1, y1 in grid.rects:
        polys.append(np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]]))
        params.append((a_in, q_in, 1.0))
    if model.two_region:
        a_out, q_out = model.power_form("outside")
        # hull\Omega is not convex: integrate the outside law over the hull
        # and correct inside Omega.
        polys.append(grid.hull)
        params.append((a_out, q_out, 1.0))
        for x0, y0, x1, y1 in grid.rects:
            polys.append(np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]]))
            params.append((a_out, q_out, -1.0))
    vmax = max(len(p) for p in polys)
    xy = np.zeros((len(polys), vmax, 2))
    cnt = np.zeros(len(polys), dtype=np.int64)
    box = np.zeros((len(polys), 4))
    for k, p in enumerate(polys):
        xy[k, : len(p)] = p
        cnt[k] = len(p)
        box[k] = [p[:, 0].min(), p[:, 1].min(), p[:, 0].max(), p[:, 1].max()]
    par = np.array(params)
    return xy, cnt, box, par[:, 0].copy(), par[:, 1].copy(), par[:, 2].copy()


def _neighbours(positions, weights, epsilon):
    """CSR lists of sites whose charged disks overlap."""
    n = len(positions)
    radius = np.sqrt(2.0 * epsilon * np.maximum(weights, 0.0))
    ptr = np.zeros(n + 1, dtype=np.int64)
    if n < 2 or radius.max() == 0.0:
        return ptr, np.zeros(0, dtype=np.int64)
    pairs = cKDTree(positions).query_pairs(2.0 * radius.max(), output_type="ndarray")
    if len(pairs):
        d = np.linalg.norm(positions[pairs[:, 0]] - positions[pairs[:, 1]], axis=1)
        pairs = pairs[d < radius[pairs[:, 0]] + radius[pairs[:, 1]]]
    both = np.concatenate([pairs, pairs[:, ::-1]])
    both = both[np.lexsort((both[:, 1], both[:, 0]))]
    np.add.at(ptr, both[:, 0] + 1, 1)
    return np.cumsum(ptr), both[:, 1].astype(np.int64)


def _cells(grid, model, positions, epsilon, weights, mass, hessian=True) -> _Cells:
    positions = np.ascontiguousarray(positions, dtype=float)
    weights = np.ascontiguousarray(weights, dtype=float)
    ptr, idx = _neighbours(positions, weights, epsilon)
    val, m, mom, hdiag, hoff, peak = _laguerre.cell_integrals(
        positions, weights, float(epsilon), *_pieces(grid, model), ptr, idx,
        _laguerre.GAUSS_U, _laguerre.GAUSS_W,
    )
    H = None
    if hessian:
        n = len(positions)
        H = np.zeros((n, n))
        rows = np.repeat(np.arange(n), np.diff(ptr))
        np.add.at(H, (rows, idx), hoff)
        H = 0.5 * (H + H.T)
        H[np.diag_indices(n)] = hdiag
    value = mass * float(np.sum(weights)) - float(np.sum(val))
    moment = mom + positions * m[:, None]
    return _Cells(value, m, moment, H, peak)


def _pixel_terms(grid, model, positions, epsilon, weights):
    region_mask = "hull" if model.two_region else "inside"
    cells = assign_cells(grid, positions, weights, epsilon, mask=region_mask)
    sel = cells.owner >= 0
    owner = cells.owner[sel]
    p = -cells.cost_at_owner[sel]
    inside = grid.inside_mask[sel]
    fstar = np.where(inside, conjugate(model, p, "inside"), 0.0)
    dens = np.where(inside, conjugate_deriv(model, p, "inside"), 0.0)
    if model.two_region:
        fstar = np.where(inside, fstar, conjugate(model, p, "outside"))
        dens = np.where(inside, dens, conjugate_deriv(model, p, "outside"))
    n = len(positions)
    a = grid.pixel_area
    val = np.bincount(owner, weights=fstar, minlength=n) * a
    m = np.bincount(owner, weights=dens, minlength=n) * a
    pts = grid.centers(grid.mask(region_mask))
    mom = np.stack(
        [np.bincount(owner, weights=dens * pts[:, k], minlength=n) * a for k in (0, 1)],
        axis=1,
    )
    return val, m, mom, dens


def dual_value(grid, model, measure, epsilon, weights, quadrature="exact") -> float:
    """Concave dual objective D(phi); any phi gives a lower bound on F_eps."""
    weights = np.asarray(weights, dtype=float)
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if quadrature == "pixel":
        val = _pixel_terms(grid, model, measure.positions, epsilon, weights)[0]
        return measure.mass * float(weights.sum()) - float(val.sum())
    return _cells(grid, model, measure.positions, epsilon, weights, measure.mass, False).value


def dual_gradient(grid, model, measure, epsilon, weights, quadrature="exact") -> np.ndarray:
    """dD/dphi_i = w - (mass of the projected density on cell i)."""
    weights = np.asarray(weights, dtype=float)
    if quadrature == "pixel":
        m = _pixel_terms(grid, model, measure.positions, epsilon, weights)[1]
    else:
        m = _cells(grid, model, measure.positions, epsilon, weights, measure.mass, False).mass
    return measure.mass - m


def initial_weights(grid, model, measure, epsilon) -> np.ndarray:
    """Weights whose isolated disks each carry mass w, grown to reach Omega."""
    alpha, q = model.power_form("inside")
    phi0 = (measure.mass / (2.0 * np.pi * alpha * epsilon)) ** (1.0 / q)
    r0 = np.sqrt(2.0 * epsilon * phi0)
    d = grid.distance_outside(measure.positions)
    return np.maximum(phi0, (d + r0) ** 2 / (2.0 * epsilon))


def check_feasible(grid, model, total_mass):
    cap = capacity(model, grid.area, grid.hull_area)
    if not total_mass < cap:
        raise InfeasibleMassError(
            f"total mass {total_mass:g} does not fit under the congestion "
            f"capacity {cap:g} of the domain"
        )


def _solution(model, measure, epsilon, phi, cells, it) -> MoreauSolution:
    w = measure.mass
    bary = cells.moment / w
    return MoreauSolution(
        value=cells.value,
        weights=phi.copy(),
        cell_mass=cells.mass.copy(),
        barycenter=bary,
        position_gradient=w * (measure.positions - bary) / epsilon,
        max_density=float(cells.peak.max()) if len(cells.peak) else 0.0,
        residual=float(np.max(np.abs(cells.mass - w)) / w),
        iterations=it,
    )


def solve_dual(
    grid: GridDomain,
    model: CongestionModel,
    measure: DiscreteMeasure,
    epsilon: float,
    init: np.ndarray | None = None,
    tol: float = MASS_TOL,
    max_iter: int = MAX_ITER,
) -> MoreauSolution:
    """Maximize the dual until max_i |cell_mass_i - w| <= tol * w.

    Damped Newton on the exact Hessian; a step is accepted when it satisfies
    the Armijo condition on D or reduces the mass residual.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    check_feasible(grid, model, measure.total_mass)
    w = measure.mass
    y = measure.positions
    phi = initial_weights(grid, model, measure, epsilon) if init is None else np.array(init, float)
    cells = _cells(grid, model, y, epsilon, phi, w)
    alpha, _ = model.power_form("inside")
    floor_ref = 2.0 * np.pi * epsilon * alpha
    it = 0
    while True:
        g = w - cells.mass
        res = np.max(np.abs(g)) / w
        if res <= tol:
            return _solution(model, measure, epsilon, phi, cells, it)
        if it >= max_iter:
            sol = _solution(model, measure, epsilon, phi, cells, it)
            raise DualStalledError(
                f"dual ascent stalled after {it} iterations (residual {res:.3e})", sol
            )
        H = cells.hessian
        diag = np.diag(H).copy()
        floor = 1e-6 * max(diag.max(), floor_ref)
        H[np.diag_indices_from(H)] = np.maximum(diag, floor)
        try:
            d = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            d = g / np.diag(H)
        slope = float(g @ d)
        if not slope > 0:
            d = g / np.diag(H)
            slope = float(g @ d)
        tau = 1.0
        while True:
            trial = phi + tau * d
            new = _cells(grid, model, y, epsilon, trial, w)
            new_res = np.max(np.abs(w - new.mass)) / w
            if new.value >= cells.value + 1e-4 * tau * slope or new_res < (1 - 0.5 * tau) * res:
                break
            tau *= 0.5
            if tau < 1e-10:
                break
        phi, cells = trial, new
        it += 1


def projected_density(grid, model, solution, measure, epsilon) -> np.ndarray:
    """Pixel field of the Moreau projection rho = (f*)'(phi_i - c(x, y_i))."""
    dens = _pixel_terms(grid, model, measure.positions, epsilon, solution.weights)[3]
    field = np.zeros(grid.shape)
    field[grid.mask("hull" if model.two_region else "inside")] = dens
    return field


def pixel_cell_masses(grid, model, measure, epsilon, weights) -> np.ndarray:
    """Midpoint-rule cell masses (reference path for tests and diagnostics)."""
    return _pixel_terms(grid, model, measure.positions, epsilon, np.asarray(weights, float))[1]


def moreau_envelope(grid, model, positions, mass, epsilon, **kw) -> MoreauSolution:
    return solve_dual(grid, model, DiscreteMeasure(positions, mass), epsilon, **kw)
