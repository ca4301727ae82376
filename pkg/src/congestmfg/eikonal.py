"""Two-speed Eikonal potential by first-order fast marching.

Solves ``|grad Phi| = 1 / speed`` on every pixel of the grid, with
``speed = speed_inside`` on Omega and ``speed_outside`` elsewhere, and
``Phi = 0`` on the pixels containing the sources.  A small outside speed makes
travel outside Omega expensive.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RectBivariateSpline

from .grid import GridDomain

_FAR, _TRIAL, _DONE = 0, 1, 2


class OutOfBoundsError(ValueError):
    pass


@dataclass(frozen=True)
class PotentialField:
    values: np.ndarray  # (ny, nx)
    speed: np.ndarray  # (ny, nx)
    sources: np.ndarray  # (S, 2)
    bounds: tuple[float, float, float, float]
    resolution: float
    order: np.ndarray = field(repr=False, default=None)  # acceptance order (flat indices)
    seeded: np.ndarray = field(repr=False, default=None)  # pixels set from straight-line times

    @property
    def xs(self):
        return self.bounds[0] + (np.arange(self.values.shape[1]) + 0.5) / self.resolution

    @property
    def ys(self):
        return self.bounds[2] + (np.arange(self.values.shape[0]) + 0.5) / self.resolution

    def grid_gradient(self) -> tuple[np.ndarray, np.ndarray]:
        """Central differences (one-sided at the edges) of the pixel values."""
        h = 1.0 / self.resolution
        gy, gx = np.gradient(self.values, h, h, edge_order=1)
        return gx, gy


def _source_pixel(grid: GridDomain, p) -> tuple[int, int]:
    x0, x1, y0, y1 = grid.bounds
    if not (x0 <= p[0] <= x1 and y0 <= p[1] <= y1):
        raise OutOfBoundsError(f"source {tuple(p)} outside the grid")
    ny, nx = grid.shape
    ix = min(int((p[0] - x0) * grid.resolution), nx - 1)
    iy = min(int((p[1] - y0) * grid.resolution), ny - 1)
    return iy, ix


def _update(phi, slow_h, iy, ix, ny, nx):
    a = min(phi[iy, ix - 1] if ix > 0 else np.inf, phi[iy, ix + 1] if ix < nx - 1 else np.inf)
    b = min(phi[iy - 1, ix] if iy > 0 else np.inf, phi[iy + 1, ix] if iy < ny - 1 else np.inf)
    f = slow_h[iy, ix]
    if a > b:
        a, b = b, a
    if b == np.inf or b - a >= f:
        return a + f
    return 0.5 * (a + b + np.sqrt(2.0 * f * f - (a - b) ** 2))


def fast_march(
    grid: GridDomain,
    speed_inside: float = 1.0,
    speed_outside: float = 1.0,
    sources=((0.0, 0.0),),
    seed_radius: float | None = None,
) -> PotentialField:
    """Travel time from the nearest source at the given speeds (4-neighbour upwind).

    Pixels within ``seed_radius`` (spatial units; default a fifth of the
    smaller grid extent) of a source, and sharing its speed, start from the
    exact straight-line time.  This removes the h log(1/h) error of a point
    source.  The pixel containing a source is pinned to 0.  Several sources
    are marched one at a time and combined by a pointwise minimum.
    """
    if not (speed_inside > 0 and speed_outside > 0):
        raise ValueError("speeds must be positive")
    sources = np.atleast_2d(np.asarray(sources, dtype=float))
    speed = np.where(grid.inside_mask, float(speed_inside), float(speed_outside))
    if seed_radius is None:
        x0, x1, y0, y1 = grid.bounds
        seed_radius = 0.2 * min(x1 - x0, y1 - y0)
    pix = [_source_pixel(grid, p) for p in sources]
    # one march per source: the joint solution is their pointwise minimum,
    # and a joint march would mix the two fronts along the shock
    runs = [_march(grid, speed, p, ij, seed_radius) for p, ij in zip(sources, pix)]
    phi = runs[0][0]
    seeded = runs[0][1]
    order = runs[0][2]
    if len(runs) > 1:
        phi = np.minimum.reduce([r[0] for r in runs])
        seeded = np.logical_or.reduce([r[1] for r in runs])
        order = np.argsort(phi.ravel(), kind="stable")
    return PotentialField(phi, speed, sources, grid.bounds, grid.resolution, order, seeded)


def _march(grid, speed, p, ij, seed_radius):
    slow_h = 1.0 / (speed * grid.resolution)
    ny, nx = grid.shape
    phi = np.full((ny, nx), np.inf)
    state = np.full((ny, nx), _FAR, dtype=np.int8)
    X, Y = np.meshgrid(grid.xs, grid.ys)
    iy, ix = ij
    d = np.hypot(X - p[0], Y - p[1])
    seeded = (d <= seed_radius) & (speed == speed[iy, ix])
    phi[seeded] = d[seeded] / speed[iy, ix]
    phi[iy, ix] = 0.0
    seeded[iy, ix] = True
    heap = [(phi.flat[k], int(k)) for k in np.flatnonzero(seeded)]
    heapq.heapify(heap)
    order = []
    while heap:
        val, k = heapq.heappop(heap)
        iy, ix = divmod(k, nx)
        if state[iy, ix] == _DONE or val > phi[iy, ix]:
            continue
        state[iy, ix] = _DONE
        order.append(k)
        for jy, jx in ((iy, ix - 1), (iy, ix + 1), (iy - 1, ix), (iy + 1, ix)):
            if 0 <= jy < ny and 0 <= jx < nx and state[jy, jx] != _DONE:
                cand = _update(phi, slow_h, jy, jx, ny, nx)
                if cand < phi[jy, jx]:
                    phi[jy, jx] = cand
                    state[jy, jx] = _TRIAL
                    heapq.heappush(heap, (cand, jy * nx + jx))
    return phi, seeded, np.array(order)


def _bilinear(xs, ys, values, p):
    h = xs[1] - xs[0] if len(xs) > 1 else 1.0
    fx = np.clip((p[:, 0] - xs[0]) / h, 0.0, len(xs) - 1.0)
    fy = np.clip((p[:, 1] - ys[0]) / h, 0.0, len(ys) - 1.0)
    i0 = np.minimum(fx.astype(int), max(len(xs) - 2, 0))
    j0 = np.minimum(fy.astype(int), max(len(ys) - 2, 0))
    tx, ty = fx - i0, fy - j0
    i1 = np.minimum(i0 + 1, len(xs) - 1)
    j1 = np.minimum(j0 + 1, len(ys) - 1)
    return (
        values[j0, i0] * (1 - tx) * (1 - ty)
        + values[j0, i1] * tx * (1 - ty)
        + values[j1, i0] * (1 - tx) * ty
        + values[j1, i1] * tx * ty
    )


def sample_potential(pf: PotentialField, p):
    """Bilinear value and gradient of the field at point(s) ``p``.

    The gradient is the bilinear interpolation of the central-difference
    gradient of the pixel values.  Points must lie within the grid bounds.
    """
    pts = np.atleast_2d(np.asarray(p, dtype=float))
    x0, x1, y0, y1 = pf.bounds
    if np.any((pts[:, 0] < x0) | (pts[:, 0] > x1) | (pts[:, 1] < y0) | (pts[:, 1] > y1)):
        raise OutOfBoundsError("point outside the potential's grid")
    gx, gy = pf.grid_gradient()
    xs, ys = pf.xs, pf.ys
    val = _bilinear(xs, ys, pf.values, pts)
    grad = np.stack([_bilinear(xs, ys, gx, pts), _bilinear(xs, ys, gy, pts)], axis=1)
    if np.ndim(p) == 1:
        return float(val[0]), grad[0]
    return val, grad


class SmoothPotential:
    """C^2 bicubic-spline view of a :class:`PotentialField` for the optimizer.

    Outside the grid bounds the value grows linearly at the outside slowness
    along the clamped axes, so value and gradient stay consistent.
    """

    def __init__(self, pf: PotentialField):
        self.field = pf
        x0, x1, y0, y1 = pf.bounds
        self._spline = RectBivariateSpline(pf.ys, pf.xs, pf.values, bbox=[y0, y1, x0, x1])
        self._slow = 1.0 / float(np.min(pf.speed))

    def __call__(self, pts):
        pts = np.atleast_2d(pts)
        x0, x1, y0, y1 = self.field.bounds
        cx = np.clip(pts[:, 0], x0, x1)
        cy = np.clip(pts[:, 1], y0, y1)
        val = self._spline.ev(cy, cx)
        gx = self._spline.ev(cy, cx, dy=1)
        gy = self._spline.ev(cy, cx, dx=1)
        ex, ey = pts[:, 0] - cx, pts[:, 1] - cy
        val = val + self._slow * (np.abs(ex) + np.abs(ey))
        gx = np.where(ex != 0, self._slow * np.sign(ex), gx)
        gy = np.where(ey != 0, self._slow * np.sign(ey), gy)
        return val, np.stack([gx, gy], axis=1)
