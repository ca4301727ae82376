"""Rasterized computational domain.

The domain is a union of axis-aligned rectangles with pairwise disjoint
interiors.  Pixel centers carry the midpoint quadrature used for rendering,
density fields and the pixel-based reference integrals; the rectangle list and
the convex hull polygon are kept exactly for the cell integrals in
:mod:`congestmfg.moreau`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, cKDTree

FULL_SCAN_MAX_SITES = 1024
_CHUNK = 1 << 20  # pixel*site products per block of the full scan


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class GridDomain:
    bounds: tuple[float, float, float, float]  # x0, x1, y0, y1
    resolution: float
    rects: np.ndarray  # (R, 4) rows x0, y0, x1, y1
    hull: np.ndarray  # (H, 2) counter-clockwise
    inside_mask: np.ndarray = field(repr=False)
    hull_mask: np.ndarray = field(repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.inside_mask.shape

    @property
    def pixel_area(self) -> float:
        return 1.0 / self.resolution**2

    @property
    def xs(self) -> np.ndarray:
        x0 = self.bounds[0]
        return x0 + (np.arange(self.shape[1]) + 0.5) / self.resolution

    @property
    def ys(self) -> np.ndarray:
        y0 = self.bounds[2]
        return y0 + (np.arange(self.shape[0]) + 0.5) / self.resolution

    def centers(self, mask: np.ndarray | None = None) -> np.ndarray:
        """Pixel centers as an (P, 2) array, row-major (y outer, x inner)."""
        X, Y = np.meshgrid(self.xs, self.ys)
        pts = np.stack([X.ravel(), Y.ravel()], axis=1)
        if mask is not None:
            pts = pts[mask.ravel()]
        return pts

    def mask(self, which: str) -> np.ndarray:
        if which == "inside":
            return self.inside_mask
        if which == "hull":
            return self.hull_mask
        raise ValueError(f"unknown mask {which!r}")

    @property
    def area(self) -> float:
        """Exact area of the rectangle union."""
        r = self.rects
        return float(np.sum((r[:, 2] - r[:, 0]) * (r[:, 3] - r[:, 1])))

    @property
    def hull_area(self) -> float:
        x, y = self.hull[:, 0], self.hull[:, 1]
        return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))

    @property
    def is_convex(self) -> bool:
        return abs(self.hull_area - self.area) <= 1e-12 * max(self.area, 1.0)

    def contains(self, points: np.ndarray) -> np.ndarray:
        """True for points in the closed rectangle union."""
        p = np.atleast_2d(points)
        out = np.zeros(len(p), dtype=bool)
        for x0, y0, x1, y1 in self.rects:
            out |= (p[:, 0] >= x0) & (p[:, 0] <= x1) & (p[:, 1] >= y0) & (p[:, 1] <= y1)
        return out

    def in_hull(self, points: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        return _in_convex_polygon(np.atleast_2d(points), self.hull, tol)

    def distance_outside(self, points: np.ndarray) -> np.ndarray:
        """Euclidean distance to the rectangle union (0 inside)."""
        p = np.atleast_2d(points)
        best = np.full(len(p), np.inf)
        for x0, y0, x1, y1 in self.rects:
            dx = np.maximum(np.maximum(x0 - p[:, 0], p[:, 0] - x1), 0.0)
            dy = np.maximum(np.maximum(y0 - p[:, 1], p[:, 1] - y1), 0.0)
            best = np.minimum(best, np.hypot(dx, dy))
        return best

    def distance_outside_hull(self, points: np.ndarray) -> np.ndarray:
        """Euclidean distance to conv(Omega) (0 inside)."""
        p = np.atleast_2d(points)
        best = np.full(len(p), np.inf)
        for a, b in zip(self.hull, np.roll(self.hull, -1, axis=0)):
            e = b - a
            t = np.clip(((p - a) @ e) / (e @ e), 0.0, 1.0)
            best = np.minimum(best, np.linalg.norm(p - (a + t[:, None] * e), axis=1))
        return np.where(self.in_hull(p), 0.0, best)


def _in_convex_polygon(p: np.ndarray, poly: np.ndarray, tol: float) -> np.ndarray:
    ok = np.ones(len(p), dtype=bool)
    for a, b in zip(poly, np.roll(poly, -1, axis=0)):
        e = b - a
        ok &= e[0] * (p[:, 1] - a[1]) - e[1] * (p[:, 0] - a[0]) >= -tol
    return ok


def _as_rects(shape) -> np.ndarray:
    if isinstance(shape, dict):
        kind = shape.get("kind", "rectangles")
        if kind == "rectangle":
            shape = [shape["rect"]]
        elif kind in ("rectangles", "union"):
            shape = shape["rects"]
        else:
            raise DomainError(f"unsupported shape kind {kind!r}")
    rects = np.asarray(shape, dtype=float)
    if rects.ndim == 1:
        rects = rects[None, :]
    if rects.size == 0:
        raise DomainError("empty shape")
    if rects.ndim != 2 or rects.shape[1] != 4:
        raise DomainError("rectangles must be rows (x0, y0, x1, y1)")
    if np.any(rects[:, 2] <= rects[:, 0]) or np.any(rects[:, 3] <= rects[:, 1]):
        raise DomainError("degenerate rectangle (need x0 < x1 and y0 < y1)")
    for i in range(len(rects)):
        for j in range(i + 1, len(rects)):
            a, b = rects[i], rects[j]
            w = min(a[2], b[2]) - max(a[0], b[0])
            h = min(a[3], b[3]) - max(a[1], b[1])
            if w > 0 and h > 0:
                raise DomainError(f"rectangles {i} and {j} overlap")
    return rects


def convex_hull(rects: np.ndarray) -> np.ndarray:
    corners = np.concatenate(
        [rects[:, [0, 1]], rects[:, [2, 1]], rects[:, [2, 3]], rects[:, [0, 3]]]
    )
    hull = ConvexHull(corners)
    return corners[hull.vertices]  # scipy returns 2-D hulls counter-clockwise


def build_grid(shape, resolution: float, margin: float = 0.0) -> GridDomain:
    """Rasterize a union of rectangles.

    ``shape`` is a list of ``(x0, y0, x1, y1)`` rows, or a dict with
    ``kind`` in {"rectangle", "rectangles"}.  ``margin`` pads the bounding box
    (pixels there belong to neither mask).
    """
    if not resolution > 0:
        raise DomainError("resolution must be positive")
    rects = _as_rects(shape)
    hull = convex_hull(rects)
    x0, y0 = rects[:, 0].min() - margin, rects[:, 1].min() - margin
    nx = int(np.ceil((rects[:, 2].max() + margin - x0) * resolution - 1e-9))
    ny = int(np.ceil((rects[:, 3].max() + margin - y0) * resolution - 1e-9))
    bounds = (x0, x0 + nx / resolution, y0, y0 + ny / resolution)

    xs = x0 + (np.arange(nx) + 0.5) / resolution
    ys = y0 + (np.arange(ny) + 0.5) / resolution
    X, Y = np.meshgrid(xs, ys)
    inside = np.zeros((ny, nx), dtype=bool)
    for a0, b0, a1, b1 in rects:
        inside |= (X >= a0) & (X <= a1) & (Y >= b0) & (Y <= b1)
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    hull_mask = _in_convex_polygon(pts, hull, 1e-12).reshape(ny, nx) | inside
    return GridDomain(bounds, float(resolution), rects, hull, inside, hull_mask)


@dataclass(frozen=True)
class CellAssignment:
    owner: np.ndarray  # (ny, nx) int, NONE = -1 outside the mask
    cost_at_owner: np.ndarray  # (ny, nx) float, nan outside the mask

    NONE = -1


def _argmin_cells(pts, positions, weights, epsilon):
    n = len(positions)
    owner = np.empty(len(pts), dtype=np.int64)
    cost = np.empty(len(pts))
    if n <= FULL_SCAN_MAX_SITES:
        step = max(1, _CHUNK // n)
        for s in range(0, len(pts), step):
            p = pts[s : s + step]
            c = (
                (p[:, None, 0] - positions[None, :, 0]) ** 2
                + (p[:, None, 1] - positions[None, :, 1]) ** 2
            ) / (2.0 * epsilon) - weights[None, :]
            k = np.argmin(c, axis=1)
            owner[s : s + step] = k
            cost[s : s + step] = c[np.arange(len(p)), k]
        return owner, cost
    # power-diagram argmin as a Euclidean nearest neighbour in a lifted space
    lift = 2.0 * epsilon * weights
    top = lift.max()
    sites = np.column_stack([positions, np.sqrt(top - lift)])
    _, owner = cKDTree(sites).query(np.column_stack([pts, np.zeros(len(pts))]))
    d = pts - positions[owner]
    cost = (d[:, 0] ** 2 + d[:, 1] ** 2) / (2.0 * epsilon) - weights[owner]
    return owner, cost


def assign_cells(
    grid: GridDomain,
    positions: np.ndarray,
    weights: np.ndarray,
    epsilon: float,
    mask: str = "inside",
) -> CellAssignment:
    """Laguerre-cell owner of every masked pixel center.

    Owner of pixel x is argmin_i |x - y_i|^2 / (2 epsilon) - phi_i; ties go to
    the lowest index.
    """
    positions = np.asarray(positions, dtype=float).reshape(-1, 2)
    weights = np.asarray(weights, dtype=float)
    if len(positions) < 1:
        raise ValueError("need at least one site")
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if len(weights) != len(positions):
        raise ValueError("weights and positions differ in length")
    m = grid.mask(mask)
    owner = np.full(m.shape, CellAssignment.NONE, dtype=np.int64)
    cost = np.full(m.shape, np.nan)
    o, c = _argmin_cells(grid.centers(m), positions, weights, epsilon)
    owner[m] = o
    cost[m] = c
    return CellAssignment(owner, cost)
