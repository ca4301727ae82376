import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from congestmfg.grid import DomainError, assign_cells, build_grid

ROOMS = [[0, 0, 8, 8], [8, 3.5, 11, 4.5], [11, 0, 19, 8]]


def test_square_area():
    g = build_grid([[-1, -1, 10, 10]], 32)
    assert abs(g.inside_mask.sum() * g.pixel_area - 121) <= 0.01 * 121
    assert g.area == 121 and g.is_convex


def test_convex_masks_agree():
    g = build_grid({"kind": "rectangle", "rect": [0, 0, 1, 1]}, 64)
    assert np.array_equal(g.inside_mask, g.hull_mask)


def test_rooms_hull_larger():
    g = build_grid(ROOMS, 16)
    assert np.all(g.hull_mask >= g.inside_mask)
    assert g.hull_mask.sum() > g.inside_mask.sum()
    assert not g.is_convex
    assert g.hull_area == pytest.approx(19 * 8)
    perimeter = 2 * (8 + 8) * 2 + 2 * 3
    assert abs(g.inside_mask.sum() * g.pixel_area - g.area) <= 2 / 16 * perimeter


def test_bounds_contain_hull():
    g = build_grid(ROOMS, 7)
    x0, x1, y0, y1 = g.bounds
    assert x0 <= g.hull[:, 0].min() and x1 >= g.hull[:, 0].max()
    assert y0 <= g.hull[:, 1].min() and y1 >= g.hull[:, 1].max()


@pytest.mark.parametrize("shape,res", [([], 8), ([[0, 0, 0, 1]], 8), ([[0, 0, 1, 1]], 0),
                                       ([[0, 0, 2, 2], [1, 1, 3, 3]], 8)])
def test_build_errors(shape, res):
    with pytest.raises(DomainError):
        build_grid(shape, res)


def test_single_site_owns_all():
    g = build_grid([[0, 0, 1, 1]], 16)
    a = assign_cells(g, [[0.3, 0.3]], [0.0], 1.0)
    assert np.all(a.owner == 0)


def test_bisector():
    g = build_grid([[0, 0, 1, 1]], 64)
    a = assign_cells(g, [[0.25, 0.5], [0.75, 0.5]], [0.0, 0.0], 0.1)
    left = g.xs < 0.5
    assert np.all(a.owner[:, left] == 0) and np.all(a.owner[:, ~left] == 1)


def _brute(g, y, phi, eps, mask="inside"):
    pts = g.centers(g.mask(mask))
    out = []
    for p in pts:
        c = [np.sum((p - yi) ** 2) / (2 * eps) - f for yi, f in zip(y, phi)]
        out.append(int(np.argmin(c)))
    return np.array(out)


def test_brute_force_oracle(rng):
    g = build_grid(ROOMS, 4)
    y = rng.uniform([0, 0], [19, 8], size=(3, 2))
    a = assign_cells(g, y, np.zeros(3), 1.0)
    assert np.array_equal(a.owner[g.inside_mask], _brute(g, y, np.zeros(3), 1.0))
    assert np.all(a.owner[~g.inside_mask] == -1)


def test_lifted_path_matches_scan(rng):
    g = build_grid([[0, 0, 10, 10]], 8)
    y = rng.uniform(0, 10, size=(1500, 2))
    phi = rng.uniform(0, 0.5, size=1500)
    big = assign_cells(g, y, phi, 0.3)
    cost = np.full((g.inside_mask.sum(),), np.inf)
    pts = g.centers(g.inside_mask)
    for s in range(0, 1500, 300):
        c = ((pts[:, None] - y[None, s:s + 300]) ** 2).sum(2) / 0.6 - phi[None, s:s + 300]
        cost = np.minimum(cost, c.min(1))
    assert np.allclose(big.cost_at_owner[g.inside_mask], cost, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.floats(-5, 5), st.integers(0, 10_000))
def test_shift_invariance_and_partition(n, shift, seed):
    r = np.random.default_rng(seed)
    g = build_grid([[0, 0, 3, 2]], 8)
    y = r.uniform([0, 0], [3, 2], size=(n, 2))
    phi = r.uniform(0, 1, size=n)
    a = assign_cells(g, y, phi, 0.5)
    b = assign_cells(g, y, phi + shift, 0.5)
    assert np.array_equal(a.owner, b.owner)
    own = a.owner[g.inside_mask]
    assert np.all((own >= 0) & (own < n))


def test_distance_helpers():
    g = build_grid(ROOMS, 4)
    d = g.distance_outside(np.array([[4, 4], [9.5, 6], [20, 4]]))
    assert d[0] == 0 and d[1] == pytest.approx(1.5) and d[2] == pytest.approx(1.0)
    h = g.distance_outside_hull(np.array([[9.5, 6], [20, 4], [5, -2]]))
    assert h[0] == 0 and h[1] == pytest.approx(1.0) and h[2] == pytest.approx(2.0)
