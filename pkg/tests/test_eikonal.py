import heapq

import numpy as np
import pytest

from congestmfg.eikonal import OutOfBoundsError, SmoothPotential, fast_march, sample_potential
from congestmfg.grid import build_grid

ROOMS = [[0, 0, 8, 8], [8, 3.5, 11, 4.5], [11, 0, 19, 8]]


def test_straight_line():
    g = build_grid([[0, 0, 1, 1]], 128)
    pf = fast_march(g, sources=[(0, 0)])
    v, _ = sample_potential(pf, (1 - 0.5 / 128, 0.5 / 128))
    assert abs(v - 1.0) <= 3 / 128


def test_two_sources_is_min():
    g = build_grid([[0, 0, 4, 2]], 16)
    a = fast_march(g, sources=[(0.5, 0.5)], seed_radius=0.0)
    b = fast_march(g, sources=[(3.2, 1.6)], seed_radius=0.0)
    ab = fast_march(g, sources=[(0.5, 0.5), (3.2, 1.6)], seed_radius=0.0)
    assert np.array_equal(ab.values, np.minimum(a.values, b.values))


def dijkstra(g, speed, src):
    ny, nx = speed.shape
    h = 1 / g.resolution
    dist = np.full((ny, nx), np.inf)
    dist[src] = 0
    pq = [(0.0, src)]
    moves = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if dy or dx]
    while pq:
        d, (i, j) = heapq.heappop(pq)
        if d > dist[i, j]:
            continue
        for dy, dx in moves:
            a, b = i + dy, j + dx
            if 0 <= a < ny and 0 <= b < nx:
                c = d + h * np.hypot(dy, dx) * 0.5 * (1 / speed[i, j] + 1 / speed[a, b])
                if c < dist[a, b]:
                    dist[a, b] = c
                    heapq.heappush(pq, (c, (a, b)))
    return dist


def test_corridor_against_dijkstra():
    g = build_grid(ROOMS, 4)
    pf = fast_march(g, 1.0, 0.1, [(18, 1), (18, 7)])
    d = np.minimum(dijkstra(g, pf.speed, (4, 72)), dijkstra(g, pf.speed, (28, 72)))
    for p in [(1.0, 7.0), (1.0, 1.0), (4.0, 4.0)]:
        i, j = int(p[1] * 4), int(p[0] * 4)
        assert pf.values[i, j] == pytest.approx(d[i, j], rel=0.1)
        # the corridor route beats the straight slow route
        straight = np.hypot(18 - p[0], min(abs(7 - p[1]), abs(1 - p[1]))) / 0.1
        assert pf.values[i, j] < 0.5 * straight


def test_gradient_unit_and_nodes():
    g = build_grid([[0, 0, 2, 2]], 32)
    pf = fast_march(g, sources=[(0.2, 0.2)])
    v, _ = sample_potential(pf, (pf.xs[10], pf.ys[7]))
    assert v == pf.values[7, 10]
    pts = np.array([[1.2, 1.5], [1.7, 0.6], [0.9, 1.0]])
    _, gr = sample_potential(pf, pts)
    assert np.all(np.abs(np.linalg.norm(gr, axis=1) - 1) <= 0.1)
    _, g0 = sample_potential(pf, (0.2, 0.2))
    assert np.linalg.norm(g0) <= 1 + 1e-9


def test_invariants_and_monotone():
    g = build_grid(ROOMS, 4)
    slow = fast_march(g, 1.0, 0.1, [(18, 1), (18, 7)])
    fast = fast_march(g, 1.0, 0.5, [(18, 1), (18, 7)])
    assert np.all(slow.values >= 0)
    assert slow.values[4, 72] == 0 and slow.values[28, 72] == 0
    assert np.all(fast.values <= slow.values + 1e-12)
    # processed in nondecreasing order
    order = slow.values.ravel()[slow.order]
    assert np.all(np.diff(order) >= -1e-12)


def test_causality_upwind():
    g = build_grid([[0, 0, 3, 3]], 16)
    pf = fast_march(g, sources=[(1.0, 2.0)], seed_radius=0.0)
    v = pf.values
    h = 1 / 16
    ny, nx = v.shape
    for k in pf.order[1:]:
        i, j = divmod(int(k), nx)
        nb = [v[a, b] for a, b in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)) if 0 <= a < ny and 0 <= b < nx]
        assert min(nb) < v[i, j]  # depends on a smaller neighbour
        a = min(v[i, j - 1] if j > 0 else np.inf, v[i, j + 1] if j < nx - 1 else np.inf)
        b = min(v[i - 1, j] if i > 0 else np.inf, v[i + 1, j] if i < ny - 1 else np.inf)
        ga = max(v[i, j] - a, 0) / h
        gb = max(v[i, j] - b, 0) / h
        assert np.hypot(ga, gb) == pytest.approx(1.0, abs=1.0) and np.hypot(ga, gb) <= np.sqrt(2) + 1e-9


def test_errors():
    g = build_grid([[0, 0, 1, 1]], 8)
    with pytest.raises(OutOfBoundsError):
        fast_march(g, sources=[(2, 2)])
    pf = fast_march(g, sources=[(0.5, 0.5)])
    with pytest.raises(OutOfBoundsError):
        sample_potential(pf, (1.5, 0.5))
    with pytest.raises(ValueError):
        fast_march(g, 0.0)


def test_smooth_potential_consistent():
    g = build_grid(ROOMS, 8)
    sp = SmoothPotential(fast_march(g, 1.0, 0.1, [(18, 1), (18, 7)]))
    p = np.array([[3.1, 2.2], [9.4, 4.1], [15.0, 6.0], [20.0, 9.0]])
    v, gr = sp(p)
    h = 1e-6
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        fd = (sp(p + e)[0] - sp(p - e)[0]) / (2 * h)
        assert np.allclose(fd, gr[:, k], rtol=1e-5, atol=1e-5)
