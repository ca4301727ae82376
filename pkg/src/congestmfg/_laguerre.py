"""Exact integrals over charged Laguerre cells (numba kernels).

For site i with weight phi_i > 0 the integrands vanish outside the disk
B(y_i, R_i), R_i**2 = 2 eps phi_i, so the charged region of a convex piece P is
``P ∩ {half-planes against overlapping neighbours} ∩ B(y_i, R_i)``.  Integrals
of radial functions over that region are turned into boundary integrals
(Green's theorem) with closed-form radial antiderivatives; segment integrals
use Gauss-Legendre, arcs are exact.

Coordinates inside the kernels are relative to y_i.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit

GAUSS_ORDER = 12
_gx, _gw = np.polynomial.legendre.leggauss(GAUSS_ORDER)
GAUSS_U = 0.5 * (_gx + 1.0)
GAUSS_W = 0.5 * _gw


@njit(cache=True, inline="always")
def _gdiv(s, phi, e, two_eps):
    # (phi**e - p**e) / s with p = max(phi - s / two_eps, 0)
    if e == 0.0:
        return 0.0
    u = s / (two_eps * phi)
    if u >= 1.0:
        return phi**e / s
    if u < 1e-12:
        return e * phi ** (e - 1.0) / two_eps
    return phi**e * (-math.expm1(e * math.log1p(-u))) / s


@njit(cache=True)
def _clip(px, py, lab, cnt, nx, ny, h, label, ox, oy, olab):
    """Clip a convex polygon by X.n <= h; returns the new vertex count."""
    out = 0
    for k in range(cnt):
        k1 = k + 1 if k + 1 < cnt else 0
        ax, ay, bx, by = px[k], py[k], px[k1], py[k1]
        sa = ax * nx + ay * ny - h
        sb = bx * nx + by * ny - h
        if sa <= 0.0:
            ox[out] = ax
            oy[out] = ay
            olab[out] = lab[k]
            out += 1
            if sb > 0.0:
                t = sa / (sa - sb)
                ox[out] = ax + t * (bx - ax)
                oy[out] = ay + t * (by - ay)
                olab[out] = label
                out += 1
        elif sb <= 0.0:
            t = sa / (sa - sb)
            ox[out] = ax + t * (bx - ax)
            oy[out] = ay + t * (by - ay)
            olab[out] = lab[k]
            out += 1
    return out


@njit(cache=True)
def _inside(px, py, cnt, x, y, tol):
    for k in range(cnt):
        k1 = k + 1 if k + 1 < cnt else 0
        ex = px[k1] - px[k]
        ey = py[k1] - py[k]
        if ex * (y - py[k]) - ey * (x - px[k]) < -tol:
            return False
    return True


@njit(cache=True)
def _min_dist2(px, py, cnt):
    if _inside(px, py, cnt, 0.0, 0.0, 0.0):
        return 0.0
    best = np.inf
    for k in range(cnt):
        k1 = k + 1 if k + 1 < cnt else 0
        ax, ay = px[k], py[k]
        dx, dy = px[k1] - ax, py[k1] - ay
        dd = dx * dx + dy * dy
        t = 0.0
        if dd > 0.0:
            t = min(max(-(ax * dx + ay * dy) / dd, 0.0), 1.0)
        qx, qy = ax + t * dx, ay + t * dy
        best = min(best, qx * qx + qy * qy)
    return best


@njit(cache=True, nogil=True)
def cell_integrals(
    y, phi, eps, piece_xy, piece_n, piece_box, piece_alpha, piece_q, piece_sign,
    nbr_ptr, nbr_idx, gu, gw,
):
    """Per-cell value, mass, first moment (relative to y_i) and Hessian.

    Returns (val, mass, mom, hdiag, hoff, peak) where ``val[i]`` is
    the integral of f*(phi_i - c) over cell i, ``mass[i]`` that of (f*)',
    ``mom[i]`` that of (x - y_i) (f*)', ``hdiag``/``hoff`` the derivative of
    the masses with respect to the weights (``hoff`` aligned with the CSR
    neighbour lists) and ``peak[i]`` the largest density reached in the cell.
    """
    n = y.shape[0]
    npieces = piece_xy.shape[0]
    val = np.zeros(n)
    mass = np.zeros(n)
    mom = np.zeros((n, 2))
    hdiag = np.zeros(n)
    hoff = np.zeros(nbr_idx.shape[0])
    peak = np.zeros(n)
    two_eps = 2.0 * eps
    maxdeg = 0
    for i in range(n):
        maxdeg = max(maxdeg, nbr_ptr[i + 1] - nbr_ptr[i])
    cap = piece_xy.shape[1] + maxdeg + 8
    ax_ = np.empty(cap)
    ay_ = np.empty(cap)
    al_ = np.empty(cap, dtype=np.int64)
    bx_ = np.empty(cap)
    by_ = np.empty(cap)
    bl_ = np.empty(cap, dtype=np.int64)
    angles = np.empty(2 * cap)

    for i in range(n):
        ph = phi[i]
        if not ph > 0.0:
            continue
        R2 = two_eps * ph
        R = math.sqrt(R2)
        yx, yy = y[i, 0], y[i, 1]
        for pc in range(npieces):
            if (
                piece_box[pc, 0] >= yx + R or piece_box[pc, 2] <= yx - R
                or piece_box[pc, 1] >= yy + R or piece_box[pc, 3] <= yy - R
            ):
                continue
            alpha = piece_alpha[pc]
            if alpha == 0.0:
                continue
            q = piece_q[pc]
            sgn = piece_sign[pc]
            cnt = piece_n[pc]
            for k in range(cnt):
                ax_[k] = piece_xy[pc, k, 0] - yx
                ay_[k] = piece_xy[pc, k, 1] - yy
                al_[k] = -1
            # padded bounding box of the disk: its edges must not touch the circle
            Rb = 1.25 * R
            cnt = _clip(ax_, ay_, al_, cnt, 1.0, 0.0, Rb, -1, bx_, by_, bl_)
            cnt = _clip(bx_, by_, bl_, cnt, -1.0, 0.0, Rb, -1, ax_, ay_, al_)
            cnt = _clip(ax_, ay_, al_, cnt, 0.0, 1.0, Rb, -1, bx_, by_, bl_)
            cnt = _clip(bx_, by_, bl_, cnt, 0.0, -1.0, Rb, -1, ax_, ay_, al_)
            empty = cnt < 3
            for s in range(nbr_ptr[i], nbr_ptr[i + 1]):
                if empty:
                    break
                j = nbr_idx[s]
                nx = y[j, 0] - yx
                ny = y[j, 1] - yy
                nn = nx * nx + ny * ny
                if nn == 0.0:
                    if phi[j] > ph or (phi[j] == ph and j < i):
                        empty = True
                    continue
                h = 0.5 * nn + eps * (ph - phi[j])
                nrm = math.sqrt(nn)
                if h >= R * nrm:
                    continue
                if h <= -R * nrm:
                    empty = True
                    break
                cnt = _clip(ax_, ay_, al_, cnt, nx, ny, h, s, bx_, by_, bl_)
                for k in range(cnt):
                    ax_[k] = bx_[k]
                    ay_[k] = by_[k]
                    al_[k] = bl_[k]
                if cnt < 3:
                    empty = True
            if empty:
                continue

            v_acc = 0.0
            m_acc = 0.0
            mx_acc = 0.0
            my_acc = 0.0
            hi_acc = 0.0
            nang = 0
            for k in range(cnt):
                k1 = k + 1 if k + 1 < cnt else 0
                x0, y0 = ax_[k], ay_[k]
                dx, dy = ax_[k1] - x0, ay_[k1] - y0
                A = dx * dx + dy * dy
                if A == 0.0:
                    continue
                B = 2.0 * (x0 * dx + y0 * dy)
                C = x0 * x0 + y0 * y0 - R2
                disc = B * B - 4.0 * A * C
                if disc <= 0.0:
                    continue
                sq = math.sqrt(disc)
                t0 = (-B - sq) / (2.0 * A)
                t1 = (-B + sq) / (2.0 * A)
                if 0.0 < t0 < 1.0:
                    angles[nang] = math.atan2(y0 + t0 * dy, x0 + t0 * dx)
                    nang += 1
                if 0.0 < t1 < 1.0:
                    angles[nang] = math.atan2(y0 + t1 * dy, x0 + t1 * dx)
                    nang += 1
                t0 = max(t0, 0.0)
                t1 = min(t1, 1.0)
                if t1 <= t0:
                    continue
                px0 = x0 + t0 * dx
                py0 = y0 + t0 * dy
                ddx = (t1 - t0) * dx
                ddy = (t1 - t0) * dy
                cross = px0 * ddy - py0 * ddx
                sv = 0.0
                sm = 0.0
                sk = 0.0
                sh = 0.0
                se = 0.0
                for g in range(gu.shape[0]):
                    qx = px0 + gu[g] * ddx
                    qy = py0 + gu[g] * ddy
                    s2 = qx * qx + qy * qy
                    p = max(ph - s2 / two_eps, 0.0)
                    if s2 > 0.0:
                        sv += gw[g] * _gdiv(s2, ph, q + 1.0, two_eps)
                        sm += gw[g] * _gdiv(s2, ph, q, two_eps)
                        if q != 1.0:
                            sh += gw[g] * _gdiv(s2, ph, q - 1.0, two_eps)
                    else:
                        sv += gw[g] * (q + 1.0) * ph**q / two_eps
                        sm += gw[g] * q * ph ** (q - 1.0) / two_eps
                        if q != 1.0:
                            sh += gw[g] * (q - 1.0) * ph ** (q - 2.0) / two_eps
                    sk += gw[g] * p**q
                    if al_[k] >= 0:
                        if q == 1.0:
                            se += gw[g]
                        else:
                            se += gw[g] * q * p ** (q - 1.0)
                v_acc += cross * sv * alpha * eps / (q + 1.0)
                m_acc += cross * sm * alpha * eps
                if q != 1.0:
                    hi_acc += cross * sh * alpha * q * eps
                # moment: boundary integral of -eps f*(p) along the outward normal
                mx_acc += -alpha * eps * sk * ddy
                my_acc += alpha * eps * sk * ddx
                if al_[k] >= 0:
                    sl = al_[k]
                    j = nbr_idx[sl]
                    dist = math.sqrt((y[j, 0] - yx) ** 2 + (y[j, 1] - yy) ** 2)
                    e = sgn * alpha * se * math.sqrt(ddx * ddx + ddy * ddy) * eps / dist
                    hoff[sl] -= e
                    hdiag[i] += e

            # arcs of the circle inside the clipped polygon
            dtheta = 0.0
            tol = 1e-12 * R
            if nang == 0:
                if _inside(ax_, ay_, cnt, R, 0.0, tol):
                    dtheta = 2.0 * math.pi
            else:
                srt = np.sort(angles[:nang])
                for k in range(nang):
                    a0 = srt[k]
                    a1 = srt[k + 1] if k + 1 < nang else srt[0] + 2.0 * math.pi
                    if a1 - a0 <= 0.0:
                        continue
                    am = 0.5 * (a0 + a1)
                    if _inside(ax_, ay_, cnt, R * math.cos(am), R * math.sin(am), tol):
                        dtheta += a1 - a0
            if dtheta > 0.0:
                v_acc += alpha * eps / (q + 1.0) * ph ** (q + 1.0) * dtheta
                m_acc += alpha * eps * ph**q * dtheta
                if q == 1.0:
                    hdiag[i] += sgn * alpha * eps * dtheta
                else:
                    hi_acc += alpha * q * eps * ph ** (q - 1.0) * dtheta

            val[i] += sgn * v_acc
            mass[i] += sgn * m_acc
            mom[i, 0] += sgn * mx_acc
            mom[i, 1] += sgn * my_acc
            hdiag[i] += sgn * hi_acc
            if sgn > 0.0 and m_acc > 0.0:
                d2 = _min_dist2(ax_, ay_, cnt)
                pk = max(ph - d2 / two_eps, 0.0)
                dens = alpha if q == 1.0 else alpha * q * pk ** (q - 1.0)
                if dens > peak[i]:
                    peak[i] = dens
    return val, mass, mom, hdiag, hoff, peak
