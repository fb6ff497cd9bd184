"""Compiled inner loops: ray marching, the collision map and its derivative.

Everything here works on plain floats and arrays so numba can compile it.
Status codes: ``HIT`` (0) for a collision, ``ESCAPE`` (1) when the flight
runs past ``tau_max``.
"""

import math

import numpy as np
from numba import njit

HIT = 0
ESCAPE = 1

_SPLITTER = 134217729.0  # 2**27 + 1


@njit(cache=True, nogil=True)
def _two_prod(a, b):
    p = a * b
    t = _SPLITTER * a
    ahi = t - (t - a)
    alo = a - ahi
    t = _SPLITTER * b
    bhi = t - (t - b)
    blo = b - bhi
    err = ((ahi * bhi - p) + ahi * blo + alo * bhi) + alo * blo
    return p, err


@njit(cache=True, nogil=True)
def _cross_dd(dx, dy, wx, wy):
    """dx*wy - dy*wx in double-double, returned as (hi, lo)."""
    p1, e1 = _two_prod(dx, wy)
    p2, e2 = _two_prod(dy, wx)
    s = p1 - p2
    bb = s - p1
    es = (p1 - (s - bb)) + (-p2 - bb)
    lo = es + e1 - e2
    hi = s + lo
    lo = lo - (hi - s)
    return hi, lo


@njit(cache=True, nogil=True)
def _disc_root(ox, oy, dx, dy, cx, cy, r, eps_tan, eps_step):
    """Smallest admissible ray parameter of a hit on the disc at (cx, cy), or -1."""
    wx = cx - ox
    wy = cy - oy
    b = wx * dx + wy * dy
    if b <= 0.0:
        return -1.0
    c = dx * wy - dy * wx
    ac = abs(c)
    if ac >= r + 1e-9 * (1.0 + b):
        return -1.0
    disc = (r - ac) * (r + ac)
    thr = eps_tan * r * (r + b)
    if abs(disc) < 4.0 * thr:
        hi, lo = _cross_dd(dx, dy, wx, wy)
        if hi < 0.0:
            hi = -hi
            lo = -lo
        disc = ((r - hi) - lo) * (r + hi)
    if disc <= thr:
        return -1.0
    tau = b - math.sqrt(disc)
    if tau <= eps_step:
        return -1.0
    return tau


@njit(cache=True, nogil=True)
def flight(ox, oy, dx, dy, r, tau_max, eps_tan, eps_step):
    """March the unit cells centred on lattice sites along the ray.

    Each disc lies strictly inside its own cell (r < 1/2), so the first cell
    in marching order whose disc is hit holds the earliest collision.
    Returns (status, tau, ix, iy).
    """
    ix = int(math.floor(ox + 0.5))
    iy = int(math.floor(oy + 0.5))
    if dx > 0.0:
        stx = 1
        tmx = (ix + 0.5 - ox) / dx
        tdx = 1.0 / dx
    elif dx < 0.0:
        stx = -1
        tmx = (ix - 0.5 - ox) / dx
        tdx = -1.0 / dx
    else:
        stx = 0
        tmx = np.inf
        tdx = np.inf
    if dy > 0.0:
        sty = 1
        tmy = (iy + 0.5 - oy) / dy
        tdy = 1.0 / dy
    elif dy < 0.0:
        sty = -1
        tmy = (iy - 0.5 - oy) / dy
        tdy = -1.0 / dy
    else:
        sty = 0
        tmy = np.inf
        tdy = np.inf
    while True:
        tau = _disc_root(ox, oy, dx, dy, float(ix), float(iy), r, eps_tan, eps_step)
        if tau > 0.0:
            if tau > tau_max:
                return ESCAPE, tau_max, 0, 0
            return HIT, tau, ix, iy
        if tmx < tmy:
            if tmx > tau_max:
                return ESCAPE, tau_max, 0, 0
            ix += stx
            tmx += tdx
        else:
            if tmy > tau_max:
                return ESCAPE, tau_max, 0, 0
            iy += sty
            tmy += tdy


@njit(cache=True, nogil=True)
def symbol_of(ix, iy):
    """Return symbol: cells crossed along the dominant axis, 0 for neighbour hops."""
    n = max(abs(ix), abs(iy))
    if n < 2:
        return 0
    return n


@njit(cache=True, nogil=True)
def step(s, phi, r, tau_max, eps_tan, eps_step):
    """One application of the collision map.

    Returns (status, s1, phi1, tau, ix, iy, j00, j01, j10, j11) where the j's
    are the entries of the derivative d(s1, phi1)/d(s, phi).
    """
    two_pi = 2.0 * math.pi
    th = s / r
    nx = math.cos(th)
    ny = math.sin(th)
    cp = math.cos(phi)
    sp = math.sin(phi)
    # outgoing velocity = cos(phi) n + sin(phi) t,  t = (-ny, nx)
    vx = cp * nx - sp * ny
    vy = cp * ny + sp * nx
    px = r * nx
    py = r * ny
    status, tau, ix, iy = flight(px, py, vx, vy, r, tau_max, eps_tan, eps_step)
    if status != HIT:
        return status, s, phi, tau, 0, 0, 0.0, 0.0, 0.0, 0.0
    hx = px + tau * vx - ix
    hy = py + tau * vy - iy
    th1 = math.atan2(hy, hx)
    if th1 < 0.0:
        th1 += two_pi
    mx = math.cos(th1)
    my = math.sin(th1)
    vn = vx * mx + vy * my
    ux = vx - 2.0 * vn * mx
    uy = vy - 2.0 * vn * my
    un = ux * mx + uy * my
    ut = -ux * my + uy * mx
    phi1 = math.atan2(ut, un)
    s1 = r * th1
    if s1 >= two_pi * r:
        s1 -= two_pi * r
    cp1 = math.cos(phi1)
    k = 1.0 / r
    inv = 1.0 / cp1
    j00 = -(tau * k + cp) * inv
    j01 = -tau * inv
    j10 = -(tau * k * k + k * cp1 + k * cp) * inv
    j11 = -(tau * k + cp1) * inv
    return HIT, s1, phi1, tau, ix, iy, j00, j01, j10, j11


@njit(cache=True, nogil=True)
def step_batch(s, phi, r, tau_max, eps_tan, eps_step, reverse):
    """Vectorised step over arrays; ``reverse`` applies iota T iota instead."""
    m = s.shape[0]
    status = np.empty(m, np.int64)
    s1 = np.empty(m)
    phi1 = np.empty(m)
    tau = np.empty(m)
    disp = np.empty((m, 2), np.int64)
    jac = np.empty((m, 2, 2))
    sgn = -1.0 if reverse else 1.0
    for i in range(m):
        st, a, b, t, ix, iy, j00, j01, j10, j11 = step(
            s[i], sgn * phi[i], r, tau_max, eps_tan, eps_step)
        status[i] = st
        s1[i] = a
        phi1[i] = sgn * b
        tau[i] = t
        disp[i, 0] = ix
        disp[i, 1] = iy
        # iota T iota has derivative J DT J with J = diag(1, -1)
        jac[i, 0, 0] = j00
        jac[i, 0, 1] = sgn * j01
        jac[i, 1, 0] = sgn * j10
        jac[i, 1, 1] = j11
    return status, s1, phi1, tau, disp, jac


@njit(cache=True, nogil=True)
def tangent_run(s, phi, ts, tphi, steps, r, tau_max, eps_tan, eps_step):
    """Iterate the map and a renormalised tangent vector.

    Returns (done, sum_log, s, phi, ts, tphi); ``done < steps`` signals an
    escape at step ``done``.
    """
    total = 0.0
    for i in range(steps):
        st, s1, phi1, tau, ix, iy, j00, j01, j10, j11 = step(
            s, phi, r, tau_max, eps_tan, eps_step)
        if st != HIT:
            return i, total, s, phi, ts, tphi
        a = j00 * ts + j01 * tphi
        b = j10 * ts + j11 * tphi
        nrm = math.sqrt(a * a + b * b)
        total += math.log(nrm)
        ts = a / nrm
        tphi = b / nrm
        s = s1
        phi = phi1
    return steps, total, s, phi, ts, tphi


@njit(cache=True, nogil=True)
def orbit_run(s, phi, ts, tphi, steps, r, tau_max, eps_tan, eps_step):
    """Like tangent_run but records every collision.

    Rows: s, phi, tau, dx, dy, symbol, log_expansion.  Returns (done, rows).
    """
    out = np.empty((steps, 7))
    for i in range(steps):
        st, s1, phi1, tau, ix, iy, j00, j01, j10, j11 = step(
            s, phi, r, tau_max, eps_tan, eps_step)
        if st != HIT:
            return i, out[:i]
        a = j00 * ts + j01 * tphi
        b = j10 * ts + j11 * tphi
        nrm = math.sqrt(a * a + b * b)
        ts = a / nrm
        tphi = b / nrm
        s = s1
        phi = phi1
        out[i, 0] = s1
        out[i, 1] = phi1
        out[i, 2] = tau
        out[i, 3] = ix
        out[i, 4] = iy
        out[i, 5] = symbol_of(ix, iy)
        out[i, 6] = math.log(nrm)
    return steps, out


@njit(cache=True, nogil=True)
def symbol_grid(s_vals, phi_vals, r, tau_max, eps_tan, eps_step, reverse):
    """Return symbols on a tensor grid (rows follow phi, columns follow s).

    -1 marks an escape; -2 marks a point outside the phase cylinder.
    """
    ns = s_vals.shape[0]
    nphi = phi_vals.shape[0]
    out = np.empty((nphi, ns), np.int64)
    half = 0.5 * math.pi
    sgn = -1.0 if reverse else 1.0
    for j in range(nphi):
        ph = phi_vals[j]
        for i in range(ns):
            if abs(ph) > half:
                out[j, i] = -2
                continue
            st, a, b, t, ix, iy, j00, j01, j10, j11 = step(
                s_vals[i], sgn * ph, r, tau_max, eps_tan, eps_step)
            if st != HIT:
                out[j, i] = -1
            else:
                out[j, i] = symbol_of(ix, iy)
    return out
