"""Cells of the collision map near supersingular points.

A supersingular point is a grazing phase point whose ray runs along a
corridor and never returns.  Near it the map's domains of continuity (cells
A_n) are thin strips indexed by the return symbol n.  Two descriptions are
kept side by side and checked against each other:

* an empirical one, rasterising the return symbol of the map itself;
* an exact one, where every cell boundary is a tangency between the outgoing
  ray and a specific disc.  In the chart (s, beta), beta being the ray's
  direction angle measured from the corridor axis, all boundaries are
  explicit graphs over s.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, optimize, stats

from . import _kernels
from .billiard_map import forward_batch, inverse_batch
from .errors import FitError, ResolutionError
from .geometry import BilliardTable, Corridor

HALF_PI = 0.5 * math.pi


@dataclass(frozen=True)
class SupersingularPoint:
    id: int
    s_star: float
    phi_star: float
    corridor: Corridor
    direction: tuple[float, float]   # unit vector of the grazing velocity
    normal: tuple[float, float]      # outward normal at the point, into the corridor

    @property
    def lattice_direction(self) -> tuple[int, int]:
        """Primitive lattice vector along the grazing velocity."""
        u = np.array(self.direction)
        d = np.array(self.corridor.direction, dtype=float)
        return self.corridor.direction if float(u @ d) > 0 else (-self.corridor.p, -self.corridor.q)


def supersingular_points(table: BilliardTable) -> list[SupersingularPoint]:
    """Two grazing points per corridor direction (one on each side of the disc row)."""
    out = []
    seen = set()
    per = table.perimeter
    for cor in table.corridors:
        u = cor.unit()
        for sigma in (1.0, -1.0):
            nrm = sigma * np.array([-u[1], u[0]])
            tng = np.array([-nrm[1], nrm[0]])
            th = math.atan2(nrm[1], nrm[0]) % (2 * math.pi)
            s_star = (table.r * th) % per
            phi_star = HALF_PI if float(u @ tng) > 0 else -HALF_PI
            key = (round(s_star, 12), phi_star)
            if key in seen:
                continue
            seen.add(key)
            out.append(SupersingularPoint(len(out), s_star, phi_star, cor,
                                          (float(u[0]), float(u[1])),
                                          (float(nrm[0]), float(nrm[1]))))
    return out


def reversed_anchor(table: BilliardTable, anchor: SupersingularPoint) -> SupersingularPoint:
    """Same boundary point, opposite grazing direction."""
    for a in supersingular_points(table):
        if abs(a.s_star - anchor.s_star) < 1e-12 and a.phi_star == -anchor.phi_star:
            return a
    raise LookupError("reversed anchor not found")


def landing_anchor(table: BilliardTable, anchor: SupersingularPoint) -> SupersingularPoint:
    """Anchor on the far side of the corridor, where flights from ``anchor`` land."""
    u = np.array(anchor.direction)
    nrm = -np.array(anchor.normal)
    for a in supersingular_points(table):
        if np.allclose(a.direction, u, atol=1e-12) and np.allclose(a.normal, nrm, atol=1e-12):
            return a
    raise LookupError("landing anchor not found")


# ---------------------------------------------------------------- exact chart

class AnchorChart:
    """Exact cell geometry near one supersingular point.

    Frame: e1 along the grazing velocity, e2 along the outward normal (toward
    the facing disc row).  Discs of the facing row ahead of the anchor are
    c_k = o + k d, k >= 0.  A_n is the set of outgoing rays that hit the
    facing-row disc whose return symbol is n.
    """

    def __init__(self, table: BilliardTable, anchor: SupersingularPoint):
        self.table = table
        self.anchor = anchor
        self.r = table.r
        self.e1 = np.array(anchor.direction)
        self.e2 = np.array(anchor.normal)
        d = np.array(anchor.lattice_direction)
        self.d = d
        self.row_gap = 1.0 / math.hypot(*d)
        # lattice vector on the facing row with the smallest non-negative e1 projection
        best = None
        span = int(abs(d).max()) + 2
        for a in range(-span, span + 1):
            for b in range(-span, span + 1):
                c = np.array([a, b])
                h = float(c @ self.e2)
                x = float(c @ self.e1)
                if abs(h - self.row_gap) < 1e-9 and x >= -1e-12:
                    if best is None or x < float(best @ self.e1):
                        best = c
        self.o = best

    # -- discs
    def disc(self, k: int) -> np.ndarray:
        return self.o + k * self.d

    def symbol_of_k(self, k: int) -> int:
        c = self.disc(k)
        return int(_kernels.symbol_of(int(c[0]), int(c[1])))

    def k_of_symbol(self, n: int) -> int:
        step = int(abs(self.d).max())
        k0 = max(0, n // step - 3)
        for k in range(k0, k0 + 8):
            if self.symbol_of_k(k) == n:
                return k
        raise ValueError(f"no facing-row disc with symbol {n} at anchor {self.anchor.id}")

    # -- coordinates
    def _pos(self, s):
        th = np.asarray(s, dtype=float) / self.r
        nx, ny = np.cos(th), np.sin(th)
        return nx, ny

    def phi_from_beta(self, s, beta):
        nx, ny = self._pos(s)
        vx = np.cos(beta) * self.e1[0] + np.sin(beta) * self.e2[0]
        vy = np.cos(beta) * self.e1[1] + np.sin(beta) * self.e2[1]
        vn = vx * nx + vy * ny
        vt = -vx * ny + vy * nx
        return np.arctan2(vt, vn)

    def beta_from_phi(self, s, phi):
        nx, ny = self._pos(s)
        vx = np.cos(phi) * nx - np.sin(phi) * ny
        vy = np.cos(phi) * ny + np.sin(phi) * nx
        return np.arctan2(vx * self.e2[0] + vy * self.e2[1], vx * self.e1[0] + vy * self.e1[1])

    def delta(self, s):
        """Signed offset from the anchor, in radians of arc, oriented along e1."""
        ds = (np.asarray(s, dtype=float) - self.anchor.s_star) / self.r
        ds = (ds + math.pi) % (2 * math.pi) - math.pi
        # the counterclockwise tangent at the anchor is +e1 or -e1
        return ds if self.anchor.phi_star > 0 else -ds

    def s_of_delta(self, delta):
        sgn = 1.0 if self.anchor.phi_star > 0 else -1.0
        return self.anchor.s_star + sgn * self.r * np.asarray(delta, dtype=float)

    # -- boundary graphs beta(s)
    def _frame_offset(self, s, c):
        nx, ny = self._pos(s)
        px, py = self.r * nx, self.r * ny
        wx, wy = c[0] - px, c[1] - py
        w1 = wx * self.e1[0] + wy * self.e1[1]
        w2 = wx * self.e2[0] + wy * self.e2[1]
        return np.arctan2(w2, w1), np.hypot(w1, w2)

    def tangent_below(self, s, k):
        """Rays just clearing disc c_k on the near side."""
        g, rho = self._frame_offset(s, self.disc(k))
        return g - np.arcsin(self.r / rho)

    def tangent_above(self, s, k):
        g, rho = self._frame_offset(s, self.disc(k))
        return g + np.arcsin(self.r / rho)

    def neighbour_floor(self, s):
        """Rays must pass above the next disc of the anchor's own row."""
        g, rho = self._frame_offset(s, self.d)
        return g + np.arcsin(self.r / rho)

    def grazing_floor(self, s):
        nx, ny = self._pos(s)
        th = np.arctan2(nx * self.e2[0] + ny * self.e2[1], nx * self.e1[0] + ny * self.e1[1])
        return th - HALF_PI

    def floor(self, s):
        return np.maximum(self.grazing_floor(s), self.neighbour_floor(s))

    def cell_interval(self, s, n):
        """(low, high) beta bounds of A_n at each s; empty where low >= high."""
        k = self.k_of_symbol(n)
        lo = np.maximum(self.tangent_below(s, k), self.floor(s))
        hi = self.tangent_above(s, k)
        if k > 0:
            hi = np.minimum(hi, self.tangent_below(s, k - 1))
        return lo, hi

    def contains(self, s, phi, n):
        beta = self.beta_from_phi(s, phi)
        lo, hi = self.cell_interval(s, n)
        return (beta > lo) & (beta < hi)

    def delta_window(self, n):
        """Delta range guaranteed to contain A_n."""
        w = min(HALF_PI, 4.0 * math.sqrt(2.0 / (self.r * max(n, 1))) + 4.0 / max(n, 1))
        return -w, w

    def cell_extent(self, n, samples=4001):
        """Delta interval on which A_n is non-empty, refined by root finding."""
        lo_d, hi_d = self.delta_window(n)
        dl = np.linspace(lo_d, hi_d, samples)
        lo, hi = self.cell_interval(self.s_of_delta(dl), n)
        ok = hi > lo
        if not ok.any():
            return None
        idx = np.flatnonzero(ok)
        i0, i1 = idx[0], idx[-1]

        def gap(x):
            a, b = self.cell_interval(self.s_of_delta(np.array([x])), n)
            return float(b[0] - a[0])

        left = dl[i0] if i0 == 0 else optimize.brentq(gap, dl[i0 - 1], dl[i0], xtol=1e-15)
        right = dl[i1] if i1 == samples - 1 else optimize.brentq(gap, dl[i1], dl[i1 + 1], xtol=1e-15)
        return left, right

    def sample_cell(self, n, count, rng):
        """Points of A_n drawn uniformly in the (s, beta) chart (uniform in ds dphi)."""
        ext = self.cell_extent(n)
        if ext is None:
            return np.empty(0), np.empty(0)
        grid = np.linspace(ext[0], ext[1], 2001)
        lo, hi = self.cell_interval(self.s_of_delta(grid), n)
        wmax = float(np.max(hi - lo))
        out_s, out_b = [], []
        got = 0
        while got < count:
            m = 4 * (count - got) + 16
            dl = rng.uniform(ext[0], ext[1], m)
            s = self.s_of_delta(dl)
            lo, hi = self.cell_interval(s, n)
            u = rng.uniform(0.0, wmax, m)
            keep = u < (hi - lo)
            b = lo[keep] + u[keep]
            out_s.append(s[keep])
            out_b.append(b)
            got += int(keep.sum())
        s = np.concatenate(out_s)[:count]
        b = np.concatenate(out_b)[:count]
        phi = self.phi_from_beta(s, b)
        return s % self.table.perimeter, phi


# ---------------------------------------------------------------- crossings

@dataclass
class CrossingReport:
    n: int
    m: int
    anchor_id: int
    landing_anchor_id: int
    crossings: dict = field(default_factory=dict)   # (image side, cell side) -> (s, phi) or None

    @property
    def full(self) -> bool:
        return len(self.crossings) == 4 and all(v is not None for v in self.crossings.values())

    def to_dict(self) -> dict:
        return {"n": self.n, "m": self.m, "anchor": self.anchor_id,
                "landing_anchor": self.landing_anchor_id, "full": self.full,
                "crossings": {f"{a}/{b}": v for (a, b), v in self.crossings.items()}}


class _LandingPair:
    """Forward cells A_m and image cells T(A_n) = A'_n in one landing chart."""

    def __init__(self, table, anchor):
        self.land = landing_anchor(table, anchor)
        self.fwd = AnchorChart(table, self.land)
        self.back = AnchorChart(table, reversed_anchor(table, self.land))

    def image_side(self, s, k):
        """A'_n long side: time reversal of a long side of A_n at the reversed anchor."""
        phi_bar = self.back.phi_from_beta(s, self.back.tangent_below(s, k))
        return self.fwd.beta_from_phi(s, -phi_bar)

    def in_image_closure(self, s, beta, kn, tol):
        phi = self.fwd.phi_from_beta(s, beta)
        bb = self.back.beta_from_phi(s, -phi)
        lo = max(float(self.back.tangent_below(s, kn)), float(self.back.floor(s)))
        hi = float(self.back.tangent_above(s, kn))
        if kn > 0:
            hi = min(hi, float(self.back.tangent_below(s, kn - 1)))
        return lo - tol <= bb <= hi + tol

    def in_cell_closure(self, s, beta, km, tol):
        lo = max(float(self.fwd.tangent_below(s, km)), float(self.fwd.floor(s)))
        hi = float(self.fwd.tangent_above(s, km))
        if km > 0:
            hi = min(hi, float(self.fwd.tangent_below(s, km - 1)))
        return lo - tol <= beta <= hi + tol


def intersection_check(table: BilliardTable, n: int, m: int, anchor: SupersingularPoint | None = None,
                       samples: int = 4001) -> CrossingReport:
    """Do both long sides of T(A_n) cross both long sides of A_m?

    Works in the landing chart, where the long sides of A_m are tangencies to
    facing-row discs and those of A'_n = T(A_n) are time-reversed tangencies.
    Each crossing is located by root finding on the difference of the two
    boundary graphs and accepted only if it lies between the short sides of
    both cells.
    """
    if anchor is None:
        anchor = supersingular_points(table)[0]
    pair = _LandingPair(table, anchor)
    fwd = pair.fwd
    km = fwd.k_of_symbol(m)
    kn = pair.back.k_of_symbol(n)
    lo_d, hi_d = fwd.delta_window(min(n, m))
    dl = np.linspace(lo_d, hi_d, samples)
    s = fwd.s_of_delta(dl)
    report = CrossingReport(n, m, anchor.id, pair.land.id)
    tol = 1e-12 + 1e-9 / max(n, m) ** 2
    for a_name, ka in (("image_upper", kn - 1), ("image_lower", kn)):
        img = pair.image_side(s, ka)
        for b_name, kb in (("cell_upper", km - 1), ("cell_lower", km)):
            cel = fwd.tangent_below(s, kb)
            diff = cel - img
            good = np.isfinite(diff)
            found = None
            idx = np.flatnonzero(good[:-1] & good[1:] & (np.sign(diff[:-1]) != np.sign(diff[1:])))
            for i in idx:
                def f(x, ka=ka, kb=kb):
                    sx = fwd.s_of_delta(np.array([x]))
                    return float(fwd.tangent_below(sx, kb)[0] - pair.image_side(sx, ka)[0])
                x = optimize.brentq(f, dl[i], dl[i + 1], xtol=1e-17, rtol=1e-15)
                sx = float(fwd.s_of_delta(x))
                beta = float(fwd.tangent_below(np.array([sx]), kb)[0])
                if pair.in_cell_closure(sx, beta, km, tol) and pair.in_image_closure(sx, beta, kn, tol):
                    found = (sx % table.perimeter, float(fwd.phi_from_beta(sx, beta)))
                    break
            report.crossings[(a_name, b_name)] = found
    return report


def crossing_range(table: BilliardTable, n: int, m_cap: int = 100_000,
                   anchor: SupersingularPoint | None = None) -> tuple[int | None, int | None]:
    """Measured [m_lo, m_hi] of symbols m whose cells are fully crossed by T(A_n).

    Bisection on both edges; assumes the crossing set is an interval, which the
    tests probe separately.  m_hi equal to ``m_cap`` means "at least the cap".
    """
    def full(m):
        return intersection_check(table, n, m, anchor).full

    grid = np.unique(np.geomspace(2, m_cap, 40).astype(int))
    hits = [int(m) for m in grid if full(int(m))]
    if not hits:
        return None, None
    lo_ok = hits[0]
    below = [int(m) for m in grid if m < lo_ok]
    lo_bad = below[-1] if below else None
    if lo_bad is not None:
        while lo_ok - lo_bad > 1:
            mid = (lo_ok + lo_bad) // 2
            if full(mid):
                lo_ok = mid
            else:
                lo_bad = mid
    hi_ok = hits[-1]
    above = [int(m) for m in grid if m > hi_ok]
    hi_bad = above[0] if above else None
    if hi_bad is not None:
        while hi_bad - hi_ok > 1:
            mid = (hi_ok + hi_bad) // 2
            if full(mid):
                hi_ok = mid
            else:
                hi_bad = mid
    return lo_ok, hi_ok


@dataclass
class CellConstants:
    c: float
    n_star: int
    probe_ledger: list = field(default_factory=list)
    m_cap: int = 100_000

    def m_window(self, n: int) -> tuple[int, int]:
        """Integer symbols m with c*sqrt(n) <= m <= n^2/c^2, capped at m_cap."""
        lo = math.ceil(self.c * math.sqrt(n) - 1e-12)
        hi = min(math.floor(n * n / (self.c * self.c) + 1e-12), self.m_cap)
        return lo, hi


def _claim_holds(c, n, m_lo, m_hi, m_cap):
    if m_lo is None:
        return False
    lo = math.ceil(c * math.sqrt(n) - 1e-12)
    hi = min(math.floor(n * n / (c * c) + 1e-12), m_cap)
    if lo > hi:
        return False
    return m_lo <= lo and (hi <= m_hi)


def estimate_constants(table: BilliardTable, n_probe_set, *, m_cap: int = 100_000,
                       n_star_max: int = 20, anchor: SupersingularPoint | None = None,
                       c_step: float = 0.05, c_max: float = 10.0) -> CellConstants:
    """Smallest c > 1 on a ``c_step`` grid, and the matching n_star, for which
    every probed n > n_star has all of [c sqrt(n), n^2/c^2] fully crossed.

    Probed n that fail for a given c are absorbed into n_star, but only below
    ``n_star_max``; more probes can only add constraints, so the returned c is
    monotone in the probe set.  The claimed window is checked at its ends and
    on a geometric grid inside; every check goes into the probe ledger.
    """
    probes = sorted(set(int(n) for n in n_probe_set))
    ranges = {n: crossing_range(table, n, m_cap, anchor) for n in probes}
    ledger = [{"n": n, "m_lo": ranges[n][0], "m_hi": ranges[n][1]} for n in probes]
    steps = int(round((c_max - 1.0) / c_step))
    for i in range(1, steps + 1):
        c = round(1.0 + i * c_step, 10)
        failing = [n for n in probes if not _claim_holds(c, n, *ranges[n], m_cap)]
        if failing and max(failing) >= n_star_max:
            continue
        n_star = max(failing) if failing else probes[0] - 1
        consts = CellConstants(c, n_star, ledger, m_cap)
        if all(_verify_window(table, consts, n, anchor, consts.probe_ledger)
               for n in probes if n > n_star):
            return consts
    raise FitError(f"no c <= {c_max} satisfies the crossing claim on probes {probes}")


def _verify_window(table, consts, n, anchor, ledger, inner=6):
    lo, hi = consts.m_window(n)
    if lo > hi:
        return False
    ms = sorted({lo, hi, *np.unique(np.geomspace(lo, hi, inner).astype(int)).tolist()})
    ok = True
    for m in ms:
        full = intersection_check(table, n, int(m), anchor).full
        ledger.append({"n": n, "m": int(m), "full": full})
        ok = ok and full
    return ok


def validate_constants(table: BilliardTable, consts: CellConstants, n_set,
                       anchor: SupersingularPoint | None = None) -> list:
    """Held-out check; returns the list of failing (n, m) pairs."""
    failures = []
    for n in n_set:
        if n <= consts.n_star:
            continue
        ledger = []
        _verify_window(table, consts, int(n), anchor, ledger)
        failures += [(e["n"], e["m"]) for e in ledger if not e["full"]]
    return failures


# ---------------------------------------------------------------- raster scan

@dataclass
class CellDescriptor:
    anchor: int
    n: int
    orientation: str
    bbox: tuple          # s_min, s_max, phi_min, phi_max
    width_long: float
    width_short: float
    thickness_px: float
    components: int
    expansion_sample: list = field(default_factory=list)

    def row(self) -> dict:
        return {"n": self.n, "orientation": self.orientation, "anchor_id": self.anchor,
                "s_min": self.bbox[0], "s_max": self.bbox[1],
                "phi_min": self.bbox[2], "phi_max": self.bbox[3],
                "width_long": self.width_long, "width_short": self.width_short,
                "expansion_median": float(np.median(self.expansion_sample))
                if self.expansion_sample else float("nan")}


@dataclass
class Raster:
    """Return-symbol grid: rows follow beta (direction angle), columns follow delta."""
    anchor: int
    orientation: str
    delta: np.ndarray
    beta: np.ndarray
    symbols: np.ndarray

    def header(self) -> dict:
        return {"anchor": self.anchor, "orientation": self.orientation,
                "resolution": list(self.symbols.shape[::-1]),
                "window": {"delta": [float(self.delta[0]), float(self.delta[-1])],
                           "beta": [float(self.beta[0]), float(self.beta[-1])]},
                "dtype": "int64", "order": "C (row = beta, column = delta)"}


def _symbols_from(res):
    sym = np.maximum(np.abs(res.displacement[:, 0]), np.abs(res.displacement[:, 1]))
    sym = np.where(sym < 2, 0, sym)
    return np.where(res.ok, sym, -1)


def rasterize(table: BilliardTable, anchor: SupersingularPoint, delta_window, beta_window,
              resolution: int, orientation: str = "forward") -> Raster:
    """Return symbols on a grid of the anchor's (delta, beta) chart.

    For ``orientation="inverse"`` the chart is that of the reversed anchor and
    each grid point is mapped through time reversal, so the raster shows the
    inverse cells A'_n at ``anchor``.
    """
    if orientation == "forward":
        chart = AnchorChart(table, anchor)
    else:
        chart = AnchorChart(table, reversed_anchor(table, anchor))
    dl = np.linspace(*delta_window, resolution)
    bt = np.linspace(*beta_window, resolution)
    D, B = np.meshgrid(dl, bt)
    s = chart.s_of_delta(D.ravel())
    phi = chart.phi_from_beta(s, B.ravel())
    inside = np.abs(phi) <= HALF_PI
    s = s % table.perimeter
    if orientation == "forward":
        res = forward_batch(table, s, np.clip(phi, -HALF_PI, HALF_PI))
    else:
        res = inverse_batch(table, s, -np.clip(phi, -HALF_PI, HALF_PI))
    sym = np.where(inside, _symbols_from(res), -2).reshape(D.shape)
    return Raster(anchor.id, orientation, dl, bt, sym)


def _window_for(chart: AnchorChart, n_values):
    d_lo, d_hi, b_lo, b_hi = np.inf, -np.inf, np.inf, -np.inf
    for n in n_values:
        ext = chart.cell_extent(n)
        if ext is None:
            continue
        grid = np.linspace(ext[0], ext[1], 801)
        lo, hi = chart.cell_interval(chart.s_of_delta(grid), n)
        ok = hi > lo
        d_lo, d_hi = min(d_lo, ext[0]), max(d_hi, ext[1])
        b_lo, b_hi = min(b_lo, float(lo[ok].min())), max(b_hi, float(hi[ok].max()))
    pad_d = 0.02 * (d_hi - d_lo)
    pad_b = 0.02 * (b_hi - b_lo)
    return (d_lo - pad_d, d_hi + pad_d), (b_lo - pad_b, b_hi + pad_b)


def scan_cells(table: BilliardTable, anchor: SupersingularPoint, n_range, grid_resolution: int = 1000,
               orientation: str = "forward", expansion_points: int = 16,
               return_raster: bool = False):
    """Rasterise the anchor neighbourhood and describe the cell of each requested n.

    The window is the smallest (delta, beta) box holding the requested cells,
    using the exact boundaries; the cells themselves come from the map's return
    symbols.  Each cell is the largest connected component carrying its
    symbol.  Raises ResolutionError when a cell is thinner than 3 grid rows.
    """
    n_values = list(range(n_range[0], n_range[1] + 1)) if isinstance(n_range, tuple) else list(n_range)
    if min(n_values) < 2:
        raise ValueError("cells start at n = 2")
    if grid_resolution < 1000:
        raise ValueError("grid_resolution must be >= 1000 per axis")
    base = anchor if orientation == "forward" else reversed_anchor(table, anchor)
    chart = AnchorChart(table, base)
    dwin, bwin = _window_for(chart, n_values)
    ras = rasterize(table, anchor, dwin, bwin, grid_resolution, orientation)
    px_b = (bwin[1] - bwin[0]) / (grid_resolution - 1)
    out = []
    for n in n_values:
        mask = ras.symbols == n
        lab, ncomp = ndimage.label(mask)
        if ncomp == 0:
            raise ResolutionError(f"cell n={n} not found on the raster")
        sizes = ndimage.sum(mask, lab, range(1, ncomp + 1))
        comp = lab == (1 + int(np.argmax(sizes)))
        cols = comp.sum(axis=0)
        thick = float(np.median(cols[cols > 0]))
        if thick < 3:
            raise ResolutionError(f"cell n={n} is {thick:g} grid rows thick; need >= 3")
        rows, colsi = np.nonzero(comp)
        dsel = ras.delta[colsi]
        bsel = ras.beta[rows]
        s = chart.s_of_delta(dsel)
        phi = chart.phi_from_beta(s, bsel)
        if orientation == "inverse":
            phi = -phi
        i0, i1 = np.argmin(dsel), np.argmax(dsel)
        ds = (s[i1] - s[i0])
        length = math.hypot(ds, phi[i1] - phi[i0])
        px_area = (dwin[1] - dwin[0]) / (grid_resolution - 1) * table.r * px_b
        area = comp.sum() * px_area
        sm = s % table.perimeter
        desc = CellDescriptor(anchor.id, n, orientation,
                              (float(sm.min()), float(sm.max()), float(phi.min()), float(phi.max())),
                              length, area / length, thick, int(ncomp))
        if expansion_points:
            pick = np.linspace(0, rows.size - 1, expansion_points).astype(int)
            fn = forward_batch if orientation == "forward" else inverse_batch
            res = fn(table, sm[pick], phi[pick])
            desc.expansion_sample = np.linalg.norm(res.derivative[res.ok], ord=2, axis=(1, 2)).tolist()
        out.append(desc)
    if return_raster:
        return out, ras
    return out


def count_cells(table: BilliardTable, anchor: SupersingularPoint, resolution: int,
                ds: float | None = None, dphi: float = 0.15) -> int:
    """Distinct return symbols >= 2 seen in a fixed (s, phi) box at the anchor."""
    ds = 0.2 * table.r if ds is None else ds
    s = anchor.s_star + np.linspace(-ds / 2, ds / 2, resolution)
    sgn = -1.0 if anchor.phi_star > 0 else 1.0
    phi = anchor.phi_star + sgn * np.linspace(0.0, dphi, resolution)
    sym = _kernels.symbol_grid(s % table.perimeter, phi, table.r, table.tau_max,
                               table.eps_tangency, table.eps_step, False)
    return int(np.unique(sym[sym >= 2]).size)


# ---------------------------------------------------------------- expansion

def sample_cell_points(table, anchor, n, count, rng, orientation="forward"):
    """Points of A_n (forward) or A'_n (inverse) at ``anchor``, checked against the map."""
    if orientation == "forward":
        s, phi = AnchorChart(table, anchor).sample_cell(n, count, rng)
        res = forward_batch(table, s, phi)
    else:
        s, phi = AnchorChart(table, reversed_anchor(table, anchor)).sample_cell(n, count, rng)
        phi = -phi
        res = inverse_batch(table, s, phi)
    ok = res.ok & (_symbols_from(res) == n)
    return s[ok], phi[ok], res.derivative[ok], int((~ok).sum())


@dataclass
class ExpansionReport:
    orientation: str
    n: list
    median: list
    q10: list
    q90: list
    slope: float
    slope_ci: tuple
    intercept: float
    spread: float
    rejected: int

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("orientation", "n", "median", "q10", "q90", "slope", "slope_ci",
                 "intercept", "spread", "rejected")}


def expansion_stats(table: BilliardTable, anchor: SupersingularPoint, n_values, samples_per_cell: int = 200,
                    seed: int = 0, orientation: str = "forward") -> ExpansionReport:
    """Largest singular value of the one-step derivative on A_n, per n, and its power law.

    ``orientation="inverse"`` uses T^-1 on the inverse cells A'_n.  ``spread``
    is the largest q90/q10 ratio over n (the max/min ratio is unbounded, since
    the factor blows up at the grazing edges of every cell).
    """
    rng = np.random.default_rng(seed)
    n_values = [int(n) for n in n_values]
    med, q10, q90 = [], [], []
    rejected = 0
    for n in n_values:
        _, _, jac, bad = sample_cell_points(table, anchor, n, samples_per_cell, rng, orientation)
        rejected += bad
        if jac.shape[0] < samples_per_cell // 2:
            raise ResolutionError(f"only {jac.shape[0]} map-verified samples in cell n={n}")
        sv = np.linalg.norm(jac, ord=2, axis=(1, 2))
        med.append(float(np.median(sv)))
        q10.append(float(np.quantile(sv, 0.1)))
        q90.append(float(np.quantile(sv, 0.9)))
    x = np.log(n_values)
    y = np.log(med)
    fit = stats.linregress(x, y)
    tcrit = stats.t.ppf(0.975, len(x) - 2)
    ci = (fit.slope - tcrit * fit.stderr, fit.slope + tcrit * fit.stderr)
    spread = float(max(b / a for a, b in zip(q10, q90)))
    return ExpansionReport(orientation, n_values, med, q10, q90, float(fit.slope),
                           (float(ci[0]), float(ci[1])), float(fit.intercept), spread, rejected)


def _push(mats, inverse_each):
    """Apply a product of 2x2 maps (last one first) to a generic vector; return dphi/ds."""
    m = mats.shape[0]
    v = np.tile(np.array([1.0, 0.3]), (mats.shape[1], 1))
    for i in range(m - 1, -1, -1):
        a = np.linalg.inv(mats[i]) if inverse_each else mats[i]
        v = np.einsum("kij,kj->ki", a, v)
        v /= np.linalg.norm(v, axis=1)[:, None]
    return v[:, 1] / v[:, 0]


def invariant_slopes(table: BilliardTable, s, phi, depth: int = 30):
    """Unstable and stable slopes dphi/ds at the given points.

    Unstable: follow ``depth`` preimages, then carry a generic tangent vector
    forward along that pseudo-orbit.  Stable: the same with images and T^-1.
    Points whose orbit escapes or grazes within ``depth`` steps get NaN.
    """
    s = np.asarray(s, float)
    phi = np.asarray(phi, float)
    out = []
    for back in (True, False):
        cs, cp = s.copy(), phi.copy()
        mats = np.empty((depth, s.size, 2, 2))
        alive = np.ones(s.size, bool)
        for i in range(depth):
            res = (inverse_batch if back else forward_batch)(table, cs, cp)
            det = np.linalg.det(np.where(res.ok[:, None, None], res.derivative, np.eye(2)))
            good = res.ok & np.isfinite(det) & (np.abs(det) > 1e-300)
            alive &= good
            mats[i] = np.where(good[:, None, None], res.derivative, np.eye(2))
            cs, cp = res.s, res.phi
        # forward derivative at preimage i+1 is the inverse of D(T^-1) there
        slope = _push(mats, inverse_each=True)
        out.append(np.where(alive, slope, np.nan))
    return out[0], out[1]
