"""Phase points with a prescribed symbol itinerary.

A word n_lo..n_hi with all symbols >= 2 is realised as a zigzag through the
horizontal corridor between the disc rows y = 0 and y = 1: the flight with
symbol n_i goes from disc c_i to c_{i+1} = c_i + (dir * n_i, +-1).  Billiard
orbits through a fixed disc sequence are critical points (minima, for
dispersing scatterers) of the total path length as a function of the contact
angles, so the orbit is found by Newton's method on those angles.  The word
is padded with copies of its end symbols; the padding sets the boundary
conditions, whose influence on the middle decays like the inverse of the
expansion along the orbit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from .billiard_map import PhasePoint, forward_map, inverse_map
from .errors import EscapeError, NotFound, NumericalError
from .geometry import BilliardTable
from .symbolic import SymbolicWord, divergence_series, empirical_frequencies, validate_word

HALF_PI = 0.5 * math.pi


@dataclass
class ShadowResult:
    word: SymbolicWord
    point: PhasePoint
    matched_window: tuple[int, int]
    residual_diameter: float
    finite_time_lambda: float
    orbit: list = field(default_factory=list)     # solved points for indices i_lo..i_hi+1
    segments_ok: bool = True
    padding: int = 0
    word_diameter: float = 0.0   # largest end-condition sensitivity over the whole word

    @property
    def predictor(self) -> float:
        """(3 / 2I) sum ln n_i over the word."""
        return 1.5 * float(np.mean(np.log(self.word.symbols.astype(float))))

    def row(self, word_id) -> dict:
        return {"word_id": word_id, "symbols": " ".join(str(int(v)) for v in self.word.symbols),
                "matched_lo": self.matched_window[0], "matched_hi": self.matched_window[1],
                "s": self.point.s, "phi": self.point.phi,
                "residual_diameter": self.residual_diameter,
                "lambda_I": self.finite_time_lambda, "predictor_P": self.predictor}


def _disc_chain(symbols, direction, first_row):
    """Integer disc centres for a flight sequence starting on row ``first_row``."""
    centres = np.zeros((len(symbols) + 1, 2))
    centres[0] = (0.0, float(first_row))
    row = first_row
    for j, n in enumerate(symbols):
        row = 1 - row
        centres[j + 1] = (centres[j, 0] + direction * n, float(row))
    return centres


def _gradient_hessian(theta, d, r, need_hessian=True):
    """dL/dtheta at interior discs and the tridiagonal Hessian in banded form."""
    m = len(theta)
    e = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    t = np.stack([-e[:, 1], e[:, 0]], axis=1)
    seg = d + r * (e[1:] - e[:-1])
    ell = np.linalg.norm(seg, axis=1)
    u = seg / ell[:, None]
    inner = slice(1, m - 1)
    g = r * np.einsum("ij,ij->i", t[inner], u[:-1] - u[1:])
    if not need_hessian:
        return g, None

    def proj(k, a, b):
        # a^T (I - u_k u_k^T) b / ell_k
        ua = np.einsum("ij,ij->i", u[k], a)
        ub = np.einsum("ij,ij->i", u[k], b)
        return (np.einsum("ij,ij->i", a, b) - ua * ub) / ell[k]

    ti = t[inner]
    kin = np.arange(0, m - 2)
    kout = np.arange(1, m - 1)
    diag = (-r * np.einsum("ij,ij->i", e[inner], u[:-1] - u[1:])
            + r * r * (proj(kin, ti, ti) + proj(kout, ti, ti)))
    off = -r * r * proj(kout[:-1], t[1:m - 2], t[2:m - 1])
    ab = np.zeros((3, m - 2))
    ab[0, 1:] = off
    ab[1] = diag
    ab[2, :-1] = off
    return g, ab


def _solve_angles(centres, r, theta_ends, iters=200):
    """Contact angles making the disc path a billiard orbit.

    Newton's method on dL/dtheta with backtracking on the gradient norm:
    near grazing the length is very flat and a full step can overshoot.
    """
    theta = np.where(centres[:, 1] == 0.0, HALF_PI, -HALF_PI).astype(float)
    theta[0], theta[-1] = theta_ends
    d = np.diff(centres, axis=0)
    for _ in range(iters):
        g, ab = _gradient_hessian(theta, d, r)
        step = solve_banded((1, 1), ab, -g)
        if np.max(np.abs(step)) < 1e-13:
            # quadratic convergence: this full step reaches rounding level
            theta[1:-1] += step
            break
        gn = np.max(np.abs(g))
        lam = 1.0
        while lam > 1e-6:
            trial = theta.copy()
            trial[1:-1] += lam * step
            g2, _ = _gradient_hessian(trial, d, r, need_hessian=False)
            if np.max(np.abs(g2)) < gn or gn == 0.0:
                break
            lam *= 0.5
        theta = trial
    else:
        raise NumericalError("contact-angle Newton iteration did not converge")
    e = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    seg = d + r * (e[1:] - e[:-1])
    u = seg / np.linalg.norm(seg, axis=1)[:, None]
    return theta, u


def _phase(theta, u_out, r):
    n = np.array([math.cos(theta), math.sin(theta)])
    t = np.array([-n[1], n[0]])
    s = (r * theta) % (2.0 * math.pi * r)
    return PhasePoint(s, math.atan2(float(u_out @ t), float(u_out @ n)))


def _orbit_points(table, symbols, direction, first_row, pad, end_shift=0.0):
    sym = [symbols[0]] * pad + list(symbols) + [symbols[-1]] * pad
    centres = _disc_chain(sym, direction, first_row if pad % 2 == 0 else 1 - first_row)
    ends = (HALF_PI if centres[0, 1] == 0.0 else -HALF_PI,
            HALF_PI if centres[-1, 1] == 0.0 else -HALF_PI)
    ends = (ends[0] + end_shift, ends[1] - end_shift)
    theta, u = _solve_angles(centres, table.r, ends)
    # reflection must be genuine at every interior disc
    e = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    inc = np.einsum("ij,ij->i", u[:-1], e[1:-1])
    out = np.einsum("ij,ij->i", u[1:], e[1:-1])
    if np.any(inc >= 0.0) or np.any(out <= 0.0):
        raise NotFound("disc sequence admits no reflecting orbit")
    full = [_phase(theta[j], u[j], table.r) for j in range(len(sym))]
    return full[pad:pad + len(symbols) + 1], full[:pad]


def orbit_exponent(table: BilliardTable, points, warmup=()) -> float:
    """Mean log growth of a tangent vector along a given orbit.

    ``warmup`` points are iterated first (not counted) so the vector is
    aligned with the unstable direction when the counted part starts.
    """
    return float(np.mean(orbit_log_growth(table, points, warmup)))


def orbit_log_growth(table: BilliardTable, points, warmup=()) -> np.ndarray:
    """Per-collision log growth of the tangent vector along ``points``."""
    v = np.array([math.sqrt(0.5), math.sqrt(0.5)])
    for x in warmup:
        v = forward_map(table, x).derivative @ v
        v /= np.linalg.norm(v)
    out = np.empty(len(points))
    for k, x in enumerate(points):
        v = forward_map(table, x).derivative @ v
        nv = float(np.linalg.norm(v))
        out[k] = math.log(nv)
        v /= nv
    return out


def finite_time_exponent(table: BilliardTable, point: PhasePoint, I: int) -> float:
    """(1/I) sum of log tangent growth over I iterates of ``point`` (plain iteration)."""
    v = np.array([math.sqrt(0.5), math.sqrt(0.5)])
    x = point
    total = 0.0
    for _ in range(I):
        st = forward_map(table, x)
        v = st.derivative @ v
        nv = float(np.linalg.norm(v))
        total += math.log(nv)
        v /= nv
        x = st.end
    return total / I


def itinerary_window(table: BilliardTable, point: PhasePoint, word: SymbolicWord) -> tuple[int, int]:
    """Largest [lo, hi] around 0 on which plain iteration of ``point`` reproduces the word."""
    hi = -1
    x = point
    for i in range(0, word.i_hi + 1):
        try:
            st = forward_map(table, x)
        except EscapeError:
            break
        if st.n_symbol != int(word.at(i)):
            break
        hi = i
        x = st.end
    lo = 0
    x = point
    for i in range(-1, word.i_lo - 1, -1):
        try:
            st = inverse_map(table, x)
        except EscapeError:
            break
        if st.n_symbol != int(word.at(i)):
            break
        lo = i
        x = st.end
    return lo, max(hi, 0)


def _segments_ok(table, pts, symbols, tol=1e-8):
    for j, n in enumerate(symbols):
        try:
            st = forward_map(table, pts[j])
        except EscapeError:
            return False
        if st.n_symbol != n:
            return False
        ds = abs((st.end.s - pts[j + 1].s + math.pi * table.r) % (2 * math.pi * table.r) - math.pi * table.r)
        if ds > tol or abs(st.end.phi - pts[j + 1].phi) > tol:
            return False
    return True


def locate_point(table: BilliardTable, constants, word: SymbolicWord, tol: float = 1e-12, *,
                 direction: int = 1, start_row: int = 0, pad: int = 4, max_pad: int = 16) -> ShadowResult:
    """Phase point at index 0 whose itinerary follows ``word``.

    ``constants`` supplies (c, n_star) for validating the word; pass None to
    skip validation.  The disc at index 0 lies on row ``start_row`` and the
    orbit moves in the x-direction ``direction``.  Diameters are phase
    distances between solutions under two different end conditions: the
    residual diameter at the located point, the word diameter over all
    points.  Padding grows until the word diameter is <= tol (or ``max_pad``
    is reached).
    """
    sym = [int(v) for v in word.symbols]
    if min(sym) < 2:
        raise NotFound("symbols below 2 have no corridor realisation")
    if constants is not None:
        chk = validate_word(word, constants.c, constants.n_star)
        if not chk:
            raise NotFound(f"word invalid at index {chk.index}: {chk.reason}")
    pad = max(pad, 1)
    i0 = -word.i_lo
    first_row = start_row if i0 % 2 == 0 else 1 - start_row
    while True:
        pts, warm = _orbit_points(table, sym, direction, first_row, pad)
        alt, _ = _orbit_points(table, sym, direction, first_row, pad, end_shift=0.05)
        diam = max(_phase_dist(table, a, b) for a, b in zip(pts, alt))
        if diam <= tol or pad >= max_pad:
            break
        pad += 2
    logs = orbit_log_growth(table, pts[:-1], warmup=warm)
    point = pts[i0]
    mw = itinerary_window(table, point, word)
    res = ShadowResult(word, point, mw, _phase_dist(table, pts[i0], alt[i0]), float(np.mean(logs)), pts,
                       _segments_ok(table, pts, sym), pad, diam)
    res.log_growth = logs
    return res


def _phase_dist(table, a, b):
    per = 2.0 * math.pi * table.r
    ds = abs((a.s - b.s + 0.5 * per) % per - 0.5 * per)
    return math.hypot(ds, a.phi - b.phi)


def frequency_to_exponent_report(table: BilliardTable, constants, chain_word: SymbolicWord,
                                 windows=(6, 10, 14), symbol_cap: int = 100_000,
                                 divergence_I: int = 30, chain=None) -> dict:
    """Tie frequencies and divergence of a chain path to finite-time exponents.

    Prefixes of positions 0, 1, ... are shadowed at each window length when
    every symbol is at most ``symbol_cap``; longer flights are not
    representable in double precision and the window is marked so.  For a
    chain given as a ChainSpec-labelled path the divergence partial sums
    S_I = sum_i p_hat_i ln n_i use the empirical frequencies; passing the
    ``chain`` adds the same sums under its stationary law and the check
    S_I >= I ln 2.
    """
    freq = empirical_frequencies(chain_word, "+")
    logs = chain_word.log_symbols()
    start = -chain_word.i_lo
    rows = []
    for I in windows:
        seg = logs[start:start + I]
        entry = {"window": int(I), "mean_ln_n": float(np.mean(seg)),
                 "predictor_P": 1.5 * float(np.mean(seg))}
        if np.all(seg <= math.log(symbol_cap) + 1e-12):
            sym = np.round(np.exp(seg)).astype(np.int64)
            res = locate_point(table, constants, SymbolicWord(sym, 0))
            g = res.log_growth
            entry.update({"lambda": res.finite_time_lambda,
                          "std_error": float(np.std(g, ddof=1) / math.sqrt(len(g))),
                          "matched_window": list(res.matched_window)})
        else:
            entry.update({"lambda": None,
                          "note": f"symbols above {symbol_cap}: not realisable in double precision"})
        rows.append(entry)
    keys = sorted(freq.p_hat)
    pv = np.array([freq.p_hat[k] for k in keys])
    lv = np.array(keys, float) if chain_word.log_scale else np.log(np.array(keys, float))
    order = np.argsort(lv)
    S = np.cumsum(pv[order] * lv[order])[:divergence_I]
    out = {"window": freq.window, "frequencies": {repr(float(k)): float(v) for k, v in zip(keys, pv)},
           "divergence_partial_sums": S.tolist(), "windows": rows,
           "symbol_cap": symbol_cap}
    if chain is not None:
        St = divergence_series(chain.stationary, chain.label, divergence_I)
        out["stationary_partial_sums"] = St.tolist()
        out["above_I_ln2"] = bool(np.all(St >= np.arange(1, divergence_I + 1) * math.log(2.0)))
    return out
