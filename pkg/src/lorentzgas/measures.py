"""Markov measures with infinite entropy built from tridiagonal factors.

A stationary family p_1 > p_2 > ... gives the alternating tails
q_k = p_k - p_{k+1} + p_{k+2} - ..., which satisfy q_k + q_{k+1} = p_k.
The factor Pi(k) is the identity below state k and a p-reversible
birth-death step from k on; the chain of interest is the infinite product
Pi(k_1) Pi(k_2) ... with k_1 = 1 and k_m = floor(c_bar m), whose rows are
finite because factors with k_m above the reachable states act trivially.
All logarithms are natural.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from numba import njit

from .errors import ConstructionError, DomainError, NonTermination
from .symbolic import ChainSpec, divergence_series, pair_allowed

_EM_SWITCH = 10_000


# ---------------------------------------------------------------- families

@dataclass
class StationaryFamily:
    """Normalised decreasing weights p_i, i >= 1.

    ``weights(i)`` is vectorised over integer arrays; ``tail(I)`` is the mass
    of states > I; ``exact(i)`` returns a Fraction when the family allows it.
    """

    name: str
    params: dict
    weights: callable
    tail: callable
    exact: callable | None = None
    decreasing: bool = True

    def p(self, i):
        return self.weights(np.asarray(i))

    def __call__(self, i: int) -> float:
        return float(self.weights(np.asarray(i)))


def geometric_family(ratio: float) -> StationaryFamily:
    """p_i = (1 - rho) rho^(i-1)."""
    if not 0.0 < ratio < 1.0:
        raise DomainError("ratio must lie in (0, 1)")
    fr = Fraction(ratio)
    return StationaryFamily(
        "geometric", {"ratio": ratio},
        weights=lambda i: (1.0 - ratio) * ratio ** (np.asarray(i, float) - 1.0),
        tail=lambda I: ratio ** I,
        exact=lambda i: (1 - fr) * fr ** (int(i) - 1))


def _slow_f(x, a):
    y = np.asarray(x, float) + a
    ly = np.log(y)
    return 1.0 / (y * ly * ly)


def _slow_tail_sum(M: int, a: float) -> float:
    """sum_{i >= M} 1/((i+a) ln^2(i+a)): direct head, Euler-Maclaurin tail."""
    head = 0.0
    if M < _EM_SWITCH:
        head = float(math.fsum(_slow_f(np.arange(M, _EM_SWITCH), a)))
        M = _EM_SWITCH
    y = M + a
    ly = math.log(y)
    f = 1.0 / (y * ly * ly)
    df = -(ly + 2.0) / (y * y * ly ** 3)
    return head + 1.0 / ly + 0.5 * f - df / 12.0


def slow_family(a: float = 4.0) -> StationaryFamily:
    """p_i = C / ((i + a) ln^2(i + a)); Σ p_i ln i diverges."""
    if a + 1.0 <= math.e:
        raise DomainError("need 1 + a > e so the weights decrease from i = 1")
    total = _slow_tail_sum(1, a)
    C = 1.0 / total
    return StationaryFamily(
        "slow", {"a": a, "C": C},
        weights=lambda i: C * _slow_f(i, a),
        tail=lambda I: C * _slow_tail_sum(int(I) + 1, a))


# ---------------------------------------------------------------- tails

@dataclass
class TailSeries:
    """q_1 .. q_K of a family, with a bound on the error of the top value."""

    family: StationaryFamily
    p: np.ndarray          # p[i] for i = 0..K+1 (index 0 unused)
    q: np.ndarray          # q[i] for i = 0..K+1 (index 0 unused)
    top_error: float

    @property
    def K(self) -> int:
        return len(self.q) - 2

    def __call__(self, k: int) -> float:
        return float(self.q[k])


def _alternating_sum(terms: np.ndarray) -> tuple[float, float]:
    """Sum a_0 - a_1 + a_2 - ... by repeated averaging of partial sums.

    Returns (value, error estimate); the estimate is the spread of the last
    two averaging levels plus the plain first-omitted-term bound scaled by
    the averaging gain.
    """
    signs = np.where(np.arange(terms.size) % 2 == 0, 1.0, -1.0)
    s = np.cumsum(signs * terms)
    prev = s[-1]
    while s.size > 1:
        prev = s[-1]
        s = 0.5 * (s[1:] + s[:-1])
    return float(s[0]), float(abs(s[0] - prev))


def alternating_tail(family: StationaryFamily, k: int, terms: int = 64) -> tuple[float, float]:
    """q_k with an error bound, summing the tail directly from k."""
    idx = np.arange(k, k + terms)
    return _alternating_sum(family.p(idx))


def tail_series(family: StationaryFamily, K: int, terms: int = 64) -> TailSeries:
    """q_1..q_{K+1}: the top value summed directly, the rest by q_k = p_k - q_{k+1}.

    The backward recursion does not amplify errors (each step flips the sign
    of the carried error), so every q_k inherits the top error plus O(eps p_k)
    rounding per step.
    """
    idx = np.arange(0, K + 2)
    p = np.zeros(K + 2)
    p[1:] = family.p(idx[1:])
    q = np.zeros(K + 2)
    q[K + 1], err = alternating_tail(family, K + 1, terms)
    for k in range(K, 0, -1):
        q[k] = p[k] - q[k + 1]
    return TailSeries(family, p, q, err)


@dataclass(frozen=True)
class FamilyCheck:
    ok: bool
    condition: str = ""
    k: int | None = None
    value: float | None = None

    def __bool__(self):
        return self.ok


def validate_family(family: StationaryFamily, k_max: int, tails: TailSeries | None = None) -> FamilyCheck:
    """Monotonicity, the difference-ratio band [1/3, 1] and q_k in [p_k/2, 3p_k/4] up to k_max.

    Families with exact rational weights are checked in exact arithmetic.
    """
    if family.exact is not None and k_max <= 2000:
        ps = [family.exact(i) for i in range(1, k_max + 3)]
        for k in range(1, k_max + 1):
            if not ps[k] < ps[k - 1]:
                return FamilyCheck(False, "monotone", k, float(ps[k]))
            ratio = (ps[k + 1] - ps[k]) / (ps[k] - ps[k - 1])
            if not Fraction(1, 3) <= ratio <= 1:
                return FamilyCheck(False, "difference_ratio", k, float(ratio))
    else:
        p = family.p(np.arange(1, k_max + 3))
        d = np.diff(p)
        bad = np.nonzero(d >= 0)[0]
        if bad.size:
            return FamilyCheck(False, "monotone", int(bad[0]) + 1, float(d[bad[0]]))
        ratio = d[1:] / d[:-1]
        bad = np.nonzero((ratio < 1.0 / 3.0) | (ratio > 1.0))[0]
        if bad.size:
            return FamilyCheck(False, "difference_ratio", int(bad[0]) + 1, float(ratio[bad[0]]))
    tails = tails if tails is not None and tails.K >= k_max else tail_series(family, k_max)
    r = tails.q[1:k_max + 1] / tails.p[1:k_max + 1]
    bad = np.nonzero((r < 0.5) | (r > 0.75))[0]
    if bad.size:
        return FamilyCheck(False, "tail_ratio", int(bad[0]) + 1, float(r[bad[0]]))
    return FamilyCheck(True)


def smallest_smoothing(k_max: int = 100_000, grid=np.arange(1.75, 20.0, 0.25)) -> float:
    """Smallest a on ``grid`` for which the slow family passes validate_family."""
    for a in grid:
        if 1.0 + a <= math.e:
            continue
        if validate_family(slow_family(float(a)), k_max):
            return float(a)
    raise DomainError("no smoothing parameter on the grid passes")


# ---------------------------------------------------------------- factors

def pi_k_row(tails: TailSeries, k: int, i: int):
    """Row i of Pi(k) as (to_states, probs)."""
    if i < k:
        return np.array([i]), np.array([1.0])
    p, q = tails.p, tails.q
    if i + 1 >= len(q):
        raise DomainError(f"state {i} beyond the tail table (K={tails.K})")
    if i == k:
        return np.array([k, k + 1]), np.array([q[k] / p[k], q[k + 1] / p[k]])
    return np.array([i - 1, i + 1]), np.array([q[i] / p[i], q[i + 1] / p[i]])


def pi_k_dense(tails: TailSeries, k: int, size: int) -> np.ndarray:
    """Pi(k) truncated to states 1..size (index 0 unused), built entry by entry."""
    M = np.zeros((size + 1, size + 1))
    for i in range(1, size + 1):
        to, pr = pi_k_row(tails, k, i)
        for j, v in zip(to, pr):
            if j <= size:
                M[i, j] = v
    return M


@dataclass(frozen=True)
class FactorSchedule:
    c_bar: float

    def __post_init__(self):
        if not self.c_bar > 2.0:
            raise DomainError(f"c_bar={self.c_bar} must exceed 2")

    def k(self, m: int) -> int:
        return 1 if m == 1 else int(math.floor(self.c_bar * m))

    def ks(self, count: int) -> np.ndarray:
        return np.array([self.k(m) for m in range(1, count + 1)], np.int64)


def _apply_factor(v, k, p, q):
    """Row vector v (indexed by state) times Pi(k); v must have a zero last slot."""
    w = v.copy()
    n = v.size
    if k >= n - 1:
        return w
    w[k:] = 0.0
    w[k] += v[k] * q[k] / p[k]
    w[k + 1] += v[k] * q[k + 1] / p[k]
    j = np.arange(k + 1, n - 1)
    w[j - 1] += v[j] * q[j] / p[j]
    w[j + 1] += v[j] * q[j + 1] / p[j]
    return w


@dataclass
class ProductRow:
    i: int
    states: np.ndarray
    probs: np.ndarray
    factors: int           # index m of the first factor that acted trivially


def product_row(tails: TailSeries, schedule: FactorSchedule, i: int) -> ProductRow:
    """Row i of Pi(k_1) Pi(k_2) ..., exact up to rounding.

    Propagates the unit mass at i through the factors until the first k_m
    above the largest reachable state; every later factor is the identity on
    the support.  The freeze index is checked against i/(c_bar - 1) + 2.
    """
    bound = int(math.ceil(i / (schedule.c_bar - 2.0))) + 3
    guard = 10 * i + 10
    size = i + bound + 3
    if size + 1 >= len(tails.q):
        raise DomainError(f"row {i} needs tails up to {size + 1}, have {tails.K}")
    p, q = tails.p[:size + 1], tails.q[:size + 1]
    v = np.zeros(size + 1)
    v[i] = 1.0
    reach = i
    m = 1
    while True:
        k = schedule.k(m)
        if k > reach:
            break
        if m > guard:
            raise NonTermination(f"row {i}: no freeze within {guard} factors")
        v = _apply_factor(v, k, p, q)
        reach += 1
        m += 1
    if m > bound:
        raise NonTermination(f"row {i} froze at m={m}, above the bound {bound}")
    nz = np.nonzero(v)[0]
    return ProductRow(i, nz, v[nz], m)


def product_dense(tails: TailSeries, schedule: FactorSchedule, size: int) -> np.ndarray:
    """Dense truncated product of all factors with k_m <= size (oracle)."""
    P = np.eye(size + 1)
    m = 1
    while schedule.k(m) <= size:
        P = P @ pi_k_dense(tails, schedule.k(m), size)
        m += 1
    return P


@njit(cache=True, nogil=True)
def _walk_path(x0, length, seed, ratio_stay, ratio_down, c_bar, cap):
    """Sample states of the product chain by walking through the factors.

    Within one step, factor Pi(k) moves the current state x only if x >= k.
    A move above ``cap`` is censored (the walker stays put) and counted.
    Censoring keeps every factor reversible for p restricted to [1, cap], so
    the censored chain has stationary law p conditioned on states <= cap.
    """
    np.random.seed(seed)
    out = np.empty(length, np.int64)
    x = x0
    censored = 0
    for t in range(length):
        out[t] = x
        m = 1
        while True:
            k = 1 if m == 1 else int(math.floor(c_bar * m))
            if k > x:
                break
            v = np.random.random()
            if x == k:
                if v >= ratio_stay[k]:
                    if x + 1 > cap:
                        censored += 1
                    else:
                        x += 1
            else:
                if v < ratio_down[x]:
                    x -= 1
                elif x + 1 > cap:
                    censored += 1
                else:
                    x += 1
            m += 1
    return out, censored


# ---------------------------------------------------------------- support & entropy

def verify_omega2_support(tails: TailSeries, schedule: FactorSchedule, c: float, n_star: int,
                          i_max: int) -> list:
    """(i, j) pairs with positive product-row mass that break the adjacency window.

    The window is c sqrt(n) <= n' <= n^2 / c^2 for n = n_star + i and
    n' = n_star + j.  An empty list means the support passes.
    """
    bad = []
    for i in range(1, i_max + 1):
        row = product_row(tails, schedule, i)
        for j in (int(row.states[0]), int(row.states[-1])):
            if not pair_allowed(n_star + i, n_star + j, c):
                bad.append((i, j))
                break
    return bad


@dataclass
class EntropyReport:
    per_state: np.ndarray        # h(i), i = 1..I (index 0 unused)
    lower_envelope: np.ndarray   # H_i = min_{j >= i} h(j) on the computed range
    total_partial: np.ndarray    # sum_{i <= I} p_i h(i)
    tail_mass: float

    def value(self) -> float:
        return float(self.total_partial[-1])


def row_entropy(probs) -> float:
    pr = np.asarray(probs, float)
    pr = pr[pr > 0]
    return float(-np.sum(pr * np.log(pr)))


def markov_entropy(stationary, row_oracle, truncation_index: int, tail=None) -> EntropyReport:
    """Per-state entropies h(i) and partial sums of sum_i p_i h(i)."""
    I = truncation_index
    h = np.zeros(I + 1)
    p = np.zeros(I + 1)
    for i in range(1, I + 1):
        h[i] = row_entropy(row_oracle(i)[1])
        p[i] = stationary(i)
    env = np.minimum.accumulate(h[:0:-1])[::-1]
    total = np.cumsum(p[1:] * h[1:])
    tail_mass = float(tail(I)) if tail is not None else float("nan")
    return EntropyReport(h, np.concatenate([[0.0], env]), total, tail_mass)


# ---------------------------------------------------------------- assembly

class _RowCache:
    def __init__(self, fn):
        self.fn = fn
        self.rows = {}
        self.lock = threading.Lock()

    def __call__(self, i):
        row = self.rows.get(i)
        if row is None:
            row = self.fn(i)
            with self.lock:
                self.rows.setdefault(i, row)
        return row


def mu2_build(family: StationaryFamily, c_bar: float, c: float, n_star: int, *,
              k_max: int = 100_000, support_probe: int = 400) -> ChainSpec:
    """Assemble the infinite-entropy chain on states n_star + i.

    Raises ConstructionError naming the first failed condition: the family
    checks (monotone / tail_ratio / difference_ratio) or the adjacency window of the product
    rows (support).
    """
    try:
        schedule = FactorSchedule(c_bar)
    except DomainError as exc:
        raise ConstructionError("schedule", str(exc)) from exc
    tails = tail_series(family, k_max)
    chk = validate_family(family, k_max, tails)
    if not chk:
        raise ConstructionError(chk.condition, f"family {family.name} fails at k={chk.k} ({chk.value})")
    probe = min(support_probe, int((k_max - 3) * (c_bar - 2.0) / (c_bar - 1.0)) - 3)
    bad = verify_omega2_support(tails, schedule, c, n_star, probe)
    if bad:
        raise ConstructionError("support", f"product rows leave the adjacency window at {bad[:5]}")

    def row(i):
        r = product_row(tails, schedule, i)
        return r.states, r.probs

    cache = _RowCache(row)
    ratio_stay = np.zeros(len(tails.q))
    ratio_down = np.zeros(len(tails.q))
    ratio_stay[1:-1] = tails.q[1:-1] / tails.p[1:-1]
    ratio_down[1:-1] = ratio_stay[1:-1]

    def sampler(x0, length, rng, cap):
        cap = min(cap, tails.K - 1)
        seed = int(rng.integers(0, 2 ** 32))
        return _walk_path(min(int(x0), cap), int(length), seed, ratio_stay, ratio_down,
                          float(c_bar), int(cap))

    return ChainSpec(
        kind="mu2", c=c, n_star=n_star,
        label=lambda i: n_star + i,
        stationary=lambda i: family(i),
        row=cache, tail=family.tail,
        adjacency=lambda i, j: pair_allowed(n_star + i, n_star + j, c),
        meta={"family": family.name, "params": family.params, "c_bar": c_bar,
              "tails": tails, "schedule": schedule, "sampler": sampler,
              "validations": {"tail_ratio": True, "difference_ratio": True, "support": True,
                              "support_probe": probe}})


def log_symbol_moment_series(family: StationaryFamily, n_star: int, I_max: int) -> np.ndarray:
    """Partial sums of sum_i p_i ln(n_star + i)."""
    idx = np.arange(1, I_max + 1)
    return divergence_series(family.p(idx), np.log(n_star + idx.astype(float)), I_max)


def mu2_report(chain: ChainSpec, entropy_I=(25, 50, 100, 200, 400),
               iv_I=(10, 100, 1000, 10_000, 100_000)) -> dict:
    """Summary document of a built mu2 chain."""
    meta = chain.meta
    rep = markov_entropy(chain.stationary, chain.row, max(entropy_I), chain.tail)
    I = max(iv_I)
    idx = np.arange(1, I + 1)
    tails = meta["tails"]
    pv = tails.p[1:I + 1] if tails.K >= I else np.array([chain.stationary(int(i)) for i in idx])
    iv = divergence_series(pv, np.log(chain.n_star + idx.astype(float)), I)
    return {"family": meta["family"], "params": meta["params"], "c_bar": meta["c_bar"],
            "c": chain.c, "n_star": chain.n_star,
            "validations": dict(meta["validations"]),
            "entropy_partial_sums": [[int(k), float(rep.total_partial[k - 1])] for k in entropy_I],
            "log_symbol_moment_partial_sums": [[int(k), float(iv[k - 1])] for k in iv_I]}
