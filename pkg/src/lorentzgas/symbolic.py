"""Countable-alphabet Markov chains over return symbols.

States are indexed from 1.  Each chain carries a label map (state -> symbol n,
or ln n when n is too large for an int64), a stationary distribution and a
sparse row oracle.  Transition matrices are row-stochastic: row = from,
column = to.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np

from .errors import DomainError

EXACT_LIMIT = 2 ** 62
LN2 = math.log(2.0)


# ---------------------------------------------------------------- ladder

@dataclass(frozen=True)
class Ladder:
    """N_0 < N_1 < ... with N_{i+1} = floor(N_i^2 / c^4) + 1.

    ``exact[i]`` holds N_i while it is below 2^62 (None afterwards),
    ``log[i]`` always holds ln N_i.  Beyond ``depth`` the log entries are
    continued by ln N_{i+1} = 2 ln N_i - 4 ln c, which is exact up to a
    relative error of order 1/N_i^2.
    """

    c: float
    N0: int
    exact: tuple
    log: tuple
    switch_index: int | None

    @property
    def depth(self) -> int:
        return len(self.log) - 1

    def ln_n(self, i: int) -> float:
        if i <= self.depth:
            return self.log[i]
        v = self.log[-1]
        for _ in range(i - self.depth):
            v = 2.0 * v - 4.0 * math.log(self.c)
        return v

    def n(self, i: int) -> int | None:
        return self.exact[i] if i <= self.depth else None


def build_ladder(c: float, N0: int, depth: int, n_star: int = 1) -> Ladder:
    """Build the super-exponential ladder up to index ``depth``.

    Requires N0 > n_star and N0 >= ceil(2 c^4); the latter makes
    N_i >= 2^(2^i) and guarantees growth.
    """
    if not c > 1.0:
        raise DomainError(f"c={c} must exceed 1")
    if depth < 1:
        raise DomainError("depth must be >= 1")
    c4 = Fraction(c) ** 4
    N0 = int(N0)
    if N0 <= n_star:
        raise DomainError(f"N0={N0} must exceed n_star={n_star}")
    if N0 < math.ceil(2 * c4):
        raise DomainError(f"N0={N0} below ceil(2 c^4)={math.ceil(2 * c4)}: ladder need not grow")
    exact = [N0]
    logs = [math.log(N0)]
    switch = None
    for i in range(depth):
        if exact[-1] is not None:
            nxt = math.floor(Fraction(exact[-1]) ** 2 / c4) + 1
            if nxt <= exact[-1]:
                raise DomainError(f"ladder stalls at index {i}: N_{i + 1}={nxt} <= N_{i}")
            logs.append(math.log(nxt))
            if nxt < EXACT_LIMIT:
                exact.append(nxt)
            else:
                exact.append(None)
                switch = i + 1
        else:
            logs.append(2.0 * logs[-1] - 4.0 * math.log(c))
            exact.append(None)
    return Ladder(float(c), N0, tuple(exact), tuple(logs), switch)


# ---------------------------------------------------------------- words

@dataclass
class SymbolicWord:
    """Finite window [i_lo, i_lo + len - 1] of a symbol sequence.

    With ``log_scale`` the symbols are ln n (floats) instead of n.
    ``states`` optionally keeps the chain states the symbols came from.
    """

    symbols: np.ndarray
    i_lo: int = 0
    log_scale: bool = False
    states: np.ndarray | None = None

    def __post_init__(self):
        self.symbols = np.asarray(self.symbols, dtype=float if self.log_scale else np.int64)

    @property
    def i_hi(self) -> int:
        return self.i_lo + len(self.symbols) - 1

    def at(self, i: int):
        return self.symbols[i - self.i_lo]

    def reversed(self) -> "SymbolicWord":
        st = None if self.states is None else self.states[::-1].copy()
        return SymbolicWord(self.symbols[::-1].copy(), -self.i_hi, self.log_scale, st)

    def log_symbols(self) -> np.ndarray:
        return self.symbols if self.log_scale else np.log(self.symbols.astype(float))


@dataclass(frozen=True)
class WordCheck:
    valid: bool
    index: int | None = None
    reason: str = ""

    def __bool__(self):
        return self.valid


def pair_allowed(n: int, m: int, c: float) -> bool:
    """c sqrt(n) <= m <= n^2 / c^2, decided in exact rational arithmetic."""
    c2 = Fraction(c) ** 2
    return c2 * n <= m * m and c2 * m <= n * n


def _pair_allowed_log(ln_n, ln_m, c):
    lc = math.log(c)
    slack = 1e-12 * max(1.0, abs(ln_n), abs(ln_m))
    return lc + 0.5 * ln_n <= ln_m + slack and ln_m <= 2.0 * ln_n - 2.0 * lc + slack


def validate_word(word: SymbolicWord, c: float, n_star: int) -> WordCheck:
    """First index breaking n_i > n_star or the adjacency window, if any."""
    sym = word.symbols
    if word.log_scale:
        ln_star = math.log(n_star) if n_star > 0 else -math.inf
        for k, v in enumerate(sym):
            if not v > ln_star:
                return WordCheck(False, word.i_lo + k, f"ln n={v} not above ln n_star")
        for k in range(len(sym) - 1):
            if not _pair_allowed_log(float(sym[k]), float(sym[k + 1]), c):
                return WordCheck(False, word.i_lo + k, "adjacent pair outside the window")
        return WordCheck(True)
    vals = [int(v) for v in sym]
    for k, v in enumerate(vals):
        if v <= n_star:
            return WordCheck(False, word.i_lo + k, f"n={v} <= n_star={n_star}")
    for k in range(len(vals) - 1):
        if not pair_allowed(vals[k], vals[k + 1], c):
            return WordCheck(False, word.i_lo + k,
                             f"pair ({vals[k]}, {vals[k + 1]}) outside [c sqrt n, n^2/c^2]")
    return WordCheck(True)


# ---------------------------------------------------------------- chains

Row = tuple[np.ndarray, np.ndarray]


@dataclass
class ChainSpec:
    """Markov chain on states 1, 2, ... given through oracles.

    ``label(i)`` returns the symbol n of state i, or ln n when
    ``log_labels`` is set.  ``row(i)`` returns (to_states, probs) sorted by
    state.  ``tail(I)`` returns the stationary mass of states > I.
    """

    kind: str
    c: float
    n_star: int
    label: Callable[[int], float]
    stationary: Callable[[int], float]
    row: Callable[[int], Row]
    tail: Callable[[int], float]
    log_labels: bool = False
    adjacency: Callable[[int, int], bool] | None = None
    meta: dict = field(default_factory=dict)

    def start_cap(self, tail_mass: float = 1e-12, state_cap: int = 10 ** 6) -> tuple[int, float]:
        """Smallest I with tail(I) < tail_mass, or ``state_cap``; returns (I, tail(I))."""
        lo, hi = 1, 1
        while self.tail(hi) >= tail_mass and hi < state_cap:
            lo, hi = hi, min(2 * hi, state_cap)
        if self.tail(hi) >= tail_mass:
            return hi, self.tail(hi)
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if self.tail(mid) < tail_mass:
                hi = mid
            else:
                lo = mid
        return hi, self.tail(hi)

    def to_json(self, index_cap: int, note: str = "") -> str:
        states, rows = [], []
        for i in range(1, index_cap + 1):
            entry = {"index": i, "p": self.stationary(i)}
            entry["ln_n" if self.log_labels else "n"] = self.label(i)
            states.append(entry)
            for j, pr in zip(*self.row(i)):
                rows.append({"from": i, "to": int(j), "prob": float(pr)})
        doc = {"kind": self.kind, "c": self.c, "n_star": self.n_star, "states": states,
               "rows": rows, "truncation_note": note or
               f"states and rows listed for indices <= {index_cap}; "
               f"stationary tail mass beyond: {self.tail(index_cap):.17g}"}
        return json.dumps(doc, indent=1, default=_json_default)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(type(o))


def omega1_chain(ladder: Ladder, n_star: int = 1) -> ChainSpec:
    """Ladder walk: up 1/3, down 2/3, and a 2/3 self-loop at state 1.

    Stationary p_i = 2^-i.  State i carries the symbol N_i.
    """
    if ladder.depth < 2:
        raise DomainError("ladder depth must be >= 2")
    up, down = 1.0 / 3.0, 2.0 / 3.0

    def row(i):
        if i == 1:
            return np.array([1, 2]), np.array([down, up])
        return np.array([i - 1, i + 1]), np.array([down, up])

    def label(i):
        return ladder.ln_n(i)

    return ChainSpec(
        kind="mu1", c=ladder.c, n_star=n_star, label=label,
        stationary=lambda i: math.ldexp(1.0, -int(i)), row=row,
        tail=lambda I: math.ldexp(1.0, -int(I)), log_labels=True,
        adjacency=lambda i, j: abs(i - j) <= 1,
        meta={"N0": ladder.N0, "switch_index": ladder.switch_index})


def sample_path(chain: ChainSpec, length: int, seed=0, *, tail_mass: float = 1e-12,
                state_cap: int = 10 ** 6) -> SymbolicWord:
    """Stationary path of ``length`` states, indexed from -(length // 2).

    The start state is drawn from the stationary law restricted to states
    whose cumulative tail exceeds ``tail_mass`` (or up to ``state_cap``,
    whichever comes first); the excluded mass is stored as
    ``word.start_tail_mass``.  Chains with a ``sampler`` in their meta walk
    with moves above ``state_cap`` censored; the count is stored as
    ``word.censored_moves``.  Symbols are ln n when the chain has log labels.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    cap, excluded = chain.start_cap(tail_mass, state_cap)
    p = np.array([chain.stationary(i) for i in range(1, cap + 1)])
    cdf = np.cumsum(p)
    x = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")) + 1
    u = rng.random(length)
    sampler = chain.meta.get("sampler")
    if sampler is not None:
        states, censored = sampler(x, length, rng, state_cap)
        return _labelled(chain, states, length, excluded, censored)
    states = np.empty(length, np.int64)
    cache: dict[int, tuple] = {}
    for t in range(length):
        states[t] = x
        hit = cache.get(x)
        if hit is None:
            to, pr = chain.row(x)
            hit = (np.asarray(to), np.cumsum(pr))
            cache[x] = hit
        to, cs = hit
        k = int(np.searchsorted(cs, u[t] * cs[-1], side="right")) if t + 1 < length else 0
        x = int(to[min(k, len(to) - 1)])
    return _labelled(chain, states, length, excluded, 0)


def _labelled(chain, states, length, excluded, censored):
    uniq, inv = np.unique(states, return_inverse=True)
    labels = np.array([chain.label(int(i)) for i in uniq])
    word = SymbolicWord(labels[inv], -(length // 2), chain.log_labels, states)
    word.start_tail_mass = excluded
    word.censored_moves = censored
    return word


# ---------------------------------------------------------------- estimators

@dataclass
class FrequencyEstimate:
    direction: str
    counts: dict
    window: int
    p_hat: dict


def empirical_frequencies(word: SymbolicWord, direction: str = "+", window: int | None = None,
                          by_state: bool = False) -> FrequencyEstimate:
    """Counts of each symbol at positions 1..I (direction '+') or -1..-I ('-')."""
    vals = word.states if by_state else word.symbols
    if direction == "+":
        start = 1 - word.i_lo
        avail = len(vals) - start
        I = avail if window is None else window
        seg = vals[start:start + I]
    elif direction == "-":
        end = -1 - word.i_lo
        avail = end + 1
        I = avail if window is None else window
        seg = vals[end - I + 1:end + 1]
    else:
        raise ValueError("direction must be '+' or '-'")
    if I < 1 or I > avail:
        raise ValueError(f"window {I} not available in direction {direction!r} (have {avail})")
    keys, cnt = np.unique(seg, return_counts=True)
    keys = keys.tolist()
    counts = dict(zip(keys, cnt.tolist()))
    return FrequencyEstimate(direction, counts, int(I), {k: v / I for k, v in counts.items()})


def batch_zscores(states: np.ndarray, target: dict, batches: int = 50) -> dict:
    """z-scores of state frequencies against ``target`` with batch-means errors.

    Successive states of a Markov path are correlated, so the error of a
    frequency is estimated from ``batches`` contiguous blocks.
    """
    blocks = np.array_split(np.asarray(states), batches)
    z = {}
    for s, p in target.items():
        f = np.array([np.mean(b == s) for b in blocks])
        se = f.std(ddof=1) / math.sqrt(batches)
        z[s] = (f.mean() - p) / se if se > 0 else (0.0 if f.mean() == p else math.inf)
    return z


def divergence_series(p, log_n, I_max: int) -> np.ndarray:
    """Partial sums S_I = sum_{i<=I} p_i ln n_i for I = 1..I_max.

    ``p`` and ``log_n`` are arrays indexed from state 1 or callables of the
    state index.
    """
    idx = np.arange(1, I_max + 1)
    pv = np.asarray([p(i) for i in idx]) if callable(p) else np.asarray(p, float)[:I_max]
    lv = np.asarray([log_n(i) for i in idx]) if callable(log_n) else np.asarray(log_n, float)[:I_max]
    if np.any(pv < 0):
        raise ValueError("weights must be nonnegative")
    return np.cumsum(pv * lv)
