import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from lorentzgas.errors import DomainError
from lorentzgas.symbolic import (SymbolicWord, batch_zscores, build_ladder, divergence_series,
                                 empirical_frequencies, omega1_chain, pair_allowed, sample_path,
                                 validate_word)


def test_ladder_frozen_values():
    lad = build_ladder(2.0, 100, 6)
    assert lad.exact[:4] == (100, 626, 24493, 37494191)
    assert lad.switch_index == 5


def test_ladder_measured_constants():
    lad = build_ladder(1.05, 20, 4, n_star=19)
    assert lad.exact[:4] == (20, 330, 89593, 6603755143)


def test_ladder_preconditions():
    with pytest.raises(DomainError):
        build_ladder(1.0, 100, 3)
    with pytest.raises(DomainError):
        build_ladder(2.0, 31, 3)       # below ceil(2 c^4) = 32
    with pytest.raises(DomainError):
        build_ladder(2.0, 100, 0)
    with pytest.raises(DomainError):
        build_ladder(1.05, 19, 3, n_star=19)


@settings(max_examples=60, deadline=None)
@given(c=st.sampled_from([1.05, 1.5, 2.0, 3.0]), extra=st.integers(0, 500))
def test_ladder_invariants(c, extra):
    c4 = Fraction(c) ** 4
    N0 = math.ceil(2 * c4) + extra
    lad = build_ladder(c, N0, 12)
    for i in range(lad.depth):
        a, b = lad.exact[i], lad.exact[i + 1]
        if a is not None and b is not None:
            assert b == math.floor(Fraction(a) ** 2 / c4) + 1
            band = float(lad.log[i + 1] - 2 * lad.log[i] + 4 * math.log(c))
            assert -1e-15 * lad.log[i + 1] <= band <= 2 * float(c4) / a ** 2 + 1e-15 * lad.log[i + 1]
        assert lad.log[i + 1] >= 2 * lad.log[i] - 4 * math.log(c) - 1e-12 * lad.log[i + 1]
    for i in range(lad.depth + 1):
        assert lad.log[i] >= 2 ** i * math.log(2) * (1 - 1e-12)
        if lad.exact[i] is not None:
            assert abs(lad.log[i] - math.log(lad.exact[i])) < 1e-12


@settings(max_examples=300, deadline=None)
@given(n=st.integers(2, 10 ** 6), m=st.integers(2, 10 ** 6), c=st.sampled_from([1.05, 2.0, 2.5]))
def test_pair_window_matches_definition_and_is_symmetric(n, m, c):
    ok = pair_allowed(n, m, c)
    assert ok == pair_allowed(m, n, c)
    # float evaluation away from the boundary
    lo, hi = c * math.sqrt(n), n * n / c ** 2
    if min(abs(m - lo), abs(m - hi)) > 1e-6 * m:
        assert ok == (lo <= m <= hi)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(20, 5000), min_size=1, max_size=12))
def test_validate_symmetric_under_reversal(sym):
    w = SymbolicWord(np.array(sym), -3)
    assert bool(validate_word(w, 1.05, 19)) == bool(validate_word(w.reversed(), 1.05, 19))


def test_constant_and_ladder_words():
    c = 2.0
    assert validate_word(SymbolicWord(np.full(7, 5)), c, 4)     # N = 5 > c^2 = 4
    assert not validate_word(SymbolicWord(np.full(7, 3)), c, 1)
    lad = build_ladder(c, 100, 4)
    w = SymbolicWord(np.array([lad.exact[1], lad.exact[2], lad.exact[1], lad.exact[2], lad.exact[3]]))
    assert validate_word(w, c, 1)
    bad = SymbolicWord(np.array([lad.exact[1], lad.exact[3]]), 5)
    chk = validate_word(bad, c, 1)
    assert not chk and chk.index == 5


def test_omega1_chain_structure():
    ch = omega1_chain(build_ladder(2.0, 100, 30))
    for i in range(1, 60):
        to, pr = ch.row(i)
        assert pr.sum() == 1.0
        assert all(ch.adjacency(i, int(j)) for j in to)
    # balance: inflow equals p_i
    for i in range(1, 60):
        inflow = 0.0
        for j in (i - 1, i, i + 1):
            if j < 1:
                continue
            to, pr = ch.row(j)
            inflow += sum(p * ch.stationary(j) for t, p in zip(to, pr) if t == i)
        assert abs(inflow - ch.stationary(i)) < 1e-12 * ch.stationary(i) + 1e-300
    assert ch.row(1)[0][0] == 1      # self-loop at state 1: aperiodic
    assert ch.to_json(5)


def test_sample_path_deterministic_and_valid():
    ch = omega1_chain(build_ladder(1.05, 20, 40, n_star=19))
    a = sample_path(ch, 10_000, 3)
    b = sample_path(ch, 10_000, 3)
    c = sample_path(ch, 10_000, 4)
    assert np.array_equal(a.states, b.states) and np.array_equal(a.symbols, b.symbols)
    assert not np.array_equal(a.states, c.states)
    assert a.start_tail_mass < 1e-12
    assert np.all(np.abs(np.diff(a.states)) <= 1)
    if a.states.max() <= 40:
        assert validate_word(a, ch.c, ch.n_star)


def test_frequencies_trivial():
    f = empirical_frequencies(SymbolicWord(np.array([7, 5, 5, 5, 5]), 0), "+")
    assert f.p_hat == {5: 1.0} and f.window == 4
    f = empirical_frequencies(SymbolicWord(np.array([1, 2, 3, 9, 9]), -3), "-")
    assert f.window == 3 and sum(f.p_hat.values()) == 1.0


def test_mu1_path_frequencies_forward_backward():
    ch = omega1_chain(build_ladder(2.0, 100, 60))
    w = sample_path(ch, 1_000_000, 11)
    target = {i: ch.stationary(i) for i in range(1, 11)}
    z = batch_zscores(w.states, target)
    assert max(abs(v) for v in z.values()) < 3
    fp = empirical_frequencies(w, "+", by_state=True)
    fm = empirical_frequencies(w, "-", by_state=True)
    blocks = 50
    for i in range(1, 6):
        f = np.array([np.mean(b == i) for b in np.array_split(w.states, blocks)])
        # each half has twice the error of the full path; the halves are independent
        se = 2 * f.std(ddof=1) / math.sqrt(blocks)
        assert abs(fp.p_hat.get(i, 0) - fm.p_hat.get(i, 0)) < 3 * se


def test_state_after_burn_is_stationary():
    ch = omega1_chain(build_ladder(2.0, 100, 60))
    rng = np.random.default_rng(5)
    last = np.array([sample_path(ch, 1001, rng).states[-1] for _ in range(3000)])
    for i in range(1, 5):
        p = ch.stationary(i)
        assert abs(np.mean(last == i) - p) < 3 * math.sqrt(p * (1 - p) / len(last))


def test_divergence_mu1_linear_bound():
    lad = build_ladder(2.0, 100, 40)
    ch = omega1_chain(lad)
    S = divergence_series(ch.stationary, ch.label, 40)
    assert np.all(S >= np.arange(1, 41) * math.log(2))


def test_divergence_finite_support_saturates():
    p = np.zeros(50)
    p[:5] = 0.2
    S = divergence_series(p, np.log(np.arange(2, 52)), 50)
    assert np.all(S[5:] == S[4])


def test_divergence_quadrature_oracle():
    n_star = 19

    def f(x):
        return 1.0 / ((x + 4) * math.log(x + 4) ** 2)

    for I in (10 ** 3, 10 ** 6):
        idx = np.arange(1, I + 1, dtype=float)
        S = divergence_series(1.0 / ((idx + 4) * np.log(idx + 4) ** 2), np.log(n_star + idx), I)[-1]
        Q = integrate.quad(lambda x: f(x) * math.log(n_star + x), 0.5, I + 0.5, limit=500)[0]
        assert abs(S / Q - 1) < 0.05
