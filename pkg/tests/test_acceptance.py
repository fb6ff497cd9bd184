"""The ten acceptance criteria at their stated tolerances and runtime budgets."""

import json
import math
import time

import numpy as np
from scipy import integrate, stats

from lorentzgas.billiard_map import forward_batch, invariance_test, inverse_batch, lyapunov_estimate, sample_nu
from lorentzgas.cells import estimate_constants, expansion_stats, supersingular_points, validate_constants
from lorentzgas.cli import dispatch, rerun
from lorentzgas.geometry import build_table
from lorentzgas.measures import (FactorSchedule, log_symbol_moment_series, markov_entropy, mu2_build, product_dense,
                                 product_row, row_entropy, slow_family, tail_series, validate_family,
                                 verify_omega2_support)
from lorentzgas.cells import CellConstants
from lorentzgas.shadowing import frequency_to_exponent_report, locate_point
from lorentzgas.symbolic import (SymbolicWord, batch_zscores, build_ladder, divergence_series, omega1_chain,
                                 sample_path, validate_word)

C_MEASURED, NSTAR_MEASURED = 1.05, 19


def _wrap(ds, per):
    return (ds + per / 2) % per - per / 2


def test_ac1_det_identity(acceptance):
    t0 = time.perf_counter()
    worst, worst_scaled = {}, {}
    for k, r in enumerate((0.1, 0.25, 0.4)):
        t = build_table(r)
        s, phi = sample_nu(t, 10_000, 100 + k)
        f = forward_batch(t, s, phi)
        D = f.derivative[f.ok]
        ratio = np.cos(phi[f.ok]) / np.cos(f.phi[f.ok])
        err = np.abs(np.linalg.det(D) - ratio)
        worst[r] = float(np.max(err / np.maximum(1.0, np.abs(ratio))))
        # backward error: against the size of the two products that cancel in the determinant
        scale = np.abs(D[:, 0, 0] * D[:, 1, 1]) + np.abs(D[:, 0, 1] * D[:, 1, 0])
        worst_scaled[r] = float(np.max(err / scale))
    dt = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-9 and dt < 5
    detail = ("max |det - cos/cos'| / max(1, cos/cos') = "
              + ", ".join(f"r={r}: {v:.2e}" for r, v in worst.items())
              + "; relative to |ad|+|bc|: " + ", ".join(f"{v:.1e}" for v in worst_scaled.values()))
    assert acceptance(1, "measure preservation (det DT)", ok, detail, dt)


def test_ac2_inverse_and_involution(acceptance):
    t0 = time.perf_counter()
    t = build_table(0.25)
    s, phi = sample_nu(t, 10_000, 2)
    f = forward_batch(t, s, phi)
    b = inverse_batch(t, f.s, f.phi)
    ok_mask = f.ok & b.ok
    e1 = max(np.abs(_wrap(b.s - s, t.perimeter))[ok_mask].max(), np.abs(b.phi - phi)[ok_mask].max())
    fi = forward_batch(t, s, -phi)
    bi = inverse_batch(t, s, phi)
    m = fi.ok & bi.ok
    e2 = max(np.abs(_wrap(fi.s - bi.s, t.perimeter))[m].max(), np.abs(fi.phi + bi.phi)[m].max())
    dt = time.perf_counter() - t0
    ok = e1 < 1e-9 and e2 < 1e-9 and dt < 5
    assert acceptance(2, "invertibility and involution", ok,
                      f"max |T^-1 T x - x| = {e1:.1e}, max |iota T iota - T^-1| = {e2:.1e}", dt)


def test_ac3_statistical_invariance(acceptance):
    t0 = time.perf_counter()
    t = build_table(0.25)
    rep = invariance_test(t, 1_000_000, 3, threads=4)
    ctrl = invariance_test(t, 1_000_000, 3, perturbation="sine_angle", threads=4)
    dt = time.perf_counter() - t0
    ok = rep.max_z < 4 and ctrl.max_z > 10 and dt < 60
    assert acceptance(3, "statistical invariance", ok,
                      f"max |z| = {rep.max_z:.2f}; negative control max |z| = {ctrl.max_z:.1f}", dt)


def test_ac4_entropy_asymptotic(acceptance):
    t0 = time.perf_counter()
    radii = (0.05, 0.1, 0.2, 0.3)
    lam = []
    for r in radii:
        lam.append(lyapunov_estimate(build_table(r), 1_000_000, 4, threads=4).lambda_plus)
    x = np.log(1 / np.array(radii))
    slope = stats.linregress(x, lam).slope
    dev = np.abs(np.array(lam) - 2 * x)
    dt = time.perf_counter() - t0
    ok = abs(slope - 2) <= 0.3 and dev.max() <= 2.5 and dt < 600
    assert acceptance(4, "entropy asymptotic 2 ln(1/r)", ok,
                      f"slope = {slope:.3f}; lambda = {', '.join(f'{v:.3f}' for v in lam)}; "
                      f"max |lambda - 2 ln(1/r)| = {dev.max():.2f}", dt)


def test_ac5_cell_expansion(acceptance):
    t0 = time.perf_counter()
    t = build_table(0.25)
    a = supersingular_points(t)[0]
    n_values = np.unique(np.geomspace(50, 2000, 12).astype(int))
    fwd = expansion_stats(t, a, n_values, 200, 5, "forward")
    inv = expansion_stats(t, a, n_values, 200, 5, "inverse")
    dt = time.perf_counter() - t0
    ok = abs(fwd.slope - 1.5) <= 0.2 and abs(inv.slope - 1.5) <= 0.2 and dt < 600
    assert acceptance(5, "cell expansion n^(3/2)", ok,
                      f"slope T on A_n = {fwd.slope:.3f}, T^-1 on A'_n = {inv.slope:.3f}; "
                      f"spread q90/q10 <= {max(fwd.spread, inv.spread):.2f}", dt)


def test_ac6_intersection_constants(acceptance):
    t0 = time.perf_counter()
    t = build_table(0.25)
    a = supersingular_points(t)[0]
    k = estimate_constants(t, [20, 50, 100, 200, 400], anchor=a)
    held = [30, 75, 150, 300, 1000, 3000]
    fails = validate_constants(t, k, held, a)
    dt = time.perf_counter() - t0
    ok = k.c <= 10 and math.isfinite(k.c) and not fails and dt < 600
    assert acceptance(6, "intersection constants", ok,
                      f"c = {k.c}, n_star = {k.n_star}; held-out n = {held}: {len(fails)} failures", dt)


def test_ac7_mu1_suite(acceptance):
    t0 = time.perf_counter()
    lad = build_ladder(C_MEASURED, 20, 60, n_star=NSTAR_MEASURED)
    ch = omega1_chain(lad)
    bal = 0.0
    for i in range(1, 61):
        inflow = sum(ch.stationary(j) * p for j in (i - 1, i, i + 1) if j >= 1
                     for to, p in zip(*ch.row(j)) if to == i)
        bal = max(bal, abs(inflow - ch.stationary(i)))
    rep = markov_entropy(ch.stationary, ch.row, 60, ch.tail)
    exact = math.log(3) - 2 / 3 * math.log(2)
    h_err = float(np.abs(rep.per_state[1:] - exact).max())
    w = sample_path(ch, 1_000_000, 7)
    z = batch_zscores(w.states, {i: ch.stationary(i) for i in range(1, 11)})
    zmax = max(abs(v) for v in z.values())
    S = divergence_series(ch.stationary, ch.label, 60)
    lin = bool(np.all(S >= np.arange(1, 61) * math.log(2)))
    dt = time.perf_counter() - t0
    ok = bal < 1e-12 and h_err <= 1e-12 and exact <= math.log(2) and zmax < 3 and lin and dt < 60
    assert acceptance(7, "mu1 suite", ok,
                      f"balance {bal:.1e}; h = {exact:.6f} (err {h_err:.1e}) <= ln 2; "
                      f"max |z| = {zmax:.2f}; S_I >= I ln 2: {lin}", dt)


def test_ac8_mu2_suite(acceptance):
    t0 = time.perf_counter()
    fam = slow_family(4.0)
    K = 100_000
    tails = tail_series(fam, K)
    fam_ok = bool(validate_family(fam, K, tails))
    p, q = tails.p, tails.q
    i = np.arange(1, K)
    # every Pi(k) uses the same two entries on its moving rows
    stay, up = q[i] / p[i], q[i + 1] / p[i]
    row_err = float(np.abs(stay + up - 1).max())
    # (p Pi(k))_j = p_{j-1} pi_{j-1,j} + p_{j+1} pi_{j+1,j} on the moving states j >= k + 2
    j = np.arange(3, K - 1)
    stat_err = float(np.abs(p[j - 1] * (q[j] / p[j - 1]) + p[j + 1] * (q[j + 1] / p[j + 1]) - p[j]).max())
    min_entry = float(min(stay.min(), up.min()))
    sch = FactorSchedule(4.0)
    D = product_dense(tails, sch, 320)
    dense_err = 0.0
    for r in range(1, 201):
        row = product_row(tails, sch, r)
        v = np.zeros(321)
        v[row.states] = row.probs
        dense_err = max(dense_err, float(np.abs(v[1:201] - D[r, 1:201]).max()))
    support_bad = verify_omega2_support(tails, sch, C_MEASURED, NSTAR_MEASURED, 400)
    ch = mu2_build(fam, 4.0, C_MEASURED, NSTAR_MEASURED)
    h = [row_entropy(ch.row(k)[1]) for k in (25, 100, 400, 1600)]
    h_up = all(b > a for a, b in zip(h, h[1:]))
    rep = markov_entropy(ch.stationary, ch.row, 400, ch.tail)
    ent_inc = bool(np.all(np.diff(rep.total_partial) > 0))
    Dq = product_dense(tails, sch, 620)
    nodes = np.unique(np.geomspace(1, 400, 14).astype(int))
    hn = np.array([row_entropy(Dq[k, 1:]) for k in nodes])
    Qe = integrate.quad(lambda x: fam(x) * np.interp(math.log(x), np.log(nodes), hn), 0.5, 400.5,
                        limit=400, points=list(nodes))[0]
    ent_dev = abs(rep.total_partial[-1] / Qe - 1)
    S = log_symbol_moment_series(fam, NSTAR_MEASURED, 10 ** 6)
    iv_inc = bool(np.all(np.diff(S) > 0))
    iv_dev = max(abs(S[I - 1] / integrate.quad(lambda x: fam(x) * math.log(NSTAR_MEASURED + x),
                                               0.5, I + 0.5, limit=500)[0] - 1) for I in (10 ** 3, 10 ** 6))
    dt = time.perf_counter() - t0
    ok = (fam_ok and row_err <= 1e-14 and stat_err <= 1e-12 and min_entry >= 0.25 and dense_err <= 1e-10
          and not support_bad and h_up and ent_inc and iv_inc and ent_dev < 0.05 and iv_dev < 0.05
          and dt < 300)
    assert acceptance(8, "mu2 suite", ok,
                      f"family bands {fam_ok}; rows {row_err:.1e}; stationarity {stat_err:.1e}; "
                      f"min entry {min_entry:.3f}; dense {dense_err:.1e}; support violations "
                      f"{len(support_bad)}; h(i) = {', '.join(f'{v:.2f}' for v in h)}; "
                      f"quadrature dev: entropy {ent_dev:.1%}, log moment {iv_dev:.1%}", dt)


def test_ac9_shadowing(acceptance):
    t0 = time.perf_counter()
    t = build_table(0.25)
    K = CellConstants(C_MEASURED, NSTAR_MEASURED)
    rng = np.random.default_rng(9)
    x, y, fidelity = [], [], True
    for _ in range(50):
        L = int(rng.integers(8, 16))
        w = SymbolicWord(rng.integers(20, 81, L), -(L // 2))
        assert validate_word(w, K.c, K.n_star)
        res = locate_point(t, K, w)
        # exact integer agreement on the matched window, and along the whole solved orbit
        lo, hi = res.matched_window
        fidelity &= res.segments_ok and lo <= -1 and hi >= 1
        x.append(float(np.mean(np.log(w.symbols))))
        y.append(res.finite_time_lambda)
    fit = stats.linregress(x, y)
    ch = omega1_chain(build_ladder(C_MEASURED, 20, 40, n_star=NSTAR_MEASURED))
    for seed in range(100):
        pw = sample_path(ch, 200, seed)
        if np.all(pw.symbols[-pw.i_lo:-pw.i_lo + 14] <= math.log(1e5)):
            break
    rep = frequency_to_exponent_report(t, K, pw, chain=ch)
    lams = [(r["lambda"], r["std_error"]) for r in rep["windows"]]
    grows = all(b[0] >= a[0] - a[1] for a, b in zip(lams, lams[1:]))
    dt = time.perf_counter() - t0
    ok = fidelity and abs(fit.slope - 1.5) <= 0.2 and grows and dt < 900
    assert acceptance(9, "shadowing", ok,
                      f"fidelity {fidelity}; slope of lambda on mean ln n = {fit.slope:.3f} "
                      f"(+-{fit.stderr:.3f}, target 1.5 +- 0.2); mu1 prefix (seed {seed}) lambda = "
                      f"{', '.join(f'{a:.2f}' for a, _ in lams)} nondecreasing: {grows}", dt)


def test_ac10_reproducibility(acceptance, tmp_path, capsys):
    t0 = time.perf_counter()
    out = str(tmp_path)
    runs = [["lyapunov", "--steps", "200000", "--seed", "3"],
            ["invariance", "--samples", "200000"],
            ["cells", "scan", "--n-max", "8"],
            ["chain", "mu2", "sample", "--length", "20000"],
            ["shadow", "--words", "5"],
            ["table"]]
    for argv in runs:
        assert dispatch(argv + ["--threads", "1", "--out", out]) == 0
    results = []
    for m in sorted(tmp_path.glob("*/*/manifest.json")):
        for th in (1, 4):
            ok, _, _ = rerun(str(m), threads=th, out=str(tmp_path / "rerun"))
            results.append(ok)
    dt = time.perf_counter() - t0
    ok = len(results) == 2 * len(runs) and all(results)
    assert acceptance(10, "reproducibility", ok,
                      f"{sum(results)}/{len(results)} re-executions bit-identical (threads 1 and 4)", dt)
