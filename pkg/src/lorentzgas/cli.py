"""Command-line front end.

Every run writes its data files and a manifest.json into
<out>/<command>/<timestamp>/.  The manifest records the resolved parameter
set and a digest of every output, and ``rerun`` re-executes it and compares
digests.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConstructionError, DomainError, LorentzGasError

# ---------------------------------------------------------------- serialisation


def fmt_float(x: float) -> str:
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    out = format(x, ".17g")
    return out if any(ch in out for ch in ".en") else out + ".0"


def dump_json(obj, indent: int = 1, _level: int = 0) -> str:
    """JSON with every float written to 17 significant digits."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return fmt_float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dump_json(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in obj):
            return "[" + ", ".join(dump_json(v, indent, _level + 1) for v in obj) + "]"
        items = [pad + dump_json(v, indent, _level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def dump_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    keys = list(rows[0])
    w.writerow(keys)
    for row in rows:
        w.writerow([fmt_float(float(v)) if isinstance(v, (float, np.floating)) else v
                    for v in (row[k] for k in keys)])
    return buf.getvalue()


def _table_out(name: str, rows: list[dict], fmt: str) -> dict:
    if fmt == "json":
        return {f"{name}.json": dump_json(rows)}
    return {f"{name}.csv": dump_csv(rows)}


# ---------------------------------------------------------------- commands

def _table(p):
    from .geometry import build_table
    return build_table(p["r"], p["cutoff"], tau_max=p["tau_max"])


def cmd_table(p):
    from .cells import supersingular_points
    t = _table(p)
    doc = {"params": t.params(), "perimeter": t.perimeter, "c_nu": t.c_nu,
           "corridors": [{"p": c.p, "q": c.q, "width": c.width} for c in t.corridors],
           "supersingular_points": [{"id": a.id, "s_star": a.s_star, "phi_star": a.phi_star,
                                     "corridor": [a.corridor.p, a.corridor.q]}
                                    for a in supersingular_points(t)]}
    return {"table.json": dump_json(doc)}, None


def cmd_orbit(p):
    from .billiard_map import make_point, orbit
    t = _table(p)
    rows = orbit(t, make_point(t, p["s"], p["phi"]), p["steps"])
    names = ["s", "phi", "tau", "dx", "dy", "n_symbol", "log_expansion"]
    out = []
    for k, row in enumerate(rows):
        d = {"step": k + 1}
        for name, v in zip(names, row):
            d[name] = int(v) if name in ("dx", "dy", "n_symbol") else float(v)
        out.append(d)
    return _table_out("orbit", out, p["format"]), None


def cmd_lyapunov(p):
    from .billiard_map import lyapunov_estimate
    est = lyapunov_estimate(_table(p), p["steps"], p["seed"], batches=p["batches"], threads=p["threads"])
    doc = est.to_dict()
    doc["two_ln_inv_r"] = 2.0 * math.log(1.0 / p["r"])
    return {"lyapunov.json": dump_json(doc)}, f"lambda_plus = {fmt_float(est.lambda_plus)} +- {est.std_error:.3g}"


def cmd_invariance(p):
    from .billiard_map import invariance_test
    rep = invariance_test(_table(p), p["samples"], p["seed"], perturbation=p["perturbation"],
                          threads=p["threads"])
    return {"invariance.json": dump_json(rep.to_dict())}, f"max |z| = {rep.max_z:.3f}"


def _anchor(t, idx):
    from .cells import supersingular_points
    pts = supersingular_points(t)
    if not 0 <= idx < len(pts):
        raise DomainError(f"anchor {idx} out of range (table has {len(pts)})")
    return pts[idx]


def cmd_cells_scan(p):
    from .cells import scan_cells
    t = _table(p)
    a = _anchor(t, p["anchor"])
    cells, ras = scan_cells(t, a, (p["n_min"], p["n_max"]), p["resolution"], p["orientation"],
                            return_raster=True)
    files = _table_out("cells", [c.row() for c in cells], p["format"])
    files["raster.bin"] = np.ascontiguousarray(ras.symbols, dtype="<i8").tobytes()
    files["raster.json"] = dump_json(ras.header())
    return files, f"{len(cells)} cells"


def _n_values(p):
    return np.unique(np.geomspace(p["n_min"], p["n_max"], p["points"]).astype(int)).tolist()


def cmd_cells_expansion(p):
    from .cells import expansion_stats
    t = _table(p)
    rep = expansion_stats(t, _anchor(t, p["anchor"]), _n_values(p), p["samples"], p["seed"],
                          p["orientation"])
    return {"expansion.json": dump_json(rep.to_dict())}, f"slope = {rep.slope:.4f}"


def cmd_cells_intersect(p):
    from .cells import intersection_check
    t = _table(p)
    rep = intersection_check(t, p["n"], p["m"], _anchor(t, p["anchor"]))
    return {"intersect.json": dump_json(rep.to_dict())}, f"full crossing: {rep.full}"


def cmd_cells_constants(p):
    from .cells import estimate_constants, validate_constants
    t = _table(p)
    a = _anchor(t, p["anchor"])
    k = estimate_constants(t, p["probes"], m_cap=p["m_cap"], anchor=a)
    fails = validate_constants(t, k, p["heldout"], a)
    doc = {"c": k.c, "n_star": k.n_star, "m_cap": k.m_cap, "heldout": p["heldout"],
           "heldout_failures": fails, "probe_ledger": k.probe_ledger}
    return {"constants.json": dump_json(doc)}, f"c = {k.c}, n_star = {k.n_star}, held-out failures: {len(fails)}"


def _chain(p):
    if p["chain"] == "mu1":
        from .symbolic import build_ladder, omega1_chain
        return omega1_chain(build_ladder(p["c"], p["N0"], p["depth"], p["n_star"]), p["n_star"])
    from .measures import mu2_build, slow_family
    return mu2_build(slow_family(p["a"]), p["c_bar"], p["c"], p["n_star"])


def cmd_chain(p):
    from .measures import markov_entropy, mu2_report
    from .symbolic import (batch_zscores, divergence_series, empirical_frequencies,
                           sample_path, validate_word)
    action = p["action"]
    ch = _chain(p)
    if action == "build":
        if ch.kind == "mu2":
            return {"mu2.json": dump_json(mu2_report(ch))}, "built mu2"
        return {"chain.json": ch.to_json(p["index_cap"])}, "built mu1"
    if action == "entropy":
        rep = markov_entropy(ch.stationary, ch.row, p["index_cap"], ch.tail)
        h = rep.value()
        doc = {"h_partial": h, "tail_mass": rep.tail_mass,
               "per_state": rep.per_state[1:].tolist(),
               "partial_sums": rep.total_partial.tolist()}
        msg = f"h = {fmt_float(h)}"
        if ch.kind == "mu1":
            exact = math.log(3.0) - 2.0 / 3.0 * math.log(2.0)
            ok = h <= math.log(2.0)
            doc.update({"exact": exact, "bound_ln2": math.log(2.0), "bound_ok": ok})
            msg = f"h = {fmt_float(h)} (exact ln 3 - (2/3) ln 2 = {fmt_float(exact)}); h <= ln 2: {'PASS' if ok else 'FAIL'}"
        return {"entropy.json": dump_json(doc)}, msg
    if action == "sample":
        w = sample_path(ch, p["length"], p["seed"], state_cap=p["state_cap"])
        rows = [{"i": w.i_lo + k, "state": int(s), "symbol": float(v) if w.log_scale else int(v)}
                for k, (s, v) in enumerate(zip(w.states, w.symbols))]
        return _table_out("path", rows, p["format"]), f"{len(rows)} steps"
    if action == "check":
        w = sample_path(ch, p["length"], p["seed"], state_cap=p["state_cap"])
        chk = validate_word(w, ch.c, ch.n_star)
        states = [i for i in range(1, p["index_cap"] + 1) if ch.stationary(i) >= p["min_p"]]
        norm = 1.0 - (ch.tail(p["state_cap"]) if ch.kind == "mu2" else 0.0)
        z = batch_zscores(w.states, {i: ch.stationary(i) / norm for i in states})
        freq = empirical_frequencies(w, "+", by_state=True)
        doc = {"word_valid": chk.valid, "violation": chk.index, "max_abs_z": max(abs(v) for v in z.values()),
               "z": {str(k): v for k, v in z.items()},
               "p_hat": {str(k): freq.p_hat.get(k, 0.0) for k in states},
               "censored_moves": getattr(w, "censored_moves", 0)}
        if ch.kind == "mu1":
            S = divergence_series(ch.stationary, ch.label, p["depth"])
            doc["divergence_partial_sums"] = S.tolist()
            doc["S_I_ge_I_ln2"] = bool(np.all(S >= np.arange(1, len(S) + 1) * math.log(2.0) * (1 - 1e-12)))
        return {"check.json": dump_json(doc)}, f"valid={chk.valid}, max |z| = {doc['max_abs_z']:.3f}"
    raise DomainError(f"unknown chain action {action}")


def cmd_shadow(p):
    from .cells import CellConstants
    from .shadowing import locate_point
    from .symbolic import SymbolicWord
    t = _table(p)
    consts = CellConstants(p["c"], p["n_star"])
    rng = np.random.default_rng(p["seed"])
    rows = []
    for k in range(p["words"]):
        L = int(rng.integers(p["min_length"], p["max_length"] + 1))
        sym = rng.integers(p["sym_min"], p["sym_max"] + 1, L)
        res = locate_point(t, consts, SymbolicWord(sym, -(L // 2)))
        rows.append(res.row(k))
    x = np.array([r["predictor_P"] for r in rows]) / 1.5
    y = np.array([r["lambda_I"] for r in rows])
    slope = float(np.polyfit(x, y, 1)[0]) if len(rows) > 2 else float("nan")
    files = _table_out("shadow", rows, p["format"])
    files["shadow_fit.json"] = dump_json({"slope": slope, "calibrated_B": float(np.max(np.abs(y - 1.5 * x))),
                                          "words": len(rows)})
    return files, f"slope of lambda on mean ln n: {slope:.4f}"


def cmd_report(p):
    """Quick bundle of headline numbers in long format (metric, key, value)."""
    from .billiard_map import invariance_test, lyapunov_estimate
    from .cells import expansion_stats, supersingular_points
    from .geometry import build_table
    rows = []
    for r in p["radii"]:
        t = build_table(r, tau_max=p["tau_max"])
        est = lyapunov_estimate(t, p["steps"], p["seed"], threads=p["threads"])
        rows.append({"metric": "lambda_plus", "key": r, "value": est.lambda_plus})
        rows.append({"metric": "lambda_plus_stderr", "key": r, "value": est.std_error})
    t = _table(p)
    inv = invariance_test(t, p["samples"], p["seed"], threads=p["threads"])
    for name, z in inv.z.items():
        rows.append({"metric": "invariance_z", "key": name, "value": z})
    a = supersingular_points(t)[0]
    for o in ("forward", "inverse"):
        e = expansion_stats(t, a, np.unique(np.geomspace(50, 2000, 8).astype(int)), 100, p["seed"], o)
        for n, m in zip(e.n, e.median):
            rows.append({"metric": f"expansion_median_{o}", "key": n, "value": m})
        rows.append({"metric": f"expansion_slope_{o}", "key": "", "value": e.slope})
    return {"report.csv": dump_csv(rows)}, f"{len(rows)} rows"


COMMANDS = {
    ("table",): cmd_table, ("orbit",): cmd_orbit, ("lyapunov",): cmd_lyapunov,
    ("invariance",): cmd_invariance, ("cells", "scan"): cmd_cells_scan,
    ("cells", "expansion"): cmd_cells_expansion, ("cells", "intersect"): cmd_cells_intersect,
    ("cells", "constants"): cmd_cells_constants, ("chain",): cmd_chain,
    ("shadow",): cmd_shadow, ("report",): cmd_report,
}

GLOBAL_DEFAULTS = {"r": 0.25, "seed": 0, "out": "runs", "format": "csv", "tau_max": 1e6,
                   "threads": 1, "cutoff": 1}

DEFAULTS = {
    ("orbit",): {"s": 0.1, "phi": 0.3, "steps": 100},
    ("lyapunov",): {"steps": 1_000_000, "batches": 32},
    ("invariance",): {"samples": 1_000_000, "perturbation": "none"},
    ("cells", "scan"): {"anchor": 0, "n_min": 2, "n_max": 12, "resolution": 1000, "orientation": "forward"},
    ("cells", "expansion"): {"anchor": 0, "n_min": 50, "n_max": 2000, "points": 12, "samples": 200,
                             "orientation": "forward"},
    ("cells", "intersect"): {"anchor": 0, "n": 400, "m": 40},
    ("cells", "constants"): {"anchor": 0, "probes": [20, 50, 100, 200, 400], "heldout": [30, 150, 300, 1000],
                             "m_cap": 100_000},
    ("chain",): {"c": 1.05, "N0": 20, "depth": 30, "n_star": 19, "a": 4.0, "c_bar": 4.0,
                 "length": 100_000, "state_cap": 10_000, "index_cap": 60, "min_p": 1e-4},
    ("shadow",): {"c": 1.05, "n_star": 19, "words": 50, "sym_min": 20, "sym_max": 80,
                  "min_length": 8, "max_length": 15},
    ("report",): {"radii": [0.05, 0.1, 0.2, 0.3], "steps": 200_000, "samples": 200_000},
}

# parameters that never change outputs
NEUTRAL = {"out", "threads", "config"}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global")
    g.add_argument("--r", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--out")
    g.add_argument("--format", choices=["csv", "json"])
    g.add_argument("--tau-max", dest="tau_max", type=float)
    g.add_argument("--threads", type=int)
    g.add_argument("--cutoff", type=int, help="corridor direction-norm cutoff")
    g.add_argument("--config", help="JSON file with the same keys as the flags")

    ap = argparse.ArgumentParser(prog="lorentzgas", description="Infinite-horizon Lorentz gas toolkit")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("table", parents=[common], help="table geometry, corridors, supersingular points")
    o = sub.add_parser("orbit", parents=[common], help="collision-by-collision orbit")
    o.add_argument("--s", type=float)
    o.add_argument("--phi", type=float)
    o.add_argument("--steps", type=int)
    ly = sub.add_parser("lyapunov", parents=[common], help="positive Lyapunov exponent")
    ly.add_argument("--steps", type=int)
    ly.add_argument("--batches", type=int)
    iv = sub.add_parser("invariance", parents=[common], help="statistical test of nu-invariance")
    iv.add_argument("--samples", type=int)
    iv.add_argument("--perturbation", choices=["none", "negate_phi", "sine_angle"])

    cells = sub.add_parser("cells", help="cells A_n and their constants")
    csub = cells.add_subparsers(dest="action", required=True)
    cs = csub.add_parser("scan", parents=[common])
    cs.add_argument("--anchor", type=int)
    cs.add_argument("--n-min", dest="n_min", type=int)
    cs.add_argument("--n-max", dest="n_max", type=int)
    cs.add_argument("--resolution", type=int)
    cs.add_argument("--orientation", choices=["forward", "inverse"])
    ce = csub.add_parser("expansion", parents=[common])
    ce.add_argument("--anchor", type=int)
    ce.add_argument("--n-min", dest="n_min", type=int)
    ce.add_argument("--n-max", dest="n_max", type=int)
    ce.add_argument("--points", type=int)
    ce.add_argument("--samples", type=int)
    ce.add_argument("--orientation", choices=["forward", "inverse"])
    ci = csub.add_parser("intersect", parents=[common])
    ci.add_argument("--anchor", type=int)
    ci.add_argument("--n", type=int)
    ci.add_argument("--m", type=int)
    cc = csub.add_parser("constants", parents=[common])
    cc.add_argument("--anchor", type=int)
    cc.add_argument("--probes", type=int, nargs="+")
    cc.add_argument("--heldout", type=int, nargs="+")
    cc.add_argument("--m-cap", dest="m_cap", type=int)

    chain = sub.add_parser("chain", parents=[common], help="Markov chains mu1 / mu2")
    chain.add_argument("chain", choices=["mu1", "mu2"])
    chain.add_argument("action", choices=["build", "entropy", "sample", "check"])
    for a in ("--c", "--a"):
        chain.add_argument(a, type=float)
    chain.add_argument("--c-bar", dest="c_bar", type=float)
    for a in ("--N0", "--depth", "--length", "--index-cap", "--state-cap"):
        chain.add_argument(a, dest=a[2:].replace("-", "_"), type=int)
    chain.add_argument("--n-star", dest="n_star", type=int)
    chain.add_argument("--min-p", dest="min_p", type=float)

    sh = sub.add_parser("shadow", parents=[common], help="shadow random words, compare exponents")
    sh.add_argument("--c", type=float)
    sh.add_argument("--n-star", dest="n_star", type=int)
    sh.add_argument("--words", type=int)
    sh.add_argument("--sym-min", dest="sym_min", type=int)
    sh.add_argument("--sym-max", dest="sym_max", type=int)
    sh.add_argument("--min-length", dest="min_length", type=int)
    sh.add_argument("--max-length", dest="max_length", type=int)

    rp = sub.add_parser("report", parents=[common], help="bundle of headline numbers (long CSV)")
    rp.add_argument("--radii", type=float, nargs="+")
    rp.add_argument("--steps", type=int)
    rp.add_argument("--samples", type=int)

    rr = sub.add_parser("rerun", help="re-execute a manifest and compare output digests")
    rr.add_argument("manifest")
    rr.add_argument("--threads", type=int)
    rr.add_argument("--out")
    return ap


def _key(ns) -> tuple:
    if ns.command == "cells":
        return ("cells", ns.action)
    return (ns.command,)


def resolve(ns) -> tuple[tuple, dict]:
    """Merge defaults, config file and flags (flags win)."""
    key = _key(ns)
    params = dict(GLOBAL_DEFAULTS)
    params.update(DEFAULTS.get(key, {}))
    if getattr(ns, "config", None):
        cfg = json.loads(Path(ns.config).read_text())
        unknown = set(cfg) - set(params) - {"chain", "action"}
        if unknown:
            raise DomainError(f"unknown config keys: {sorted(unknown)}")
        params.update(cfg)
    for k, v in vars(ns).items():
        if k in ("command", "config") or v is None:
            continue
        if key[0] == "cells" and k == "action":
            continue
        params[k] = v
    return key, params


def source_digest() -> str:
    h = hashlib.sha256()
    for f in sorted(Path(__file__).parent.glob("*.py")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def execute(key: tuple, params: dict) -> tuple[dict, str | None]:
    return COMMANDS[key](params)


def _write(key, params, files, out_root) -> Path:
    stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%dT%H%M%S.%fZ")
    d = Path(out_root) / "-".join(key) / stamp
    k = 0
    while d.exists():
        k += 1
        d = Path(out_root) / "-".join(key) / f"{stamp}-{k}"
    d.mkdir(parents=True)
    digests = {}
    for name, content in files.items():
        data = content if isinstance(content, bytes) else content.encode()
        (d / name).write_bytes(data)
        digests[name] = hashlib.sha256(data).hexdigest()
    manifest = {"command": list(key), "params": params, "code_version": __version__,
                "source_sha256": source_digest(), "timestamp": stamp, "outputs": digests}
    (d / "manifest.json").write_text(dump_json(manifest))
    return d


def rerun(manifest_path: str, threads: int | None = None, out: str | None = None) -> tuple[bool, Path, dict]:
    """Execute a manifest again; returns (identical, new_dir, per-file match)."""
    man = json.loads(Path(manifest_path).read_text())
    key = tuple(man["command"])
    params = dict(man["params"])
    if threads is not None:
        params["threads"] = threads
    files, _ = execute(key, params)
    d = _write(key, params, files, out or params.get("out", "runs"))
    new = json.loads((d / "manifest.json").read_text())["outputs"]
    match = {k: new.get(k) == v for k, v in man["outputs"].items()}
    return all(match.values()) and set(new) == set(man["outputs"]), d, match


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if ns.command == "rerun":
            ok, d, match = rerun(ns.manifest, ns.threads, ns.out)
            for name, m in match.items():
                print(f"{'MATCH' if m else 'DIFFER'}  {name}")
            print(f"rerun written to {d}")
            return 0 if ok else 1
        key, params = resolve(ns)
        files, msg = execute(key, params)
        d = _write(key, params, files, params["out"])
        if msg:
            print(msg)
        print(f"outputs written to {d}")
        return 0
    except (DomainError, ConstructionError) as exc:
        cond = getattr(exc, "condition", None)
        print(f"error: {exc}" + (f" [condition: {cond}]" if cond else ""), file=sys.stderr)
        return 1
    except LorentzGasError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())
