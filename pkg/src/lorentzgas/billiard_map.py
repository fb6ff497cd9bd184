"""The collision map T on the cylinder of outgoing collisions.

Coordinates: ``s`` is counterclockwise arclength on the disc in [0, 2*pi*r),
``phi`` is the angle from the inward normal to the outgoing velocity, positive
toward the counterclockwise tangent, in [-pi/2, pi/2].  The invariant measure
is c_nu * cos(phi) ds dphi.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import _kernels
from .errors import EscapeError
from .geometry import BilliardTable
from .parallel import chunk_rngs, run_chunks, split_counts


class PhasePoint(NamedTuple):
    s: float
    phi: float

    def reversed(self) -> "PhasePoint":
        """Image under the time-reversal involution (s, phi) -> (s, -phi)."""
        return PhasePoint(self.s, -self.phi)


def make_point(table: BilliardTable, s: float, phi: float) -> PhasePoint:
    if abs(phi) > math.pi / 2:
        raise ValueError(f"phi={phi} outside [-pi/2, pi/2]")
    return PhasePoint(float(s) % table.perimeter, float(phi))


@dataclass(frozen=True)
class CollisionStep:
    start: PhasePoint
    end: PhasePoint
    tau: float
    displacement: tuple[int, int]
    n_symbol: int
    derivative: np.ndarray

    @property
    def to(self) -> PhasePoint:
        return self.end


def _args(table: BilliardTable):
    return table.r, table.tau_max, table.eps_tangency, table.eps_step


def forward_map(table: BilliardTable, x: PhasePoint) -> CollisionStep:
    st, s1, phi1, tau, ix, iy, a, b, c, d = _kernels.step(x.s, x.phi, *_args(table))
    if st != _kernels.HIT:
        raise EscapeError(table.tau_max)
    return CollisionStep(PhasePoint(x.s, x.phi), PhasePoint(s1, phi1), tau, (ix, iy),
                         int(_kernels.symbol_of(ix, iy)), np.array([[a, b], [c, d]]))


def inverse_map(table: BilliardTable, x: PhasePoint) -> CollisionStep:
    """T^-1 = iota T iota.  ``end`` is the preimage; ``displacement`` points to its disc."""
    st, s1, phi1, tau, ix, iy, a, b, c, d = _kernels.step(x.s, -x.phi, *_args(table))
    if st != _kernels.HIT:
        raise EscapeError(table.tau_max)
    return CollisionStep(PhasePoint(x.s, x.phi), PhasePoint(s1, -phi1), tau, (ix, iy),
                         int(_kernels.symbol_of(ix, iy)), np.array([[a, -b], [-c, d]]))


class BatchStep(NamedTuple):
    status: np.ndarray
    s: np.ndarray
    phi: np.ndarray
    tau: np.ndarray
    displacement: np.ndarray
    derivative: np.ndarray

    @property
    def ok(self) -> np.ndarray:
        return self.status == _kernels.HIT


def forward_batch(table: BilliardTable, s, phi) -> BatchStep:
    return BatchStep(*_kernels.step_batch(np.ascontiguousarray(s, dtype=float),
                                          np.ascontiguousarray(phi, dtype=float),
                                          *_args(table), False))


def inverse_batch(table: BilliardTable, s, phi) -> BatchStep:
    return BatchStep(*_kernels.step_batch(np.ascontiguousarray(s, dtype=float),
                                          np.ascontiguousarray(phi, dtype=float),
                                          *_args(table), True))


def sample_nu(table: BilliardTable, count: int, seed=0):
    """Draw ``count`` i.i.d. points from nu; returns arrays (s, phi).

    ``seed`` may be an int or a numpy Generator.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    s = rng.uniform(0.0, table.perimeter, count)
    phi = np.arcsin(rng.uniform(-1.0, 1.0, count))
    return s, phi


def sample_nu_points(table: BilliardTable, count: int, seed=0) -> list[PhasePoint]:
    s, phi = sample_nu(table, count, seed)
    return [PhasePoint(a, b) for a, b in zip(s.tolist(), phi.tolist())]


# ---------------------------------------------------------------- invariance

TEST_FUNCTIONS = {
    "sin_phi": lambda s, phi, r: np.sin(phi),
    "cos_2phi": lambda s, phi, r: np.cos(2 * phi),
    "cos_theta": lambda s, phi, r: np.cos(s / r),
    "sin_theta": lambda s, phi, r: np.sin(s / r),
    "sin_phi_cos_theta": lambda s, phi, r: np.sin(phi) * np.cos(s / r),
    "cos_2phi_sin_theta": lambda s, phi, r: np.cos(2 * phi) * np.sin(s / r),
    "cos_2phi_cos_2theta": lambda s, phi, r: np.cos(2 * phi) * np.cos(2 * s / r),
    "phi_sq": lambda s, phi, r: phi * phi,
}

# Map perturbations for negative controls.  "negate_phi" is iota o T, which
# still preserves nu (iota does); "sine_angle" stores sin(phi') in place of
# phi', which does not.
PERTURBATIONS = ("none", "negate_phi", "sine_angle")


def _perturb(phi1, perturbation):
    if perturbation == "none":
        return phi1
    if perturbation == "negate_phi":
        return -phi1
    if perturbation == "sine_angle":
        return np.sin(phi1)
    raise ValueError(f"unknown perturbation {perturbation!r}")


@dataclass
class InvarianceReport:
    count: int
    escapes: int
    perturbation: str
    z: dict
    diff: dict
    stderr: dict

    @property
    def max_z(self) -> float:
        return max(abs(v) for v in self.z.values())

    def to_dict(self) -> dict:
        return {"count": self.count, "escapes": self.escapes,
                "perturbation": self.perturbation, "max_z": self.max_z,
                "z": self.z, "diff": self.diff, "stderr": self.stderr}


def invariance_test(table: BilliardTable, count: int, seed=0, *, perturbation="none",
                    n_chunks: int = 16, threads: int = 1) -> InvarianceReport:
    """Push a nu-sample one step forward and compare test-function means.

    Each functional's discrepancy is the mean of f(Tx) - f(x) over the sample,
    standardised by its own standard error.  Invariance makes it pure noise.
    """
    rngs = chunk_rngs(seed, n_chunks)
    sizes = split_counts(count, n_chunks)

    def work(k):
        s, phi = sample_nu(table, sizes[k], rngs[k])
        res = forward_batch(table, s, phi)
        ok = res.ok
        phi1 = _perturb(res.phi[ok], perturbation)
        d = {name: f(res.s[ok], phi1, table.r) - f(s[ok], phi[ok], table.r)
             for name, f in TEST_FUNCTIONS.items()}
        return int((~ok).sum()), d

    parts = run_chunks(work, range(n_chunks), threads)
    escapes = sum(p[0] for p in parts)
    z, diff, se = {}, {}, {}
    for name in TEST_FUNCTIONS:
        d = np.concatenate([p[1][name] for p in parts])
        m = float(d.mean())
        e = float(d.std(ddof=1) / math.sqrt(d.size))
        diff[name], se[name] = m, e
        z[name] = m / e if e > 0 else (0.0 if m == 0 else math.inf)
    return InvarianceReport(count, escapes, perturbation, z, diff, se)


# ---------------------------------------------------------------- Lyapunov

@dataclass
class LyapunovEstimate:
    lambda_plus: float
    std_error: float
    collisions: int
    r: float
    escapes: int
    batch_means: list

    @property
    def lambda_minus(self) -> float:
        # det DT telescopes to a ratio of cosines, so the exponents sum to zero
        return -self.lambda_plus

    def to_dict(self) -> dict:
        return {"lambda_plus": self.lambda_plus, "lambda_minus": self.lambda_minus,
                "std_error": self.std_error, "collisions": self.collisions,
                "r": self.r, "escape_count": self.escapes,
                "batches": len(self.batch_means)}


def _tangent_chunk(table, s, phi, steps, rng):
    """Run ``steps`` collisions, restarting from fresh nu-samples after escapes."""
    ts, tphi = math.sqrt(0.5), math.sqrt(0.5)
    done = 0
    total = 0.0
    escapes = 0
    while done < steps:
        k, acc, s, phi, ts, tphi = _kernels.tangent_run(s, phi, ts, tphi, steps - done,
                                                         *_args(table))
        done += k
        total += acc
        if done < steps:
            escapes += 1
            s0, p0 = sample_nu(table, 1, rng)
            s, phi = float(s0[0]), float(p0[0])
            ts, tphi = math.sqrt(0.5), math.sqrt(0.5)
    return total, escapes


def lyapunov_estimate(table: BilliardTable, steps: int, seed=0, *, x0: PhasePoint | None = None,
                      batches: int = 32, threads: int = 1) -> LyapunovEstimate:
    """Positive exponent per collision by tangent-vector renormalisation.

    The run is cut into ``batches`` independent trajectories started from nu;
    the standard error comes from the batch means.
    """
    if steps < 1000:
        raise ValueError("steps must be >= 1000")
    if batches < 20:
        raise ValueError("need at least 20 batches for the error estimate")
    rngs = chunk_rngs(seed, batches)
    sizes = split_counts(steps, batches)

    def work(k):
        rng = rngs[k]
        if k == 0 and x0 is not None:
            s, phi = x0.s, x0.phi
        else:
            s0, p0 = sample_nu(table, 1, rng)
            s, phi = float(s0[0]), float(p0[0])
        return _tangent_chunk(table, s, phi, sizes[k], rng)

    parts = run_chunks(work, range(batches), threads)
    sums = np.array([p[0] for p in parts])
    means = sums / np.array(sizes)
    lam = float(sums.sum() / steps)
    se = float(means.std(ddof=1) / math.sqrt(batches))
    return LyapunovEstimate(lam, se, steps, table.r, sum(p[1] for p in parts), means.tolist())


def orbit(table: BilliardTable, x0: PhasePoint, steps: int):
    """Collision-by-collision record of an orbit.

    Returns an array with columns s, phi, tau, dx, dy, n_symbol, log_expansion;
    stops early (fewer rows) on an escape.
    """
    done, rows = _kernels.orbit_run(x0.s, x0.phi, math.sqrt(0.5), math.sqrt(0.5), steps,
                                    *_args(table))
    return rows
