"""Periodic disc lattice: the table, its corridors and free flights.

Discs of radius ``r`` sit on every site of the integer lattice.  All lengths
are in lattice units, all angles in radians.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import _kernels
from .errors import DomainError, EscapeError

TAU_MAX = 1e6
EPS_STEP = 1e-12
# Relative tangency threshold: a disc counts as hit only if the squared
# half-chord exceeds eps_tangency * r * (r + distance along the ray).
EPS_TANGENCY = 1e-12


@dataclass(frozen=True)
class Corridor:
    """Collision-free strip along the primitive lattice direction (p, q)."""

    p: int
    q: int
    width: float

    @property
    def direction(self) -> tuple[int, int]:
        return (self.p, self.q)

    @property
    def norm(self) -> float:
        return math.hypot(self.p, self.q)

    def unit(self) -> np.ndarray:
        return np.array([self.p, self.q], dtype=float) / self.norm


@dataclass(frozen=True)
class BilliardTable:
    r: float
    corridors: tuple[Corridor, ...]
    tau_max: float = TAU_MAX
    eps_tangency: float = EPS_TANGENCY
    eps_step: float = EPS_STEP
    cutoff: int = 1
    c_nu: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "c_nu", 1.0 / (2.0 * math.pi * self.r))

    @property
    def perimeter(self) -> float:
        return 2.0 * math.pi * self.r

    def params(self) -> dict:
        return {
            "r": self.r,
            "cutoff": self.cutoff,
            "tau_max": self.tau_max,
            "eps_tangency": self.eps_tangency,
            "eps_step": self.eps_step,
        }


class PlanarRay(NamedTuple):
    origin: tuple[float, float]
    direction: tuple[float, float]

    @classmethod
    def make(cls, origin, direction) -> "PlanarRay":
        dx, dy = float(direction[0]), float(direction[1])
        nrm = math.hypot(dx, dy)
        return cls((float(origin[0]), float(origin[1])), (dx / nrm, dy / nrm))


class Flight(NamedTuple):
    tau: float
    lattice_cell: tuple[int, int]
    hit_point: tuple[float, float]


class Escape(NamedTuple):
    tau_max: float


def corridor_width(r: float, p: int, q: int) -> float:
    return 1.0 / math.hypot(p, q) - 2.0 * r


def build_table(r: float, direction_norm_cutoff: int = 1, *, tau_max: float = TAU_MAX,
                eps_tangency: float = EPS_TANGENCY) -> BilliardTable:
    """Build the table for radius ``r``, listing corridors up to the norm cutoff.

    Raises DomainError unless 0 < r < 1/2: at r >= 1/2 neighbouring discs touch
    and the particle is trapped.
    """
    r = float(r)
    if not (0.0 < r < 0.5):
        raise DomainError(f"r={r!r} violates 0 < r < 1/2 (no-trapping assumption)")
    if direction_norm_cutoff < 1:
        raise DomainError("direction_norm_cutoff must be >= 1")
    cut = int(direction_norm_cutoff)
    found = []
    for p in range(-cut, cut + 1):
        for q in range(-cut, cut + 1):
            if (p, q) == (0, 0) or math.gcd(abs(p), abs(q)) != 1:
                continue
            if p * p + q * q > cut * cut:
                continue
            w = corridor_width(r, p, q)
            if w > 0.0:
                found.append(Corridor(p, q, w))
    found.sort(key=lambda c: (c.p * c.p + c.q * c.q, c.p, c.q))
    return BilliardTable(r=r, corridors=tuple(found), tau_max=float(tau_max),
                         eps_tangency=float(eps_tangency), cutoff=cut)


def boundary_point(table: BilliardTable, s: float):
    """Position, inward normal and tangent at arclength ``s`` on the disc at the origin.

    The inward normal points into the free region, i.e. radially away from the
    disc centre; the tangent is the normal rotated counterclockwise by 90 deg.
    """
    r = table.r
    th = (s % table.perimeter) / r
    normal = np.array([math.cos(th), math.sin(th)])
    return r * normal, normal, np.array([-normal[1], normal[0]])


def free_flight(table: BilliardTable, ray: PlanarRay) -> Flight | Escape:
    """First disc hit along ``ray``, or Escape when none lies within tau_max."""
    (ox, oy), (dx, dy) = ray
    status, tau, ix, iy = _kernels.flight(ox, oy, dx, dy, table.r, table.tau_max,
                                          table.eps_tangency, table.eps_step)
    if status != _kernels.HIT:
        return Escape(table.tau_max)
    return Flight(tau, (ix, iy), (ox + tau * dx, oy + tau * dy))


def free_flight_or_raise(table: BilliardTable, ray: PlanarRay) -> Flight:
    res = free_flight(table, ray)
    if isinstance(res, Escape):
        raise EscapeError(res.tau_max)
    return res


def brute_force_flight(table: BilliardTable, ray: PlanarRay, reach: float) -> Flight | None:
    """Reference flight: solve the ray-circle quadratic for every disc in a box.

    Independent of the marching code; used as a test oracle.
    """
    (ox, oy), (dx, dy) = ray
    r = table.r
    k = int(math.ceil(reach)) + 1
    xs = np.arange(math.floor(ox) - k, math.floor(ox) + k + 2)
    ys = np.arange(math.floor(oy) - k, math.floor(oy) + k + 2)
    cx, cy = np.meshgrid(xs, ys, indexing="ij")
    wx = cx - ox
    wy = cy - oy
    b = wx * dx + wy * dy
    cc = wx * wx + wy * wy - r * r
    disc = b * b - cc
    with np.errstate(invalid="ignore"):
        t = b - np.sqrt(disc)
    ok = (disc > 0) & (t > table.eps_step) & (b > 0)
    if not ok.any():
        return None
    t = np.where(ok, t, np.inf)
    idx = np.unravel_index(np.argmin(t), t.shape)
    tau = float(t[idx])
    return Flight(tau, (int(cx[idx]), int(cy[idx])), (ox + tau * dx, oy + tau * dy))
