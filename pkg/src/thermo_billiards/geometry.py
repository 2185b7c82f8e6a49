"""Geometry of the unit torus with circular scatterers.

Positions live in the unit square ``[0, 1)^2`` with periodic identification.
A ray is traced against every periodic image of every disk within the cell
window implied by ``sigma_cap``; the first entry root wins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numba
import numpy as np

from .errors import InvalidState, NoCollisionWithinCap
from .rng import RngStream, uniform_at

TWO_PI = 2.0 * math.pi
# ray-circle discriminants in (-DISC_EPS, 0) are misses
DISC_EPS = 1e-14
# roots closer than this to the departure point are ignored
T_EPS = 1e-12
# arrivals closer than this to tangency are flagged as grazing
GRAZING_EPS = 1e-7
GEOM_TOL = 1e-9

TRACE_OK = 0
TRACE_NO_HIT = 1
TRACE_INSIDE = 2


@dataclass(frozen=True)
class Disk:
    center: tuple[float, float]
    radius: float
    beta: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))
        object.__setattr__(self, "radius", float(self.radius))
        object.__setattr__(self, "beta", float(self.beta))


@dataclass(frozen=True, eq=False)
class BilliardTable:
    """Disks on the unit torus plus the free-flight cap used when tracing.

    The table is immutable; flat numpy views of the disk parameters are
    built once and shared by the compiled kernels.
    """

    disks: tuple[Disk, ...]
    sigma_cap: float = 1.0
    cx: np.ndarray = field(init=False, repr=False)
    cy: np.ndarray = field(init=False, repr=False)
    radii: np.ndarray = field(init=False, repr=False)
    betas: np.ndarray = field(init=False, repr=False)
    arc_offsets: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        disks = tuple(d if isinstance(d, Disk) else Disk(**d) for d in self.disks)
        object.__setattr__(self, "disks", disks)
        object.__setattr__(self, "sigma_cap", float(self.sigma_cap))
        cx = np.array([d.center[0] for d in disks], dtype=float) % 1.0
        cy = np.array([d.center[1] for d in disks], dtype=float) % 1.0
        radii = np.array([d.radius for d in disks], dtype=float)
        for name, arr in (("cx", cx), ("cy", cy), ("radii", radii)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        betas = np.array([d.beta for d in disks], dtype=float)
        betas.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        offsets = np.concatenate([[0.0], np.cumsum(TWO_PI * radii)])
        offsets.setflags(write=False)
        object.__setattr__(self, "arc_offsets", offsets)

    def __eq__(self, other):
        if not isinstance(other, BilliardTable):
            return NotImplemented
        return self.disks == other.disks and self.sigma_cap == other.sigma_cap

    def __hash__(self):
        return hash((self.disks, self.sigma_cap))

    @property
    def n_disks(self) -> int:
        return len(self.disks)

    @property
    def perimeter(self) -> float:
        """Total boundary length of the scatterers."""
        return float(self.arc_offsets[-1])

    @property
    def free_area(self) -> float:
        return 1.0 - float(np.sum(math.pi * self.radii**2))

    @property
    def image_window(self) -> int:
        return int(math.ceil(self.sigma_cap)) + 1

    @property
    def equilibrium_beta(self) -> Optional[float]:
        """The common inverse temperature, or None for mixed tables."""
        b = self.betas
        return float(b[0]) if np.all(b == b[0]) else None

    def with_beta(self, beta: float) -> "BilliardTable":
        return BilliardTable(
            tuple(Disk(d.center, d.radius, beta) for d in self.disks), self.sigma_cap
        )

    def kernel_args(self):
        return self.cx, self.cy, self.radii, self.image_window, self.sigma_cap


@dataclass(frozen=True)
class BoundaryPoint:
    disk_id: int
    theta: float

    def arclength(self, table: BilliardTable) -> float:
        return float(table.arc_offsets[self.disk_id] + table.radii[self.disk_id] * self.theta)

    @classmethod
    def from_arclength(cls, table: BilliardTable, r: float) -> "BoundaryPoint":
        r = float(r) % table.perimeter
        i = int(np.searchsorted(table.arc_offsets, r, side="right") - 1)
        i = min(i, table.n_disks - 1)
        theta = (r - table.arc_offsets[i]) / table.radii[i]
        return cls(i, min(theta, math.nextafter(TWO_PI, 0.0)))


@dataclass(frozen=True)
class CollisionHit:
    point: BoundaryPoint
    flight_length: float
    incoming_angle: float
    grazing: bool = False


@dataclass(frozen=True)
class Overlap:
    i: int
    j: int
    offset: tuple[int, int]

    def __str__(self):
        return f"Overlap({self.i},{self.j}) at lattice offset {self.offset}"


@dataclass(frozen=True)
class SelfOverlap:
    i: int

    def __str__(self):
        return f"SelfOverlap({self.i}): radius must be < 0.5"


@dataclass(frozen=True)
class BadParameter:
    what: str
    index: Optional[int] = None

    def __str__(self):
        where = "" if self.index is None else f"({self.index})"
        return f"BadParameter{where}: {self.what}"


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok

    def __str__(self):
        if self.ok:
            return "valid"
        return "; ".join(str(v) for v in self.violations)


@dataclass(frozen=True)
class HorizonEstimate:
    sigma_max_hat: float
    sigma_min_hat: float
    violations: int
    n_rays: int


def wrap(position: Sequence[float]) -> tuple[float, float]:
    """Reduce a point of the plane to its representative in ``[0, 1)^2``."""
    x, y = float(position[0]), float(position[1])
    if not (math.isfinite(x) and math.isfinite(y)):
        raise InvalidState(f"non-finite position {position!r}")
    return _wrap1(x), _wrap1(y)


@numba.njit(cache=True, nogil=True)
def _wrap1(x):
    y = x - math.floor(x)
    if y >= 1.0:
        y = 0.0
    return y


def validate_table(table: BilliardTable) -> ValidationReport:
    report = ValidationReport()
    if table.n_disks == 0:
        report.violations.append(BadParameter("table has no disks"))
        return report
    if not (math.isfinite(table.sigma_cap) and table.sigma_cap > 0):
        report.violations.append(BadParameter("sigma_cap must be positive"))
    for i, d in enumerate(table.disks):
        if not all(math.isfinite(c) for c in d.center):
            report.violations.append(BadParameter("center must be finite", i))
        if not (d.radius > 0):
            report.violations.append(BadParameter("radius must be positive", i))
        elif d.radius >= 0.5:
            report.violations.append(SelfOverlap(i))
        if not (d.beta > 0 and math.isfinite(d.beta)):
            report.violations.append(BadParameter("beta must be positive", i))
    p = table.n_disks
    for i in range(p):
        for j in range(i, p):
            for kx in (-1, 0, 1):
                for ky in (-1, 0, 1):
                    if i == j and (kx, ky) == (0, 0):
                        continue
                    if i == j:
                        # self-images are covered by SelfOverlap
                        continue
                    dx = table.cx[i] - table.cx[j] - kx
                    dy = table.cy[i] - table.cy[j] - ky
                    if math.hypot(dx, dy) <= table.radii[i] + table.radii[j]:
                        report.violations.append(Overlap(i, j, (kx, ky)))
    return report


@numba.njit(cache=True, nogil=True)
def trace(cx, cy, rad, m, cap, px, py, dx, dy, src):
    """First disk image hit by the ray ``p + t d``, ``0 < t <= cap``.

    Returns ``(disk, t, nx, ny, status)`` with ``(nx, ny)`` the outward unit
    normal at the hit point.  Roots on the source disk closer than ``T_EPS``
    are skipped.  Images are visited nearest-first around the closest copy
    of each center; ``m`` bounds the lattice offsets searched.
    """
    best_t = np.inf
    best_j = -1
    best_nx = 0.0
    best_ny = 0.0
    for j in range(cx.size):
        r = rad[j]
        r2 = r * r
        bx = math.floor(px - cx[j] + 0.5)
        by = math.floor(py - cy[j] + 0.5)
        for ix in range(2 * m + 1):
            kx = bx + ((ix + 1) // 2 if ix % 2 == 1 else -(ix // 2))
            ox = cx[j] + kx - px
            reach = min(cap, best_t) + r
            if ox > reach or ox < -reach:
                continue
            for iy in range(2 * m + 1):
                ky = by + ((iy + 1) // 2 if iy % 2 == 1 else -(iy // 2))
                oy = cy[j] + ky - py
                reach = min(cap, best_t) + r
                if oy > reach or oy < -reach:
                    continue
                d2 = ox * ox + oy * oy
                if d2 > reach * reach:
                    continue
                c2 = d2 - r2
                if c2 < -2.0 * r * GEOM_TOL and j != src:
                    return j, 0.0, 0.0, 0.0, TRACE_INSIDE
                b = ox * dx + oy * dy
                if b <= 0.0:
                    continue
                disc = b * b - c2
                if disc < 0.0:
                    continue
                t = c2 / (b + math.sqrt(disc))
                if t <= 0.0:
                    continue
                if j == src and t <= T_EPS:
                    continue
                if t < best_t:
                    best_t = t
                    best_j = j
                    best_nx = (t * dx - ox) / r
                    best_ny = (t * dy - oy) / r
    if best_j < 0 or best_t > cap:
        return best_j, best_t, 0.0, 0.0, TRACE_NO_HIT
    norm = math.hypot(best_nx, best_ny)
    return best_j, best_t, best_nx / norm, best_ny / norm, TRACE_OK


@numba.njit(cache=True, nogil=True)
def incoming_angle(dx, dy, nx, ny):
    """Signed angle between the reversed direction and the outward normal."""
    return math.atan2(dx * ny - dy * nx, -(dx * nx + dy * ny))


@numba.njit(cache=True, nogil=True)
def boundary_position(cx, cy, rad, i, theta):
    c = math.cos(theta)
    s = math.sin(theta)
    return _wrap1(cx[i] + rad[i] * c), _wrap1(cy[i] + rad[i] * s), c, s


@numba.njit(cache=True, nogil=True)
def normal_angle(nx, ny):
    th = math.atan2(ny, nx)
    if th < 0.0:
        th += TWO_PI
        if th >= TWO_PI:
            th = 0.0
    return th


def _torus_delta(a: float, b: float) -> float:
    d = (a - b) % 1.0
    return min(d, 1.0 - d)


def boundary_point_frame(table: BilliardTable, point: BoundaryPoint):
    """Position, outward normal and counter-clockwise tangent at a boundary point."""
    if not 0 <= point.disk_id < table.n_disks:
        raise InvalidState(f"disk_id {point.disk_id} out of range")
    if not math.isfinite(point.theta):
        raise InvalidState("theta must be finite")
    x, y, c, s = boundary_position(table.cx, table.cy, table.radii, point.disk_id, point.theta)
    return (x, y), (c, s), (-s, c)


def next_collision(
    table: BilliardTable,
    position: Sequence[float],
    direction: Sequence[float],
    skip_source: Optional[BoundaryPoint] = None,
) -> CollisionHit:
    px, py = wrap(position)
    dx, dy = float(direction[0]), float(direction[1])
    if not (math.isfinite(dx) and math.isfinite(dy)) or abs(math.hypot(dx, dy) - 1.0) > 1e-9:
        raise InvalidState(f"direction must be a unit vector, got {direction!r}")
    src = -1
    if skip_source is not None:
        (bx, by), _, _ = boundary_point_frame(table, skip_source)
        if math.hypot(_torus_delta(bx, px), _torus_delta(by, py)) > GEOM_TOL:
            raise InvalidState("position does not lie on skip_source")
        src = skip_source.disk_id
    j, t, nx, ny, status = trace(*table.kernel_args(), px, py, dx, dy, src)
    if status == TRACE_INSIDE:
        raise InvalidState(f"position {position!r} lies inside disk {j}")
    if status == TRACE_NO_HIT:
        raise NoCollisionWithinCap((px, py), (dx, dy), table.sigma_cap)
    phi_in = incoming_angle(dx, dy, nx, ny)
    return CollisionHit(
        BoundaryPoint(j, normal_angle(nx, ny)),
        t,
        phi_in,
        abs(phi_in) > math.pi / 2 - GRAZING_EPS,
    )


@numba.njit(cache=True, nogil=True)
def _probe(cx, cy, rad, m, cap, arc, seed, stream, start, out_sigma, out_status, out_phi):
    perimeter = arc[-1]
    for n in range(out_sigma.size):
        r = uniform_at(seed, stream, start + 2 * n) * perimeter
        phi = (uniform_at(seed, stream, start + 2 * n + 1) - 0.5) * math.pi
        out_phi[n] = phi
        i = 0
        while i < cx.size - 1 and r >= arc[i + 1]:
            i += 1
        theta = (r - arc[i]) / rad[i]
        px, py, c, s = boundary_position(cx, cy, rad, i, theta)
        cp = math.cos(phi)
        sp = math.sin(phi)
        dx = cp * c - sp * s
        dy = cp * s + sp * c
        j, t, nx, ny, status = trace(cx, cy, rad, m, cap, px, py, dx, dy, i)
        out_sigma[n] = t
        out_status[n] = status


def sample_boundary(table: BilliardTable, rng: RngStream, n: int):
    """``n`` boundary points uniform in arclength, as ``(disk_ids, thetas)``."""
    r = rng.uniforms(n) * table.perimeter
    ids = np.minimum(np.searchsorted(table.arc_offsets, r, side="right") - 1, table.n_disks - 1)
    theta = (r - table.arc_offsets[ids]) / table.radii[ids]
    return ids.astype(np.int64), theta


def probe_horizon(table: BilliardTable, n_rays: int, rng: RngStream) -> HorizonEstimate:
    """Cast random rays from the boundary and record their flight lengths.

    Zero violations is evidence, not proof, of a bounded horizon.
    """
    sig = np.empty(n_rays)
    status = np.empty(n_rays, dtype=np.int64)
    _probe(*table.kernel_args(), table.arc_offsets, *rng.key, rng.counter, sig, status,
           np.empty(n_rays))
    rng.counter += 2 * n_rays
    ok = status == TRACE_OK
    hits = sig[ok]
    if hits.size == 0:
        return HorizonEstimate(math.nan, math.nan, int(n_rays), int(n_rays))
    return HorizonEstimate(float(hits.max()), float(hits.min()), int(np.sum(~ok)), int(n_rays))


def reference_table(beta: float = 1.0, sigma_cap: float = 2.0) -> BilliardTable:
    """Two-disk table with bounded horizon.

    A disk of radius 0.42 blocks the diagonal corridors (it needs > 0.3536);
    together with the disk of radius 0.22 at the cell center it blocks the
    axis-aligned ones (sum of radii > 0.5).  All other rational corridors
    are narrower than the large disk's diameter.
    """
    return BilliardTable(
        (Disk((0.25, 0.25), 0.42, beta), Disk((0.75, 0.75), 0.22, beta)), sigma_cap
    )


def single_disk_table(radius: float = 0.25, beta: float = 1.0, sigma_cap: float = 3.0) -> BilliardTable:
    """One disk at the cell center: horizontal and vertical corridors stay open."""
    return BilliardTable((Disk((0.5, 0.5), radius, beta),), sigma_cap)
