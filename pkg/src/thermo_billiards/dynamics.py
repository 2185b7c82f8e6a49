"""Stochastic dynamics: thermostat kicks, the collision chain and the flow.

At a collision with disk ``i`` the normal velocity component flips sign and
the tangential component is redrawn from a centred Gaussian with variance
``1 / (2 beta_i)``.  Every kick consumes exactly one draw of the particle's
stream (a standard normal by inversion), so streams stay aligned no matter
how a run is split.

States at a collision instant carry the outgoing velocity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np

from .errors import InvalidState, NoCollisionWithinCap
from .geometry import (
    GRAZING_EPS,
    TRACE_INSIDE,
    TRACE_NO_HIT,
    TRACE_OK,
    BilliardTable,
    BoundaryPoint,
    Disk,
    _wrap1,
    boundary_point_frame,
    boundary_position,
    normal_angle,
    trace,
    wrap,
)
from .parallel import chunks, ordered_map
from .rng import RngStream, normal_at

CHUNK = 16384

V_PERP_FLOOR = 1e-300
HALF_PI = 0.5 * math.pi


@dataclass(frozen=True)
class FlowState:
    position: tuple[float, float]
    velocity: tuple[float, float]

    @property
    def speed(self) -> float:
        return math.hypot(*self.velocity)


@dataclass(frozen=True)
class CollisionState:
    point: BoundaryPoint
    v_perp: float

    def __post_init__(self):
        if not self.v_perp > 0:
            raise InvalidState(f"v_perp must be positive, got {self.v_perp}")


@dataclass(frozen=True)
class SuspensionState:
    base: CollisionState
    phi: float
    elapsed: float

    @property
    def speed(self) -> float:
        return self.base.v_perp / math.cos(self.phi)


@dataclass(frozen=True)
class StepRecord:
    source: CollisionState
    phi: float
    target: CollisionState
    phi_incoming: float
    flight_length: float
    flight_time: float
    speed: float
    grazing: bool = False


# ---------------------------------------------------------------- kernels


@numba.njit(cache=True, nogil=True)
def _kick_and_fly(cx, cy, rad, betas, m, cap, i, theta, v_perp, z):
    """One chain transition from ``(i, theta, v_perp)`` given a normal draw ``z``."""
    px, py, c, s = boundary_position(cx, cy, rad, i, theta)
    vt = z / math.sqrt(2.0 * betas[i])
    phi = math.atan2(vt, v_perp)
    speed = math.hypot(v_perp, vt)
    dx = (v_perp * c - vt * s) / speed
    dy = (v_perp * s + vt * c) / speed
    j, t, nx, ny, status = trace(cx, cy, rad, m, cap, px, py, dx, dy, i)
    if status != TRACE_OK:
        return j, 0.0, 0.0, phi, 0.0, t, 0.0, speed, False, status
    cos_in = -(dx * nx + dy * ny)
    phi_in = math.atan2(dx * ny - dy * nx, cos_in)
    v_next = speed * cos_in
    grazing = abs(phi_in) > HALF_PI - GRAZING_EPS
    if v_next < V_PERP_FLOOR:
        v_next = V_PERP_FLOOR
        grazing = True
    return j, normal_angle(nx, ny), v_next, phi, phi_in, t, t / speed, speed, grazing, status


@numba.njit(cache=True, nogil=True)
def _run_chain(cx, cy, rad, betas, m, cap, i, theta, v_perp, k0, k1, counter,
               n_burn, o_disk, o_theta, o_vperp, o_phi, o_phi_in, o_sigma, o_time,
               o_speed, o_graze):
    """Run ``n_burn`` unrecorded steps, then fill the output arrays.

    Returns the state after the last completed step, the number of recorded
    steps and a trace status (non-zero on failure).
    """
    n_keep = o_disk.size
    total = n_burn + n_keep
    for n in range(total):
        z = normal_at(k0, k1, counter + n)
        j, th, vn, phi, phi_in, t, tf, sp, gz, st = _kick_and_fly(
            cx, cy, rad, betas, m, cap, i, theta, v_perp, z)
        if st != TRACE_OK:
            return i, theta, v_perp, n, max(n - n_burn, 0), st, phi
        if n >= n_burn:
            k = n - n_burn
            o_disk[k] = i
            o_theta[k] = theta
            o_vperp[k] = v_perp
            o_phi[k] = phi
            o_phi_in[k] = phi_in
            o_sigma[k] = t
            o_time[k] = tf
            o_speed[k] = sp
            o_graze[k] = gz
        i = j
        theta = th
        v_perp = vn
    return i, theta, v_perp, total, n_keep, TRACE_OK, 0.0


@numba.njit(cache=True, nogil=True)
def _step_many(cx, cy, rad, betas, m, cap, disk, theta, v_perp, k0, streams, counters,
               o_disk, o_theta, o_vperp, o_phi, o_phi_in, o_sigma, o_time, o_speed,
               o_graze, o_status):
    """One step for every particle; each particle draws from its own stream."""
    for p in range(disk.size):
        z = normal_at(k0, streams[p], counters[p])
        j, th, vn, phi, phi_in, t, tf, sp, gz, st = _kick_and_fly(
            cx, cy, rad, betas, m, cap, disk[p], theta[p], v_perp[p], z)
        counters[p] += 1
        o_disk[p] = j
        o_theta[p] = th
        o_vperp[p] = vn
        o_phi[p] = phi
        o_phi_in[p] = phi_in
        o_sigma[p] = t
        o_time[p] = tf
        o_speed[p] = sp
        o_graze[p] = gz
        o_status[p] = st


@numba.njit(cache=True, nogil=True)
def _advance_many(cx, cy, rad, betas, m, cap, disk, theta, v_perp, k0, streams, counters,
                  n_steps):
    """Advance every particle ``n_steps`` chain steps in place."""
    for p in range(disk.size):
        i = disk[p]
        th = theta[p]
        v = v_perp[p]
        for n in range(n_steps):
            z = normal_at(k0, streams[p], counters[p])
            j, th2, vn, phi, phi_in, t, tf, sp, gz, st = _kick_and_fly(
                cx, cy, rad, betas, m, cap, i, th, v, z)
            if st != TRACE_OK:
                disk[p] = i
                theta[p] = th
                v_perp[p] = v
                return p, st
            counters[p] += 1
            i = j
            th = th2
            v = vn
        disk[p] = i
        theta[p] = th
        v_perp[p] = v
    return -1, TRACE_OK


@numba.njit(cache=True, nogil=True)
def _flow_one(cx, cy, rad, betas, m, cap, px, py, vx, vy, src, k0, k1, counter,
              duration, l_disk, l_theta, l_vperp, l_phi_in, l_phi, l_sigma, l_time,
              l_speed):
    """Advance one particle by ``duration`` or until the log is full.

    Returns ``(px, py, vx, vy, src, counter, time_left, n_logged, status)``.
    """
    remaining = duration
    n_log = 0
    cap_log = l_disk.size
    while True:
        speed = math.hypot(vx, vy)
        dx = vx / speed
        dy = vy / speed
        j, t, nx, ny, st = trace(cx, cy, rad, m, cap, px, py, dx, dy, src)
        if st != TRACE_OK:
            return px, py, vx, vy, src, counter, remaining, n_log, st
        tf = t / speed
        if tf > remaining:
            px = _wrap1(px + vx * remaining)
            py = _wrap1(py + vy * remaining)
            return px, py, vx, vy, src, counter, 0.0, n_log, TRACE_OK
        if n_log >= cap_log:
            return px, py, vx, vy, src, counter, remaining, n_log, TRACE_OK
        remaining -= tf
        px = _wrap1(px + t * dx)
        py = _wrap1(py + t * dy)
        cos_in = -(dx * nx + dy * ny)
        vn = speed * cos_in
        if vn < V_PERP_FLOOR:
            vn = V_PERP_FLOOR
        vt = normal_at(k0, k1, counter) / math.sqrt(2.0 * betas[j])
        counter += 1
        l_disk[n_log] = j
        l_theta[n_log] = normal_angle(nx, ny)
        l_vperp[n_log] = vn
        l_phi_in[n_log] = math.atan2(dx * ny - dy * nx, cos_in)
        l_phi[n_log] = math.atan2(vt, vn)
        l_sigma[n_log] = t
        l_time[n_log] = tf
        l_speed[n_log] = speed
        n_log += 1
        vx = vn * nx - vt * ny
        vy = vn * ny + vt * nx
        src = j


@numba.njit(cache=True, nogil=True)
def _flow_many(cx, cy, rad, betas, m, cap, px, py, vx, vy, src, k0, streams, counters,
               duration, n_coll):
    """Advance every particle by ``duration``; counts collisions per particle."""
    for p in range(px.size):
        x = px[p]
        y = py[p]
        ux = vx[p]
        uy = vy[p]
        s = src[p]
        c = counters[p]
        remaining = duration
        while True:
            speed = math.hypot(ux, uy)
            dx = ux / speed
            dy = uy / speed
            j, t, nx, ny, st = trace(cx, cy, rad, m, cap, x, y, dx, dy, s)
            if st != TRACE_OK:
                px[p] = x
                py[p] = y
                vx[p] = ux
                vy[p] = uy
                src[p] = s
                counters[p] = c
                return p, st
            tf = t / speed
            if tf > remaining:
                x = _wrap1(x + ux * remaining)
                y = _wrap1(y + uy * remaining)
                break
            remaining -= tf
            x = _wrap1(x + t * dx)
            y = _wrap1(y + t * dy)
            vn = -(ux * nx + uy * ny)
            if vn < V_PERP_FLOOR:
                vn = V_PERP_FLOOR
            vt = normal_at(k0, streams[p], c) / math.sqrt(2.0 * betas[j])
            c += 1
            ux = vn * nx - vt * ny
            uy = vn * ny + vt * nx
            s = j
            n_coll[p] += 1
        px[p] = x
        py[p] = y
        vx[p] = ux
        vy[p] = uy
        src[p] = s
        counters[p] = c
    return -1, TRACE_OK


@numba.njit(cache=True, nogil=True)
def _residual_many(cx, cy, rad, m, cap, px, py, vx, vy, src, out, status):
    for p in range(px.size):
        speed = math.hypot(vx[p], vy[p])
        j, t, nx, ny, st = trace(cx, cy, rad, m, cap, px[p], py[p], vx[p] / speed,
                                 vy[p] / speed, src[p])
        out[p] = t / speed
        status[p] = st


@numba.njit(cache=True, nogil=True)
def _lift_many(cx, cy, rad, disk, theta, v_perp, phi, elapsed, px, py, vx, vy):
    for p in range(disk.size):
        x, y, c, s = boundary_position(cx, cy, rad, disk[p], theta[p])
        speed = v_perp[p] / math.cos(phi[p])
        cp = math.cos(phi[p])
        sp = math.sin(phi[p])
        ux = speed * (cp * c - sp * s)
        uy = speed * (cp * s + sp * c)
        px[p] = _wrap1(x + ux * elapsed[p])
        py[p] = _wrap1(y + uy * elapsed[p])
        vx[p] = ux
        vy[p] = uy


# ------------------------------------------------------------ python API


def _raise_status(status, position=(math.nan, math.nan), direction=(math.nan, math.nan),
                  table: Optional[BilliardTable] = None):
    if status == TRACE_NO_HIT:
        raise NoCollisionWithinCap(position, direction, table.sigma_cap if table else math.nan)
    if status == TRACE_INSIDE:
        raise InvalidState(f"state at {position} lies inside a scatterer")


def _table_args(table: BilliardTable):
    return table.cx, table.cy, table.radii, table.betas, table.image_window, table.sigma_cap


def sample_tangential(beta: float, rng) -> float:
    """Tangential velocity with density ``sqrt(beta/pi) exp(-beta v^2)``.

    Exact inversion sampler: one uniform per call.
    """
    from scipy.special import ndtri

    if not beta > 0:
        raise InvalidState("beta must be positive")
    return float(ndtri(rng.uniforms(1)[0]) / math.sqrt(2.0 * beta))


def sample_outgoing_angle(v_perp: float, beta: float, rng) -> float:
    """Outgoing angle from the normal; exact sampler for the angle density."""
    if not v_perp > 0:
        raise InvalidState("v_perp must be positive")
    return math.atan2(sample_tangential(beta, rng), v_perp)


def collide(disk: Disk, frame, incoming_velocity, rng) -> tuple[float, float]:
    """Thermostat kick: flip the normal component, redraw the tangential one."""
    _, normal, tangent = frame
    vx, vy = incoming_velocity
    vn = vx * normal[0] + vy * normal[1]
    if not vn < 0:
        raise InvalidState("velocity is not incoming at the collision point")
    vt = sample_tangential(disk.beta, rng)
    return (-vn * normal[0] + vt * tangent[0], -vn * normal[1] + vt * tangent[1])


def chain_step(table: BilliardTable, state: CollisionState, rng: RngStream) -> StepRecord:
    z = float(rng.normals(1)[0])
    i = state.point.disk_id
    j, th, vn, phi, phi_in, t, tf, sp, gz, st = _kick_and_fly(
        table.cx, table.cy, table.radii, table.betas, table.image_window, table.sigma_cap,
        i, state.point.theta, state.v_perp, z)
    if st != TRACE_OK:
        (x, y), n, tg = boundary_point_frame(table, state.point)
        _raise_status(st, (x, y), (math.cos(phi), math.sin(phi)), table)
    return StepRecord(state, phi, CollisionState(BoundaryPoint(int(j), th), vn), phi_in,
                      t, tf, sp, bool(gz))


@dataclass
class ChainTrace:
    """Column-wise log of consecutive chain steps.

    Row ``k`` describes the flight leaving collision state
    ``(disk[k], theta[k], v_perp[k])``; its target is row ``k + 1`` (or
    ``final`` for the last row).
    """

    disk: np.ndarray
    theta: np.ndarray
    v_perp: np.ndarray
    phi: np.ndarray
    phi_incoming: np.ndarray
    flight_length: np.ndarray
    flight_time: np.ndarray
    speed: np.ndarray
    grazing: np.ndarray
    final: CollisionState

    def __len__(self):
        return self.disk.size

    def state(self, k: int) -> CollisionState:
        if k == len(self):
            return self.final
        return CollisionState(BoundaryPoint(int(self.disk[k]), float(self.theta[k])),
                              float(self.v_perp[k]))

    def record(self, k: int) -> StepRecord:
        return StepRecord(self.state(k), float(self.phi[k]), self.state(k + 1),
                          float(self.phi_incoming[k]), float(self.flight_length[k]),
                          float(self.flight_time[k]), float(self.speed[k]),
                          bool(self.grazing[k]))

    @property
    def target_v_perp(self) -> np.ndarray:
        return np.append(self.v_perp[1:], self.final.v_perp)


def run_chain(table: BilliardTable, state: CollisionState, n_steps: int, rng: RngStream,
              burn_in: int = 0) -> ChainTrace:
    """``burn_in`` silent steps followed by ``n_steps`` recorded ones."""
    out = [np.empty(n_steps, dtype=np.int64)] + [np.empty(n_steps) for _ in range(7)]
    graze = np.empty(n_steps, dtype=np.bool_)
    i, th, v, done, kept, st, phi = _run_chain(
        *_table_args(table), state.point.disk_id, state.point.theta, state.v_perp,
        *rng.key, rng.counter, burn_in, *out, graze)
    rng.counter += done
    if st != TRACE_OK:
        _raise_status(st, table=table)
    return ChainTrace(*out, graze, CollisionState(BoundaryPoint(int(i), float(th)), float(v)))


def step_many(table: BilliardTable, disk, theta, v_perp, seed: int, streams, counters) -> dict:
    """One chain step for each particle, every particle on its own stream.

    ``counters`` is advanced in place.  Returns column arrays of the targets
    and flight data plus a ``status`` column.
    """
    n = len(disk)
    o = {k: np.empty(n) for k in ("theta", "v_perp", "phi", "phi_incoming",
                                  "flight_length", "flight_time", "speed")}
    o["disk"] = np.empty(n, dtype=np.int64)
    o["grazing"] = np.empty(n, dtype=np.bool_)
    o["status"] = np.empty(n, dtype=np.int64)
    _step_many(*_table_args(table), np.asarray(disk, dtype=np.int64),
               np.asarray(theta, dtype=float), np.asarray(v_perp, dtype=float),
               np.uint64(seed), streams, counters, o["disk"], o["theta"], o["v_perp"],
               o["phi"], o["phi_incoming"], o["flight_length"], o["flight_time"],
               o["speed"], o["grazing"], o["status"])
    return o


def advance_many(table: BilliardTable, disk, theta, v_perp, seed: int, streams, counters,
                 n_steps: int) -> None:
    """Advance collision states in place by ``n_steps`` chain steps."""
    args = _table_args(table)

    def work(r):
        a, b = r
        return _advance_many(*args, disk[a:b], theta[a:b], v_perp[a:b], np.uint64(seed),
                             streams[a:b], counters[a:b], n_steps)

    for p, st in ordered_map(work, chunks(len(disk), CHUNK)):
        if st != TRACE_OK:
            _raise_status(st, table=table)


def lift_to_flow(table: BilliardTable, s: SuspensionState) -> FlowState:
    """Flow state reached ``elapsed`` time units after leaving the base point."""
    from .geometry import next_collision

    (x, y), n, tg = boundary_point_frame(table, s.base.point)
    if not abs(s.phi) < HALF_PI:
        raise InvalidState("phi must lie in (-pi/2, pi/2)")
    cp, sp = math.cos(s.phi), math.sin(s.phi)
    d = (cp * n[0] + sp * tg[0], cp * n[1] + sp * tg[1])
    speed = s.base.v_perp / cp
    hit = next_collision(table, (x, y), d, skip_source=s.base.point)
    if not 0 <= s.elapsed < hit.flight_length / speed:
        raise InvalidState("elapsed must lie in [0, flight time)")
    u = (speed * d[0], speed * d[1])
    return FlowState(wrap((x + u[0] * s.elapsed, y + u[1] * s.elapsed)), u)


def lift_many(table: BilliardTable, disk, theta, v_perp, phi, elapsed):
    """Vectorised ``lift_to_flow`` without the flight-time check."""
    n = len(disk)
    px, py, vx, vy = (np.empty(n) for _ in range(4))
    _lift_many(table.cx, table.cy, table.radii, np.asarray(disk, dtype=np.int64),
               np.asarray(theta, dtype=float), np.asarray(v_perp, dtype=float),
               np.asarray(phi, dtype=float), np.asarray(elapsed, dtype=float), px, py, vx, vy)
    return px, py, vx, vy


def _check_flow_state(z: FlowState):
    x, y = z.position
    vx, vy = z.velocity
    if not all(math.isfinite(a) for a in (x, y, vx, vy)):
        raise InvalidState("flow state must be finite")
    if vx == 0 and vy == 0:
        raise InvalidState("velocity must be non-zero")


def flow(table: BilliardTable, z: FlowState, duration: float, rng: RngStream,
         _log_chunk: int = 4096) -> tuple[FlowState, list[StepRecord]]:
    """Advance a flow state by exactly ``duration`` time units.

    Returns the final state and one record per collision.  A record's source
    is the previous collision, or None for the flight the call started in;
    its ``flight_length`` and ``flight_time`` then cover only the part flown
    during this call.
    """
    _check_flow_state(z)
    if not duration >= 0:
        raise InvalidState("duration must be non-negative")
    px, py = wrap(z.position)
    vx, vy = map(float, z.velocity)
    src = -1
    remaining = float(duration)
    records: list[StepRecord] = []
    prev: Optional[CollisionState] = None
    prev_phi = math.atan2(0.0, 1.0)
    while True:
        logs = [np.empty(_log_chunk, dtype=np.int64)] + [np.empty(_log_chunk) for _ in range(7)]
        px, py, vx, vy, src, counter, remaining, n_log, st = _flow_one(
            *_table_args(table), px, py, vx, vy, src, *rng.key, rng.counter, remaining, *logs)
        rng.counter = counter
        disk, theta, vperp, phi_in, phi, sigma, tf, speed = logs
        for k in range(n_log):
            target = CollisionState(BoundaryPoint(int(disk[k]), float(theta[k])), float(vperp[k]))
            records.append(StepRecord(prev, prev_phi if prev is not None else math.nan, target,
                                      float(phi_in[k]), float(sigma[k]), float(tf[k]),
                                      float(speed[k]),
                                      abs(phi_in[k]) > HALF_PI - GRAZING_EPS))
            prev, prev_phi = target, float(phi[k])
        if st != TRACE_OK:
            _raise_status(st, (px, py), (vx, vy), table)
        if remaining <= 0.0 or n_log < _log_chunk:
            break
    return FlowState((px, py), (vx, vy)), records


def residual_flight_time(table: BilliardTable, z: FlowState) -> float:
    """Time until the next collision at the current velocity."""
    from .geometry import next_collision

    _check_flow_state(z)
    speed = z.speed
    hit = next_collision(table, z.position, (z.velocity[0] / speed, z.velocity[1] / speed))
    return hit.flight_length / speed


@dataclass
class FlowEnsemble:
    """Many independent flow states, one random stream each.

    ``src`` remembers the disk of the last collision (-1 if none) so that
    tracing from a boundary point skips the departure root.
    """

    px: np.ndarray
    py: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    src: np.ndarray
    streams: np.ndarray
    counters: np.ndarray
    seed: int

    @classmethod
    def from_arrays(cls, px, py, vx, vy, seed: int, streams, src=None) -> "FlowEnsemble":
        n = len(px)
        return cls(np.array(px, dtype=float), np.array(py, dtype=float),
                   np.array(vx, dtype=float), np.array(vy, dtype=float),
                   np.full(n, -1, dtype=np.int64) if src is None else np.array(src, dtype=np.int64),
                   np.asarray(streams, dtype=np.uint64).copy(), np.zeros(n, dtype=np.uint64),
                   int(seed))

    def __len__(self):
        return self.px.size

    @property
    def speed(self) -> np.ndarray:
        return np.hypot(self.vx, self.vy)

    def state(self, k: int) -> FlowState:
        return FlowState((float(self.px[k]), float(self.py[k])),
                         (float(self.vx[k]), float(self.vy[k])))

    def advance(self, table: BilliardTable, duration: float) -> np.ndarray:
        """Flow every member by ``duration``; returns per-member collision counts."""
        n_coll = np.zeros(len(self), dtype=np.int64)
        args = _table_args(table)

        def work(r):
            a, b = r
            p, st = _flow_many(*args, self.px[a:b], self.py[a:b], self.vx[a:b], self.vy[a:b],
                               self.src[a:b], np.uint64(self.seed), self.streams[a:b],
                               self.counters[a:b], float(duration), n_coll[a:b])
            return (p + a if p >= 0 else p), st

        for p, st in ordered_map(work, chunks(len(self), CHUNK)):
            if st != TRACE_OK:
                _raise_status(st, (self.px[p], self.py[p]), (self.vx[p], self.vy[p]), table)
        return n_coll

    def residual_times(self, table: BilliardTable) -> np.ndarray:
        out = np.empty(len(self))
        status = np.empty(len(self), dtype=np.int64)
        _residual_many(table.cx, table.cy, table.radii, table.image_window, table.sigma_cap,
                       self.px, self.py, self.vx, self.vy, self.src, out, status)
        bad = np.flatnonzero(status != TRACE_OK)
        if bad.size:
            p = bad[0]
            _raise_status(status[p], (self.px[p], self.py[p]), (self.vx[p], self.vy[p]), table)
        return out
