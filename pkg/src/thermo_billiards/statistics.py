"""Estimators: histograms, TV distance, stationary ensembles, tails, fits, drift."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np
from scipy import stats as _st

from .dynamics import (
    ChainTrace,
    CollisionState,
    FlowState,
    _kick_and_fly,
    _table_args,
    lift_many,
    run_chain,
)
from .errors import DomainError, InvalidState, NoCollisionWithinCap
from .geometry import TRACE_OK, BilliardTable, BoundaryPoint, sample_boundary
from .measures import PotentialParams, potential_V
from .parallel import chunks, ordered_map
from .rng import RngStream, normal_at, uniform_at

Z95 = 1.959963984540054


class Verdict(str, enum.Enum):
    PASS = "Pass"
    FAIL = "Fail"
    INCONCLUSIVE = "Inconclusive"


class ModelVerdict(str, enum.Enum):
    POWER_BETTER = "PowerBetter"
    EXP_BETTER = "ExpBetter"
    INCONCLUSIVE = "Inconclusive"


# ------------------------------------------------------------- histograms


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    underflow: int = 0
    overflow: int = 0

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=float)
        c = np.asarray(self.counts, dtype=np.int64)
        if e.ndim != 1 or e.size < 2 or np.any(np.diff(e) <= 0):
            raise InvalidState("edges must be strictly increasing")
        if c.size != e.size - 1:
            raise InvalidState("counts must have one entry per bin")
        object.__setattr__(self, "edges", e)
        object.__setattr__(self, "counts", c)

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.underflow + self.overflow

    def cells(self) -> np.ndarray:
        """Counts with underflow first and overflow last."""
        return np.concatenate([[self.underflow], self.counts, [self.overflow]])

    def masses(self) -> np.ndarray:
        c = self.cells().astype(float)
        t = c.sum()
        return c / t if t > 0 else c


def histogram(samples, lo: float, hi: float, bins: int) -> Histogram:
    """Fixed-width bins on ``[lo, hi)``; everything else goes to under/overflow."""
    if not lo < hi:
        raise InvalidState("need lo < hi")
    if bins < 1:
        raise InvalidState("need at least one bin")
    x = np.asarray(samples, dtype=float).ravel()
    edges = np.linspace(lo, hi, bins + 1)
    under = int(np.count_nonzero(x < lo))
    over = int(np.count_nonzero(x >= hi))
    inside = x[(x >= lo) & (x < hi)]
    idx = np.minimum(np.searchsorted(edges, inside, side="right") - 1, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    return Histogram(edges, counts, under, over)


def tv_distance(h1: Histogram, h2: Histogram) -> float:
    """Half the L1 distance between normalised cell masses."""
    if h1.edges.shape != h2.edges.shape or np.any(h1.edges != h2.edges):
        raise InvalidState("histograms must share edges")
    return float(0.5 * np.abs(h1.masses() - h2.masses()).sum())


def cell_masses(edges, cdf) -> np.ndarray:
    """Exact cell probabilities (underflow, bins, overflow) of a distribution."""
    F = np.asarray(cdf(np.asarray(edges, dtype=float)), dtype=float)
    return np.concatenate([[F[0]], np.diff(F), [1.0 - F[-1]]])


def tv_to_masses(h: Histogram, masses) -> float:
    return float(0.5 * np.abs(h.masses() - np.asarray(masses)).sum())


def tv_interval(h: Histogram, masses=None, other: Optional[Histogram] = None,
                n_boot: int = 200, seed: int = 0) -> tuple[float, float]:
    """Basic-bootstrap 95% interval for a binned TV estimate.

    Resamples multinomial counts from the empirical cell masses of ``h`` (and
    of ``other`` when comparing two samples).
    """
    gen = np.random.Generator(np.random.Philox(key=[seed, 0x7F]))
    p = h.masses()
    q = other.masses() if other is not None else np.asarray(masses)
    out = np.empty(n_boot)
    for b in range(n_boot):
        pb = gen.multinomial(h.total, p) / h.total
        qb = gen.multinomial(other.total, q) / other.total if other is not None else q
        out[b] = 0.5 * np.abs(pb - qb).sum()
    tv = 0.5 * np.abs(p - q).sum()
    # basic bootstrap: reflect the resampled spread around the estimate
    q_lo, q_hi = np.quantile(out, [0.025, 0.975])
    return float(np.clip(2 * tv - q_hi, 0.0, 1.0)), float(np.clip(2 * tv - q_lo, 0.0, 1.0))


def wilson_interval(k, n, z: float = Z95):
    """Wilson score interval for ``k`` successes in ``n`` trials."""
    k = np.asarray(k, dtype=float)
    n = float(n)
    if n <= 0:
        return np.zeros_like(k), np.ones_like(k)
    p = k / n
    den = 1.0 + z * z / n
    mid = (p + z * z / (2 * n)) / den
    half = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    lo = np.where(k <= 0, 0.0, np.clip(mid - half, 0.0, 1.0))
    hi = np.where(k >= n, 1.0, np.clip(mid + half, 0.0, 1.0))
    return lo, hi


# ------------------------------------------------------ stationary samples


@dataclass
class StationaryEnsemble:
    """Collision-chain samples plus time-weighted flow samples drawn from them.

    Flow sample ``k`` sits ``flow_elapsed[k]`` time units into the flight
    leaving collision sample ``flow_segment[k]``.
    """

    chain: ChainTrace
    flow_segment: np.ndarray
    flow_elapsed: np.ndarray
    px: np.ndarray
    py: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    burn_in: int
    seed: int

    @property
    def n_collisions(self) -> int:
        return len(self.chain)

    @property
    def n_flow(self) -> int:
        return self.flow_segment.size

    @property
    def v_perp(self) -> np.ndarray:
        return self.chain.v_perp

    @property
    def flight_time(self) -> np.ndarray:
        return self.chain.flight_time

    @property
    def flow_speed(self) -> np.ndarray:
        return self.chain.speed[self.flow_segment]

    @property
    def flow_residual(self) -> np.ndarray:
        """Exact time to the next collision of every flow sample."""
        return self.chain.flight_time[self.flow_segment] - self.flow_elapsed

    @property
    def collision_samples(self) -> list[CollisionState]:
        return [self.chain.state(k) for k in range(self.n_collisions)]

    @property
    def flow_samples(self) -> list[FlowState]:
        return [self.flow_state(k) for k in range(self.n_flow)]

    def flow_state(self, k: int) -> FlowState:
        return FlowState((float(self.px[k]), float(self.py[k])),
                         (float(self.vx[k]), float(self.vy[k])))

    def flow_src(self) -> np.ndarray:
        return self.chain.disk[self.flow_segment]


def reference_state(table: BilliardTable) -> CollisionState:
    """Fixed starting state: disk 0, angle 0, normal speed at the collision-law mode."""
    return CollisionState(BoundaryPoint(0, 0.0), 1.0 / math.sqrt(2.0 * float(table.betas.min())))


def time_weighted_indices(weights, u) -> np.ndarray:
    """Map uniforms ``u`` to indices with probability proportional to ``weights``."""
    c = np.cumsum(np.asarray(weights, dtype=float))
    idx = np.searchsorted(c, np.asarray(u) * c[-1], side="right")
    return np.minimum(idx, c.size - 1)


def stationary_sample(table: BilliardTable, n_collisions: int, n_flow: int, burn_in: int,
                      rng: RngStream, start: Optional[CollisionState] = None) -> StationaryEnsemble:
    """Chain samples after ``burn_in`` steps and flow samples weighted by flight time."""
    if burn_in < 0 or n_collisions < 1 or n_flow < 0:
        raise InvalidState("sizes must be positive and burn_in non-negative")
    tr = run_chain(table, start or reference_state(table), n_collisions, rng, burn_in=burn_in)
    seg = time_weighted_indices(tr.flight_time, rng.uniforms(n_flow))
    elapsed = rng.uniforms(n_flow) * tr.flight_time[seg]
    px, py, vx, vy = lift_many(table, tr.disk[seg], tr.theta[seg], tr.v_perp[seg],
                               tr.phi[seg], elapsed)
    return StationaryEnsemble(tr, seg, elapsed, px, py, vx, vy, int(burn_in), int(rng.seed))


# ------------------------------------------------------------------ tails


@dataclass(frozen=True)
class TailCurve:
    taus: np.ndarray
    fractions: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    counts: Optional[np.ndarray] = None
    n: int = 0


def tail_curve(ensemble: StationaryEnsemble, table: BilliardTable, taus) -> TailCurve:
    """Fraction of flow samples whose next collision is later than each tau."""
    t = np.asarray(taus, dtype=float)
    if np.any(np.diff(t) <= 0) or np.any(t < 0):
        raise InvalidState("taus must be increasing and non-negative")
    r = np.sort(ensemble.flow_residual)
    n = r.size
    k = n - np.searchsorted(r, t, side="right")
    lo, hi = wilson_interval(k, n)
    return TailCurve(t, k / n, lo, hi, k, n)


@numba.njit(cache=True, nogil=True)
def _chain_tail_sums(cx, cy, rad, betas, m, cap, i, theta, v, k0, k1, counter, n_burn,
                     n_steps, taus, excess, hits):
    total = 0.0
    for n in range(n_burn + n_steps):
        z = normal_at(k0, k1, counter + n)
        j, th, vn, phi, phi_in, t, tf, sp, gz, st = _kick_and_fly(
            cx, cy, rad, betas, m, cap, i, theta, v, z)
        if st != TRACE_OK:
            return total, st
        if n >= n_burn:
            total += tf
            for q in range(taus.size):
                if tf > taus[q]:
                    excess[q] += tf - taus[q]
                    hits[q] += 1
                else:
                    break
        i = j
        theta = th
        v = vn
    return total, TRACE_OK


def segment_tail_sums(table: BilliardTable, taus, n_steps: int, burn_in: int, rng: RngStream,
                      start: Optional[CollisionState] = None):
    """Run one chain and accumulate ``sum T`` and ``sum max(0, T - tau)``.

    ``excess / total`` is the stationary probability that the residual
    flight time exceeds tau, integrated exactly over the elapsed time within
    each flight.  ``hits`` counts flights longer than tau.
    """
    t = np.asarray(taus, dtype=float)
    s = start or reference_state(table)
    excess = np.zeros(t.size)
    hits = np.zeros(t.size, dtype=np.int64)
    total, st = _chain_tail_sums(*_table_args(table), s.point.disk_id, s.point.theta, s.v_perp,
                                 *rng.key, rng.counter, burn_in, n_steps, t, excess, hits)
    rng.counter += burn_in + n_steps
    if st != TRACE_OK:
        raise NoCollisionWithinCap((math.nan, math.nan), (math.nan, math.nan), table.sigma_cap)
    return total, excess, hits


def replicate_tail_curve(totals, excesses, hits, taus) -> TailCurve:
    """Pooled ratio estimate across independent replicates with a t-interval."""
    T = np.asarray(totals, dtype=float)
    E = np.asarray(excesses, dtype=float)
    R = T.size
    f = E.sum(axis=0) / T.sum()
    resid = E - np.outer(T, f)
    se = np.sqrt((resid**2).sum(axis=0) / (R * (R - 1))) / T.mean()
    q = _st.t.ppf(0.975, R - 1)
    return TailCurve(np.asarray(taus, dtype=float), f, np.maximum(f - q * se, 0.0), f + q * se,
                     np.asarray(hits).sum(axis=0), R)


# ------------------------------------------------------------------- fits


def _check_positive(xs, ys, minimum: int):
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.size != y.size or x.size < minimum:
        raise DomainError(f"need at least {minimum} paired points")
    if np.any(~(x > 0)) or np.any(~(y > 0)):
        raise DomainError("values must be positive")
    return x, y


def _ols(x, y):
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    ss_res = float(((y - pred) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def loglog_fit(xs, ys) -> tuple[float, float, float]:
    x, y = _check_positive(xs, ys, 3)
    return _ols(np.log(x), np.log(y))


R2_MARGIN = 0.05


def model_compare_exp_vs_power(taus, ys, margin: float = R2_MARGIN):
    """R^2 of ``log y ~ log tau`` against ``log y ~ tau`` and a verdict."""
    x, y = _check_positive(taus, ys, 5)
    power_r2 = _ols(np.log(x), np.log(y))[2]
    exp_r2 = _ols(x, np.log(y))[2]
    if power_r2 > exp_r2 + margin:
        verdict = ModelVerdict.POWER_BETTER
    elif exp_r2 > power_r2 + margin:
        verdict = ModelVerdict.EXP_BETTER
    else:
        verdict = ModelVerdict.INCONCLUSIVE
    return power_r2, exp_r2, verdict


# ------------------------------------------------------------------ drift


@numba.njit(cache=True, nogil=True)
def _step_given(cx, cy, rad, betas, m, cap, disk, theta, v, z, out_v, out_status):
    for p in range(disk.size):
        j, th, vn, phi, phi_in, t, tf, sp, gz, st = _kick_and_fly(
            cx, cy, rad, betas, m, cap, disk[p], theta[p], v[p], z[p])
        out_v[p] = vn
        out_status[p] = st


def one_step_v_perp(table: BilliardTable, disk, theta, v_perp, z) -> np.ndarray:
    """Next normal speed for each start state given its standard normal draw."""
    n = len(disk)
    out = np.empty(n)
    status = np.empty(n, dtype=np.int64)
    _step_given(*_table_args(table), np.asarray(disk, dtype=np.int64),
                np.asarray(theta, dtype=float), np.broadcast_to(np.asarray(v_perp, float), (n,)).copy(),
                np.asarray(z, dtype=float), out, status)
    if np.any(status != TRACE_OK):
        raise NoCollisionWithinCap((math.nan, math.nan), (math.nan, math.nan), table.sigma_cap)
    return out


@dataclass(frozen=True)
class DriftEstimate:
    v_perp: float
    ratio: float
    ci_low: float
    ci_high: float
    n: int


def drift_ratio(table: BilliardTable, v_perp: float, params: PotentialParams, n: int,
                rng: RngStream) -> DriftEstimate:
    """Monte Carlo ``E[V(v')] / V(v)`` after one step from a uniform boundary point."""
    if not v_perp > 0 or n < 1:
        raise DomainError("need v_perp > 0 and n >= 1")
    disk, theta = sample_boundary(table, rng, n)
    z = rng.normals(n)
    vals = potential_V(one_step_v_perp(table, disk, theta, v_perp, z), params)
    V0 = potential_V(v_perp, params)
    mean = float(vals.mean())
    sd = float(vals.std(ddof=1)) if n > 1 else 0.0
    half = Z95 * sd / math.sqrt(n)
    return DriftEstimate(float(v_perp), mean / V0, (mean - half) / V0, (mean + half) / V0, int(n))


# ------------------------------------------------------ roof and grazing


def roof_integrability(ensemble) -> tuple[float, float, float]:
    """Means of flight time and ``1/v_perp`` plus split-half flight-time stability."""
    T = np.asarray(ensemble.flight_time, dtype=float)
    v = np.asarray(ensemble.v_perp, dtype=float)
    if T.size == 0:
        raise InvalidState("ensemble is empty")
    h = T.size // 2
    mean_T = float(T.mean())
    stability = abs(float(T[:h].mean()) - float(T[h:].mean())) / mean_T if h > 0 else 0.0
    return mean_T, float((1.0 / v).mean()), stability


@numba.njit(cache=True, nogil=True)
def _grazing_counts(cx, cy, rad, betas, m, cap, arc, k0, k1, counter, n, v_lo, v_hi,
                    vbars, counts):
    perimeter = arc[-1]
    for p in range(n):
        base = counter + 3 * p
        r = uniform_at(k0, k1, base) * perimeter
        i = 0
        while i < cx.size - 1 and r >= arc[i + 1]:
            i += 1
        theta = (r - arc[i]) / rad[i]
        v = v_lo + (v_hi - v_lo) * uniform_at(k0, k1, base + 1)
        z = normal_at(k0, k1, base + 2)
        j, th, vn, phi, phi_in, t, tf, sp, gz, st = _kick_and_fly(
            cx, cy, rad, betas, m, cap, i, theta, v, z)
        if st != TRACE_OK:
            return st
        for q in range(vbars.size):
            if vn <= vbars[q]:
                counts[q] += 1
    return TRACE_OK


def grazing_counts(table: BilliardTable, v_bars, n: int, rng: RngStream,
                   v_min: float = 0.1, v_max: float = 2.0) -> np.ndarray:
    """Counts of ``v' <= v_bar`` over ``n`` steps from the middle speed band.

    Start states are uniform on the boundary with ``v_perp`` uniform on
    ``[v_min, v_max]``; three draws per launch.
    """
    vb = np.atleast_1d(np.asarray(v_bars, dtype=float))
    args = _table_args(table)
    k0, k1 = rng.key
    start = rng.counter

    def work(r):
        a, b = r
        counts = np.zeros(vb.size, dtype=np.int64)
        st = _grazing_counts(*args, table.arc_offsets, k0, k1, start + 3 * a, b - a,
                             float(v_min), float(v_max), vb, counts)
        return counts, st

    parts = ordered_map(work, chunks(int(n), 1 << 20))
    rng.counter += 3 * int(n)
    if any(st != TRACE_OK for _, st in parts):
        raise NoCollisionWithinCap((math.nan, math.nan), (math.nan, math.nan), table.sigma_cap)
    return np.sum([c for c, _ in parts], axis=0) if parts else np.zeros(vb.size, dtype=np.int64)


def grazing_fraction(table: BilliardTable, v_bar, n: int, rng: RngStream,
                     v_min: float = 0.1, v_max: float = 2.0):
    """Fraction of launches whose next normal speed is at most ``v_bar``.

    An array of thresholds is evaluated on one shared sample.
    """
    counts = grazing_counts(table, v_bar, n, rng, v_min, v_max)
    lo, hi = wilson_interval(counts, n)
    frac = counts / n
    if np.ndim(v_bar) == 0:
        return float(frac[0]), (float(lo[0]), float(hi[0]))
    return frac, (lo, hi)
