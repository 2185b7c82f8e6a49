"""End-to-end studies with machine-readable reports and threshold verdicts.

Every experiment takes a config dataclass, a table and a seed, draws all of
its randomness from counter-based streams derived from that seed, and
returns an :class:`ExperimentReport`.  Verdicts are recomputed from the
stored metrics by :func:`score`, so re-scoring a saved report always agrees.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats as _st

from .dynamics import FlowEnsemble, advance_many, lift_many, run_chain
from .errors import InvalidState, UnsupportedRegime
from .geometry import BilliardTable, probe_horizon, sample_boundary, validate_table
from .measures import (
    PotentialParams,
    equilibrium_collision_cdf,
    tail_prediction,
)
from .parallel import ordered_map
from .rng import RngStream, stream_block
from .statistics import (
    R2_MARGIN,
    ModelVerdict,
    Verdict,
    cell_masses,
    drift_ratio,
    grazing_counts,
    histogram,
    loglog_fit,
    model_compare_exp_vs_power,
    reference_state,
    replicate_tail_curve,
    segment_tail_sums,
    stationary_sample,
    time_weighted_indices,
    tv_distance,
    tv_interval,
    tv_to_masses,
    wilson_interval,
)

# stream-id ranges, one per purpose, so no two ensembles ever share a stream
PURPOSE = {
    "validate": 1,
    "laws": 2,
    "equilibrate": 3,
    "equilibrate_particles": 4,
    "tails": 5,
    "tails_replicates": 6,
    "subexp_control_chain": 7,
    "subexp_lambda_chain": 8,
    "subexp_control": 9,
    "subexp_lambda": 10,
    "drift": 11,
    "grazing": 12,
    "simulate": 13,
}


def stream(seed: int, purpose: str, index: int = 0) -> RngStream:
    return RngStream(seed, stream_block(PURPOSE[purpose]) + index)


def stream_ids(purpose: str, n: int) -> np.ndarray:
    return np.uint64(stream_block(PURPOSE[purpose])) + np.arange(n, dtype=np.uint64)


@dataclass(frozen=True)
class Metric:
    key: str
    value: float
    ci_low: float = math.nan
    ci_high: float = math.nan
    n: int = 0

    def __post_init__(self):
        for k in ("value", "ci_low", "ci_high"):
            object.__setattr__(self, k, float(getattr(self, k)))
        object.__setattr__(self, "n", int(self.n))


@dataclass
class ExperimentReport:
    name: str
    config_digest: str
    seed: int
    metrics: list[Metric]
    verdict: Verdict
    wall_time: float = 0.0
    config: dict = field(default_factory=dict)

    def metric(self, key: str) -> Metric:
        for m in self.metrics:
            if m.key == key:
                return m
        raise KeyError(key)

    def values(self, prefix: str) -> list[Metric]:
        return [m for m in self.metrics if m.key.startswith(prefix)]

    def to_dict(self) -> dict:
        """Serializable form; wall time is excluded to keep outputs byte-stable."""
        return {
            "name": self.name,
            "config_digest": self.config_digest,
            "seed": self.seed,
            "verdict": self.verdict.value,
            "config": self.config,
            "metrics": [dataclasses.asdict(m) for m in self.metrics],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        return cls(d["name"], d["config_digest"], int(d["seed"]),
                   [Metric(**m) for m in d["metrics"]], Verdict(d["verdict"]),
                   config=d.get("config", {}))


def _plain(x):
    if dataclasses.is_dataclass(x):
        return {k: _plain(v) for k, v in dataclasses.asdict(x).items()}
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple, np.ndarray)):
        return [_plain(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    return x


def table_dict(table: BilliardTable) -> dict:
    return {
        "sigma_cap": table.sigma_cap,
        "disks": [{"center": list(map(float, d.center)), "radius": float(d.radius),
                   "beta": float(d.beta)} for d in table.disks],
    }


def config_digest(table: BilliardTable, cfg, seed: int) -> str:
    doc = {"table": table_dict(table), "config": _plain(cfg), "seed": int(seed)}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def _report(name, table, cfg, seed, metrics, t0) -> ExperimentReport:
    rep = ExperimentReport(name, config_digest(table, cfg, seed), int(seed), metrics,
                           Verdict.INCONCLUSIVE, time.perf_counter() - t0, _plain(cfg))
    rep.verdict = score(rep)
    return rep


def _equilibrium_beta(table: BilliardTable) -> float:
    beta = table.equilibrium_beta
    if beta is None:
        raise UnsupportedRegime("experiment needs every disk at the same beta")
    return beta


def _tv_vs_law(samples, beta: float, bins: int):
    hi = float(np.quantile(samples, 0.999))
    h = histogram(samples, 0.0, hi, bins)
    masses = cell_masses(h.edges, lambda x: equilibrium_collision_cdf(x, beta))
    lo, up = tv_interval(h, masses)
    return tv_to_masses(h, masses), lo, up, h.total


def check_table(table: BilliardTable, n_rays: int, seed: int):
    """Validation gate run before any simulation."""
    report = validate_table(table)
    horizon = probe_horizon(table, n_rays, stream(seed, "validate"))
    return report, horizon


# ------------------------------------------------------ stationary laws


@dataclass(frozen=True)
class LawsConfig:
    n_collisions: int = 1_000_000
    n_flow: int = 1_000_000
    burn_in: int = 10_000
    bins: int = 200
    tv_threshold: float = 0.02
    energy_slope_tolerance: float = 0.05
    roof_tolerance: float = 0.02


def run_stationary_laws(table: BilliardTable, cfg: LawsConfig, seed: int) -> ExperimentReport:
    """Collision law, random-time speed and energy laws, and roof integrability.

    The chain is run for ``2 n_collisions`` steps; laws use the first half and
    roof means compare the first half with the whole run.
    """
    t0 = time.perf_counter()
    beta = _equilibrium_beta(table)
    ens = stationary_sample(table, 2 * cfg.n_collisions, cfg.n_flow, cfg.burn_in,
                            stream(seed, "laws"))
    half = cfg.n_collisions
    v = ens.v_perp[:half]
    m = []
    tv, lo, hi, n = _tv_vs_law(v, beta, cfg.bins)
    m.append(Metric("tv_collision_law", tv, lo, hi, n))
    s = ens.flow_speed
    tv, lo, hi, n = _tv_vs_law(s, beta, cfg.bins)
    m.append(Metric("tv_speed_law", tv, lo, hi, n))
    E = 0.5 * s**2
    h = histogram(E, 0.0, float(np.quantile(E, 0.99)), 50)
    width = h.edges[1] - h.edges[0]
    ok = h.counts > 0
    mid = 0.5 * (h.edges[:-1] + h.edges[1:])
    dens = h.counts / (h.total * width)
    coef, cov = np.polyfit(mid[ok], np.log(dens[ok]), 1, w=np.sqrt(h.counts[ok]), cov="unscaled")
    se = math.sqrt(cov[0, 0])
    m.append(Metric("energy_rate", -float(coef[0]), -float(coef[0]) - 1.96 * se,
                    -float(coef[0]) + 1.96 * se, int(h.total)))
    m.append(Metric("energy_rate_expected", 2.0 * beta))
    for key, x in (("flight_time", ens.flight_time), ("inv_v_perp", 1.0 / ens.v_perp)):
        a = float(x[:half].mean())
        b = float(x.mean())
        m.append(Metric(f"mean_{key}_N", a, n=half))
        m.append(Metric(f"mean_{key}_2N", b, n=x.size))
        m.append(Metric(f"rel_change_{key}", abs(a - b) / abs(b), n=x.size))
    return _report("laws", table, cfg, seed, m, t0)


# --------------------------------------------------------- equilibration


@dataclass(frozen=True)
class EquilibrationConfig:
    beta0: float = 4.0
    n_particles: int = 200_000
    checkpoints: tuple = (1, 2, 5, 10, 20, 50, 100)
    bins: int = 200
    tv_threshold: float = 0.02


def run_equilibration(table: BilliardTable, cfg: EquilibrationConfig,
                      seed: int) -> ExperimentReport:
    """Relax an ensemble started from the collision law at ``beta0``."""
    t0 = time.perf_counter()
    beta = _equilibrium_beta(table)
    if not cfg.beta0 > 0:
        raise InvalidState("beta0 must be positive")
    cps = sorted(set(int(c) for c in cfg.checkpoints))
    if not cps or cps[0] < 0:
        raise InvalidState("checkpoints must be non-negative")
    rng = stream(seed, "equilibrate")
    n = cfg.n_particles
    disk, theta = sample_boundary(table, rng, n)
    v = np.sqrt(-np.log1p(-rng.uniforms(n)) / cfg.beta0)
    streams = stream_ids("equilibrate_particles", n)
    counters = np.zeros(n, dtype=np.uint64)
    done = 0
    m = []
    for c in cps:
        advance_many(table, disk, theta, v, seed, streams, counters, c - done)
        done = c
        tv, lo, hi, k = _tv_vs_law(v, beta, cfg.bins)
        m.append(Metric(f"tv@{c}", tv, lo, hi, k))
    return _report("equilibrate", table, cfg, seed, m, t0)


# --------------------------------------------------------------- tails


@dataclass(frozen=True)
class TailConfig:
    n_replicates: int = 20
    steps_per_replicate: int = 3_000_000
    burn_in: int = 10_000
    tau0: Optional[float] = None
    tau0_factor: float = 1.5
    decades: float = 1.0
    n_taus: int = 8
    n_quadrature: int = 2_000_000
    slope_window: tuple = (-2.4, -1.6)
    min_tail_hits: int = 100


def tail_grid(table: BilliardTable, cfg: TailConfig, seed: int):
    pred = tail_prediction(table, _equilibrium_beta(table), cfg.n_quadrature,
                           stream(seed, "tails"))
    tau0 = cfg.tau0 if cfg.tau0 is not None else cfg.tau0_factor * pred.tau_validity
    return pred, np.geomspace(tau0, tau0 * 10**cfg.decades, cfg.n_taus)


def run_tail_scaling(table: BilliardTable, cfg: TailConfig, seed: int) -> ExperimentReport:
    """Stationary ``nu(B_tau)`` from independent chain replicates versus ``K / tau^2``."""
    t0 = time.perf_counter()
    pred, taus = tail_grid(table, cfg, seed)
    parts = ordered_map(
        lambda r: segment_tail_sums(table, taus, cfg.steps_per_replicate, cfg.burn_in,
                                    stream(seed, "tails_replicates", r)),
        range(cfg.n_replicates))
    tot, exc, hits = (list(x) for x in zip(*parts))
    curve = replicate_tail_curve(tot, exc, hits, taus)
    m = [Metric("K_predicted", pred.coefficient, pred.coefficient - 1.96 * pred.stderr,
                pred.coefficient + 1.96 * pred.stderr, pred.n_quadrature),
         Metric("tau_validity", pred.tau_validity)]
    for k, tau in enumerate(taus):
        f, lo, hi = curve.fractions[k], curve.ci_low[k], curve.ci_high[k]
        m.append(Metric(f"fraction@{float(tau)!r}", f, lo, hi, int(curve.counts[k])))
        m.append(Metric(f"tau2_fraction@{float(tau)!r}", tau**2 * f, tau**2 * lo, tau**2 * hi,
                        int(curve.counts[k])))
    if np.all(curve.fractions > 0):
        slope, _, r2 = loglog_fit(taus, curve.fractions)
        per = [loglog_fit(taus, np.asarray(e) / t)[0] for e, t in zip(exc, tot)
               if np.all(np.asarray(e) > 0)]
        half = 1.96 * float(np.std(per, ddof=1)) / math.sqrt(len(per)) if len(per) > 1 else math.nan
        m.append(Metric("slope", slope, slope - half, slope + half, len(per)))
        m.append(Metric("slope_r2", r2))
    return _report("tails", table, cfg, seed, m, t0)


# -------------------------------------------------- sub-exponential bound


@dataclass(frozen=True)
class SubexpConfig:
    tau0: Optional[float] = None
    target_mass: float = 0.01
    n_particles: int = 600_000
    chain_steps: int = 5_000_000
    burn_in: int = 10_000
    n_taus: int = 8
    span: float = 10.0
    bins: int = 200
    n_boot: int = 100
    min_conditioned_segments: int = 1000


def _ensemble_from_chain(table, tr, threshold, n, rng, seed, purpose) -> FlowEnsemble:
    """Flow states at stationarity conditioned on residual time > threshold."""
    w = np.maximum(tr.flight_time - threshold, 0.0)
    seg = time_weighted_indices(w, rng.uniforms(n))
    elapsed = rng.uniforms(n) * w[seg]
    px, py, vx, vy = lift_many(table, tr.disk[seg], tr.theta[seg], tr.v_perp[seg],
                               tr.phi[seg], elapsed)
    return FlowEnsemble.from_arrays(px, py, vx, vy, seed, stream_ids(purpose, n),
                                    src=tr.disk[seg])


def run_subexp_lowerbound(table: BilliardTable, cfg: SubexpConfig, seed: int,
                          control_purpose: str = "subexp_control",
                          lambda_purpose: str = "subexp_lambda") -> ExperimentReport:
    """TV on the residual-time marginal between a conditioned and a stationary ensemble."""
    t0 = time.perf_counter()
    if control_purpose == lambda_purpose:
        raise InvalidState("control and conditioned ensembles must use disjoint streams")
    ctrl_chain = run_chain(table, reference_state(table), cfg.chain_steps,
                           stream(seed, "subexp_control_chain"), burn_in=cfg.burn_in)
    lam_chain = run_chain(table, reference_state(table), cfg.chain_steps,
                          stream(seed, "subexp_lambda_chain"), burn_in=cfg.burn_in)
    T = ctrl_chain.flight_time
    if cfg.tau0 is not None:
        tau0 = float(cfg.tau0)
    else:
        # smallest tau with stationary mass of B_tau at most target_mass
        Ts = np.sort(T)[::-1]
        cum_exc = np.cumsum(Ts) - np.arange(1, Ts.size + 1) * Ts
        k = int(np.searchsorted(cum_exc / T.sum(), cfg.target_mass))
        tau0 = float(Ts[min(k, Ts.size - 1)])
    mass = float(np.maximum(T - tau0, 0).sum() / T.sum())
    n_cond = int(np.count_nonzero(lam_chain.flight_time > tau0))
    m = [Metric("tau0", tau0), Metric("mass_B_tau0", mass, n=T.size),
         Metric("conditioned_segments", float(n_cond))]
    if n_cond < cfg.min_conditioned_segments:
        return _report("subexp", table, cfg, seed, m, t0)
    ctrl = _ensemble_from_chain(table, ctrl_chain, 0.0, cfg.n_particles,
                                stream(seed, "subexp_control_chain", 1), seed, control_purpose)
    lam = _ensemble_from_chain(table, lam_chain, tau0, cfg.n_particles,
                               stream(seed, "subexp_lambda_chain", 1), seed, lambda_purpose)
    if np.intersect1d(ctrl.streams, lam.streams).size:
        raise InvalidState("control and conditioned ensembles share random streams")
    del ctrl_chain, lam_chain
    taus = np.geomspace(tau0, cfg.span * tau0, cfg.n_taus)
    clock = 0.0
    tvs = []
    for k, tau in enumerate(taus):
        ctrl.advance(table, tau - clock)
        lam.advance(table, tau - clock)
        clock = tau
        rc = ctrl.residual_times(table)
        rl = lam.residual_times(table)
        hi = float(np.quantile(rc, 0.999))
        h1 = histogram(rc, 0.0, hi, cfg.bins)
        h2 = histogram(rl, 0.0, hi, cfg.bins)
        tv = tv_distance(h1, h2)
        lo, up = tv_interval(h1, other=h2, n_boot=cfg.n_boot, seed=seed + k)
        tvs.append(tv)
        m.append(Metric(f"tv@{float(tau)!r}", tv, lo, up, cfg.n_particles))
        m.append(Metric(f"tau2_tv@{float(tau)!r}", tau**2 * tv, tau**2 * lo, tau**2 * up,
                        cfg.n_particles))
    if all(t > 0 for t in tvs):
        p_r2, e_r2, verdict = model_compare_exp_vs_power(taus, tvs)
        m.append(Metric("power_r2", p_r2))
        m.append(Metric("exp_r2", e_r2))
        m.append(Metric("power_better", 1.0 if verdict == ModelVerdict.POWER_BETTER else 0.0))
    return _report("subexp", table, cfg, seed, m, t0)


# ---------------------------------------------------------------- drift


@dataclass(frozen=True)
class DriftConfig:
    v_grid: tuple = (0.01, 0.02, 0.05, 2.0, 3.0, 4.0, 5.0)
    n_per_point: int = 1_000_000
    epsilon: Optional[float] = None
    gamma: float = 1.0
    v_min: float = 0.1
    v_max: float = 2.0
    A: Optional[float] = None


def drift_params(table: BilliardTable, cfg: DriftConfig) -> PotentialParams:
    eps = cfg.epsilon if cfg.epsilon is not None else 0.5 * float(table.betas.min())
    p = PotentialParams(eps, cfg.gamma, cfg.v_min, cfg.v_max, cfg.A)
    p.check_table(table)
    return p


def run_drift_check(table: BilliardTable, cfg: DriftConfig, seed: int) -> ExperimentReport:
    t0 = time.perf_counter()
    params = drift_params(table, cfg)
    est = ordered_map(lambda kv: drift_ratio(table, float(kv[1]), params, cfg.n_per_point,
                                             stream(seed, "drift", kv[0])),
                      list(enumerate(cfg.v_grid)))
    m = [Metric(f"drift@{d.v_perp!r}", d.ratio, d.ci_low, d.ci_high, d.n) for d in est]
    return _report("drift", table, cfg, seed, m, t0)


# -------------------------------------------------------------- grazing


@dataclass(frozen=True)
class GrazingConfig:
    v_bars: tuple = tuple(float(x) for x in np.geomspace(0.002, 0.0095, 5))
    n: int = 40_000_000
    v_min: float = 0.1
    v_max: float = 2.0
    slope_window: tuple = (2.5, 3.5)


def run_grazing_scaling(table: BilliardTable, cfg: GrazingConfig, seed: int) -> ExperimentReport:
    t0 = time.perf_counter()
    vb = np.asarray(cfg.v_bars, dtype=float)
    if np.any(np.diff(vb) <= 0) or vb[-1] >= cfg.v_min / 10:
        raise InvalidState("v_bars must increase and stay below v_min / 10")
    counts = grazing_counts(table, vb, cfg.n, stream(seed, "grazing"), cfg.v_min, cfg.v_max)
    lo, hi = wilson_interval(counts, cfg.n)
    m = [Metric(f"fraction@{float(v)!r}", c / cfg.n, float(a), float(b), int(c))
         for v, c, a, b in zip(vb, counts, lo, hi)]
    if np.all(counts > 0):
        slope, _, r2 = loglog_fit(vb, counts / cfg.n)
        # weighted fit with Poisson errors for a slope interval
        w = np.sqrt(counts)
        coef, cov = np.polyfit(np.log(vb), np.log(counts / cfg.n), 1, w=w, cov="unscaled")
        se = math.sqrt(cov[0, 0])
        m.append(Metric("slope", slope, slope - 1.96 * se, slope + 1.96 * se, int(cfg.n)))
        m.append(Metric("slope_r2", r2))
    return _report("grazing", table, cfg, seed, m, t0)


# -------------------------------------------------------------- scoring


def _by_tau(rep: ExperimentReport, prefix: str):
    out = [(float(m.key.split("@", 1)[1]), m) for m in rep.values(prefix + "@")]
    return sorted(out, key=lambda p: p[0])


def score(rep: ExperimentReport) -> Verdict:
    """Verdict as a pure function of the stored metrics and config."""
    cfg = rep.config
    P, F, I = Verdict.PASS, Verdict.FAIL, Verdict.INCONCLUSIVE
    if rep.name == "laws":
        g = lambda k: rep.metric(k).value
        ok = (g("tv_collision_law") < cfg["tv_threshold"] and g("tv_speed_law") < cfg["tv_threshold"]
              and abs(g("energy_rate") / g("energy_rate_expected") - 1) <= cfg["energy_slope_tolerance"]
              and g("rel_change_flight_time") < cfg["roof_tolerance"]
              and g("rel_change_inv_v_perp") < cfg["roof_tolerance"])
        return P if ok else F
    if rep.name == "equilibrate":
        tv = _by_tau(rep, "tv")
        if tv[-1][1].value >= cfg["tv_threshold"]:
            return F
        for (_, a), (_, b) in zip(tv, tv[1:]):
            if b.value > a.value and b.ci_low > a.ci_high:
                return F
        return P
    if rep.name == "tails":
        fr = _by_tau(rep, "fraction")
        if fr[-1][1].n < cfg["min_tail_hits"]:
            return I
        try:
            slope = rep.metric("slope").value
        except KeyError:
            return I
        lo, hi = cfg["slope_window"]
        if not lo <= slope <= hi:
            return F
        K = rep.metric("K_predicted")
        se_K = (K.ci_high - K.ci_low) / (2 * 1.96)
        t2 = _by_tau(rep, "tau2_fraction")
        # replicate t-intervals: the upper side is never clipped
        q = float(_st.t.ppf(0.975, cfg["n_replicates"] - 1))
        for _, m in t2[len(t2) // 2:]:
            se = (m.ci_high - m.value) / q
            if abs(m.value - K.value) > 2 * math.hypot(se, se_K):
                return F
        return P
    if rep.name == "subexp":
        t2 = _by_tau(rep, "tau2_tv")
        if not t2:
            return I
        try:
            power_r2 = rep.metric("power_r2").value
            exp_r2 = rep.metric("exp_r2").value
        except KeyError:
            return I
        if exp_r2 > power_r2 + R2_MARGIN:
            return F
        if not power_r2 > exp_r2 + R2_MARGIN:
            return I
        dips = sum(1 for _, m in t2 if not m.ci_low > 0)
        if dips == 0:
            return P
        return I if dips == 1 else F
    if rep.name == "drift":
        # points whose every outcome stayed on the constant branch carry no drift
        live = [m for m in rep.values("drift@") if not (m.ci_low == m.ci_high == m.value == 1.0)]
        return P if all(m.ci_high < 1 for m in live) else F
    if rep.name == "grazing":
        fr = _by_tau(rep, "fraction")
        if fr[0][1].n == 0:
            return I
        if any(m.value <= 0 for _, m in fr):
            return F
        lo, hi = cfg["slope_window"]
        return P if lo <= rep.metric("slope").value <= hi else F
    raise KeyError(rep.name)


EXPERIMENTS = {
    "laws": (LawsConfig, run_stationary_laws),
    "equilibrate": (EquilibrationConfig, run_equilibration),
    "tails": (TailConfig, run_tail_scaling),
    "subexp": (SubexpConfig, run_subexp_lowerbound),
    "drift": (DriftConfig, run_drift_check),
    "grazing": (GrazingConfig, run_grazing_scaling),
}
