"""Closed-form densities, the drift potential and the equilibrium tail constant."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import DomainError, UnsupportedRegime
from .geometry import BilliardTable, _probe, sample_boundary
from .rng import RngStream


@dataclass(frozen=True)
class PotentialParams:
    """Piecewise potential: ``v^-gamma`` below ``v_min``, ``exp(eps v^2)``
    above ``v_max`` and the constant ``A`` on the closed middle branch."""

    epsilon: float
    gamma: float = 1.0
    v_min: float = 0.1
    v_max: float = 2.0
    A: Optional[float] = None

    def __post_init__(self):
        if self.A is None:
            object.__setattr__(self, "A", max(math.exp(self.epsilon * self.v_max**2),
                                              self.v_min ** (-self.gamma)))
        if not self.epsilon > 0:
            raise DomainError("epsilon must be positive")
        if not 0 < self.gamma < 2:
            raise DomainError("gamma must lie in (0, 2)")
        if not 0 < self.v_min < self.v_max:
            raise DomainError("need 0 < v_min < v_max")
        if not self.A > 0:
            raise DomainError("A must be positive")

    @classmethod
    def default_for(cls, table: BilliardTable) -> "PotentialParams":
        return cls(epsilon=0.5 * float(table.betas.min()))

    def check_table(self, table: BilliardTable) -> None:
        if not self.epsilon < float(table.betas.min()):
            raise DomainError("epsilon must be below the smallest disk beta")


@dataclass(frozen=True)
class TailPrediction:
    """Leading-order equilibrium tail ``nu(B_tau) ~ coefficient / tau^2``.

    ``tau_validity`` is where the next-order correction drops to 10% of the
    leading term; ``normalization`` is the constant of the equilibrium flow
    measure and ``stderr`` the Monte Carlo error of ``coefficient``.
    """

    coefficient: float
    tau_validity: float
    stderr: float = 0.0
    normalization: float = math.nan
    n_quadrature: int = 0

    def fraction(self, tau):
        return self.coefficient / np.asarray(tau, dtype=float) ** 2


def angle_density(phi, v_perp: float, beta: float):
    phi = np.asarray(phi, dtype=float)
    if np.any(np.abs(phi) >= 0.5 * math.pi):
        raise DomainError("phi must lie in (-pi/2, pi/2)")
    c = np.cos(phi)
    out = math.sqrt(beta / math.pi) * v_perp / c**2 * np.exp(-beta * v_perp**2 * np.tan(phi) ** 2)
    return float(out) if out.ndim == 0 else out


def potential_V(v_perp, params: PotentialParams):
    v = np.asarray(v_perp, dtype=float)
    if np.any(~(v > 0)):
        raise DomainError("v_perp must be positive")
    with np.errstate(over="ignore"):
        out = np.where(v > params.v_max, np.exp(params.epsilon * v**2),
                       np.where(v < params.v_min, v ** (-params.gamma), params.A))
    return float(out) if out.ndim == 0 else out


def equilibrium_collision_density(v_perp, beta: float):
    v = np.asarray(v_perp, dtype=float)
    out = 2.0 * beta * v * np.exp(-beta * v**2)
    return float(out) if out.ndim == 0 else out


def equilibrium_speed_density(s, beta: float):
    """Speed law at a random time; the same form as the collision law."""
    return equilibrium_collision_density(s, beta)


def equilibrium_collision_cdf(v_perp, beta: float):
    return -np.expm1(-beta * np.asarray(v_perp, dtype=float) ** 2)


def equilibrium_energy_density(E, beta: float):
    """Kinetic energy ``s^2 / 2`` at a random time: exponential with rate ``2 beta``."""
    return 2.0 * beta * np.exp(-2.0 * beta * np.asarray(E, dtype=float))


SigmaFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def _flight_lengths(table: BilliardTable, n: int, rng: RngStream):
    phi = np.empty(n)
    sigma = np.empty(n)
    status = np.empty(n, dtype=np.int64)
    _probe(*table.kernel_args(), table.arc_offsets, *rng.key, rng.counter, sigma, status, phi)
    rng.counter += 2 * n
    if np.any(status != 0):
        raise UnsupportedRegime("flight lengths exceed sigma_cap; horizon is not bounded")
    return phi, sigma


def tail_prediction(table: BilliardTable, beta: float, n_quadrature: int, rng: RngStream,
                    sigma_fn: Optional[SigmaFn] = None) -> TailPrediction:
    """Monte Carlo quadrature of the leading tail constant over uniform ``(r, phi)``.

    With ``w = cos(phi)`` weights, ``K = (beta/3) E[w sigma^3] / E[w sigma]``.
    ``sigma_fn(disk_ids, thetas, phis)`` replaces the traced flight lengths.
    """
    if not np.all(table.betas == beta):
        raise UnsupportedRegime("tail prediction needs every disk at the given beta")
    n = int(n_quadrature)
    if n < 2:
        raise DomainError("n_quadrature must be at least 2")
    if sigma_fn is None:
        phi, sigma = _flight_lengths(table, n, rng)
    else:
        ids, thetas = sample_boundary(table, rng, n)
        phi = (rng.uniforms(n) - 0.5) * math.pi
        sigma = np.asarray(sigma_fn(ids, thetas, phi), dtype=float)
    w = np.cos(phi)
    a = w * sigma
    b = w * sigma**3
    d = w * sigma**5
    ma, mb, md = a.mean(), b.mean(), d.mean()
    K = beta / 3.0 * mb / ma
    # delta method for the ratio of means
    cov = np.cov(np.vstack([a, b]))
    var = (cov[1, 1] / ma**2 - 2 * mb * cov[0, 1] / ma**3 + mb**2 * cov[0, 0] / ma**4) / n
    stderr = beta / 3.0 * math.sqrt(max(var, 0.0))
    # relative next-order correction is 0.3 beta E[w sigma^5] / (E[w sigma^3] tau^2)
    tau_validity = math.sqrt(3.0 * beta * md / mb)
    c = 2.0 * beta / (table.perimeter * math.pi * ma)
    return TailPrediction(float(K), float(tau_validity), float(stderr), float(c), n)
