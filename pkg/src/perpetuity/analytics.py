"""Goodness of fit and reference laws.

``ks_distance`` is the exact one-sample Kolmogorov-Smirnov statistic.  Reference
laws cover the joint Gaussian law of the OU example and the inverse-gamma law of
the exponential-functional (Dufresne) example; the latter is only handed out
after a brute-force Monte Carlo check.
"""
from __future__ import annotations

import enum
import functools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .errors import OracleValidationError

Array = np.ndarray


class LawKind(str, enum.Enum):
    GAUSSIAN_JOINT = "GaussianJoint"
    GAUSSIAN_1D = "Gaussian1D"
    INVERSE_GAMMA = "InverseGamma"
    EMPIRICAL = "Empirical"


@dataclass(frozen=True)
class ReferenceLaw:
    """A reference distribution; ``cdf`` is the CDF of the perpetuity marginal."""

    kind: LawKind
    cdf: Callable[[Array], Array]
    params: dict = field(default_factory=dict)
    mean: Array | None = None
    cov: Array | None = None
    validation: dict | None = None

    def factor_cdf(self, x) -> Array:
        if self.kind is not LawKind.GAUSSIAN_JOINT:
            raise ValueError("factor marginal available for the joint Gaussian law only")
        return stats.norm.cdf(x, self.mean[0], np.sqrt(self.cov[0, 0]))


@dataclass(frozen=True)
class KSReport:
    distance: float
    argmax_point: float
    n_samples: int


def ks_distance(samples, reference, assume_sorted: bool = False) -> KSReport:
    """Exact ``sup_x |F_n(x) - F(x)|`` for samples against a continuous CDF.

    ``reference`` is a :class:`ReferenceLaw` or a vectorised CDF.
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("at least one sample is required")
    if not np.all(np.isfinite(x)):
        raise ValueError("samples must be finite")
    if not assume_sorted:
        x = np.sort(x)
    cdf = reference.cdf if isinstance(reference, ReferenceLaw) else reference
    F = np.asarray(cdf(x), dtype=float)
    n = x.size
    i = np.arange(1, n + 1)
    above = i / n - F
    below = F - (i - 1) / n
    ja, jb = int(np.argmax(above)), int(np.argmax(below))
    if above[ja] >= below[jb]:
        return KSReport(float(above[ja]), float(x[ja]), n)
    return KSReport(float(below[jb]), float(x[jb]), n)


def gaussian_1d(mean: float, var: float) -> ReferenceLaw:
    if not var > 0:
        raise ValueError("variance must be positive")
    sd = float(np.sqrt(var))
    return ReferenceLaw(LawKind.GAUSSIAN_1D, lambda x: stats.norm.cdf(x, mean, sd),
                        {"mean": mean, "var": var}, np.array([mean]), np.array([[var]]))


def ou_covariance(gamma: float, a: float) -> Array:
    """Covariance of ``(Z_0, X_0)`` for ``dZ = -gamma Z dt + dW``, ``f(z) = z``, rate ``a``."""
    return np.array([[1 / (2 * gamma), 1 / (2 * gamma * (a + gamma))],
                     [1 / (2 * gamma * (a + gamma)), 1 / (2 * gamma * a * (a + gamma))]])


def ou_reference_law(gamma: float, a: float) -> ReferenceLaw:
    """Joint centred Gaussian law of the OU factor and its perpetuity."""
    if not (gamma > 0 and a > 0):
        raise ValueError("gamma and a must be positive")
    cov = ou_covariance(gamma, a)
    sd = float(np.sqrt(cov[1, 1]))
    return ReferenceLaw(LawKind.GAUSSIAN_JOINT, lambda x: stats.norm.cdf(x, 0.0, sd),
                        {"gamma": gamma, "a": a}, np.zeros(2), cov)


def empirical_law(samples) -> ReferenceLaw:
    xs = np.sort(np.asarray(samples, dtype=float).ravel())
    return ReferenceLaw(LawKind.EMPIRICAL,
                        lambda x: np.searchsorted(xs, x, side="right") / xs.size,
                        {"n": xs.size})


# --------------------------------------------------------------------------
# exponential functional of Brownian motion with drift


def inverse_gamma_candidate(nu: float, sigma: float) -> tuple[float, float]:
    """Shape and scale for ``int_0^inf exp(-sigma B_t - nu t) dt``.

    Time-changing by ``s = sigma^2 t / 4`` maps the functional to
    ``(4 / sigma^2) int exp(2 (W_s - mu s)) ds`` with ``mu = 2 nu / sigma^2``, and that
    integral is distributed as ``1 / (2 G)`` with ``G ~ Gamma(mu, 1)``.
    """
    return 2 * nu / sigma**2, 2 / sigma**2


def brute_force_functional(nu: float, sigma: float, n_paths: int, delta: float,
                           horizon: float, seed: int, chunk: int = 20_000) -> Array:
    """Direct simulation of the truncated functional, trapezoid on the exact BM grid."""
    g = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0xD0F,)))
    n_steps = int(round(horizon / delta))
    out = np.empty(n_paths)
    for start in range(0, n_paths, chunk):
        m = min(chunk, n_paths - start)
        b = np.zeros(m)
        prev = np.ones(m)
        acc = np.zeros(m)
        sq = np.sqrt(delta)
        for i in range(1, n_steps + 1):
            b += g.standard_normal(m) * sq
            cur = np.exp(-sigma * b - nu * i * delta)
            acc += 0.5 * delta * (prev + cur)
            prev = cur
        out[start:start + m] = acc
    return out


@functools.lru_cache(maxsize=16)
def _validated(nu, sigma, n_validation, delta, horizon, seed, ks_tol):
    shape, scale = inverse_gamma_candidate(nu, sigma)
    law = stats.invgamma(shape, scale=scale)
    sims = brute_force_functional(nu, sigma, n_validation, delta, horizon, seed)
    rep = ks_distance(sims, law.cdf)
    record = {"ks": rep.distance, "n": n_validation, "delta": delta, "horizon": horizon,
              "seed": seed, "tolerance": ks_tol, "sample_mean": float(sims.mean()),
              "sample_q95": float(np.quantile(sims, 0.95))}
    return shape, scale, record


def dufresne_oracle(nu: float, sigma: float, n_validation: int = 100_000,
                    delta: float = 1 / 24, horizon: float | None = None, seed: int = 20240601,
                    ks_tol: float = 0.02) -> ReferenceLaw:
    """Inverse-gamma law of ``int exp(-sigma B_t - nu t) dt``, checked by brute force.

    The candidate parameters are compared with ``n_validation`` direct simulations;
    ``OracleValidationError`` is raised if the KS distance exceeds ``ks_tol``.
    The truncation horizon defaults to ``max(100, 20 / kappa)`` with ``kappa = nu / 4``.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if not 2 * nu / sigma**2 > 0:
        raise ValueError("2 nu / sigma^2 must be positive; the functional is infinite")
    horizon = max(100.0, 20.0 / (nu / 4)) if horizon is None else float(horizon)
    shape, scale, record = _validated(float(nu), float(sigma), int(n_validation), float(delta),
                                      horizon, int(seed), float(ks_tol))
    if not record["ks"] <= ks_tol:
        raise OracleValidationError(
            f"inverse-gamma candidate failed brute-force validation: KS {record['ks']:.4g}")
    law = stats.invgamma(shape, scale=scale)
    return ReferenceLaw(LawKind.INVERSE_GAMMA, law.cdf, {"shape": shape, "scale": scale},
                        validation=dict(record))


# --------------------------------------------------------------------------
# summaries


@dataclass(frozen=True)
class SummaryTable:
    method: str
    median_ks: float
    std: float
    p99: float
    p01: float
    median_seconds: float
    n_trials: int

    def as_dict(self) -> dict:
        return {"schema_version": 1, "method": self.method, "median_ks": self.median_ks,
                "std": self.std, "p99": self.p99, "p01": self.p01,
                "median_seconds": self.median_seconds, "n_trials": self.n_trials}


def summary_stats(distances: Sequence, timings: Sequence[float] = (),
                  method: str = "") -> SummaryTable:
    """Median, sample standard deviation and 1st/99th percentiles of KS distances."""
    d = np.array([r.distance if isinstance(r, KSReport) else float(r) for r in distances])
    if d.size == 0:
        raise ValueError("no distances to summarise")
    t = np.asarray(timings, dtype=float)
    return SummaryTable(
        method=method,
        median_ks=float(np.median(d)),
        std=float(np.std(d, ddof=1)) if d.size > 1 else 0.0,
        p99=float(np.percentile(d, 99)),
        p01=float(np.percentile(d, 1)),
        median_seconds=float(np.median(t)) if t.size else float("nan"),
        n_trials=int(d.size),
    )
