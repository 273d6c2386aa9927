"""Invariant densities of the factor diffusion.

Three constructive routes are provided:

* ``density_1d``: the scale/speed closed form ``p = K^{-1} c^{-1} exp(2 int m/c)``;
* ``reversing_check``: ``p = e^H / K`` when ``c^{-1}(2m - div c) = grad H``;
* ``riccati_stationary_ou``: Gaussian law of a multi-dimensional OU factor
  from the symmetric positive definite solution of ``JJ = A'J + JA``,
  ``A = sigma^{-1} gamma sigma``.

Every density is returned as an immutable :class:`InvariantDensity` carrying an
unnormalised log-density, its gradient (the score) and the normaliser ``K``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg
from scipy.interpolate import CubicSpline, PchipInterpolator

from .errors import (ConvergenceError, ModelError, NotPositiveRecurrent, SamplingError,
                     SpectrumError)
from .model import ModelSpec, StateDomain, as_batch, sigma_from_c

Array = np.ndarray

# 16-point Gauss-Legendre rule on [0, 1]
_GL_X, _GL_W = np.polynomial.legendre.leggauss(16)
_GL_X = 0.5 * (_GL_X + 1.0)
_GL_W = 0.5 * _GL_W

TAIL_DROP = 60.0          # log-density drop at which the tails are cut
MAX_PIECES = 64
SUBDIV = 8
QUANTILE_STEP = 1e-4
ADJOINT_SCREEN_TOL = 1e-5


class Provenance(str, enum.Enum):
    CLOSED_FORM_1D = "ClosedForm1D"
    REVERSING_POTENTIAL = "ReversingPotential"
    OU_RICCATI = "OURiccati"
    USER_SUPPLIED = "UserSupplied"


@dataclass(frozen=True)
class InvariantDensity:
    """``p(z) = exp(log_p(z)) / K`` together with its score ``grad p / p``.

    ``log_p`` and ``score`` take ``(n, d)`` batches.  Gaussian densities carry
    ``mean``/``cov``; one-dimensional numeric densities carry the grid and a
    quantile table used for inverse-CDF sampling.
    """

    log_p: Callable[[Array], Array]
    score: Callable[[Array], Array]
    K: float
    provenance: Provenance
    d: int
    mean: Array | None = None
    cov: Array | None = None
    grid: Array | None = None
    quantiles: Array | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def logpdf(self, z) -> Array:
        return self.log_p(as_batch(z, self.d)) - np.log(self.K)

    def pdf(self, z) -> Array:
        return np.exp(self.logpdf(z))

    @property
    def gaussian(self) -> bool:
        return self.mean is not None and self.cov is not None

    def cdf(self, x) -> Array:
        """Marginal CDF of a one-dimensional density."""
        if self.d != 1:
            raise ValueError("cdf is defined for one-dimensional densities only")
        x = np.asarray(x, dtype=float)
        if self.gaussian:
            from scipy.stats import norm
            return norm.cdf(x, loc=self.mean[0], scale=np.sqrt(self.cov[0, 0]))
        return self.meta["cdf_interp"](np.clip(x, self.grid[0], self.grid[-1]))


# --------------------------------------------------------------------------
# Gaussian densities


def gaussian_density(mean, cov, provenance=Provenance.OU_RICCATI, meta=None) -> InvariantDensity:
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    d = mean.size
    prec = np.linalg.inv(cov)
    prec = 0.5 * (prec + prec.T)
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise ModelError("Gaussian covariance must be positive definite")
    K = float(np.exp(0.5 * d * np.log(2 * np.pi) + 0.5 * logdet))

    def log_p(z):
        y = as_batch(z, d) - mean
        return -0.5 * np.einsum("ni,ij,nj->n", y, prec, y)

    def score(z):
        return -(as_batch(z, d) - mean) @ prec

    return InvariantDensity(log_p, score, K, Provenance(provenance), d, mean=mean, cov=cov,
                            meta=dict(meta or {}))


# --------------------------------------------------------------------------
# one-dimensional machinery


def _outward_edges(domain: StateDomain, z0: float, side: int, n: int) -> Array:
    """Piece boundaries marching from ``z0`` towards one end of the domain."""
    bound = domain.upper[0] if side > 0 else domain.lower[0]
    j = np.arange(n + 1, dtype=float)
    if np.isfinite(bound):
        return bound - (bound - z0) * 0.5 ** j
    h0 = 0.1 * max(1.0, abs(z0))
    return z0 + side * h0 * (2.0 ** j - 1.0)


class _Profile:
    """Cumulative integral ``F(z) = int_{z0}^z g`` on Gauss-Legendre nodes of pieces.

    ``nodes[j]`` are the quadrature nodes of piece ``j`` (from ``edges[j]`` to
    ``edges[j+1]``), ``F_nodes`` the antiderivative there and ``F_edges`` at the
    piece ends.  Pieces are processed lazily, one at a time.
    """

    def __init__(self, g: Callable[[Array], Array], edges: Array):
        self.g = g
        self.edges = edges
        self.F_edges = [0.0]
        self.nodes: list[Array] = []
        self.weights: list[Array] = []
        self.F_nodes: list[Array] = []

    def extend(self):
        j = len(self.nodes)
        a, b = self.edges[j], self.edges[j + 1]
        x = a + (b - a) * _GL_X
        # nested rule: F(x_i) = F(a) + int_a^{x_i} g
        inner = a + (x[:, None] - a) * _GL_X[None, :]
        gi = self.g(inner.reshape(-1, 1)).reshape(inner.shape)
        Fx = self.F_edges[j] + (x - a) * (gi @ _GL_W)
        gpiece = self.g(x.reshape(-1, 1))
        self.F_edges.append(self.F_edges[j] + (b - a) * float(gpiece @ _GL_W))
        self.nodes.append(x)
        self.weights.append((b - a) * _GL_W)
        self.F_nodes.append(Fx)
        return x, (b - a) * _GL_W, Fx


def _gl_cumulative(g: Callable[[Array], Array], points: Array) -> Array:
    """Antiderivative of ``g`` at sorted ``points`` relative to ``points[0]``."""
    a = points[:-1]
    b = points[1:]
    x = a[:, None] + (b - a)[:, None] * _GL_X[None, :]
    vals = g(x.reshape(-1, 1)).reshape(x.shape)
    return np.concatenate([[0.0], np.cumsum((b - a) * (vals @ _GL_W))])


def _subdivide(edges: Array, k: int) -> Array:
    pts = [np.linspace(edges[i], edges[i + 1], k + 1)[:-1] for i in range(len(edges) - 1)]
    pts.append(edges[-1:])
    return np.concatenate(pts)


def _effective_support(domain, z0, log_value, side):
    """March outward until the log-density has dropped by ``TAIL_DROP``.

    ``log_value(x)`` evaluates the unnormalised log-density at an array ``x``.
    Returns the outermost edge and a flag telling whether the partial masses
    diverge (the divergence heuristic: growth by a factor > 1.5 three times in a
    row), converge or stay undecided.
    """
    edges = _outward_edges(domain, z0, side, MAX_PIECES)
    bound = domain.upper[0] if side > 0 else domain.lower[0]
    peak = float(log_value(np.array([z0]))[0])
    mass = 0.0  # in units of exp(peak)
    growth_run = 0
    for j in range(MAX_PIECES):
        a, b = edges[j], edges[j + 1]
        lv = log_value(a + (b - a) * _GL_X)
        new_peak = max(peak, float(np.max(lv)))
        mass *= np.exp(peak - new_peak)
        peak = new_peak
        piece = abs(b - a) * float(np.exp(lv - peak) @ _GL_W)
        if mass > 0 and (mass + piece) / mass > 1.5:
            growth_run += 1
        else:
            growth_run = 0
        mass += piece
        tail = float(log_value(np.array([b]))[0])
        if j >= 3 and tail < peak - TAIL_DROP:
            return b, "converged"
        if np.isfinite(bound) and abs(bound - b) < 1e-10 * (1.0 + abs(bound)):
            return b, "converged"
        if growth_run >= 3 and j >= 8:
            return b, "diverged"
    return edges[-1], "inconclusive"


def _build_1d(log_value, score, spec: ModelSpec, z0: float, provenance, meta) -> InvariantDensity:
    """Shared tail search, grid caching and normalisation for 1-D densities."""
    lo, st_lo = _effective_support(spec.domain, z0, log_value, -1)
    hi, st_hi = _effective_support(spec.domain, z0, log_value, +1)
    if "diverged" in (st_lo, st_hi):
        raise NotPositiveRecurrent("invariant measure is not normalisable (partial masses diverge)")
    if "inconclusive" in (st_lo, st_hi):
        raise NotPositiveRecurrent("could not establish normalisability of the invariant measure")

    edges = np.concatenate([_outward_edges(spec.domain, z0, -1, MAX_PIECES)[::-1],
                            _outward_edges(spec.domain, z0, +1, MAX_PIECES)[1:]])
    edges = edges[(edges >= lo) & (edges <= hi)]
    grid = _subdivide(edges, SUBDIV * 16)
    lv = log_value(grid)
    shift = float(np.max(lv))
    pv = np.exp(lv - shift)
    # mass per grid cell by 16-point Gauss-Legendre
    a, b = grid[:-1], grid[1:]
    x = a[:, None] + (b - a)[:, None] * _GL_X[None, :]
    cell = (b - a) * (np.exp(log_value(x.ravel()).reshape(x.shape) - shift) @ _GL_W)
    cum = np.concatenate([[0.0], np.cumsum(cell)])
    K_shifted = float(cum[-1])
    if not np.isfinite(K_shifted) or K_shifted <= 0:
        raise NotPositiveRecurrent("normalisation integral is not finite and positive")

    spline = CubicSpline(grid, lv - shift)
    g_lo, g_hi = grid[0], grid[-1]

    def log_p(z):
        z = as_batch(z, 1)[:, 0]
        out = np.empty_like(z)
        inside = (z >= g_lo) & (z <= g_hi)
        out[inside] = spline(z[inside])
        if not np.all(inside):
            out[~inside] = log_value(z[~inside]) - shift
        return out

    cdf = cum / K_shifted
    keep = np.concatenate([[True], np.diff(cdf) > 0])
    with np.errstate(over="ignore", divide="ignore"):  # flat far tails give zero slopes
        cdf_interp = PchipInterpolator(grid[keep], cdf[keep], extrapolate=True)
    # the inverse only needs CDF resolution far below QUANTILE_STEP; dropping
    # near-duplicate tail values keeps its slopes finite
    _, first = np.unique(np.floor(cdf / 1e-12), return_index=True)
    inv_idx = first.copy()
    inv_idx[-1] = len(cdf) - 1  # same bucket, so still strictly increasing
    inv = PchipInterpolator(cdf[inv_idx], grid[inv_idx])
    u = np.linspace(0.0, 1.0, int(round(1 / QUANTILE_STEP)) + 1)
    quantiles = inv(u)
    meta = dict(meta)
    meta.update(cdf_interp=cdf_interp, log_shift=shift, z0=z0, pdf_grid=pv / K_shifted)
    return InvariantDensity(log_p, score, K_shifted, Provenance(provenance), 1,
                            grid=grid, quantiles=quantiles, meta=meta)


def _default_z0(domain: StateDomain) -> float:
    lo, hi = domain.lower[0], domain.upper[0]
    if np.isfinite(lo) and np.isfinite(hi):
        return 0.5 * (lo + hi)
    if np.isfinite(lo):
        return lo + 1.0
    if np.isfinite(hi):
        return hi - 1.0
    return 0.0


def density_1d(spec: ModelSpec, z0: float | None = None) -> InvariantDensity:
    """Closed-form invariant density of a one-dimensional factor.

    ``log p(z) = -log c(z) + 2 int_{z0}^z m/c ds`` up to ``log K``; the
    antiderivative is tabulated on an adaptive grid and interpolated by a cubic
    spline.  The score is ``2m/c - c'/c``.
    """
    if spec.d != 1:
        raise ModelError("density_1d requires a one-dimensional factor")
    z0 = _default_z0(spec.domain) if z0 is None else float(z0)
    if not spec.domain.contains([z0])[0]:
        raise ValueError("z0 must be interior to the domain")

    def m_over_c(x):
        x = as_batch(x, 1)
        return spec.m(x)[:, 0] / spec.c(x)[:, 0, 0]

    def log_value(x):
        x = np.asarray(x, dtype=float).ravel()
        pts = np.concatenate([[z0], x])
        order = np.argsort(pts, kind="stable")
        F = np.empty_like(pts)
        F[order] = _gl_cumulative(m_over_c, pts[order])
        F = F[1:] - F[0]
        return -np.log(spec.c(x.reshape(-1, 1))[:, 0, 0]) + 2.0 * F

    def score(z):
        z = as_batch(z, 1)
        cz = spec.c(z)[:, 0, 0]
        return ((2.0 * spec.m(z)[:, 0] - spec.div_c_at(z)[:, 0]) / cz)[:, None]

    return _build_1d(log_value, score, spec, z0, Provenance.CLOSED_FORM_1D,
                     {"route": "scale-speed"})


# --------------------------------------------------------------------------
# recurrence classification


class Recurrence(str, enum.Enum):
    POSITIVE = "PositiveRecurrent"
    NOT_POSITIVE = "NullRecurrentOrTransient"
    INCONCLUSIVE = "Inconclusive"


@dataclass(frozen=True)
class RecurrenceResult:
    classification: Recurrence
    integrals: dict

    @property
    def positive(self) -> bool:
        return self.classification is Recurrence.POSITIVE


def _improper(log_integrand: Callable[[Array], Array], profile: _Profile,
              max_pieces: int = MAX_PIECES) -> tuple[str, float]:
    """Decide convergence of ``int exp(log_integrand(z, F(z))) dz`` along a march."""
    total = 0.0
    growth_run = 0
    small_run = 0
    for j in range(max_pieces):
        x, w, Fx = profile.extend()
        lv = log_integrand(x, Fx)
        if np.any(lv > 700.0):
            return "diverged", np.inf
        piece = float(np.exp(lv) @ np.abs(w))
        new_total = total + piece
        if not np.isfinite(new_total):
            return "diverged", np.inf
        if total > 0 and new_total / total > 1.5:
            growth_run += 1
        else:
            growth_run = 0
        if new_total > 0 and piece <= 1e-12 * new_total:
            small_run += 1
        else:
            small_run = 0
        total = new_total
        if growth_run >= 3:
            return "diverged", total
        if small_run >= 2 and j >= 3:
            return "converged", total
        at_bound = abs(profile.edges[j + 1] - profile.edges[-1]) == 0
        if at_bound:
            break
    return "inconclusive", total


def check_recurrence_1d(spec: ModelSpec, z0: float | None = None) -> RecurrenceResult:
    """Classify a 1-D factor with the two scale integrals and the speed integral."""
    if spec.d != 1:
        raise ModelError("check_recurrence_1d requires a one-dimensional factor")
    z0 = _default_z0(spec.domain) if z0 is None else float(z0)

    def m_over_c(x):
        x = as_batch(x, 1)
        return spec.m(x)[:, 0] / spec.c(x)[:, 0, 0]

    def scale(x, F):
        return -2.0 * F

    def speed(x, F):
        return 2.0 * F - np.log(spec.c(x.reshape(-1, 1))[:, 0, 0])

    res = {}
    for side, name in ((-1, "lower"), (+1, "upper")):
        edges = _outward_edges(spec.domain, z0, side, MAX_PIECES)
        res[f"scale_{name}"] = _improper(scale, _Profile(m_over_c, edges))
        res[f"speed_{name}"] = _improper(speed, _Profile(m_over_c, edges))

    scale_div = [res["scale_lower"][0], res["scale_upper"][0]]
    speed_st = [res["speed_lower"][0], res["speed_upper"][0]]
    if "converged" in scale_div or "diverged" in speed_st:
        cls = Recurrence.NOT_POSITIVE
    elif all(s == "diverged" for s in scale_div) and all(s == "converged" for s in speed_st):
        cls = Recurrence.POSITIVE
    else:
        cls = Recurrence.INCONCLUSIVE
    integrals = {k: {"status": v[0], "partial_value": v[1]} for k, v in res.items()}
    return RecurrenceResult(cls, integrals)


# --------------------------------------------------------------------------
# Riccati route for Ornstein-Uhlenbeck factors


@dataclass(frozen=True)
class RiccatiSolution:
    J: Array
    Sigma: Array
    residual: float
    iterations: int


def riccati_residual(J, A) -> float:
    return float(np.linalg.norm(J @ J - A.T @ J - J @ A, "fro"))


def riccati_stationary_ou(gamma, Theta=None, sigma=None, tol: float = 1e-10,
                          max_iter: int = 100) -> RiccatiSolution:
    """Stabilising solution of ``JJ = sigma gamma' sigma^{-1} J + J sigma^{-1} gamma sigma``.

    Newton's method: each step solves the Sylvester equation
    ``(J - A') H + H (J - A) = -(JJ - A'J - JA)`` with ``A = sigma^{-1} gamma sigma``,
    starting from the symmetric ``A + A'``.
    """
    gamma = np.atleast_2d(np.asarray(gamma, dtype=float))
    d = gamma.shape[0]
    sigma = np.eye(d) if sigma is None else np.atleast_2d(np.asarray(sigma, dtype=float))
    eig = np.linalg.eigvals(gamma)
    if np.any(eig.real <= 0):
        raise SpectrumError(f"gamma has an eigenvalue with nonpositive real part: {eig}")
    sigma = sigma_from_c(sigma @ sigma.T) if not np.allclose(sigma, sigma.T) else sigma
    A = np.linalg.solve(sigma, gamma @ sigma)
    J = A + A.T
    history = []
    for it in range(1, max_iter + 1):
        R = J @ J - A.T @ J - J @ A
        H = linalg.solve_sylvester(J - A.T, J - A, -R)
        J = J + H
        J = 0.5 * (J + J.T)
        res = riccati_residual(J, A)
        history.append(res)
        if res < tol * max(1.0, np.linalg.norm(J)):
            break
    else:
        raise ConvergenceError(f"Riccati Newton iteration did not converge: {history[-3:]}",
                               residual=history[-1])
    w = np.linalg.eigvalsh(J)
    if w[0] <= 0:
        raise ConvergenceError("Newton iteration converged to a non-positive-definite solution",
                               residual=res)
    Sigma = sigma @ np.linalg.solve(J, sigma)
    Sigma = 0.5 * (Sigma + Sigma.T)
    return RiccatiSolution(J, Sigma, res, it)


def ou_stationary_density(gamma, Theta=None, sigma=None) -> InvariantDensity:
    gamma = np.atleast_2d(np.asarray(gamma, dtype=float))
    d = gamma.shape[0]
    Theta = np.zeros(d) if Theta is None else np.asarray(Theta, dtype=float).reshape(d)
    sol = riccati_stationary_ou(gamma, Theta, sigma)
    return gaussian_density(Theta, sol.Sigma, Provenance.OU_RICCATI,
                            meta={"riccati_residual": sol.residual, "J": sol.J})


# --------------------------------------------------------------------------
# reversing diffusions


@dataclass(frozen=True)
class PotentialReport:
    reversing: bool
    max_asymmetry: float
    potential: Callable[[Array], Array] | None = None
    density: InvariantDensity | None = None
    base_point: Array | None = None


def reversing_field(spec: ModelSpec, z: Array) -> Array:
    """``v = c^{-1} (2m - div c)``; a gradient exactly when the factor is reversing."""
    z = as_batch(z, spec.d)
    rhs = 2.0 * spec.m(z) - spec.div_c_at(z)
    return np.linalg.solve(spec.c(z), rhs[:, :, None])[:, :, 0]


def _jacobian(fn, z, h_rel=1e-4):
    n, d = z.shape
    jac = np.empty((n, d, d))
    for j in range(d):
        h = h_rel * (1.0 + np.abs(z[:, j]))
        zp, zm = z.copy(), z.copy()
        zp[:, j] += h
        zm[:, j] -= h
        jac[:, :, j] = (fn(zp) - fn(zm)) / (2 * h)[:, None]
    return jac


def reversing_check(spec: ModelSpec, probe_points=None, rtol: float = 1e-4,
                    base_point=None) -> PotentialReport:
    """Curl test on ``v = c^{-1}(2m - div c)`` and, if it passes, ``H`` and ``p = e^H/K``."""
    from .model import default_probe_points
    z = default_probe_points(spec.domain) if probe_points is None else as_batch(
        probe_points, spec.d)
    field_fn = lambda x: reversing_field(spec, x)
    if spec.d == 1:
        asym = 0.0
    else:
        jac = _jacobian(field_fn, z)
        diff = np.abs(jac - np.swapaxes(jac, 1, 2))
        scale = np.maximum(np.abs(jac).max(axis=(1, 2)), 1e-10)
        asym = float(np.max(diff.max(axis=(1, 2)) / scale))
        if asym > rtol:
            return PotentialReport(False, asym)

    base = np.asarray(base_point if base_point is not None else
                      [_default_z0(StateDomain((lo,), (hi,))) for lo, hi in
                       zip(spec.domain.lower, spec.domain.upper)], dtype=float)
    xg, wg = np.polynomial.legendre.leggauss(32)
    xg, wg = 0.5 * (xg + 1.0), 0.5 * wg

    def H(x):
        x = as_batch(x, spec.d)
        seg = x - base
        pts = base[None, None, :] + xg[None, :, None] * seg[:, None, :]
        v = field_fn(pts.reshape(-1, spec.d)).reshape(pts.shape)
        return np.einsum("nqi,ni,q->n", v, seg, wg)

    density = None
    if spec.d == 1:
        density = _build_1d(lambda x: H(np.asarray(x).reshape(-1, 1)), field_fn, spec,
                            float(base[0]), Provenance.REVERSING_POTENTIAL,
                            {"route": "potential"})
    elif spec.d <= 3:
        density = _box_normalised(H, field_fn, spec, base)
    return PotentialReport(True, asym, H, density, base)


def _box_normalised(H, score, spec: ModelSpec, base: Array) -> InvariantDensity:
    """Normalise ``e^H`` on a tensor Gauss-Legendre box found by axis marches."""
    d = spec.d
    axes = []
    h0 = float(H(base[None, :])[0])
    for i in range(d):
        ends = []
        for side in (-1, 1):
            dom1 = StateDomain((spec.domain.lower[i],), (spec.domain.upper[i],))
            edges = _outward_edges(dom1, base[i], side, MAX_PIECES)
            end = edges[-1]
            for e in edges[1:]:
                pt = base.copy()
                pt[i] = e
                if float(H(pt[None, :])[0]) < h0 - TAIL_DROP:
                    end = e
                    break
            ends.append(end)
        panels = np.linspace(ends[0], ends[1], {2: 9, 3: 5}.get(d, 5))
        nodes = (panels[:-1, None] + np.diff(panels)[:, None] * _GL_X[None, :]).ravel()
        weights = (np.diff(panels)[:, None] * _GL_W[None, :]).ravel()
        axes.append((nodes, weights))
    mesh = np.stack(np.meshgrid(*[a[0] for a in axes], indexing="ij"), axis=-1).reshape(-1, d)
    wts = np.ones(1)
    for _, w in axes:
        wts = np.multiply.outer(wts, w)
    wts = wts.ravel()
    hv = H(mesh)
    shift = float(hv.max())
    K = float(np.exp(hv - shift) @ wts)

    def log_p(z):
        return H(z) - shift

    return InvariantDensity(log_p, score, K, Provenance.REVERSING_POTENTIAL, d,
                            meta={"route": "potential", "log_shift": shift,
                                  "quadrature": (mesh, wts * np.exp(hv - shift) / K)})


# --------------------------------------------------------------------------
# adjoint residual


_D1 = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0
_D2 = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / 12.0
_OFF = np.array([-2, -1, 0, 1, 2], dtype=float)


def _divergence(fn, z, h_rel=1e-5):
    out = np.zeros(z.shape[0])
    for i in range(z.shape[1]):
        h = h_rel * (1.0 + np.abs(z[:, i]))
        zp, zm = z.copy(), z.copy()
        zp[:, i] += h
        zm[:, i] -= h
        out += (fn(zp)[:, i] - fn(zm)[:, i]) / (2 * h)
    return out


def adjoint_residual(spec: ModelSpec, density: InvariantDensity, grid, h: float | None = None,
                     interior_only: bool = True) -> float:
    """Max of ``|adjoint generator applied to p|`` on the grid, divided by max p.

    Derivatives of ``p`` use fourth-order central stencils of step ``h`` (the grid
    spacing for a uniform 1-D grid); coefficient derivatives use small central
    differences on the callables.
    """
    d = spec.d
    z = as_batch(grid, d)
    if not np.all(spec.domain.contains(z)):
        bad = z[~spec.domain.contains(z)][0]
        raise ValueError(f"grid node {bad.tolist()} lies outside the domain")
    if h is None:
        h = float(np.min(np.diff(z[:, 0]))) if (d == 1 and len(z) > 1) else 1e-2
    if d == 1 and interior_only:
        z = z[2:-2]
    if len(z) == 0:
        raise ValueError("grid has no interior nodes")

    def p_at(x):
        return density.pdf(x)

    grad = np.zeros((len(z), d))
    hess = np.zeros((len(z), d, d))
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        vals = np.stack([p_at(z + o * e) for o in _OFF], axis=1)
        grad[:, i] = vals @ _D1 / h
        hess[:, i, i] = vals @ _D2 / h ** 2
        for j in range(i + 1, d):
            f = np.zeros(d)
            f[j] = h
            acc = np.zeros(len(z))
            for a_, wa in zip(_OFF, _D1):
                if wa == 0:
                    continue
                for b_, wb in zip(_OFF, _D1):
                    if wb == 0:
                        continue
                    acc += wa * wb * p_at(z + a_ * e + b_ * f)
            hess[:, i, j] = hess[:, j, i] = acc / h ** 2

    pz = p_at(z)
    cz = spec.c(z)
    divc = spec.div_c_at(z)
    div_m = _divergence(spec.m, z)
    div_divc = _divergence(spec.div_c_at, z, h_rel=1e-4)
    res = (0.5 * np.einsum("nij,nij->n", cz, hess)
           - np.einsum("ni,ni->n", spec.m(z) - divc, grad)
           - (div_m - 0.5 * div_divc) * pz)
    pmax = max(float(np.max(pz)), float(np.max(p_at(as_batch(grid, d)))))
    return float(np.max(np.abs(res)) / pmax)


# --------------------------------------------------------------------------
# user supplied densities and dispatch


def user_density(spec: ModelSpec, log_p, score, K: float, grid,
                 tol: float = ADJOINT_SCREEN_TOL) -> InvariantDensity:
    """Wrap a caller's density after screening it against the adjoint equation."""
    dens = InvariantDensity(log_p, score, float(K), Provenance.USER_SUPPLIED, spec.d)
    res = adjoint_residual(spec, dens, grid)
    if res > tol:
        raise ModelError(f"supplied density fails the adjoint screen: residual {res:.3g} > {tol}")
    return InvariantDensity(log_p, score, float(K), Provenance.USER_SUPPLIED, spec.d,
                            meta={"adjoint_residual": res})


def density_to_dict(density: InvariantDensity, n_grid: int = 801) -> dict:
    """JSON-ready table of a density: grid, ``log_p`` values, ``K`` and provenance."""
    doc = {"schema_version": 1, "provenance": density.provenance.value, "d": density.d,
           "K": density.K}
    if density.gaussian:
        doc["mean"] = density.mean.tolist()
        doc["cov"] = density.cov.tolist()
    if density.d == 1:
        if density.grid is not None:
            grid = density.grid
        else:
            sd = float(np.sqrt(density.cov[0, 0]))
            grid = np.linspace(density.mean[0] - 8 * sd, density.mean[0] + 8 * sd, n_grid)
        doc["grid"] = grid.tolist()
        doc["log_p"] = density.log_p(grid[:, None]).tolist()
    return doc


def density_from_dict(doc: dict) -> InvariantDensity:
    """Rebuild a density from :func:`density_to_dict` output.

    Gaussian tables are rebuilt exactly; one-dimensional tables are interpolated
    by a cubic spline whose derivative serves as the score.
    """
    prov = Provenance(doc["provenance"])
    if "mean" in doc and "cov" in doc:
        return gaussian_density(doc["mean"], doc["cov"], prov)
    if int(doc.get("d", 1)) != 1:
        raise SamplingError("only Gaussian or one-dimensional densities can be loaded")
    grid = np.asarray(doc["grid"], dtype=float)
    spline = CubicSpline(grid, np.asarray(doc["log_p"], dtype=float))
    dspline = spline.derivative()

    def log_p(z):
        return spline(as_batch(z, 1)[:, 0])

    def score(z):
        return dspline(as_batch(z, 1)[:, 0])[:, None]

    return InvariantDensity(log_p, score, float(doc["K"]), prov, 1, grid=grid,
                            meta={"route": "table"})


def invariant_density(spec: ModelSpec) -> InvariantDensity:
    """Pick a constructive route for ``spec``; raises when none applies."""
    if spec.params.get("kind") == "ou":
        p = spec.params
        return ou_stationary_density(p["gamma"], p["mean"], p["sigma"])
    if spec.d == 1:
        return density_1d(spec)
    rep = reversing_check(spec)
    if rep.reversing and rep.density is not None:
        return rep.density
    raise SamplingError("no closed-form invariant density for this model; use Method B")


def quadrature_rule(density: InvariantDensity, level: int = 0) -> tuple[Array, Array]:
    """Nodes and probability weights approximating integrals against ``p``.

    ``level`` refines the rule; comparing two levels is a cheap convergence
    check for integrands with heavy tails.
    """
    if density.gaussian:
        d = density.d
        n = {1: 60, 2: 24, 3: 12}.get(d, 6) * (2 if level else 1)
        if n ** d > 2_000_000:
            raise SamplingError("Gaussian quadrature grid too large in this dimension")
        x, w = np.polynomial.hermite_e.hermegauss(n)
        w = w / w.sum()
        mesh = np.stack(np.meshgrid(*([x] * d), indexing="ij"), axis=-1).reshape(-1, d)
        wts = np.ones(1)
        for _ in range(d):
            wts = np.multiply.outer(wts, w)
        L = np.linalg.cholesky(density.cov)
        return density.mean + mesh @ L.T, wts.ravel()
    if density.d == 1 and density.grid is not None:
        grid = density.grid if level == 0 else _subdivide(density.grid, 2)
        a, b = grid[:-1], grid[1:]
        nodes = (a[:, None] + (b - a)[:, None] * _GL_X[None, :]).ravel()
        w = ((b - a)[:, None] * _GL_W[None, :]).ravel() * density.pdf(nodes)
        return nodes[:, None], w / w.sum()
    if "quadrature" in density.meta:
        nodes, w = density.meta["quadrature"]
        return nodes, w / w.sum()
    raise SamplingError("no quadrature rule available for this density")


def sample_initial(density: InvariantDensity, rng: np.random.Generator, size: int | None = None):
    """Draw from ``p``: affine Gaussian transform or inverse CDF on the quantile table."""
    n = 1 if size is None else int(size)
    if density.gaussian:
        w = np.linalg.eigvalsh(density.cov)
        if w[0] <= 1e-14 * max(1.0, abs(w[-1])):
            raise SamplingError("degenerate (zero-variance) Gaussian density")
        L = np.linalg.cholesky(density.cov)
        out = density.mean + rng.standard_normal((n, density.d)) @ L.T
    elif density.d == 1 and density.quantiles is not None:
        u = rng.random(n)
        q = density.quantiles
        pos = u / QUANTILE_STEP
        i = np.minimum(pos.astype(int), len(q) - 2)
        t = pos - i
        out = ((1 - t) * q[i] + t * q[i + 1])[:, None]
    else:
        raise SamplingError("cannot sample this density directly; use Method B "
                            "(reverse a forward run) instead")
    return out[0] if size is None else out
