"""Almost-sure finiteness of the perpetuity, the discount decay rate and the
support of the limit law when the discount carries no noise."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize, stats

from .density import InvariantDensity, quadrature_rule
from .errors import ModelError
from .model import ModelSpec, as_batch

Array = np.ndarray

DEFAULT_EPSILONS = (0.5, 0.25, 0.1, 0.01)
ZERO_RTOL = 1e-9
SCREEN_RTOL = 1e-3


class Verdict(str, enum.Enum):
    FINITE = "AlmostSurelyFinite"
    INFINITE = "AlmostSurelyInfinite"
    INCONCLUSIVE = "Inconclusive"


@dataclass(frozen=True)
class FinitenessVerdict:
    verdict: Verdict
    epsilon_used: float | None
    integral_value: float | None
    kappa: float | None = None
    diagnostics: dict = field(default_factory=dict, compare=False)

    def as_dict(self) -> dict:
        return {"verdict": self.verdict.value, "epsilon_used": self.epsilon_used,
                "integral_value": self.integral_value, "kappa": self.kappa,
                "diagnostics": self.diagnostics}


class _Integrator:
    """Integrals against ``p`` at two quadrature levels."""

    def __init__(self, density: InvariantDensity):
        self.rules = [quadrature_rule(density, 0), quadrature_rule(density, 1)]

    def values(self, fn):
        return [fn(nodes) for nodes, _ in self.rules]

    def mean(self, vals, part=None):
        out = []
        for v, (_, w) in zip(vals, self.rules):
            if part == "neg":
                v = np.maximum(-v, 0.0)
            elif part == "pos":
                v = np.maximum(v, 0.0)
            elif part == "abs":
                v = np.abs(v)
            out.append(float(v @ w))
        return out

    def screen(self, vals, part) -> tuple[bool, float]:
        """Is the given part integrable, judged by agreement of the two levels."""
        lo, hi = self.mean(vals, part)
        ok = np.isfinite(lo) and np.isfinite(hi) and abs(hi - lo) <= SCREEN_RTOL * max(
            1.0, abs(hi))
        return bool(ok), hi


def _sign(value: float, scale: float) -> int:
    tol = ZERO_RTOL * max(scale, 1e-300)
    return 0 if abs(value) <= tol else (1 if value > 0 else -1)


def check_finiteness(spec: ModelSpec, density: InvariantDensity,
                     epsilons: Sequence[float] = DEFAULT_EPSILONS) -> FinitenessVerdict:
    """Decide whether ``X_0 < inf`` a.s. from integrals of the discount rate against ``p``.

    ``I-(eps) = int (a + (1 - eps)/2 q) p`` and ``I+(eps) = int (a + (1 + eps)/2 q) p``
    with ``q = theta' c theta + |eta|^2``.  Some ``I-(eps) > 0`` gives a finite
    perpetuity with ``kappa = I-(eps)/4``; some ``I+(eps) <= 0`` together with
    ``int f p > 0`` gives an infinite one.  Values within a relative ``1e-9`` of
    zero count as zero, so exactly balanced rates end up inconclusive.
    """
    eps = sorted(float(e) for e in epsilons)
    if not eps or eps[0] <= 0:
        raise ValueError("epsilons must be positive")
    quad = _Integrator(density)
    a_v = quad.values(spec.a)
    q_v = quad.values(spec.noise_intensity)
    f_v = quad.values(spec.f)
    diag: dict = {"epsilons": eps}

    q_int, q_mass = quad.screen(q_v, "abs")
    noiseless = all(np.max(np.abs(q)) == 0.0 for q in q_v)
    diag["noise_integrable"] = q_int

    def g(e):
        return [a + e * q for a, q in zip(a_v, q_v)]

    def finite_at(e):
        vals = g(0.5 * (1.0 - e))
        ok, _ = quad.screen(vals, "neg")
        val = quad.mean(vals)[1]
        return ok, val, quad.mean(vals, "abs")[1]

    kappa_eps = None
    # the eps-free form first when the noise rate is p-integrable
    if q_int:
        ok, val0, scale0 = finite_at(0.0)
        diag["eps_free_integral"] = val0
        if ok and _sign(val0, scale0) > 0:
            for e in eps:
                ok_e, val, scale = finite_at(e)
                if ok_e and _sign(val, scale) > 0:
                    kappa_eps = (e, val)
                    break
            if kappa_eps is None:
                # the eps-free form guarantees a small enough eps exists
                e = 0.5 * val0 / max(q_mass, 1e-300)
                kappa_eps = (e, finite_at(e)[1])
    if kappa_eps is None:
        for e in eps:
            ok_e, val, scale = finite_at(e)
            if not ok_e:
                diag.setdefault("screen_failures", []).append(e)
                continue
            if _sign(val, scale) > 0:
                kappa_eps = (e, val)
                break
    if kappa_eps is not None:
        e, val = kappa_eps
        return FinitenessVerdict(Verdict.FINITE, e, val, 0.25 * val, diag)

    f_mean = quad.mean(f_v)[1]
    diag["f_mean"] = f_mean
    f_pos = _sign(f_mean, quad.mean(f_v, "abs")[1]) > 0
    if noiseless:
        a_all_zero = all(np.max(np.abs(a)) == 0.0 for a in a_v)
        ok, _ = quad.screen(a_v, "pos")
        a_mean = quad.mean(a_v)[1]
        diag["a_mean"] = a_mean
        if f_pos and (a_all_zero or (ok and _sign(a_mean, quad.mean(a_v, "abs")[1]) < 0)):
            return FinitenessVerdict(Verdict.INFINITE, None, a_mean, None, diag)
        return FinitenessVerdict(Verdict.INCONCLUSIVE, None, a_mean, None, diag)
    for e in eps:
        vals = g(0.5 * (1.0 + e))
        ok, _ = quad.screen(vals, "pos")
        val = quad.mean(vals)[1]
        if ok and _sign(val, quad.mean(vals, "abs")[1]) <= 0 and f_pos:
            return FinitenessVerdict(Verdict.INFINITE, e, val, None, diag)
    return FinitenessVerdict(Verdict.INCONCLUSIVE, None, None, None, diag)


# --------------------------------------------------------------------------
# support of the limit law in the noiseless-discount case


@dataclass(frozen=True)
class SupportBounds:
    lower: float
    upper: float
    box: tuple[tuple[float, ...], tuple[float, ...]]
    diagnostics: dict = field(default_factory=dict, compare=False)

    def as_tuple(self) -> tuple[float, float]:
        return self.lower, self.upper


def _default_box(spec: ModelSpec, density: InvariantDensity | None):
    lo = np.array(spec.domain.lower, dtype=float)
    hi = np.array(spec.domain.upper, dtype=float)
    if density is not None and density.gaussian:
        zq = stats.norm.isf(1e-8)
        sd = np.sqrt(np.diag(density.cov))
        lo = np.maximum(lo, density.mean - zq * sd)
        hi = np.minimum(hi, density.mean + zq * sd)
    elif density is not None and density.d == 1 and density.grid is not None:
        cdf = density.cdf(density.grid)
        i = max(int(np.searchsorted(cdf, 1e-8)) - 1, 0)
        j = min(int(np.searchsorted(cdf, 1 - 1e-8)) + 1, len(cdf) - 1)
        lo = np.maximum(lo, density.grid[i])
        hi = np.minimum(hi, density.grid[j])
    lo = np.where(np.isfinite(lo), lo, -10.0)
    hi = np.where(np.isfinite(hi), hi, 10.0)
    return lo, hi


class _BoxSearch:
    """sup over a box of ``f - x a``: grid search then local refinement."""

    def __init__(self, spec: ModelSpec, lo: Array, hi: Array, sign: float):
        self.spec, self.sign = spec, sign
        d = spec.d
        inset = 1e-9 * (1 + np.abs(np.stack([lo, hi])))
        self.lo, self.hi = lo + inset[0], hi - inset[1]
        n = {1: 401, 2: 61, 3: 21}.get(d)
        if n is None:
            rng = np.random.default_rng(0)
            self.grid = self.lo + (self.hi - self.lo) * rng.random((20000, d))
        else:
            axes = [np.linspace(l, h, n) for l, h in zip(self.lo, self.hi)]
            self.grid = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, d)
        self.f = sign * spec.f(self.grid)
        self.a = spec.a(self.grid)

    def _obj(self, x, z):
        z = as_batch(z, self.spec.d)
        return self.sign * self.spec.f(z) - x * self.spec.a(z)

    def sup(self, x) -> tuple[float, Array]:
        vals = self.f - x * self.a
        i = int(np.argmax(vals))
        z0 = self.grid[i]
        res = optimize.minimize(lambda z: -self._obj(x, z[None, :])[0], z0, method="L-BFGS-B",
                                bounds=list(zip(self.lo, self.hi)))
        if res.success and -res.fun > vals[i]:
            return float(-res.fun), res.x
        return float(vals[i]), z0


def _upper(search: _BoxSearch, tol=1e-12) -> float:
    """``inf{x : sup_z (s f - x a) <= 0}`` by bisection."""
    s_neg = lambda x: search.sup(x)[0] <= 0
    lo, hi = -1.0, 1.0
    while s_neg(lo):
        lo *= 2
        if lo < -1e300:
            return -np.inf
    while not s_neg(hi):
        hi *= 2
        if hi > 1e300:
            return np.inf
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if s_neg(mid):
            hi = mid
        else:
            lo = mid
        if hi - lo <= tol * max(1.0, abs(hi)):
            break
    # snap to the attained ratio at the maximiser
    _, z = search.sup(hi)
    a = float(search.spec.a(z[None, :])[0])
    if a > 0:
        ratio = search.sign * float(search.spec.f(z[None, :])[0]) / a
        if abs(ratio - hi) <= 1e-8 * max(1.0, abs(hi)):
            return ratio
    return hi


def support_bounds(spec: ModelSpec, box=None, density: InvariantDensity | None = None,
                   growth_steps: int = 3) -> SupportBounds:
    """Bounds ``(l, u)`` of the perpetuity's support when ``theta = eta = 0``.

    ``u = inf{x : sup_z (f - x a) <= 0}`` and ``l = sup{x : inf_z (f - x a) >= 0}``
    are evaluated on a box: ``box`` if given, else the ``1e-8`` quantile box of
    ``density``, else the domain clipped to ``[-10, 10]``.  Unbounded directions of
    the domain are probed by doubling the box; ``u`` is reported infinite when it
    grows by more than half at each of ``growth_steps`` doublings.
    """
    if not spec.degenerate:
        raise ModelError("support bounds apply only when theta and eta vanish; use the "
                         "reversal estimator for the general case")
    if box is None:
        lo, hi = _default_box(spec, density)
    else:
        lo, hi = (np.asarray(b, dtype=float).reshape(spec.d) for b in box)
    dom_lo = np.array(spec.domain.lower)
    dom_hi = np.array(spec.domain.upper)
    lo, hi = np.maximum(lo, dom_lo), np.minimum(hi, dom_hi)
    if np.any(lo >= hi):
        raise ValueError("empty search box")

    u0 = _upper(_BoxSearch(spec, lo, hi, 1.0))
    l0 = -_upper(_BoxSearch(spec, lo, hi, -1.0))
    history = [u0]
    upper, lower = u0, l0
    grow_lo = ~np.isfinite(dom_lo)
    grow_hi = ~np.isfinite(dom_hi)
    if np.isfinite(u0) and (grow_lo.any() or grow_hi.any()):
        centre, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
        run = 0
        b_lo, b_hi = lo, hi
        for _ in range(growth_steps):
            half = 2 * half
            b_lo = np.where(grow_lo, centre - half, lo)
            b_hi = np.where(grow_hi, centre + half, hi)
            u = _upper(_BoxSearch(spec, b_lo, b_hi, 1.0))
            lower = min(lower, -_upper(_BoxSearch(spec, b_lo, b_hi, -1.0)))
            prev = history[-1]
            history.append(u)
            run = run + 1 if (prev > 0 and u > 1.5 * prev) else 0
        upper = np.inf if run >= growth_steps else max(history)
    diag = {"upper_history": history}
    box_out = (tuple(float(v) for v in lo), tuple(float(v) for v in hi))
    return SupportBounds(float(lower), float(upper), box_out, diag)
