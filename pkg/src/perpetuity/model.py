"""Factor / discount / cash-flow model definitions.

A model is the coefficient bundle ``(m, c, a, theta, eta, f)`` on a box domain
``E``.  Factor dynamics are ``dZ = m(Z) dt + sigma(Z) dW`` with ``sigma = sqrt(c)``
and the discount ``D = exp(-R)`` has

    dR = (a + (theta' c theta + |eta|^2) / 2)(Z) dt + theta' sigma dW + eta' dB.

All coefficient callables are vectorised over a leading batch axis: they take
an ``(n, d)`` array of states and return ``(n, d)`` (``m``, ``theta``),
``(n, d, d)`` (``c``, ``sigma``), ``(n, k)`` (``eta``) or ``(n,)`` (``a``, ``f``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ModelError, NotSPDError

Array = np.ndarray
BatchFn = Callable[[Array], Array]

SPD_RTOL = 1e-10
FD_REL_STEP = 1e-5


@dataclass(frozen=True)
class StateDomain:
    """Open box ``prod_i (lower_i, upper_i)``; bounds may be infinite."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    label: str = "E"

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lower))
        hi = tuple(float(v) for v in np.atleast_1d(self.upper))
        if len(lo) != len(hi) or len(lo) < 1:
            raise ModelError("domain bounds must be non-empty and of equal length")
        if any(not l < u for l, u in zip(lo, hi)):
            raise ModelError(f"domain requires lower < upper, got {lo} / {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def real_space(cls, d: int = 1) -> "StateDomain":
        return cls((-np.inf,) * d, (np.inf,) * d, f"R^{d}")

    @classmethod
    def positive_half_line(cls) -> "StateDomain":
        return cls((0.0,), (np.inf,), "(0,inf)")

    @property
    def d(self) -> int:
        return len(self.lower)

    @property
    def bounded(self) -> bool:
        return bool(np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper)))

    def contains(self, z) -> Array:
        z = as_batch(z, self.d)
        return np.all((z > np.asarray(self.lower)) & (z < np.asarray(self.upper)), axis=1)


def as_batch(z, d: int) -> Array:
    """Coerce a state, list of states or array to shape ``(n, d)``."""
    z = np.asarray(z, dtype=float)
    if z.ndim == 0:
        z = z.reshape(1, 1)
    elif z.ndim == 1:
        z = z.reshape(-1, 1) if d == 1 else z.reshape(1, -1)
    if z.shape[1] != d:
        raise ValueError(f"expected states of dimension {d}, got shape {z.shape}")
    return z


@dataclass(frozen=True)
class ModelSpec:
    domain: StateDomain
    m: BatchFn
    c: BatchFn
    a: BatchFn
    theta: BatchFn
    eta: BatchFn
    f: BatchFn
    k: int = 1
    signed_cashflow: bool = False
    name: str = "model"
    # optional analytic pieces; finite differences are used when absent
    sigma: BatchFn | None = None
    div_c: BatchFn | None = None
    div_c_theta: BatchFn | None = None
    params: dict = field(default_factory=dict, compare=False)

    @property
    def d(self) -> int:
        return self.domain.d

    def sigma_at(self, z: Array) -> Array:
        if self.sigma is not None:
            return self.sigma(z)
        cz = self.c(z)
        if self.d == 1:
            return np.sqrt(cz)
        w, v = np.linalg.eigh(cz)
        return np.einsum("nij,nj,nkj->nik", v, np.sqrt(np.maximum(w, 0.0)), v)

    def div_c_at(self, z: Array) -> Array:
        """Matrix divergence ``(div c)^i = d_j c^{ij}``."""
        if self.div_c is not None:
            return self.div_c(z)
        out = np.zeros_like(z)
        for j in range(self.d):
            h = FD_REL_STEP * (1.0 + np.abs(z[:, j]))
            zp, zm = z.copy(), z.copy()
            zp[:, j] += h
            zm[:, j] -= h
            out += (self.c(zp)[:, :, j] - self.c(zm)[:, :, j]) / (2 * h)[:, None]
        return out

    def div_c_theta_at(self, z: Array) -> Array:
        """Vector divergence of ``c theta``."""
        if self.div_c_theta is not None:
            return self.div_c_theta(z)
        out = np.zeros(z.shape[0])
        for i in range(self.d):
            h = FD_REL_STEP * (1.0 + np.abs(z[:, i]))
            zp, zm = z.copy(), z.copy()
            zp[:, i] += h
            zm[:, i] -= h
            up = np.einsum("nj,nj->n", self.c(zp)[:, i, :], self.theta(zp))
            dn = np.einsum("nj,nj->n", self.c(zm)[:, i, :], self.theta(zm))
            out += (up - dn) / (2 * h)
        return out

    def noise_intensity(self, z: Array) -> Array:
        """``theta' c theta + eta' eta``, the quadratic variation rate of ``R``."""
        th = self.theta(z)
        et = self.eta(z)
        return np.einsum("ni,nij,nj->n", th, self.c(z), th) + np.sum(et * et, axis=1)

    @property
    def degenerate(self) -> bool:
        return bool(self.params.get("theta_zero") and self.params.get("eta_zero"))


# --------------------------------------------------------------------------
# coefficient builders


def scalar_coefficient(spec, d: int) -> BatchFn:
    """Build a batched scalar function from a number, a dict or a callable.

    Dicts: ``{"linear": [w_1..w_d], "offset": b}`` or ``{"poly": [c0, c1, ...]}``
    (the latter only for ``d == 1``).
    """
    if callable(spec):
        return spec
    if isinstance(spec, (int, float)):
        val = float(spec)
        return lambda z: np.full(z.shape[0], val)
    if isinstance(spec, dict):
        if "linear" in spec:
            w = np.asarray(spec["linear"], dtype=float).reshape(d)
            b = float(spec.get("offset", 0.0))
            return lambda z: z @ w + b
        if "poly" in spec:
            if d != 1:
                raise ModelError("polynomial coefficients are one-dimensional only")
            coeffs = np.asarray(spec["poly"], dtype=float)[::-1]
            return lambda z: np.polyval(coeffs, z[:, 0])
    raise ModelError(f"cannot interpret scalar coefficient {spec!r}")


def vector_coefficient(spec, dim: int) -> tuple[BatchFn, bool]:
    """Constant vector (or callable) coefficient; also reports whether it is zero."""
    if callable(spec):
        return spec, False
    vec = np.zeros(dim) if spec is None else np.asarray(spec, dtype=float).reshape(dim)
    return (lambda z: np.broadcast_to(vec, (z.shape[0], dim)).copy()), not np.any(vec)


def _finish(domain, m, c, *, a, theta, eta, f, k, signed_cashflow, name, sigma=None,
            div_c=None, params=None) -> ModelSpec:
    d = domain.d
    th, th_zero = vector_coefficient(theta, d)
    et, et_zero = vector_coefficient(eta, k)
    params = dict(params or {})
    params.update(theta_zero=th_zero, eta_zero=et_zero)
    div_ct = None
    if th_zero:
        div_ct = lambda z: np.zeros(z.shape[0])
    return ModelSpec(
        domain=domain, m=m, c=c,
        a=scalar_coefficient(a, d), theta=th, eta=et, f=scalar_coefficient(f, d),
        k=k, signed_cashflow=signed_cashflow, name=name,
        sigma=sigma, div_c=div_c, div_c_theta=div_ct, params=params,
    )


def ou_model(gamma, mean=None, sigma=None, *, a=1.0, theta=None, eta=None, f=1.0, k=1,
             signed_cashflow=False, name="ou") -> ModelSpec:
    """Ornstein-Uhlenbeck factor ``dZ = -gamma (Z - mean) dt + sigma dW`` on R^d."""
    gamma = np.atleast_2d(np.asarray(gamma, dtype=float))
    d = gamma.shape[0]
    mean = np.zeros(d) if mean is None else np.asarray(mean, dtype=float).reshape(d)
    sig = np.eye(d) if sigma is None else np.atleast_2d(np.asarray(sigma, dtype=float))
    sig = sigma_from_c(sig @ sig.T)
    cmat = sig @ sig
    return _finish(
        StateDomain.real_space(d),
        m=lambda z: -(z - mean) @ gamma.T,
        c=lambda z: np.broadcast_to(cmat, (z.shape[0], d, d)),
        sigma=lambda z: np.broadcast_to(sig, (z.shape[0], d, d)),
        div_c=lambda z: np.zeros_like(z),
        a=a, theta=theta, eta=eta, f=f, k=k, signed_cashflow=signed_cashflow, name=name,
        params={"kind": "ou", "gamma": gamma, "mean": mean, "sigma": sig},
    )


def cir_model(kappa, mean, xi, *, a=1.0, theta=None, eta=None, f=1.0, k=1,
              signed_cashflow=False, name="cir") -> ModelSpec:
    """Square-root factor ``dZ = kappa (mean - Z) dt + xi sqrt(Z) dW`` on (0, inf)."""
    kappa, mean, xi = float(kappa), float(mean), float(xi)
    return _finish(
        StateDomain.positive_half_line(),
        m=lambda z: kappa * (mean - z),
        c=lambda z: (xi * xi * z)[:, :, None],
        sigma=lambda z: (xi * np.sqrt(np.maximum(z, 0.0)))[:, :, None],
        div_c=lambda z: np.full_like(z, xi * xi),
        a=a, theta=theta, eta=eta, f=f, k=k, signed_cashflow=signed_cashflow, name=name,
        params={"kind": "cir", "kappa": kappa, "mean": mean, "xi": xi},
    )


def constant_model(drift, cov, domain: StateDomain | None = None, *, a=1.0, theta=None,
                   eta=None, f=1.0, k=1, signed_cashflow=False, name="constant") -> ModelSpec:
    drift = np.atleast_1d(np.asarray(drift, dtype=float))
    d = drift.size
    cmat = np.atleast_2d(np.asarray(cov, dtype=float)).reshape(d, d)
    domain = domain or StateDomain.real_space(d)
    sig = sigma_from_c(cmat) if np.any(cmat) else np.zeros((d, d))
    return _finish(
        domain,
        m=lambda z: np.broadcast_to(drift, z.shape).copy(),
        c=lambda z: np.broadcast_to(cmat, (z.shape[0], d, d)),
        sigma=lambda z: np.broadcast_to(sig, (z.shape[0], d, d)),
        div_c=lambda z: np.zeros_like(z),
        a=a, theta=theta, eta=eta, f=f, k=k, signed_cashflow=signed_cashflow, name=name,
        params={"kind": "constant", "drift": drift, "cov": cmat},
    )


def polynomial_model(m_coeffs: Sequence[float], c_coeffs: Sequence[float],
                     domain: StateDomain | None = None, *, a=1.0, theta=None, eta=None,
                     f=1.0, k=1, signed_cashflow=False, name="polynomial") -> ModelSpec:
    """One-dimensional factor with polynomial drift and diffusion (ascending coefficients)."""
    mc = np.asarray(m_coeffs, dtype=float)[::-1]
    cc = np.asarray(c_coeffs, dtype=float)[::-1]
    dcc = np.polyder(cc) if cc.size > 1 else np.zeros(1)
    return _finish(
        domain or StateDomain.real_space(1),
        m=lambda z: np.polyval(mc, z),
        c=lambda z: np.polyval(cc, z)[:, :, None],
        div_c=lambda z: np.polyval(dcc, z),
        a=a, theta=theta, eta=eta, f=f, k=k, signed_cashflow=signed_cashflow, name=name,
        params={"kind": "polynomial", "m": list(m_coeffs), "c": list(c_coeffs)},
    )


def model_from_dict(doc: dict) -> ModelSpec:
    """Build a model from the JSON document layout used by the command line."""
    coeffs = dict(doc["coefficients"])
    flags = doc.get("flags", {})
    kind = coeffs.pop("kind")
    common = dict(
        a=coeffs.pop("a", 1.0), theta=coeffs.pop("theta", None), eta=coeffs.pop("eta", None),
        f=coeffs.pop("f", 1.0), k=int(coeffs.pop("k", 1)),
        signed_cashflow=bool(flags.get("signed_cashflow", False)),
        name=doc.get("name", kind),
    )
    dom = doc.get("domain")
    domain = None
    if dom is not None:
        domain = StateDomain(tuple(_ext(v) for v in dom["lower"]),
                             tuple(_ext(v) for v in dom["upper"]), dom.get("label", "E"))
    if kind == "ou":
        return ou_model(coeffs["gamma"], coeffs.get("mean"), coeffs.get("sigma"), **common)
    if kind == "cir":
        return cir_model(coeffs["kappa"], coeffs["mean"], coeffs["xi"], **common)
    if kind == "constant":
        return constant_model(coeffs["drift"], coeffs["cov"], domain, **common)
    if kind == "polynomial":
        return polynomial_model(coeffs["m"], coeffs["c"], domain, **common)
    raise ModelError(f"unknown coefficient kind {kind!r}")


def _ext(v) -> float:
    if isinstance(v, str):
        return float(v.replace("infinity", "inf"))
    return float(v)


# --------------------------------------------------------------------------
# checks


def sigma_from_c(cval) -> Array:
    """Unique symmetric positive definite square root of a diffusion matrix."""
    cval = np.atleast_2d(np.asarray(cval, dtype=float))
    if cval.shape[0] != cval.shape[1]:
        raise NotSPDError(f"diffusion matrix must be square, got {cval.shape}")
    if not np.allclose(cval, cval.T, rtol=1e-12, atol=1e-14 * np.abs(cval).max()):
        raise NotSPDError("diffusion matrix is not symmetric")
    w, v = np.linalg.eigh(0.5 * (cval + cval.T))
    if not w[-1] > 0 or w[0] <= SPD_RTOL * w[-1]:
        raise NotSPDError(f"diffusion matrix is not positive definite: eigenvalue {w[0]:.6g}")
    s = (v * np.sqrt(w)) @ v.T
    return 0.5 * (s + s.T)


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[Check, ...]
    notices: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def as_dict(self) -> dict:
        return {
            "ok": self.ok,
            "checks": [{"name": c.name, "passed": c.passed, "detail": c.detail}
                       for c in self.checks],
            "notices": list(self.notices),
        }


def default_probe_points(domain: StateDomain, n: int = 9) -> Array:
    """A deterministic set of interior states (a grid along the diagonal, per axis)."""
    pts = []
    for lo, hi in zip(domain.lower, domain.upper):
        if np.isfinite(lo) and np.isfinite(hi):
            axis = np.linspace(lo, hi, n + 2)[1:-1]
        elif np.isfinite(lo):
            axis = lo + np.geomspace(1e-3, 1e2, n)
        elif np.isfinite(hi):
            axis = hi - np.geomspace(1e-3, 1e2, n)
        else:
            axis = np.linspace(-10.0, 10.0, n)
        pts.append(axis)
    return np.stack(pts, axis=1)


def validate_model(spec: ModelSpec, probe_points=None) -> ValidationReport:
    """Probe the coefficients at a finite set of states.

    Finite probing stands in for the Hoelder regularity hypotheses, which are not
    checkable numerically.  Raises ``ModelError`` on a non-finite coefficient.
    """
    z = default_probe_points(spec.domain) if probe_points is None else as_batch(
        probe_points, spec.d)
    if not np.all(spec.domain.contains(z)):
        bad = z[~spec.domain.contains(z)][0]
        raise ValueError(f"probe point {bad.tolist()} lies outside the domain")

    values = {
        "m": spec.m(z), "c": spec.c(z), "a": spec.a(z),
        "theta": spec.theta(z), "eta": spec.eta(z), "f": spec.f(z),
    }
    for name, val in values.items():
        val = np.asarray(val, dtype=float).reshape(z.shape[0], -1)
        bad = ~np.all(np.isfinite(val), axis=1)
        if np.any(bad):
            raise ModelError(f"coefficient {name} is not finite at z={z[bad][0].tolist()}")

    checks = []
    cz = np.asarray(values["c"], dtype=float).reshape(z.shape[0], spec.d, spec.d)
    sym = np.allclose(cz, np.swapaxes(cz, 1, 2), rtol=1e-12, atol=0.0)
    eig = np.linalg.eigvalsh(0.5 * (cz + np.swapaxes(cz, 1, 2)))
    spd = (eig[:, -1] > 0) & (eig[:, 0] > SPD_RTOL * eig[:, -1])
    detail = "" if spd.all() else (
        f"smallest eigenvalue {eig[~spd][0, 0]:.3g} at z={z[~spd][0].tolist()}")
    checks.append(Check("c symmetric", bool(sym)))
    checks.append(Check("c positive definite", bool(spd.all()), detail))

    notices = []
    fneg = values["f"] < 0
    if np.any(fneg):
        if spec.signed_cashflow:
            notices.append("f takes negative values; accepted under the signed-cashflow flag")
            checks.append(Check("f nonnegative", True, "signed cash flow allowed"))
        else:
            checks.append(Check("f nonnegative", False,
                                f"f={values['f'][fneg][0]:.3g} at z={z[fneg][0].tolist()}"))
    else:
        checks.append(Check("f nonnegative", True))
    checks.append(Check("a, theta, eta finite", True))
    if np.any(values["a"] < 0):
        notices.append("a takes negative values; finiteness must be checked against p")
    return ValidationReport(tuple(checks), tuple(notices))
