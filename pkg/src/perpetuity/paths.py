"""Euler-Maruyama simulation of the forward system ``(Z, R)`` and the reversed
system ``(zeta, Delta, chi^x)``.

All simulations run on a uniform grid of step ``delta``.  Each replicate path owns
its random streams (``seed``, ``stream_id``), so batching several replicates into
one vectorised time loop gives bit-identical results to running them one by one.

``Delta`` is carried as ``log Delta``.  ``chi^x = x Delta + Y`` where ``Y`` is the
``x = 0`` solution, obtained from the trapezoid recursion

    Y_{i+1} = r_i Y_i + delta/2 (f_i r_i + f_{i+1}),   r_i = Delta_{i+1} / Delta_i,

which is the closed form ``Delta (x + int f(zeta)/Delta)`` without forming ``1/Delta``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import rng as rngmod
from .density import InvariantDensity, sample_initial
from .errors import DomainExit, ModelError, NumericalRangeError
from .model import ModelSpec, as_batch

log = logging.getLogger(__name__)

Array = np.ndarray

LOG_MAX = 700.0
BLOCK = 1024


@dataclass(frozen=True)
class PathConfig:
    horizon: float
    step: float
    seed: int = 0
    stream_id: int = 0
    scheme: str = "euler_maruyama"
    reflect: bool = True
    reflect_inset: float = 1e-8

    def __post_init__(self):
        if not (self.horizon > 0 and self.step > 0):
            raise ValueError("horizon and step must be positive")
        if self.step > self.horizon:
            raise ValueError("step must not exceed the horizon")
        if self.scheme != "euler_maruyama":
            raise ValueError(f"unsupported scheme {self.scheme!r}")
        if self.horizon / self.step > np.iinfo(np.int64).max / 4:
            raise ValueError("too many steps")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.step))

    @property
    def times(self) -> Array:
        return np.arange(self.n_steps + 1) * self.step

    def with_(self, **kw) -> "PathConfig":
        vals = dict(self.__dict__)
        vals.update(kw)
        return PathConfig(**vals)


@dataclass(frozen=True)
class ForwardPath:
    times: Array
    Z: Array
    R: Array
    X0_truncated: float
    increments_W: Array | None = None
    increments_B: Array | None = None
    reflections: int = 0

    @property
    def D(self) -> Array:
        return np.exp(-self.R)


@dataclass(frozen=True)
class ReversedPath:
    times: Array
    zeta: Array
    log_Delta: Array
    base: Array
    x_values: tuple[float, ...]
    increments_W: Array
    increments_B: Array
    method: str = "A"
    burn_in: float = 0.0
    reflections: int = 0
    diagnostics: dict = field(default_factory=dict, compare=False)

    @property
    def Delta(self) -> Array:
        return np.exp(self.log_Delta)

    def chi_for(self, x: float) -> Array:
        return x * self.Delta + self.base

    @property
    def chi(self) -> dict[float, Array]:
        return {x: self.chi_for(x) for x in self.x_values}


# --------------------------------------------------------------------------
# building blocks


def _noise(config: PathConfig, stream_id: int, purpose: int, n: int, dim: int) -> Array:
    g = rngmod.stream(config.seed, stream_id, purpose)
    return g.standard_normal((n, dim)) * np.sqrt(config.step)


def _reflector(spec: ModelSpec, config: PathConfig):
    lo = np.asarray(spec.domain.lower)
    hi = np.asarray(spec.domain.upper)
    if np.all(~np.isfinite(lo)) and np.all(~np.isfinite(hi)):
        return None
    inset = config.reflect_inset
    lo_in = np.array([v + inset * (1 + abs(v)) if np.isfinite(v) else -np.inf for v in lo])
    hi_in = np.array([v - inset * (1 + abs(v)) if np.isfinite(v) else np.inf for v in hi])

    def apply(z, t):
        below = z < lo_in
        above = z > hi_in
        if not (below.any() or above.any()):
            return z, 0
        if not config.reflect:
            raise DomainExit(f"state left the domain at t={t:.6g}", time=t)
        z = np.where(below, 2 * lo_in - z, z)
        z = np.where(above, 2 * hi_in - z, z)
        z = np.clip(z, lo_in, hi_in)
        return z, int(below.sum() + above.sum())

    return apply


def euler_maruyama(drift, sigma, z0: Array, dW: Array, dt: float, reflect=None,
                   constant_sigma: Array | None = None) -> tuple[Array, int]:
    """Vectorised Euler-Maruyama over a batch.

    ``z0`` has shape ``(B, d)``, ``dW`` shape ``(B, n, d)``; returns the
    ``(B, n + 1, d)`` path array and the number of boundary reflections.
    """
    B, n, d = dW.shape
    Z = np.empty((B, n + 1, d))
    Z[:, 0] = z0
    z = np.array(z0, dtype=float)
    count = 0
    for i in range(n):
        dw = dW[:, i]
        if constant_sigma is not None:
            noise = dw @ constant_sigma.T
        else:
            noise = np.einsum("bij,bj->bi", sigma(z), dw)
        z = z + drift(z) * dt + noise
        if reflect is not None:
            z, c = reflect(z, (i + 1) * dt)
            count += c
        Z[:, i + 1] = z
    return Z, count


def _constant_sigma(spec: ModelSpec) -> Array | None:
    if spec.params.get("kind") in ("ou", "constant"):
        return spec.sigma_at(np.zeros((1, spec.d)))[0]
    return None


def _eval_flat(fn, Z: Array) -> Array:
    """Evaluate a batched coefficient on ``(B, n, d)`` states."""
    B, n, d = Z.shape
    out = np.asarray(fn(Z.reshape(B * n, d)))
    return out.reshape((B, n) + out.shape[1:])


def discount_log(spec: ModelSpec, zeta: Array, dB: Array, dt: float) -> Array:
    """``log Delta`` along reversed paths ``zeta`` of shape ``(B, n + 1, d)``.

    Left-point (Ito) sums of

        (theta'(m - div c) + div(c theta) - a - (|eta|^2 + theta' c theta)/2) dt
        + eta' dB + theta' d zeta,

    i.e. the finite-variation exponent times the stochastic exponential.
    """
    left = zeta[:, :-1]
    rate = -_eval_flat(spec.a, left)
    eta = _eval_flat(spec.eta, left)
    incr = rate * dt - 0.5 * np.sum(eta * eta, axis=-1) * dt + np.sum(eta * dB, axis=-1)
    if not spec.params.get("theta_zero"):
        th = _eval_flat(spec.theta, left)
        cz = _eval_flat(spec.c, left)
        drift_part = (np.sum(th * (_eval_flat(spec.m, left) - _eval_flat(spec.div_c_at, left)),
                             axis=-1)
                      + _eval_flat(spec.div_c_theta_at, left)
                      - 0.5 * np.einsum("bni,bnij,bnj->bn", th, cz, th))
        incr = incr + drift_part * dt + np.sum(th * np.diff(zeta, axis=1), axis=-1)
    out = np.zeros(zeta.shape[:2])
    np.cumsum(incr, axis=1, out=out[:, 1:])
    return out


def _zero_start_chi(log_delta: Array, fvals: Array, dt: float) -> Array:
    """Solve the trapezoid recursion for ``Y`` (``chi`` started at 0) blockwise.

    Within a block starting at ``s``:
    ``Y_i = e^{l_i - l_s} (Y_s + sum_{j<i} u_j e^{l_s - l_{j+1}})``, which is exact
    algebra as long as the exponents stay representable; blocks are halved until
    they do.
    """
    B, N = log_delta.shape
    r = np.exp(np.diff(log_delta, axis=1))
    u = 0.5 * dt * (fvals[:, :-1] * r + fvals[:, 1:])
    Y = np.zeros((B, N))
    s = 0
    while s < N - 1:
        e = min(s + BLOCK, N - 1)
        while True:
            rel = log_delta[:, s:e + 1] - log_delta[:, s:s + 1]
            if np.max(np.abs(rel)) < LOG_MAX or e - s <= 1:
                break
            e = s + max(1, (e - s) // 2)
        if e - s == 1 or np.max(np.abs(rel)) >= LOG_MAX:
            Y[:, s + 1] = r[:, s] * Y[:, s] + u[:, s]
            s += 1
            continue
        acc = np.cumsum(u[:, s:e] * np.exp(-rel[:, 1:]), axis=1)
        Y[:, s + 1:e + 1] = np.exp(rel[:, 1:]) * (Y[:, s:s + 1] + acc)
        s = e
    return Y


def _lag_autocorr(x: Array, lags: Sequence[int]) -> dict:
    x = x - x.mean()
    var = float(x @ x) / len(x)
    out = {}
    for lag in lags:
        if 0 < lag < len(x) and var > 0:
            out[int(lag)] = float(x[:-lag] @ x[lag:]) / (len(x) * var)
    return out


# --------------------------------------------------------------------------
# forward system


def _initial_states(spec, config, z0, density, stream_ids) -> Array:
    if isinstance(z0, str) or z0 is None:
        if density is None:
            raise ModelError("sampling the initial state requires an invariant density")
        return np.stack([sample_initial(density, rngmod.stream(config.seed, sid, rngmod.INITIAL))
                         for sid in stream_ids])
    z0 = np.asarray(z0, dtype=float)
    if z0.ndim <= 1:
        z0 = np.broadcast_to(as_batch(z0, spec.d)[0], (len(stream_ids), spec.d))
    return np.array(z0, dtype=float)


def simulate_forward_batch(spec: ModelSpec, config: PathConfig, z0, stream_ids: Sequence[int],
                           density: InvariantDensity | None = None,
                           keep_increments: bool = False) -> list[ForwardPath]:
    """Forward paths for several replicate streams in one vectorised loop."""
    stream_ids = list(stream_ids)
    n, d, k, dt = config.n_steps, spec.d, spec.k, config.step
    starts = _initial_states(spec, config, z0, density, stream_ids)
    dW = np.stack([_noise(config, sid, rngmod.FACTOR_NOISE, n, d) for sid in stream_ids])
    dB = np.stack([_noise(config, sid, rngmod.DISCOUNT_NOISE, n, k) for sid in stream_ids])
    Z, refl = euler_maruyama(spec.m, spec.sigma_at, starts, dW, dt, _reflector(spec, config),
                             _constant_sigma(spec))
    left = Z[:, :-1]
    rate = _eval_flat(spec.a, left) + 0.5 * _eval_flat(spec.noise_intensity, left)
    eta = _eval_flat(spec.eta, left)
    incr = rate * dt + np.sum(eta * dB, axis=-1)
    if not spec.params.get("theta_zero"):
        th = _eval_flat(spec.theta, left)
        sig = _eval_flat(spec.sigma_at, left)
        incr = incr + np.einsum("bni,bnij,bnj->bn", th, sig, dW)
    R = np.zeros(Z.shape[:2])
    np.cumsum(incr, axis=1, out=R[:, 1:])
    integrand = np.exp(-R) * _eval_flat(spec.f, Z)
    X0 = np.trapezoid(integrand, dx=dt, axis=1)
    times = config.times
    return [ForwardPath(times, Z[b], R[b], float(X0[b]),
                        dW[b] if keep_increments else None,
                        dB[b] if keep_increments else None,
                        refl if len(stream_ids) == 1 else 0)
            for b in range(len(stream_ids))]


def simulate_forward(spec: ModelSpec, config: PathConfig, z0="sample",
                     density: InvariantDensity | None = None) -> ForwardPath:
    """One forward path of ``(Z, R)`` and the truncated perpetuity.

    ``z0`` is a state or ``"sample"`` (draw from ``density``).
    """
    return simulate_forward_batch(spec, config, z0, [config.stream_id], density,
                                  keep_increments=True)[0]


# --------------------------------------------------------------------------
# reversed system


def reversed_drift(spec: ModelSpec, density: InvariantDensity):
    """``mu = c grad p / p + div c - m``."""
    def mu(z):
        s = density.score(z)
        return np.einsum("nij,nj->ni", spec.c(z), s) + spec.div_c_at(z) - spec.m(z)
    return mu


def _assemble(spec, config, zeta, dB, x_values, dW, method, burn_in, refl):
    dt = config.step
    log_delta = discount_log(spec, zeta, dB, dt)
    base = None
    if not np.any(log_delta > LOG_MAX):
        base = _zero_start_chi(log_delta, _eval_flat(spec.f, zeta), dt)
    if base is None or not np.all(np.isfinite(base)):
        raise NumericalRangeError("Delta left the representable range; inspect log_Delta "
                                  "(discount grows instead of decaying)")
    lag = max(1, int(round(1.0 / dt)))
    out = []
    for b in range(zeta.shape[0]):
        diag = {"zeta_autocorr": _lag_autocorr(zeta[b, :, 0], [lag, 5 * lag, 25 * lag])}
        out.append(ReversedPath(config.times, zeta[b], log_delta[b], base[b],
                                tuple(float(x) for x in x_values), dW[b], dB[b],
                                method, burn_in, refl, diag))
    return out


def simulate_reversed_batch(spec: ModelSpec, density: InvariantDensity, config: PathConfig,
                            x_values: Sequence[float], stream_ids: Sequence[int]
                            ) -> list[ReversedPath]:
    """Method A for several replicate streams: ``zeta_0 ~ p`` and the reversed drift."""
    stream_ids = list(stream_ids)
    n, d, k, dt = config.n_steps, spec.d, spec.k, config.step
    starts = _initial_states(spec, config, "sample", density, stream_ids)
    dW = np.stack([_noise(config, sid, rngmod.FACTOR_NOISE, n, d) for sid in stream_ids])
    dB = np.stack([_noise(config, sid, rngmod.DISCOUNT_NOISE, n, k) for sid in stream_ids])
    zeta, refl = euler_maruyama(reversed_drift(spec, density), spec.sigma_at, starts, dW, dt,
                                _reflector(spec, config), _constant_sigma(spec))
    return _assemble(spec, config, zeta, dB, x_values, dW, "A", 0.0, refl)


def simulate_reversed(spec: ModelSpec, density: InvariantDensity, config: PathConfig,
                      x_values: Sequence[float] = (1.0,)) -> ReversedPath:
    """One path of the reversed system started from the invariant density (Method A)."""
    return simulate_reversed_batch(spec, density, config, x_values, [config.stream_id])[0]


def reverse_from_forward_batch(spec: ModelSpec, config: PathConfig, x_values: Sequence[float],
                               stream_ids: Sequence[int], z0=None) -> list[ReversedPath]:
    """Method B: run ``Z`` on ``[0, 2T]`` from ``z0`` and set ``zeta_t = Z_{2T - t}``."""
    stream_ids = list(stream_ids)
    n, d, k, dt = config.n_steps, spec.d, spec.k, config.step
    if z0 is None:
        from .density import _default_z0
        from .model import StateDomain
        z0 = [_default_z0(StateDomain((lo,), (hi,)))
              for lo, hi in zip(spec.domain.lower, spec.domain.upper)]
    starts = _initial_states(spec, config, z0, None, stream_ids)
    dW = np.stack([_noise(config, sid, rngmod.FACTOR_NOISE, 2 * n, d) for sid in stream_ids])
    Z, refl = euler_maruyama(spec.m, spec.sigma_at, starts, dW, dt, _reflector(spec, config),
                             _constant_sigma(spec))
    zeta = Z[:, ::-1][:, :n + 1].copy()
    dB = np.stack([_noise(config, sid, rngmod.DISCOUNT_NOISE, n, k) for sid in stream_ids])
    return _assemble(spec, config, zeta, dB, x_values, dW, "B", config.horizon, refl)


def reverse_from_forward(spec: ModelSpec, config: PathConfig, x_values: Sequence[float] = (1.0,),
                         z0=None) -> ReversedPath:
    """One Method-B path; no invariant density is needed."""
    return reverse_from_forward_batch(spec, config, x_values, [config.stream_id], z0)[0]


# --------------------------------------------------------------------------
# binary dump for debugging

DUMP_MAGIC = b"PRPT"
DUMP_VERSION = 1
_HEADER = "<4sIIIQ"


def dump_path(path: ReversedPath, file) -> None:
    """Little-endian header ``(magic, version, d, k, n_steps)`` then f64 arrays:
    times, zeta, log_Delta, base (``n_steps + 1`` rows each), then the W and B
    increments (``n_steps`` rows)."""
    import struct

    n = path.times.size - 1
    d = path.zeta.shape[1]
    k = path.increments_B.shape[1]
    with open(file, "wb") as fh:
        fh.write(struct.pack(_HEADER, DUMP_MAGIC, DUMP_VERSION, d, k, n))
        for arr in (path.times, path.zeta, path.log_Delta, path.base,
                    path.increments_W[-n:], path.increments_B):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_dump(file) -> dict:
    import struct

    with open(file, "rb") as fh:
        raw = fh.read()
    size = struct.calcsize(_HEADER)
    magic, version, d, k, n = struct.unpack(_HEADER, raw[:size])
    if magic != DUMP_MAGIC or version != DUMP_VERSION:
        raise ValueError("not a path dump of a supported version")
    data = np.frombuffer(raw[size:], dtype="<f8")
    shapes = {"times": (n + 1,), "zeta": (n + 1, d), "log_Delta": (n + 1,), "base": (n + 1,),
              "increments_W": (n, d), "increments_B": (n, k)}
    out, pos = {"d": d, "k": k, "n_steps": n}, 0
    for name, shape in shapes.items():
        cnt = int(np.prod(shape))
        out[name] = data[pos:pos + cnt].reshape(shape)
        pos += cnt
    if pos != data.size:
        raise ValueError("path dump has an unexpected length")
    return out
