"""Empirical joint measures of ``(Z_0, X_0)`` from reversal paths or naive forward paths."""
from __future__ import annotations

import csv
import enum
import functools
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .density import InvariantDensity
from .errors import ValidityError
from .finiteness import Verdict, check_finiteness
from .model import ModelSpec
from .paths import (PathConfig, ReversedPath, reverse_from_forward_batch,
                    simulate_forward_batch, simulate_reversed_batch)

log = logging.getLogger(__name__)

Array = np.ndarray

SAMPLE_CAP = 10_000_000
NAIVE_CHUNK = 500


class MeasureKind(str, enum.Enum):
    TIME_AVERAGE = "TimeAverage"
    IID = "IID"


@dataclass(frozen=True)
class EmpiricalJointMeasure:
    """Equal-weight atoms at ``(z[i], x[i])``.

    ``total`` is the time horizon for a time average and the path count for an
    iid sample.
    """

    z: Array
    x: Array
    kind: MeasureKind
    total: float
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.z.shape[0] != self.x.shape[0] or self.x.size == 0:
            raise ValueError("need matching, non-empty factor and perpetuity samples")

    @property
    def n(self) -> int:
        return self.x.size

    @property
    def weights(self) -> Array:
        return np.full(self.n, 1.0 / self.n)

    @functools.cached_property
    def _sorted(self) -> dict:
        return {}

    def sorted_marginal(self, which="perpetuity") -> Array:
        key = _which_key(which)
        cache = self._sorted
        if key not in cache:
            col = self.x if key == -1 else self.z[:, key]
            cache[key] = np.sort(col)
        return cache[key]

    def merge(self, other: "EmpiricalJointMeasure") -> "EmpiricalJointMeasure":
        if self.kind is not MeasureKind.IID or other.kind is not MeasureKind.IID:
            raise ValueError("only iid measures can be merged")
        return EmpiricalJointMeasure(np.concatenate([self.z, other.z]),
                                     np.concatenate([self.x, other.x]), MeasureKind.IID,
                                     self.total + other.total, dict(self.meta))

    def histogram2d(self, bins=40, coord: int = 0):
        mass, zedges, xedges = np.histogram2d(self.z[:, coord], self.x, bins=bins)
        return mass / self.n, zedges, xedges


def _which_key(which) -> int:
    if which in ("perpetuity", "x", "chi", None):
        return -1
    if isinstance(which, tuple) and which[0] == "factor":
        return int(which[1])
    if isinstance(which, (int, np.integer)):
        return int(which)
    raise ValueError(f"unknown marginal {which!r}")


def ecdf_eval(measure: EmpiricalJointMeasure, which, points) -> Array:
    """``F(point)``: the mass of atoms ``<= point`` for the chosen marginal."""
    pts = np.asarray(points, dtype=float)
    if np.any(np.diff(pts) < 0):
        raise ValueError("points must be sorted ascending")
    s = measure.sorted_marginal(which)
    return np.searchsorted(s, pts, side="right") / s.size


def _thin(z: Array, x: Array, cap: int):
    if x.size <= cap:
        return z, x
    stride = int(np.ceil(x.size / cap))
    return z[::stride], x[::stride]


def measure_from_path(path: ReversedPath, x: float, cap: int = SAMPLE_CAP) -> EmpiricalJointMeasure:
    """Time-average measure over grid times in ``(0, T]``."""
    z, chi = _thin(path.zeta[1:], path.chi_for(x)[1:], cap)
    return EmpiricalJointMeasure(z, chi, MeasureKind.TIME_AVERAGE, float(path.times[-1]),
                                 {"method": path.method, "x": x, "step": path.times[1]})


def _guard_finite(spec: ModelSpec, density: InvariantDensity | None):
    if density is None:
        return
    v = check_finiteness(spec, density)
    if v.verdict is Verdict.INFINITE:
        raise ValidityError("the perpetuity is almost surely infinite for this model")
    if v.verdict is not Verdict.FINITE:
        warnings.warn("finiteness of the perpetuity could not be established", stacklevel=3)


def estimate_reversal_batch(spec: ModelSpec, density: InvariantDensity | None,
                            config: PathConfig, x: float, stream_ids: Sequence[int],
                            method: str = "A", z0=None, check: bool = True
                            ) -> list[EmpiricalJointMeasure]:
    """One reversal measure per stream id, simulated in a single vectorised loop."""
    method = method.upper()
    if check:
        _guard_finite(spec, density)
    if method == "A":
        if density is None:
            raise ValueError("Method A needs the invariant density")
        paths = simulate_reversed_batch(spec, density, config, [x], stream_ids)
    elif method == "B":
        paths = reverse_from_forward_batch(spec, config, [x], stream_ids, z0)
    else:
        raise ValueError("method must be 'A' or 'B'")
    return [measure_from_path(p, x) for p in paths]


def estimate_reversal(spec: ModelSpec, density: InvariantDensity | None, config: PathConfig,
                      x: float = 1.0, method: str = "A", z0=None) -> EmpiricalJointMeasure:
    """Occupation measure of ``(zeta, chi^x)`` along one reversed path.

    Method A starts ``zeta`` from ``density``; Method B (``density`` may be
    ``None``) reverses a forward run of length ``2T`` started at ``z0``.
    """
    return estimate_reversal_batch(spec, density, config, x, [config.stream_id], method, z0)[0]


def default_truncation(kappa: float | None) -> float:
    return 100.0 if kappa is None else max(100.0, 20.0 / kappa)


def naive_samples(spec: ModelSpec, density: InvariantDensity, config: PathConfig, n_paths: int,
                  first_stream: int = 0, chunk: int = NAIVE_CHUNK) -> tuple[Array, Array]:
    """``(Z_0, X_0^{trunc})`` for paths ``first_stream, ..., first_stream + n_paths - 1``."""
    zs, xs = [], []
    for start in range(first_stream, first_stream + n_paths, chunk):
        ids = range(start, min(start + chunk, first_stream + n_paths))
        for p in simulate_forward_batch(spec, config, "sample", ids, density):
            zs.append(p.Z[0])
            xs.append(p.X0_truncated)
    return np.array(zs).reshape(n_paths, spec.d), np.array(xs)


def estimate_naive(spec: ModelSpec, density: InvariantDensity, config: PathConfig,
                   n_paths: int, kappa: float | None = None) -> EmpiricalJointMeasure:
    """IID measure of ``(Z_0, X_0)`` from ``n_paths`` forward paths truncated at ``config.horizon``.

    Path ``i`` uses stream ``config.stream_id + i``, so disjoint stream ranges can be
    simulated separately and merged.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    if kappa is None:
        v = check_finiteness(spec, density)
        if v.verdict is Verdict.INFINITE:
            raise ValidityError("the perpetuity is almost surely infinite for this model")
        kappa = v.kappa
    if kappa is None:
        warnings.warn("no decay rate available; truncation bias is unbounded", stacklevel=2)
    z, x = naive_samples(spec, density, config, n_paths, config.stream_id)
    bias = None if kappa is None else float(np.exp(-kappa * config.horizon))
    return EmpiricalJointMeasure(z, x, MeasureKind.IID, float(n_paths),
                                 {"truncation": config.horizon, "kappa": kappa,
                                  "discount_bound": bias})


# --------------------------------------------------------------------------
# CSV export


def write_ecdf_csv(measure: EmpiricalJointMeasure, path, which="perpetuity",
                   max_points: int = 2000) -> Path:
    s = measure.sorted_marginal(which)
    idx = np.unique(np.linspace(0, s.size - 1, min(max_points, s.size)).round().astype(int))
    pts = s[idx]
    vals = ecdf_eval(measure, which, pts)
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["point", "F"])
        for p, v in zip(pts, vals):
            w.writerow([repr(float(p)), repr(float(v))])
    return path


def write_hist2d_csv(measure: EmpiricalJointMeasure, path, bins=40) -> Path:
    mass, ze, xe = measure.histogram2d(bins)
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["z_bin_lo", "x_bin_lo", "mass"])
        for i in range(mass.shape[0]):
            for j in range(mass.shape[1]):
                w.writerow([repr(float(ze[i])), repr(float(xe[j])), repr(float(mass[i, j]))])
    return path
