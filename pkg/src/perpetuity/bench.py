"""Benchmark of the reversal estimator against naive forward Monte Carlo on the
OU example ``dZ = -gamma Z dt + dW``, ``f(z) = z``, constant rate ``a``.

Statistics depend only on ``base_seed``: trial ``i`` of a reversal bench always
uses stream ``i``, and naive repeat ``r`` uses its own block of streams, so batch
sizes change timings but never KS values.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .analytics import SummaryTable, ks_distance, ou_reference_law, summary_stats
from .density import invariant_density
from .estimators import naive_samples
from .model import ModelSpec, ou_model
from .paths import PathConfig, reverse_from_forward_batch, simulate_reversed_batch

NAIVE_STREAM_BLOCK = 10_000_000


@dataclass(frozen=True)
class BenchConfig:
    gamma: float = 2.0
    a: float = 1.0
    T: float = 10_000.0
    delta: float = 1 / 24
    n_trials: int = 20
    base_seed: int = 0
    ks_target: float | None = None
    max_paths: int = 50_000
    naive_T: float = 100.0
    repeats: int = 1
    stride: int = 100
    batch: int = 1
    naive_batch: int = 1

    def __post_init__(self):
        if self.n_trials < 1 or self.repeats < 1:
            raise ValueError("n_trials and repeats must be at least 1")
        if not (self.gamma > 0 and self.a > 0 and self.T > 0 and self.delta > 0):
            raise ValueError("gamma, a, T and delta must be positive")
        if self.batch < 1 or self.naive_batch < 1 or self.stride < 1:
            raise ValueError("batch sizes and stride must be positive")

    @classmethod
    def from_dict(cls, doc: dict) -> "BenchConfig":
        known = {k: v for k, v in doc.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def bench_model(cfg: BenchConfig) -> ModelSpec:
    return ou_model(cfg.gamma, a=cfg.a, f={"linear": [1.0]}, signed_cashflow=True,
                    name="ou-bench")


@dataclass(frozen=True)
class TrialResult:
    ks: float
    seconds: float


@dataclass(frozen=True)
class ReversalBench:
    summary: SummaryTable
    trials: tuple[TrialResult, ...]


def run_reversal_bench(cfg: BenchConfig, method: str = "A") -> ReversalBench:
    """``n_trials`` single-path reversal estimates, each scored by KS against the exact law.

    Trials are simulated ``cfg.batch`` at a time; a trial's time is its batch's wall
    time (simulation plus KS) divided by the batch size.
    """
    method = method.upper()
    if method not in ("A", "B"):
        raise ValueError("method must be 'A' or 'B'")
    spec = bench_model(cfg)
    density = invariant_density(spec)
    ref = ou_reference_law(cfg.gamma, cfg.a)
    config = PathConfig(cfg.T, cfg.delta, seed=cfg.base_seed)
    results = []
    for start in range(0, cfg.n_trials, cfg.batch):
        ids = list(range(start, min(start + cfg.batch, cfg.n_trials)))
        t0 = time.perf_counter()
        if method == "A":
            paths = simulate_reversed_batch(spec, density, config, [1.0], ids)
        else:
            paths = reverse_from_forward_batch(spec, config, [1.0], ids, z0=[0.0])
        ks = [ks_distance(p.chi_for(1.0)[1:], ref).distance for p in paths]
        per = (time.perf_counter() - t0) / len(ids)
        results.extend(TrialResult(k, per) for k in ks)
    summary = summary_stats([r.ks for r in results], [r.seconds for r in results], method)
    return ReversalBench(summary, tuple(results))


@dataclass(frozen=True)
class NaiveReport:
    paths_needed: int
    seconds: float
    censored: bool
    ks_at_stop: float
    repeat: int = 0


def _first_crossing(xs: np.ndarray, lo: int, hi: int, target: float, cdf) -> int | None:
    for n in range(lo, hi + 1):
        if ks_distance(xs[:n], cdf).distance <= target:
            return n
    return None


def run_naive_until(cfg: BenchConfig, repeat: int = 0) -> NaiveReport:
    """Grow a naive sample until its KS distance first drops to ``cfg.ks_target``.

    Paths arrive in blocks of ``cfg.stride``; every prefix length in a new block is
    scored, so the reported count is the exact first hit.  ``seconds`` is the
    simulation time of the paths actually needed (KS scoring is excluded, as it
    would not be part of a real naive run).  Hitting ``cfg.max_paths`` gives a
    censored report.
    """
    if cfg.ks_target is None or cfg.ks_target < 0:
        raise ValueError("ks_target must be set and non-negative")
    spec = bench_model(cfg)
    density = invariant_density(spec)
    ref = ou_reference_law(cfg.gamma, cfg.a)
    config = PathConfig(cfg.naive_T, cfg.delta, seed=cfg.base_seed)
    first = (repeat + 1) * NAIVE_STREAM_BLOCK
    xs = np.empty(0)
    sim_seconds = 0.0
    while xs.size < cfg.max_paths:
        block = min(cfg.stride, cfg.max_paths - xs.size)
        chunk = []
        t0 = time.perf_counter()
        for s in range(0, block, cfg.naive_batch):
            m = min(cfg.naive_batch, block - s)
            _, x = naive_samples(spec, density, config, m, first + xs.size + s, chunk=m)
            chunk.append(x)
        sim_seconds += time.perf_counter() - t0
        prev = xs.size
        xs = np.concatenate([xs] + chunk)
        n = _first_crossing(xs, prev + 1, xs.size, cfg.ks_target, ref)
        if n is not None:
            secs = sim_seconds * n / xs.size
            return NaiveReport(int(n), secs, False, ks_distance(xs[:n], ref).distance, repeat)
    return NaiveReport(int(xs.size), sim_seconds, True, ks_distance(xs, ref).distance, repeat)


@dataclass(frozen=True)
class SpeedupReport:
    time_ratio: float
    path_ratio: float
    step_ratio: float
    median_reversal_seconds: float
    median_naive_seconds: float
    median_naive_paths: float
    censored_repeats: int
    notes: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"schema_version": 1, **asdict(self)}


def speedup_report(reversal: SummaryTable, naive, cfg: BenchConfig | None = None) -> SpeedupReport:
    """Median naive time over median reversal time, and the matching path/step ratios."""
    reports = [naive] if isinstance(naive, NaiveReport) else list(naive)
    secs = float(np.median([r.seconds for r in reports]))
    paths = float(np.median([r.paths_needed for r in reports]))
    ratio = secs / reversal.median_seconds if reversal.median_seconds > 0 else float("inf")
    step_ratio = float("nan")
    if cfg is not None:
        step_ratio = paths * cfg.naive_T / cfg.T
    return SpeedupReport(ratio, paths, step_ratio, reversal.median_seconds, secs, paths,
                         sum(r.censored for r in reports),
                         {"repeats": len(reports),
                          "timing": "reversal: simulation and KS; naive: simulation of the paths needed"})


def write_trials_csv(bench: ReversalBench, path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["trial", "ks", "seconds"])
        for i, r in enumerate(bench.trials):
            w.writerow([i, repr(r.ks), repr(r.seconds)])
    return path


def run_full(cfg: BenchConfig, methods=("A", "B"), naive: bool = True) -> dict:
    """Everything the command line reports, as one JSON-ready document."""
    out: dict = {"schema_version": 1, "config": asdict(cfg), "reversal": {}}
    benches = {}
    for m in methods:
        benches[m] = run_reversal_bench(cfg, m)
        out["reversal"][m] = benches[m].summary.as_dict()
    if naive:
        target = cfg.ks_target
        if target is None:
            target = benches[methods[0]].summary.median_ks if methods else 0.00887
        ncfg = BenchConfig(**{**asdict(cfg), "ks_target": target})
        reps = [run_naive_until(ncfg, r) for r in range(cfg.repeats)]
        out["naive"] = {
            "schema_version": 1, "method": "naive", "ks_target": target,
            "repeats": [asdict(r) for r in reps],
            "median_paths": float(np.median([r.paths_needed for r in reps])),
            "median_seconds": float(np.median([r.seconds for r in reps])),
        }
        if methods:
            out["speedup"] = speedup_report(benches[methods[0]].summary, reps, ncfg).as_dict()
    out["_benches"] = benches
    return out


def dump_report(doc: dict, path) -> Path:
    path = Path(path)
    clean = {k: v for k, v in doc.items() if not k.startswith("_")}
    path.write_text(json.dumps(clean, indent=2, sort_keys=True), encoding="utf-8")
    return path
