"""Synthetic spectra and the two desk-scale experiments built on them.

Eigenvalues follow a Pareto law with *density* exponent alpha on [1, ∞),
p(λ) ∝ λ^(-alpha), i.e. shape a = alpha - 1, drawn by inverse CDF:
λ = u^(-1/(alpha-1)) with u uniform on (0, 1].

The uniform stream is NumPy's PCG64 bit generator seeded with the given
integer, read through ``Generator.random`` (53-bit doubles in [0, 1)), and
mapped to ``u = 1 - x``. Both pieces are fixed algorithms, so ensembles are
reproducible across platforms and can be regenerated in other languages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .allocation import DEFAULT_TAU, allocate_ranks
from .compression import lra_truncate
from .metrics import analyze_model, stable_rank
from .spectral import ESD, pl_alpha_hill
from .tensorio import BlockGrouping, WeightStore

DEFAULT_ALPHA_GRID = (1.5, 2.0, 2.5, 3.0, 3.5, 4.0)
DEFAULT_N = 10_000
DEFAULT_SEEDS = 5
CORRELATION_COLUMNS = ("alpha_true", "seed", "alpha_hill", "stable_rank")


@dataclass(frozen=True)
class SyntheticEnsemble:
    alpha_true: float
    n: int
    seed: int
    eigenvalues: np.ndarray

    @property
    def esd(self) -> ESD:
        return ESD(self.eigenvalues)


def uniform_stream(seed: int, n: int) -> np.ndarray:
    """n draws from (0, 1] under the documented generator."""
    rng = np.random.Generator(np.random.PCG64(seed))
    return 1.0 - rng.random(n)


def sample_pareto_esd(alpha_true: float, n: int, seed: int) -> SyntheticEnsemble:
    if alpha_true <= 1:
        raise ValueError(f"alpha_true must exceed 1 (shape alpha-1 > 0), got {alpha_true}")
    if n < 10:
        raise ValueError(f"need n >= 10, got {n}")
    u = uniform_stream(seed, n)
    lam = np.sort(u ** (-1.0 / (alpha_true - 1.0)))
    lam.setflags(write=False)
    return SyntheticEnsemble(float(alpha_true), int(n), int(seed), lam)


@dataclass
class CorrelationResult:
    rows: list[dict]
    pearson_r: float | None

    def mean_by_alpha(self, column: str) -> dict[float, float]:
        groups: dict[float, list[float]] = {}
        for row in self.rows:
            groups.setdefault(row["alpha_true"], []).append(row[column])
        return {a: float(np.mean(v)) for a, v in sorted(groups.items())}


def pearson(x: Sequence[float], y: Sequence[float]) -> float | None:
    """Sample correlation, or None when either side has no spread."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2:
        return None
    dx, dy = x - x.mean(), y - y.mean()
    denom = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if denom == 0:
        return None
    return float(dx @ dy) / denom


def correlation_experiment(
    alpha_grid: Sequence[float] = DEFAULT_ALPHA_GRID,
    n: int = DEFAULT_N,
    seeds: Sequence[int] | int = DEFAULT_SEEDS,
    base_seed: int = 0,
) -> CorrelationResult:
    """Hill alpha and stable rank for one Pareto ensemble per (alpha, seed).

    An integer ``seeds`` means ``base_seed, base_seed+1, ...``. The Pearson r
    is None when there is a single grid point (no spread in the design).
    """
    if isinstance(seeds, int):
        seeds = [base_seed + i for i in range(seeds)]
    rows = []
    for alpha in alpha_grid:
        for seed in seeds:
            ens = sample_pareto_esd(alpha, n, seed)
            esd = ens.esd
            rows.append(
                {
                    "alpha_true": float(alpha),
                    "seed": int(seed),
                    "alpha_hill": pl_alpha_hill(esd).alpha,
                    "stable_rank": stable_rank(esd),
                }
            )
    r = None
    if len(set(alpha_grid)) > 1:
        r = pearson([row["alpha_hill"] for row in rows], [row["stable_rank"] for row in rows])
    return CorrelationResult(rows, r)


def lra_strategy_experiment(
    store: WeightStore,
    grouping: BlockGrouping,
    keep_budget: int,
    *,
    metric: str = "alpha_hill",
    tau: float = DEFAULT_TAU,
    threads: int = 1,
) -> dict:
    """Rank budgets under both strategies and the reconstruction error each gives.

    Qualities are per matrix. ``total_error`` is the Frobenius norm of the
    concatenated residuals, √Σ‖W_i - Ŵ_i‖².
    """
    analysis = analyze_model(store, grouping, metric, threads=threads)
    names = [m.name for m in analysis.matrices]
    q = []
    for m in analysis.matrices:
        v = m.value(metric)
        if v is None:
            raise ValueError(f"matrix {m.name!r} has no usable {metric}: {m.error}")
        q.append(v)
    full = [min(store[n].shape) for n in names]

    report = {"metric": metric, "tau": tau, "keep_budget": int(keep_budget), "full_ranks": dict(zip(names, full)), "strategies": {}}
    for strategy in ("more_on_ht", "less_on_ht"):
        plan = allocate_ranks(q, full, keep_budget, strategy, tau=tau, names=names)
        errors = {}
        for name in names:
            _, err = lra_truncate(store.matrix(name), plan.per_layer[name])
            errors[name] = err
        report["strategies"][strategy] = {
            "ranks": dict(plan.per_layer),
            "errors": errors,
            "total_error": math.sqrt(sum(e * e for e in errors.values())),
        }
    return report
