"""Per-matrix spectral metrics and their per-block aggregation."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import SpectraPruneError, SpectrumError
from .spectral import ESD, PLFit, compute_esd, pl_alpha_hill
from .tensorio import BlockGrouping, WeightStore

METRICS = ("alpha_hill", "alpha_hat", "stable_rank", "entropy", "frobenius", "spectral")
# σ_i > RANK_RTOL * σ_max counts toward the numerical rank
RANK_RTOL = 1e-12

REPORT_COLUMNS = (
    "name",
    "block",
    "d",
    "alpha_hill",
    "alpha_hat",
    "stable_rank",
    "entropy",
    "frobenius_sq",
    "spectral_sq",
    "k",
    "lambda_min",
    "lambda_max",
    "fallback_used",
)


def alpha_hat(fit: PLFit) -> float:
    """PL exponent weighted by the log of the largest eigenvalue."""
    if fit.lambda_max <= 0:
        raise SpectrumError("alpha_hat needs a positive lambda_max")
    return fit.alpha * math.log(fit.lambda_max)


def stable_rank(esd: ESD) -> float:
    lam = esd.eigenvalues
    if lam[-1] <= 0:
        raise SpectrumError("stable rank of an all-zero spectrum is undefined")
    return float(lam.sum() / lam[-1])


def entropy(esd: ESD) -> float:
    """Normalized spectral entropy in [0, 1]; 0 when the numerical rank is <= 1."""
    lam = esd.eigenvalues
    if lam[-1] <= 0:
        raise SpectrumError("entropy of an all-zero spectrum is undefined")
    # σ > tol·σ_max  <=>  λ > tol²·λ_max
    pos = lam[lam > RANK_RTOL**2 * lam[-1]]
    rank = pos.size
    if rank <= 1:
        return 0.0
    p = pos / pos.sum()
    value = float(-np.sum(p * np.log(p)) / math.log(rank))
    return min(max(value, 0.0), 1.0)


def scale_norms(esd: ESD) -> tuple[float, float]:
    """(‖W‖_F², ‖W‖₂²) read off the spectrum."""
    lam = esd.eigenvalues
    return float(lam.sum()), float(lam[-1])


@dataclass
class MatrixMetrics:
    name: str
    d: int
    block: int | None = None
    alpha_hill: float | None = None
    alpha_hat: float | None = None
    stable_rank: float | None = None
    entropy: float | None = None
    frobenius_sq: float | None = None
    spectral_sq: float | None = None
    fit: PLFit | None = None
    error: str | None = None

    def value(self, metric: str) -> float | None:
        key = {"frobenius": "frobenius_sq", "spectral": "spectral_sq"}.get(metric, metric)
        v = getattr(self, key)
        return v if v is not None and math.isfinite(v) else None

    def row(self) -> dict:
        fit = self.fit
        return {
            "name": self.name,
            "block": self.block,
            "d": self.d,
            "alpha_hill": self.alpha_hill,
            "alpha_hat": self.alpha_hat,
            "stable_rank": self.stable_rank,
            "entropy": self.entropy,
            "frobenius_sq": self.frobenius_sq,
            "spectral_sq": self.spectral_sq,
            "k": fit.k if fit else None,
            "lambda_min": fit.lambda_min if fit else None,
            "lambda_max": fit.lambda_max if fit else None,
            "fallback_used": fit.fallback_used if fit else None,
        }


@dataclass
class BlockQuality:
    block_index: int
    q: float
    d: int
    members: list[str]
    failures: list[str] = field(default_factory=list)


@dataclass
class Analysis:
    metric: str
    matrices: list[MatrixMetrics]
    blocks: list[BlockQuality]

    def by_name(self) -> dict[str, MatrixMetrics]:
        return {m.name: m for m in self.matrices}

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "metric": self.metric,
            "matrices": [dict(m.row(), error=m.error) for m in self.matrices],
            "blocks": [asdict(b) for b in self.blocks],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Analysis":
        matrices = []
        for row in obj["matrices"]:
            fit = None
            if row.get("k") is not None:
                fit = PLFit(
                    alpha=row["alpha_hill"],
                    k=row["k"],
                    lambda_min=row["lambda_min"],
                    lambda_max=row["lambda_max"],
                    n=-1,
                    fallback_used=bool(row.get("fallback_used")),
                )
            matrices.append(
                MatrixMetrics(
                    name=row["name"],
                    d=row["d"],
                    block=row.get("block"),
                    alpha_hill=row.get("alpha_hill"),
                    alpha_hat=row.get("alpha_hat"),
                    stable_rank=row.get("stable_rank"),
                    entropy=row.get("entropy"),
                    frobenius_sq=row.get("frobenius_sq"),
                    spectral_sq=row.get("spectral_sq"),
                    fit=fit,
                    error=row.get("error"),
                )
            )
        blocks = [BlockQuality(**b) for b in obj["blocks"]]
        return cls(obj["metric"], matrices, blocks)


def matrix_metrics(W, name: str = "", d: int | None = None, block: int | None = None) -> MatrixMetrics:
    """All metrics for one matrix. Failures are recorded on the result, not raised."""
    W = np.asarray(W)
    mm = MatrixMetrics(name=name, d=int(d if d is not None else W.size), block=block)
    try:
        esd = compute_esd(W, name)
    except SpectrumError as exc:
        mm.error = str(exc)
        return mm
    if esd.lambda_max <= 0:
        mm.frobenius_sq, mm.spectral_sq = 0.0, 0.0
        mm.error = "all-zero spectrum"
        return mm
    mm.frobenius_sq, mm.spectral_sq = scale_norms(esd)
    mm.stable_rank = stable_rank(esd)
    mm.entropy = entropy(esd)
    try:
        fit = pl_alpha_hill(esd)
    except SpectrumError as exc:
        mm.error = f"power-law fit failed: {exc}"
        return mm
    mm.fit = fit
    mm.alpha_hill = fit.alpha
    mm.alpha_hat = alpha_hat(fit)
    return mm


def analyze_model(
    store: WeightStore,
    grouping: BlockGrouping,
    metric: str = "alpha_hill",
    threads: int = 1,
) -> Analysis:
    """Metrics for every grouped matrix and the per-block mean of ``metric``.

    Block means skip members whose metric could not be computed (they are
    listed in ``failures``); a block with no usable member is an error.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")
    jobs = []
    for block in grouping.blocks:
        for name in block.names:
            if name not in store:
                raise SpectraPruneError(f"grouped tensor {name!r} is not in the store")
            jobs.append((name, block.index))

    def run(job):
        name, idx = job
        return matrix_metrics(store.matrix(name), name, store.param_count(name), idx)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    by_name = {m.name: m for m in results}
    blocks = []
    for block in grouping.blocks:
        ok, failed = [], []
        for name in block.names:
            (ok if by_name[name].value(metric) is not None else failed).append(name)
        if not ok:
            reasons = "; ".join(f"{n}: {by_name[n].error}" for n in failed)
            raise SpectrumError(f"block {block.index} has no matrix with a usable {metric} ({reasons})")
        q = float(np.mean([by_name[n].value(metric) for n in ok]))
        d = sum(by_name[n].d for n in block.names)
        blocks.append(BlockQuality(block.index, q, d, list(block.names), failed))
    return Analysis(metric, results, blocks)
