"""Apply budgets to weight matrices.

Magnitude pruning zeroes ``round(s·d)`` entries (half away from zero),
smallest |w| first with ties going to the earlier row-major index. N:M
groups run along rows. Quantization is symmetric per-matrix
round-to-nearest with half-to-even rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .allocation import BudgetPlan, SparsityPlan
from .errors import PlanError, SpectraPruneError
from .tensorio import WeightStore

# ‖W - Ŵ‖_F must agree with the singular-value tail to this relative accuracy
ECKART_YOUNG_RTOL = 1e-5


@dataclass(frozen=True)
class PruneMask:
    keep: np.ndarray  # bool, same shape as the matrix

    @property
    def kept_count(self) -> int:
        return int(np.count_nonzero(self.keep))

    @property
    def sparsity(self) -> float:
        return 1.0 - self.kept_count / self.keep.size


def zero_count(s: float, d: int) -> int:
    """round(s·d), halves rounded away from zero."""
    return min(d, int(math.floor(s * d + 0.5)))


def magnitude_prune(W, s: float) -> tuple[np.ndarray, PruneMask]:
    """Zero the round(s·d) smallest-magnitude entries of ``W``.

    >>> out, mask = magnitude_prune(np.array([[1., -2.], [3., -4.]]), 0.5)
    >>> out.tolist()
    [[0.0, 0.0], [3.0, -4.0]]
    """
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"sparsity must lie in [0, 1], got {s}")
    W = np.asarray(W)
    z = zero_count(s, W.size)
    flat = W.reshape(-1)
    order = np.argsort(np.abs(flat), kind="stable")
    keep = np.ones(W.size, dtype=bool)
    keep[order[:z]] = False
    out = flat.copy()
    out[~keep] = 0
    return out.reshape(W.shape), PruneMask(keep.reshape(W.shape))


def nm_prune(W, N: int, M: int) -> tuple[np.ndarray, PruneMask]:
    """Keep the N largest |w| in every run of M consecutive row entries."""
    W = np.asarray(W)
    if W.ndim != 2:
        raise ValueError("nm_prune expects a matrix")
    if not 1 <= N <= M:
        raise ValueError(f"need 1 <= N <= M, got N={N}, M={M}")
    rows, cols = W.shape
    if cols % M:
        raise ValueError(f"column count {cols} is not divisible by M={M}")
    groups = W.reshape(rows, cols // M, M)
    rank = np.argsort(-np.abs(groups), axis=-1, kind="stable")
    keep = np.zeros(groups.shape, dtype=bool)
    np.put_along_axis(keep, rank[..., :N], True, axis=-1)
    keep = keep.reshape(W.shape)
    out = W.copy()
    out[~keep] = 0
    return out, PruneMask(keep)


def rtn_quantize(W, bits: int) -> np.ndarray:
    """Symmetric per-matrix round-to-nearest; returns dequantized float32."""
    if not 2 <= bits <= 8:
        raise ValueError(f"bits must lie in [2, 8], got {bits}")
    W = np.asarray(W, dtype=np.float32)
    amax = float(np.max(np.abs(W))) if W.size else 0.0
    if amax == 0.0:
        return W.copy()
    qmax = 2 ** (bits - 1) - 1
    scale = amax / qmax
    codes = np.clip(np.round(W.astype(np.float64) / scale), -qmax, qmax)
    return (codes * scale).astype(np.float32)


def lra_truncate(W, r: int) -> tuple[np.ndarray, float]:
    """Best rank-r approximation and its Frobenius error √Σ_{i>r} σ_i²."""
    W64 = np.asarray(W, dtype=np.float64)
    if W64.ndim != 2:
        raise ValueError("lra_truncate expects a matrix")
    full = min(W64.shape)
    if not 1 <= r <= full:
        raise ValueError(f"rank must lie in [1, {full}], got {r}")
    U, sv, Vt = np.linalg.svd(W64, full_matrices=False)
    approx = (U[:, :r] * sv[:r]) @ Vt[:r]
    tail = float(np.sqrt(np.sum(sv[r:] ** 2)))
    direct = float(np.linalg.norm(W64 - approx))
    # the subtraction is only accurate to ~eps·‖W‖, so that bounds the check too
    slack = max(ECKART_YOUNG_RTOL * tail, 64 * np.finfo(np.float64).eps * float(sv[0]) * math.sqrt(full))
    if abs(direct - tail) > slack:
        raise SpectraPruneError(
            f"Eckart-Young check failed: ‖W-Ŵ‖={direct!r} vs tail norm {tail!r}"
        )
    return approx, tail


@dataclass
class MatrixReport:
    name: str
    d: int
    kind: str
    target: float
    achieved_sparsity: float
    bits: int | None = None
    rank: int | None = None
    reconstruction_error: float | None = None


@dataclass
class CompressionReport:
    matrices: list[MatrixReport] = field(default_factory=list)

    @property
    def global_sparsity(self) -> float:
        total = sum(m.d for m in self.matrices)
        if total == 0:
            return 0.0
        zeros = sum(round(m.achieved_sparsity * m.d) for m in self.matrices)
        return zeros / total

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "global_sparsity": self.global_sparsity,
            "matrices": [vars(m).copy() for m in self.matrices],
        }


REPORT_COLUMNS = ("name", "d", "kind", "target", "achieved_sparsity", "bits", "rank", "reconstruction_error")


def _validate(store: WeightStore, names) -> None:
    problems = []
    for name in names:
        if name not in store:
            problems.append(f"{name!r} not in checkpoint")
        elif store[name].ndim != 2:
            problems.append(f"{name!r} is {store[name].ndim}-D")
    if problems:
        raise PlanError("plan does not match checkpoint: " + "; ".join(problems))


def apply_plan(store: WeightStore, plan: SparsityPlan | BudgetPlan) -> tuple[WeightStore, CompressionReport]:
    """Transform every tensor named in ``plan``; all-or-nothing on mismatch."""
    if isinstance(plan, SparsityPlan):
        targets = plan.per_matrix
        kind = "sparsity"
    elif isinstance(plan, BudgetPlan):
        targets = plan.per_layer
        kind = plan.kind
        if kind == "nm" and not plan.group_size:
            raise PlanError("N:M plan lacks group_size")
        if kind not in ("nm", "bits", "ranks"):
            raise PlanError(f"unknown budget kind {kind!r}")
    else:
        raise TypeError(f"unsupported plan type {type(plan).__name__}")
    _validate(store, targets)
    if kind == "nm":
        bad = [n for n in targets if store[n].shape[1] % plan.group_size]
        if bad:
            raise PlanError(f"columns not divisible by M={plan.group_size}: {bad}")
    if kind == "ranks":
        bad = [n for n, r in targets.items() if not 1 <= r <= min(store[n].shape)]
        if bad:
            raise PlanError(f"rank out of range for {bad}")

    updates = {}
    report = CompressionReport()
    for name, value in targets.items():
        W = store.matrix(name)
        d = W.size
        entry = MatrixReport(name=name, d=d, kind=kind, target=float(value), achieved_sparsity=0.0)
        if kind == "sparsity":
            out, _ = magnitude_prune(W, float(value))
        elif kind == "nm":
            out, _ = nm_prune(W, int(value), plan.group_size)
        elif kind == "bits":
            out = rtn_quantize(W, int(value))
            entry.bits = int(value)
            entry.reconstruction_error = float(np.linalg.norm(W.astype(np.float64) - out))
        else:
            out, err = lra_truncate(W, int(value))
            entry.rank = int(value)
            entry.reconstruction_error = err
        updates[name] = out
        report.matrices.append(entry)
    new_store = store.replace(updates)
    for entry in report.matrices:
        stored = new_store[entry.name].values()
        entry.achieved_sparsity = float(np.count_nonzero(stored == 0)) / entry.d
    return new_store, report
