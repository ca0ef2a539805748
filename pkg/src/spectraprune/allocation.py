"""Turn layer qualities into sparsity, N:M, bit-width and rank budgets.

The central map sends a quality vector q to per-layer sparsities

    φ_i = η · [ (q_i - q_min) / (q_max - q_min) · (s2 - s1) + s1 ]

with η chosen so that Σ φ_i d_i = S · Σ d_i. Larger q (lighter tail) gets
larger sparsity. ``tau`` is shorthand for ``s1 = 1 - tau, s2 = 1 + tau``.

Values pushed outside [0, 1] are pinned to the bound and η is re-solved over
the remaining layers until nothing moves, which keeps the budget exact and
the ordering monotone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import AllocationError, InfeasibleBudgetError
from .tensorio import BlockGrouping

DEFAULT_TAU = 0.2
TAU_SWEEP = (0.1, 0.2, 0.3, 0.4, 0.5)
GRANULARITIES = ("per_block", "per_matrix", "mixed")

# +1: larger value means lighter tail / less well trained, so prune more.
# -1: the metric runs the other way and is negated before mapping.
METRIC_SIGN = {
    "alpha_hill": 1.0,
    "alpha_hat": 1.0,
    "stable_rank": -1.0,
    "entropy": -1.0,
    "frobenius": 1.0,
    "spectral": 1.0,
}


def quality_from_metric(values: Sequence[float], metric: str) -> np.ndarray:
    """Apply the metric's sign so that larger quality means prune more."""
    try:
        sign = METRIC_SIGN[metric]
    except KeyError:
        raise AllocationError(f"no direction registered for metric {metric!r}") from None
    return sign * np.asarray(values, dtype=np.float64)


def tau_endpoints(tau: float) -> tuple[float, float]:
    if not 0 <= tau <= 1:
        raise AllocationError(f"tau must lie in [0, 1], got {tau}")
    return 1.0 - tau, 1.0 + tau


@dataclass
class SparsityPlan:
    per_matrix: dict[str, float]
    target: float
    s1: float
    s2: float
    eta: float
    granularity: str = "per_block"
    tau: float | None = None
    metric: str | None = None
    clamped: list[str] = field(default_factory=list)
    tau_matrix: float | None = None

    def ratios(self, names: Sequence[str]) -> np.ndarray:
        return np.array([self.per_matrix[n] for n in names], dtype=np.float64)

    def global_sparsity(self, d: Mapping[str, int]) -> float:
        total = sum(d[n] for n in self.per_matrix)
        return sum(self.per_matrix[n] * d[n] for n in self.per_matrix) / total

    def to_dict(self) -> dict:
        out = {
            "version": 1,
            "metric": self.metric,
            "granularity": self.granularity,
            "S": self.target,
            "tau": self.tau,
            "s1": self.s1,
            "s2": self.s2,
            "eta": self.eta,
            "clamped": list(self.clamped),
            "per_matrix": dict(self.per_matrix),
        }
        if self.tau_matrix is not None:
            out["tau_matrix"] = self.tau_matrix
        return out

    @classmethod
    def from_dict(cls, obj: Mapping) -> "SparsityPlan":
        return cls(
            per_matrix={str(k): float(v) for k, v in obj["per_matrix"].items()},
            target=float(obj["S"]),
            s1=float(obj["s1"]),
            s2=float(obj["s2"]),
            eta=float(obj["eta"]),
            granularity=obj.get("granularity", "per_block"),
            tau=obj.get("tau"),
            metric=obj.get("metric"),
            clamped=list(obj.get("clamped", [])),
            tau_matrix=obj.get("tau_matrix"),
        )


@dataclass
class BudgetPlan:
    kind: str  # "nm", "bits" or "ranks"
    per_layer: dict[str, int]
    budget: float
    options: list[int]
    group_size: int | None = None  # M, for kind == "nm"

    def to_dict(self) -> dict:
        out = {
            "kind": self.kind,
            "budget": self.budget,
            "options": list(self.options),
            "per_layer": dict(self.per_layer),
        }
        if self.group_size is not None:
            out["group_size"] = self.group_size
        return out

    @classmethod
    def from_dict(cls, obj: Mapping) -> "BudgetPlan":
        return cls(
            kind=obj["kind"],
            per_layer={str(k): int(v) for k, v in obj["per_layer"].items()},
            budget=float(obj["budget"]),
            options=[int(o) for o in obj.get("options", [])],
            group_size=obj.get("group_size"),
        )


def plan_from_dict(obj: Mapping) -> SparsityPlan | BudgetPlan:
    return BudgetPlan.from_dict(obj) if "kind" in obj else SparsityPlan.from_dict(obj)


# --------------------------------------------------------------------------
# the linear map


def _resolve_endpoints(s1, s2, tau) -> tuple[float, float]:
    if tau is not None:
        if s1 is not None or s2 is not None:
            raise AllocationError("give either tau or (s1, s2), not both")
        return tau_endpoints(tau)
    if s1 is None or s2 is None:
        s1, s2 = tau_endpoints(DEFAULT_TAU)
    if s2 < s1:
        raise AllocationError(f"s2 ({s2}) must not be smaller than s1 ({s1})")
    if s1 < 0:
        raise AllocationError(f"s1 must be nonnegative, got {s1}")
    return float(s1), float(s2)


def map_sparsity(q, d, S: float, s1: float, s2: float) -> tuple[np.ndarray, float, np.ndarray]:
    """Solve the normalized linear map with clamping.

    Returns ``(phi, eta, clamped_mask)``. ``eta`` is the factor applied to
    the unclamped layers after the last re-solve.
    """
    q = np.asarray(q, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if q.ndim != 1 or q.shape != d.shape or q.size < 1:
        raise AllocationError("q and d must be aligned non-empty vectors")
    if not np.all(np.isfinite(q)):
        raise AllocationError("q contains non-finite values")
    if np.any(d <= 0):
        raise AllocationError("parameter counts must be positive")
    if not 0 < S < 1:
        raise AllocationError(f"target sparsity must lie in (0, 1), got {S}")
    if s2 < s1:
        raise AllocationError(f"s2 ({s2}) must not be smaller than s1 ({s1})")
    if s1 < 0:
        raise AllocationError(f"s1 must be nonnegative, got {s1}")

    L = q.size
    qmin, qmax = q.min(), q.max()
    if qmax == qmin or s1 == s2:
        # every layer maps to s1; assigned exactly rather than via η·s1
        return np.full(L, S), (S / s1 if s1 > 0 else S), np.zeros(L, bool)

    raw = (q - qmin) / (qmax - qmin) * (s2 - s1) + s1
    budget = S * d.sum()
    phi = np.empty(L)
    fixed = np.zeros(L, dtype=bool)  # pinned to 0 or 1
    eta = math.nan
    for _ in range(L + 1):
        free = ~fixed
        remaining = budget - np.sum(phi[fixed] * d[fixed])
        weight = np.sum(raw[free] * d[free])
        if weight <= 0:
            if abs(remaining) <= 1e-12 * budget:
                phi[free] = 0.0
                eta = 0.0
                break
            raise InfeasibleBudgetError(
                "remaining layers have zero mapped sparsity but budget is left over"
            )
        eta = remaining / weight
        phi[free] = eta * raw[free]
        over = free & (phi > 1.0)
        under = free & (phi < 0.0)
        if not over.any() and not under.any():
            break
        phi[over] = 1.0
        phi[under] = 0.0
        fixed |= over | under
        if fixed.all():
            raise InfeasibleBudgetError(f"target sparsity {S} cannot be met within [0, 1]")
    else:  # pragma: no cover - each pass pins at least one layer
        raise InfeasibleBudgetError("clamping did not converge")
    return phi, float(eta), fixed


def allocate_sparsity(
    q,
    d,
    S: float,
    s1: float | None = None,
    s2: float | None = None,
    *,
    tau: float | None = None,
    names: Sequence[str] | None = None,
    metric: str | None = None,
) -> SparsityPlan:
    """Per-block sparsities from block qualities ``q`` and sizes ``d``.

    >>> plan = allocate_sparsity([1, 2, 3], [10, 10, 10], 0.5, 0.8, 1.2)
    >>> [round(v, 12) for v in plan.per_matrix.values()]
    [0.4, 0.5, 0.6]
    """
    s1, s2 = _resolve_endpoints(s1, s2, tau)
    phi, eta, clamped = map_sparsity(q, d, S, s1, s2)
    if names is None:
        names = [str(i) for i in range(len(phi))]
    if len(names) != len(phi):
        raise AllocationError("names must align with q")
    return SparsityPlan(
        per_matrix={n: float(v) for n, v in zip(names, phi)},
        target=S,
        s1=s1,
        s2=s2,
        eta=eta,
        granularity="per_block",
        tau=tau if tau is not None else _implied_tau(s1, s2),
        metric=metric,
        clamped=[n for n, c in zip(names, clamped) if c],
    )


def _implied_tau(s1: float, s2: float) -> float | None:
    return 1.0 - s1 if math.isclose(s1 + s2, 2.0, abs_tol=1e-12) else None


def expand_to_matrices(
    plan: SparsityPlan,
    grouping: BlockGrouping,
    param_counts: Mapping[str, int],
    rtol: float = 1e-9,
) -> SparsityPlan:
    """Give every matrix its block's sparsity; keys of ``plan`` are block indices as strings."""
    per_matrix: dict[str, float] = {}
    clamped: list[str] = []
    for block in grouping.blocks:
        key = str(block.index)
        if key not in plan.per_matrix:
            raise AllocationError(f"plan has no sparsity for block {block.index}")
        for name in block.names:
            if name not in param_counts:
                raise AllocationError(f"matrix {name!r} of block {block.index} is missing from the store")
            per_matrix[name] = plan.per_matrix[key]
            if key in plan.clamped:
                clamped.append(name)
    out = SparsityPlan(
        per_matrix=per_matrix,
        target=plan.target,
        s1=plan.s1,
        s2=plan.s2,
        eta=plan.eta,
        granularity=plan.granularity,
        tau=plan.tau,
        metric=plan.metric,
        clamped=clamped,
        tau_matrix=plan.tau_matrix,
    )
    check_budget(out, param_counts, rtol)
    return out


def check_budget(plan: SparsityPlan, param_counts: Mapping[str, int], rtol: float = 1e-9) -> None:
    """Raise unless Σ s_i d_i = S Σ d_i to relative ``rtol``."""
    total = sum(param_counts[n] for n in plan.per_matrix)
    kept = sum(plan.per_matrix[n] * param_counts[n] for n in plan.per_matrix)
    if abs(kept - plan.target * total) > rtol * total:
        raise InfeasibleBudgetError(
            f"plan misses its budget: {kept / total:.12f} vs target {plan.target}"
        )
    bad = [n for n, s in plan.per_matrix.items() if not 0.0 <= s <= 1.0]
    if bad:
        raise AllocationError(f"sparsities outside [0, 1]: {bad}")


def allocate_per_matrix(
    q_by_name: Mapping[str, float],
    d_by_name: Mapping[str, int],
    S: float,
    s1: float | None = None,
    s2: float | None = None,
    *,
    tau: float | None = None,
    metric: str | None = None,
) -> SparsityPlan:
    names = list(q_by_name)
    plan = allocate_sparsity(
        [q_by_name[n] for n in names], [d_by_name[n] for n in names], S, s1, s2,
        tau=tau, names=names, metric=metric,
    )
    plan.granularity = "per_matrix"
    return plan


def allocate_mixed(
    block_q: Sequence[float],
    matrix_q: Sequence[Mapping[str, float]],
    matrix_d: Sequence[Mapping[str, int]],
    S: float,
    tau_block: float,
    tau_matrix: float,
    metric: str | None = None,
) -> SparsityPlan:
    """Block sparsities first, then the same map re-applied inside each block.

    ``matrix_q[b]`` / ``matrix_d[b]`` hold the members of block ``b``. Each
    block's members share that block's budget, so the global budget holds.
    """
    if not len(block_q) == len(matrix_q) == len(matrix_d):
        raise AllocationError("block_q, matrix_q and matrix_d must align")
    block_d = [sum(md.values()) for md in matrix_d]
    outer = allocate_sparsity(block_q, block_d, S, tau=tau_block)
    phi_blocks = outer.ratios([str(i) for i in range(len(block_q))])
    m1, m2 = tau_endpoints(tau_matrix)

    per_matrix: dict[str, float] = {}
    clamped: list[str] = []
    for b, (mq, md) in enumerate(zip(matrix_q, matrix_d)):
        names = list(mq)
        if set(names) != set(md):
            raise AllocationError(f"block {b}: qualities and sizes cover different matrices")
        target = float(phi_blocks[b])
        if target <= 0.0 or target >= 1.0:
            for n in names:
                per_matrix[n] = target
            clamped.extend(names)
            continue
        phi, _, fixed = map_sparsity([mq[n] for n in names], [md[n] for n in names], target, m1, m2)
        for n, v, c in zip(names, phi, fixed):
            per_matrix[n] = float(v)
            if c:
                clamped.append(n)
    return SparsityPlan(
        per_matrix=per_matrix,
        target=S,
        s1=outer.s1,
        s2=outer.s2,
        eta=outer.eta,
        granularity="mixed",
        tau=tau_block,
        metric=metric,
        clamped=clamped,
        tau_matrix=tau_matrix,
    )


def min_sparsity_endpoints(
    S: float, min_sparsity: float, q, d, tol: float = 1e-12, max_iter: int = 200
) -> tuple[float, float]:
    """Endpoints ``(s1, 2 - s1)`` whose plan has smallest sparsity ``min_sparsity``.

    The smallest layer sparsity grows monotonically with s1 (it equals S at
    s1 = 1 and 0 at s1 = 0), so plain bisection on s1 suffices.
    """
    if not 0 < min_sparsity < S:
        raise InfeasibleBudgetError(f"minimum sparsity must lie in (0, S={S}), got {min_sparsity}")
    q = np.asarray(q, dtype=np.float64)
    if q.size < 2 or q.max() == q.min():
        raise InfeasibleBudgetError("constant qualities always give the uniform plan")

    def smallest(s1: float) -> float:
        phi, _, _ = map_sparsity(q, d, S, s1, 2.0 - s1)
        return float(phi.min())

    lo, hi = 0.0, 1.0
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        value = smallest(mid)
        if abs(value - min_sparsity) <= tol:
            return mid, 2.0 - mid
        if value < min_sparsity:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-15:
            break
    mid = 0.5 * (lo + hi)
    return mid, 2.0 - mid


# --------------------------------------------------------------------------
# integer budgets


def _names(names, L):
    if names is None:
        return [str(i) for i in range(L)]
    if len(names) != L:
        raise AllocationError("names must align with q")
    return list(names)


def allocate_nm(
    q,
    d,
    M: int,
    target_density: float,
    *,
    tau: float = DEFAULT_TAU,
    names: Sequence[str] | None = None,
) -> BudgetPlan:
    """Per-layer N for N:M sparsity, keeping ``target_density`` of the weights.

    Continuous densities come from the sparsity map at S = 1 - density and
    are rounded to N = round(density·M) in [1, M]. N is then stepped one
    unit at a time (largest rounding residual first, never breaking the
    rule that a lower-q layer keeps at least as many weights as a higher-q
    one) until the kept count is as close to the target as a single step
    allows.
    """
    q = np.asarray(q, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    names = _names(names, q.size)
    if M < 2:
        raise AllocationError(f"group size M must be at least 2, got {M}")
    if not 0 < target_density <= 1:
        raise AllocationError(f"target density must lie in (0, 1], got {target_density}")
    options = list(range(1, M + 1))
    if target_density == 1:
        return BudgetPlan("nm", {n: M for n in names}, 1.0, options, M)
    total = d.sum()
    target = target_density * total
    if target < total / M - 1e-9 * total:
        raise InfeasibleBudgetError(f"density {target_density} is below 1/M with every N >= 1")

    phi, _, _ = map_sparsity(q, d, 1.0 - target_density, *tau_endpoints(tau))
    ideal = (1.0 - phi) * M
    N = np.clip(np.floor(ideal + 0.5), 1, M).astype(int)
    order_lo = np.lexsort((np.arange(q.size), q))  # ascending q, index tie-break

    def can_step(i: int, delta: int) -> bool:
        new = N[i] + delta
        if not 1 <= new <= M:
            return False
        if delta > 0:  # every strictly lower-q layer must stay >= new
            return bool(np.all(N[q < q[i]] >= new))
        return bool(np.all(N[q > q[i]] <= new))

    kept = float(np.sum(N * d) / M)
    for _ in range(int(M * q.size) + 1):
        gap = target - kept
        delta = 1 if gap > 0 else -1
        cands = [i for i in order_lo if can_step(i, delta)]
        if gap == 0 or not cands:
            break
        # largest residual in the stepping direction; lower q first when stepping up
        if delta > 0:
            best = max(cands, key=lambda i: (ideal[i] - N[i], -q[i], -i))
        else:
            best = max(cands, key=lambda i: (N[i] - ideal[i], q[i], i))
        step = d[best] / M
        if abs(gap - delta * step) >= abs(gap):
            break
        N[best] += delta
        kept += delta * step
    return BudgetPlan("nm", {n: int(v) for n, v in zip(names, N)}, float(target_density), options, M)


def allocate_bits(
    q,
    d,
    options: Sequence[int],
    target_avg_bits: float,
    *,
    names: Sequence[str] | None = None,
) -> BudgetPlan:
    """Bit-widths, most heavy-tailed (lowest q) layers first.

    Starting with every layer at the smallest option, layers are visited in
    ascending q and each is raised to the widest option that still fits the
    budget Σ bits·d ≤ target·Σd, never above the layer before it. Layers with
    equal q are raised together; if only some of them fit, lower indices go
    first.
    """
    opts = sorted(set(int(o) for o in options))
    if not opts:
        raise AllocationError("options must be non-empty")
    q = np.asarray(q, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    names = _names(names, q.size)
    if not opts[0] <= target_avg_bits <= opts[-1]:
        raise InfeasibleBudgetError(f"target {target_avg_bits} outside [{opts[0]}, {opts[-1]}]")

    budget = target_avg_bits * d.sum()
    bits = np.full(q.size, opts[0], dtype=int)
    used = float(np.sum(bits * d))
    slack_tol = 1e-9 * budget
    cap = opts[-1]

    for level in np.unique(q):
        group = [i for i in np.flatnonzero(q == level)]
        gd = float(d[group].sum())
        level_bits = opts[0]
        for o in opts:
            if o > cap:
                break
            if used + (o - opts[0]) * gd <= budget + slack_tol:
                level_bits = o
        bits[group] = level_bits
        used += (level_bits - opts[0]) * gd
        nxt = [o for o in opts if o > level_bits and o <= cap]
        if nxt:
            # partial raise of the tied layers, by index
            for i in group:
                extra = (nxt[0] - level_bits) * d[i]
                if used + extra <= budget + slack_tol:
                    bits[i] = nxt[0]
                    used += extra
        cap = int(bits[group].min())
    return BudgetPlan("bits", {n: int(b) for n, b in zip(names, bits)}, float(target_avg_bits), opts)


def allocate_ranks(
    q,
    full_ranks,
    keep_budget: int,
    strategy: str = "more_on_ht",
    *,
    tau: float = DEFAULT_TAU,
    names: Sequence[str] | None = None,
) -> BudgetPlan:
    """Kept ranks per layer with Σ kept = ``keep_budget``.

    ``more_on_ht`` compresses heavy-tailed (low q) layers harder, i.e. keeps
    a fraction that grows with q; ``less_on_ht`` maps -q instead.
    """
    if strategy not in ("more_on_ht", "less_on_ht"):
        raise AllocationError(f"unknown strategy {strategy!r}")
    q = np.asarray(q, dtype=np.float64)
    r = np.asarray(full_ranks, dtype=np.int64)
    names = _names(names, q.size)
    total = int(r.sum())
    if np.any(r < 1):
        raise AllocationError("full ranks must be positive")
    if not q.size <= keep_budget <= total:
        raise InfeasibleBudgetError(f"keep budget {keep_budget} outside [{q.size}, {total}]")
    if keep_budget == total:
        return BudgetPlan("ranks", {n: int(v) for n, v in zip(names, r)}, float(keep_budget), [])

    signed = q if strategy == "more_on_ht" else -q
    frac, _, _ = map_sparsity(signed, r, keep_budget / total, *tau_endpoints(tau))
    ideal = frac * r
    kept = np.clip(np.floor(ideal + 0.5), 1, r).astype(np.int64)
    # integer fix-up: move one rank at a time where the rounding residual is largest
    while kept.sum() != keep_budget:
        if kept.sum() < keep_budget:
            cands = np.flatnonzero(kept < r)
            i = cands[np.argmax(ideal[cands] - kept[cands])]
            kept[i] += 1
        else:
            cands = np.flatnonzero(kept > 1)
            i = cands[np.argmax(kept[cands] - ideal[cands])]
            kept[i] -= 1
    return BudgetPlan("ranks", {n: int(v) for n, v in zip(names, kept)}, float(keep_budget), [])


# --------------------------------------------------------------------------
# from an analysis report


def plan_from_analysis(
    analysis,
    S: float,
    granularity: str = "per_block",
    *,
    tau: float | None = None,
    s1: float | None = None,
    s2: float | None = None,
    min_sparsity: float | None = None,
    tau_matrix: float | None = None,
) -> SparsityPlan:
    """Per-matrix sparsity plan from a :class:`~spectraprune.metrics.Analysis`.

    Exactly one of ``tau``, ``(s1, s2)`` or ``min_sparsity`` may be given;
    with none, ``tau`` defaults to :data:`DEFAULT_TAU`. For ``mixed``,
    ``tau`` sets the block level and ``tau_matrix`` (default: ``tau``) the
    within-block level.
    """
    if granularity not in GRANULARITIES:
        raise AllocationError(f"granularity must be one of {GRANULARITIES}, got {granularity!r}")
    given = sum(x is not None for x in (tau, min_sparsity)) + (s1 is not None or s2 is not None)
    if given > 1:
        raise AllocationError("give only one of tau, (s1, s2) or min_sparsity")
    if (s1 is None) != (s2 is None):
        raise AllocationError("s1 and s2 must be given together")
    if given == 0:
        tau = DEFAULT_TAU

    metric = analysis.metric
    d_by_name = {m.name: m.d for m in analysis.matrices}

    if granularity == "per_block":
        blocks = analysis.blocks
        q = quality_from_metric([b.q for b in blocks], metric)
        d = [b.d for b in blocks]
        if min_sparsity is not None:
            s1, s2 = min_sparsity_endpoints(S, min_sparsity, q, d)
        plan = allocate_sparsity(
            q, d, S, s1, s2, tau=tau, names=[str(b.block_index) for b in blocks], metric=metric
        )
        from .tensorio import Block, BlockGrouping

        grouping = BlockGrouping(tuple(Block(b.block_index, tuple(b.members)) for b in blocks), ())
        return expand_to_matrices(plan, grouping, d_by_name)

    missing = [m.name for m in analysis.matrices if m.value(metric) is None]
    if missing:
        raise AllocationError(f"no usable {metric} for {missing}; per-matrix allocation needs every matrix")
    if granularity == "per_matrix":
        names = [m.name for m in analysis.matrices]
        q = quality_from_metric([analysis.by_name()[n].value(metric) for n in names], metric)
        d = [d_by_name[n] for n in names]
        if min_sparsity is not None:
            s1, s2 = min_sparsity_endpoints(S, min_sparsity, q, d)
        plan = allocate_per_matrix(dict(zip(names, q)), d_by_name, S, s1, s2, tau=tau, metric=metric)
        check_budget(plan, d_by_name)
        return plan

    if tau is None:
        raise AllocationError("mixed granularity is parameterized by tau only")
    by_name = analysis.by_name()
    block_q = quality_from_metric([b.q for b in analysis.blocks], metric)
    matrix_q, matrix_d = [], []
    for b in analysis.blocks:
        vals = quality_from_metric([by_name[n].value(metric) for n in b.members], metric)
        matrix_q.append(dict(zip(b.members, vals)))
        matrix_d.append({n: d_by_name[n] for n in b.members})
    plan = allocate_mixed(
        block_q, matrix_q, matrix_d, S, tau, tau if tau_matrix is None else tau_matrix, metric=metric
    )
    check_budget(plan, d_by_name)
    return plan
