"""Eigenspectra of weight correlation matrices and power-law tail fits.

The ESD of a matrix W is the spectrum of X = WᵀW. It is obtained from the
singular values of W (λ = σ²) rather than by forming X, which would square
the condition number.

Indexing note: the Hill estimator is written with 1-based ascending order
statistics λ_1 ≤ ... ≤ λ_n. With a 0-based array ``lam`` the reference
λ_{n-k} is ``lam[n - k - 1]`` and the top-k values are ``lam[n - k:]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSpectrumError, DegenerateTailError, SpectrumError, ZeroReferenceError

# eigenvalues at or below this fraction of λ_max are treated as zero
ZERO_EIG_RTOL = 1e-12
MIN_BINS = 10


@dataclass(frozen=True)
class ESD:
    eigenvalues: np.ndarray  # ascending, float64

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, dtype=np.float64)
        if lam.ndim != 1 or lam.size < 1:
            raise SpectrumError("an ESD needs at least one eigenvalue")
        if np.any(lam < 0) or not np.all(np.isfinite(lam)):
            raise SpectrumError("eigenvalues must be finite and nonnegative")
        if np.any(np.diff(lam) < 0):
            raise SpectrumError("eigenvalues must be sorted ascending")
        lam.setflags(write=False)
        object.__setattr__(self, "eigenvalues", lam)

    @classmethod
    def from_values(cls, values) -> "ESD":
        return cls(np.sort(np.asarray(values, dtype=np.float64)))

    def __len__(self) -> int:
        return self.eigenvalues.size

    @property
    def lambda_max(self) -> float:
        return float(self.eigenvalues[-1])

    def nonzero(self) -> np.ndarray:
        """Eigenvalues strictly above the zero threshold."""
        lam = self.eigenvalues
        return lam[lam > ZERO_EIG_RTOL * lam[-1]]


@dataclass(frozen=True)
class PLFit:
    alpha: float
    k: int
    lambda_min: float
    lambda_max: float
    n: int  # eigenvalues used by the fit (zeros dropped)
    fallback_used: bool = False


def compute_esd(W, name: str | None = None) -> ESD:
    """Squared singular values of ``W`` in ascending order."""
    W = np.asarray(W, dtype=np.float64)
    label = f" {name!r}" if name else ""
    if W.ndim != 2 or min(W.shape) < 1:
        raise SpectrumError(f"tensor{label} must be a non-empty 2-D matrix, got shape {W.shape}")
    if not np.all(np.isfinite(W)):
        raise SpectrumError(f"tensor{label} contains non-finite entries")
    sv = np.linalg.svd(W, compute_uv=False)
    return ESD(np.sort(sv * sv))


def fix_finger_threshold(esd: ESD) -> tuple[float, int]:
    """Place λ_min at the peak of the log-eigenvalue histogram.

    Uses ``max(10, floor(sqrt(n)))`` equal-width bins over
    ``[ln λ_min⁺, ln λ_max]`` of the nonzero eigenvalues; the most populated
    bin wins, lowest bin on ties. Returns the bin center (in eigenvalue
    units) and ``k = #{λ > center}`` clamped to ``[2, n-1]``.
    """
    lam = esd.nonzero()
    n = lam.size
    if n < 3 or np.unique(lam).size < 2:
        raise DegenerateSpectrumError(
            f"need at least 3 nonzero eigenvalues with 2 distinct values, got n={n}"
        )
    bins = max(MIN_BINS, math.isqrt(n))
    logs = np.log(lam)
    counts, edges = np.histogram(logs, bins=bins, range=(logs[0], logs[-1]))
    peak = int(np.argmax(counts))  # first maximum = lowest bin
    threshold = math.exp(0.5 * (edges[peak] + edges[peak + 1]))
    k = int(np.count_nonzero(lam > threshold))
    return threshold, min(max(k, 2), n - 1)


def hill_alpha(esd: ESD | np.ndarray, k: int) -> float:
    """1 + k / Σ_{i=1..k} ln(λ_{n-i+1} / λ_{n-k}) over ascending eigenvalues."""
    lam = esd.eigenvalues if isinstance(esd, ESD) else np.sort(np.asarray(esd, dtype=np.float64))
    n = lam.size
    if not 1 <= k <= n - 1:
        raise ValueError(f"k must be in [1, n-1] = [1, {n - 1}], got {k}")
    ref = lam[n - k - 1]
    if ref <= 0:
        raise ZeroReferenceError(f"reference eigenvalue λ_(n-k) is zero (n={n}, k={k})")
    total = float(np.sum(np.log(lam[n - k :] / ref)))
    if total <= 0:
        raise DegenerateTailError(f"top-{k} eigenvalues all equal the reference value {ref!r}")
    return 1.0 + k / total


def pl_alpha_hill(esd: ESD, k: int | None = None) -> PLFit:
    """Hill power-law exponent with Fix-finger tail selection.

    Eigenvalues at or below ``1e-12 * λ_max`` are dropped first. With an
    explicit ``k`` the histogram step is skipped. If the Fix-finger ``k``
    hits a degenerate tail the fit retries with ``k = n // 2`` and flags it.
    """
    lam = esd.nonzero()
    n = lam.size
    if k is None:
        threshold, k = fix_finger_threshold(esd)
    else:
        if n < 2:
            raise DegenerateSpectrumError(f"need at least 2 nonzero eigenvalues, got {n}")
        threshold = None

    fallback = False
    try:
        alpha = hill_alpha(lam, k)
    except DegenerateTailError:
        half = n // 2
        if threshold is None or half == k or half < 1:
            raise
        alpha = hill_alpha(lam, half)  # re-raises if this tail is degenerate too
        k, fallback, threshold = half, True, None

    if threshold is None or np.count_nonzero(lam > threshold) != k:
        threshold = float(lam[n - k - 1])
    return PLFit(alpha=alpha, k=k, lambda_min=threshold, lambda_max=float(lam[-1]), n=n, fallback_used=fallback)
