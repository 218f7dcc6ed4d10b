"""Pairwise distance measures between models and weight-averages.

Two distances are used throughout:

- ratio-error diversity: unshared errors divided by shared errors on a labelled split.
  Pairs with unshared errors but no shared error get a ``+inf`` sentinel, which ranks
  above every finite value but is excluded from averaged statistics.
- squared Euclidean distance between flattened parameter vectors (kept squared; a
  square root is applied only where a true metric is required, at the MDS boundary).

Diversity is always computed on the ID validation split when a prediction is needed
inside a selection algorithm; callers pass the relevant correctness bit vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from soupbench.errors import DataError

KIND_DIVERSITY = "diversity"
KIND_EUCLIDEAN = "euclidean"
KINDS = (KIND_DIVERSITY, KIND_EUCLIDEAN)


def ratio_error(a: np.ndarray, b: np.ndarray) -> float:
    """Ratio-error diversity between two correctness bit vectors.

    Counts ``n_uns`` examples misclassified by exactly one model and ``n_sha``
    misclassified by both, and returns ``n_uns / n_sha``. A pair that shares no
    error but disagrees somewhere returns ``+inf``; two models with identical
    error sets (including two perfect models) return 0.
    """
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DataError(f"length mismatch: {a.shape} vs {b.shape}")
    n_uns = int(np.count_nonzero(a != b))
    n_sha = int(np.count_nonzero(~a & ~b))
    if n_sha == 0:
        return math.inf if n_uns > 0 else 0.0
    return n_uns / n_sha


def euclidean_sq(a: np.ndarray, b: np.ndarray) -> float:
    """Squared Euclidean distance between two flat weight vectors (64-bit arithmetic)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"length mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return float(np.dot(diff, diff))


@dataclass
class DiversityStats:
    """Average pairwise diversity plus how many pairs were dropped as infinite."""

    mean: float
    n_finite: int
    n_infinite: int


def pairwise_diversity_stats(records: Sequence[np.ndarray]) -> DiversityStats:
    """APD over all unordered distinct pairs; infinite pairs excluded and counted.

    If every pair is infinite the mean itself is reported as ``+inf`` (the set is
    maximally diverse under the sentinel ordering).
    """
    if len(records) < 2:
        raise DataError("average pairwise diversity needs at least 2 models")
    finite_sum = 0.0
    n_finite = 0
    n_infinite = 0
    for i in range(len(records)):
        for j in range(i + 1, len(records)):
            d = ratio_error(records[i], records[j])
            if math.isinf(d):
                n_infinite += 1
            else:
                finite_sum += d
                n_finite += 1
    mean = finite_sum / n_finite if n_finite else math.inf
    return DiversityStats(mean=mean, n_finite=n_finite, n_infinite=n_infinite)


def avg_pairwise_diversity(records: Sequence[np.ndarray]) -> float:
    """Mean ratio-error over all unordered distinct pairs (finite pairs only)."""
    return pairwise_diversity_stats(records).mean


@dataclass
class DistanceMatrix:
    """Symmetric pairwise distances with a zero diagonal.

    ``entries[i, j] >= 0``; diversity matrices may contain ``+inf`` sentinels.
    ``ids`` labels the rows/columns (model or WA identifiers) for export.
    """

    kind: str
    entries: np.ndarray
    ids: list = field(default_factory=list)

    def __post_init__(self) -> None:
        self.entries = np.asarray(self.entries, dtype=np.float64)
        if not self.ids:
            self.ids = list(range(1, self.entries.shape[0] + 1))

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    def validate(self) -> None:
        e = self.entries
        if e.ndim != 2 or e.shape[0] != e.shape[1]:
            raise DataError(f"distance matrix must be square, got {e.shape}")
        if not np.array_equal(e, e.T):
            raise DataError("distance matrix not symmetric")
        if np.any(np.diag(e) != 0.0):
            raise DataError("distance matrix diagonal not zero")
        if np.any(e < 0.0):
            raise DataError("distance matrix has negative entries")
        if np.any(np.isnan(e)):
            raise DataError("distance matrix has NaN entries")

    def write_csv(self, path: str | Path, header_comment: str | None = None) -> None:
        """Row-major CSV with a header row of ids; infinity serialized as ``inf``."""
        lines = []
        if header_comment:
            lines.append(f"# {header_comment}")
        lines.append(",".join(str(i) for i in self.ids))
        for row in self.entries:
            lines.append(",".join("inf" if math.isinf(v) else repr(float(v)) for v in row))
        Path(path).write_text("\n".join(lines) + "\n")


def pairwise_distance_matrix(
    items: Sequence[tuple[np.ndarray, np.ndarray]],
    kind: str,
    ids: Sequence | None = None,
) -> DistanceMatrix:
    """Build the full symmetric distance matrix over ``(weights, correctness)`` items.

    ``kind`` selects :func:`euclidean_sq` over the weight vectors or
    :func:`ratio_error` over the correctness vectors.
    """
    if kind not in KINDS:
        raise DataError(f"unknown distance kind {kind!r}")
    if len(items) < 2:
        raise DataError("need at least 2 items for a distance matrix")
    n = len(items)
    entries = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(i + 1, n):
            if kind == KIND_EUCLIDEAN:
                d = euclidean_sq(items[i][0], items[j][0])
            else:
                d = ratio_error(items[i][1], items[j][1])
            entries[i, j] = entries[j, i] = d
    return DistanceMatrix(kind=kind, entries=entries, ids=list(ids) if ids is not None else [])
