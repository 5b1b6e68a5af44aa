"""Average accuracy and forgetting over a lower-triangular accuracy matrix."""

from __future__ import annotations

import numpy as np


class UndefinedMetricError(ValueError):
    pass


class AccuracyMatrix:
    """``R[l][j]``: accuracy on task ``j`` after training task ``l`` (1-based, ``j <= l``)."""

    def __init__(self, K: int):
        if K < 1:
            raise ValueError("K must be positive")
        self.K = K
        self._R = np.full((K, K), np.nan)

    @classmethod
    def from_array(cls, arr) -> "AccuracyMatrix":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError(f"accuracy matrix must be square, got {arr.shape}")
        R = cls(arr.shape[0])
        for l in range(1, R.K + 1):
            for j in range(1, l + 1):
                if not np.isnan(arr[l - 1, j - 1]):
                    R.set(l, j, arr[l - 1, j - 1])
        return R

    def set(self, l: int, j: int, acc: float) -> None:
        if not 1 <= j <= l <= self.K:
            raise IndexError(f"entry ({l}, {j}) is outside the lower triangle of a {self.K}x{self.K} matrix")
        if not 0.0 <= acc <= 1.0:
            raise ValueError(f"accuracy {acc} outside [0, 1]")
        if not np.isnan(self._R[l - 1, j - 1]):
            raise ValueError(f"entry ({l}, {j}) already written")
        self._R[l - 1, j - 1] = acc

    def get(self, l: int, j: int) -> float:
        return float(self._R[l - 1, j - 1])

    def row(self, l: int) -> np.ndarray:
        return self._R[l - 1, :l].copy()

    def row_complete(self, l: int) -> bool:
        return not np.isnan(self._R[l - 1, :l]).any()

    def complete(self) -> bool:
        return all(self.row_complete(l) for l in range(1, self.K + 1))

    def to_array(self) -> np.ndarray:
        return self._R.copy()

    def __eq__(self, other) -> bool:
        if not isinstance(other, AccuracyMatrix):
            return NotImplemented
        return np.array_equal(self._R, other._R, equal_nan=True)

    def __repr__(self) -> str:
        return f"AccuracyMatrix(K={self.K})"


def average_accuracy(R: AccuracyMatrix) -> float:
    if not R.row_complete(R.K):
        raise UndefinedMetricError("final row of the accuracy matrix is incomplete")
    return float(R.row(R.K).mean())


def forgetting(R: AccuracyMatrix) -> float:
    """Mean over tasks ``j < K`` of (best earlier accuracy - final accuracy)."""
    if R.K < 2:
        raise UndefinedMetricError("forgetting needs at least two tasks")
    if not R.complete():
        raise UndefinedMetricError("accuracy matrix triangle is incomplete")
    A = R.to_array()
    drops = [A[j - 1:R.K - 1, j - 1].max() - A[R.K - 1, j - 1] for j in range(1, R.K)]
    return float(np.mean(drops))


def summarize(R: AccuracyMatrix) -> dict:
    """AA and FM, with FM reported as 0 and flagged when it is undefined."""
    try:
        fm, defined = forgetting(R), True
    except UndefinedMetricError:
        fm, defined = 0.0, False
    return {"AA": average_accuracy(R), "FM": fm, "FM_defined": defined}
