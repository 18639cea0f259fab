"""Average accuracy and average forgetting over an incremental run.

An accuracy matrix is a ragged lower triangle: row ``t`` (0-based) holds the
accuracies on the test sets of steps ``0..t`` measured after training step
``t``.
"""

from __future__ import annotations

import numpy as np


def _rows(matrix) -> list[np.ndarray]:
    rows = [np.asarray(row, dtype=np.float64) for row in matrix]
    if not rows:
        raise ValueError("empty accuracy matrix")
    for t, row in enumerate(rows):
        if len(row) < t + 1 or np.any(np.isnan(row[: t + 1])):
            raise ValueError(f"accuracy matrix row {t + 1} is missing entries")
    return [row[: t + 1] for t, row in enumerate(rows)]


def step_accuracies(matrix) -> list[float]:
    """Mean accuracy over the seen tasks after each step."""
    return [float(row.mean()) for row in _rows(matrix)]


def step_forgetting(matrix) -> list[float]:
    """Per-step forgetting; 0 for the first step, where nothing can be forgotten."""
    rows = _rows(matrix)
    out = [0.0]
    for t in range(1, len(rows)):
        drops = [max(rows[j][i] for j in range(i, t)) - rows[t][i] for i in range(t)]
        out.append(float(np.mean(drops)))
    return out


def average_accuracy(matrix) -> float:
    return float(np.mean(step_accuracies(matrix)))


def average_forgetting(matrix) -> float:
    """Mean over all steps of the peak-to-current drop; negative when tasks improve."""
    return float(np.mean(step_forgetting(matrix)))
