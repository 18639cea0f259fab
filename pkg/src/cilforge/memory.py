"""Herding exemplar selection and the per-class rehearsal buffer."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import LabeledSet, TaskDataset, format_samples, parse_samples


def herding_select(features, m: int) -> list[int]:
    """Greedy herding on L2-normalised features.

    At each step the unchosen sample whose addition keeps the running mean of
    the chosen features closest to the class mean is picked. Ties go to the
    smallest index.

    Args:
        features: ``(n, d)`` embeddings of one class.
        m: number of exemplars to keep.

    Returns:
        ``min(m, n)`` row indices in selection order.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] == 0:
        raise ValueError("herding needs a non-empty (n, d) feature matrix")
    if m < 1:
        raise ValueError("m must be >= 1")
    # exact norms (no epsilon) so that parallel features tie exactly
    norm = np.linalg.norm(f, axis=1, keepdims=True)
    f = f / np.where(norm > 0, norm, 1.0)
    mu = f.mean(axis=0)
    n = f.shape[0]
    chosen: list[int] = []
    available = np.ones(n, dtype=bool)
    running = np.zeros_like(mu)
    for k in range(1, min(m, n) + 1):
        dist = np.linalg.norm(mu - (running + f) / k, axis=1)
        dist[~available] = np.inf
        i = int(np.argmin(dist))
        chosen.append(i)
        available[i] = False
        running += f[i]
    return chosen


@dataclass
class MemoryBuffer:
    """Up to ``m`` stored training samples for every class seen so far."""

    m: int
    exemplars: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("memory size m must be >= 1")

    def __len__(self) -> int:
        return sum(len(x) for x in self.exemplars.values())

    @property
    def classes(self) -> list[int]:
        return list(self.exemplars)

    def counts(self) -> dict[int, int]:
        return {c: len(x) for c, x in self.exemplars.items()}

    def as_set(self) -> LabeledSet:
        if not self.exemplars:
            return LabeledSet(np.zeros((0, 0)), np.zeros(0, dtype=np.int64))
        xs = list(self.exemplars.values())
        ys = [np.full(len(x), c, dtype=np.int64) for c, x in self.exemplars.items()]
        return LabeledSet(np.concatenate(xs), np.concatenate(ys))

    def dumps(self) -> str:
        data = self.as_set()
        k = max(self.exemplars, default=-1) + 1
        return format_samples(data, k, sections=True)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str, m: int) -> "MemoryBuffer":
        data, _ = parse_samples(text)
        buf = cls(m)
        for c in dict.fromkeys(int(c) for c in data.y):
            buf.exemplars[c] = data.x[data.y == c]
        return buf

    @classmethod
    def load(cls, path, m: int) -> "MemoryBuffer":
        return cls.loads(Path(path).read_text(), m)


def update_buffer(buffer: MemoryBuffer, step: TaskDataset, embed) -> MemoryBuffer:
    """Herd exemplars for the step's classes with the current extractor.

    ``embed`` maps raw features to embeddings. Classes already stored keep
    their exemplars; a new buffer is returned.
    """
    out = MemoryBuffer(buffer.m, dict(buffer.exemplars))
    for c in step.classes:
        if c in out.exemplars:
            continue
        x = step.train.x[step.train.y == c]
        if len(x) == 0:
            raise ValueError(f"class {c} has no training samples")
        idx = herding_select(embed(x), buffer.m)
        out.exemplars[c] = x[idx].copy()
    return out


def rehearsal_pool(buffer: MemoryBuffer, step: TaskDataset):
    """Join the step's training set with the stored exemplars.

    Returns:
        ``(pool, from_memory)`` where ``from_memory`` flags rows that came
        from the buffer.
    """
    mem = buffer.as_set()
    if len(mem) == 0:
        return step.train, np.zeros(len(step.train), dtype=bool)
    pool = LabeledSet(np.concatenate([step.train.x, mem.x]), np.concatenate([step.train.y, mem.y]))
    flag = np.concatenate([np.zeros(len(step.train), dtype=bool), np.ones(len(mem), dtype=bool)])
    return pool, flag
