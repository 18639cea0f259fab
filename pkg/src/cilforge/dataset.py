"""Synthetic long-tailed datasets and their incremental scenario splits.

Samples are kept as parallel numpy arrays (``x`` of shape ``(n, dim)`` and
integer labels ``y`` of shape ``(n,)``); a single row is one sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "SynthSpec",
    "LabeledSet",
    "TaskDataset",
    "TaskSequence",
    "longtail_counts",
    "generate_longtail",
    "split_scenario",
    "class_orders",
    "save_samples",
    "load_samples",
]

# Side length of the hypercube class centroids are drawn from.
CENTROID_BOX = 10.0


class InvalidSpecError(ValueError):
    pass


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 8
    feature_dim: int = 16
    samples_per_head_class: int = 200
    imbalance_ratio: float = 0.05
    cluster_spread: float = 2.0
    test_per_class: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise InvalidSpecError("num_classes must be >= 2")
        if not 0.0 < self.imbalance_ratio <= 1.0:
            raise InvalidSpecError("imbalance_ratio must lie in (0, 1]")
        if self.feature_dim < 1:
            raise InvalidSpecError("feature_dim must be >= 1")
        if self.cluster_spread <= 0:
            raise InvalidSpecError("cluster_spread must be positive")
        if self.samples_per_head_class < 1 or self.test_per_class < 0:
            raise InvalidSpecError("sample counts must be positive")


@dataclass(frozen=True)
class LabeledSet:
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def counts(self) -> dict[int, int]:
        labels, n = np.unique(self.y, return_counts=True)
        return {int(c): int(k) for c, k in zip(labels, n)}

    def subset(self, mask: np.ndarray) -> "LabeledSet":
        return LabeledSet(self.x[mask], self.y[mask])


@dataclass(frozen=True)
class TaskDataset:
    """Train/test data of one incremental step."""

    train: LabeledSet
    test: LabeledSet
    classes: tuple[int, ...]
    counts: dict[int, int] = field(default_factory=dict)


@dataclass(frozen=True)
class TaskSequence:
    steps: tuple[TaskDataset, ...]
    class_order: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)


def longtail_counts(num_classes: int, head: int, ratio: float) -> list[int]:
    """Exponentially decaying per-class counts, head class first.

    Class ``c`` gets ``round(head * ratio ** (c / (num_classes - 1)))`` so the
    last class holds exactly ``head * ratio`` samples.
    """
    counts = []
    for c in range(num_classes):
        exponent = c / (num_classes - 1) if num_classes > 1 else 0.0
        # round-half-up; np.round would send 0.5 to 0
        counts.append(int(math.floor(head * ratio**exponent + 0.5)))
    if min(counts) < 1:
        raise InvalidSpecError(
            f"class {counts.index(min(counts))} rounds to zero samples "
            f"(head={head}, ratio={ratio})"
        )
    return counts


def generate_longtail(spec: SynthSpec) -> tuple[LabeledSet, LabeledSet, dict[int, int]]:
    """Draw Gaussian clusters with long-tailed training counts.

    Each class centroid is uniform in a hypercube of side 10; samples are
    isotropic Gaussians with standard deviation ``cluster_spread``. The test
    split holds ``test_per_class`` samples of every class.

    Returns:
        (train, test, counts) where ``counts`` maps class id to train size.
    """
    counts = longtail_counts(spec.num_classes, spec.samples_per_head_class, spec.imbalance_ratio)
    rng = np.random.default_rng(spec.seed)
    centroids = rng.uniform(0.0, CENTROID_BOX, size=(spec.num_classes, spec.feature_dim))

    def draw(sizes):
        xs, ys = [], []
        for c, n in enumerate(sizes):
            xs.append(centroids[c] + spec.cluster_spread * rng.standard_normal((n, spec.feature_dim)))
            ys.append(np.full(n, c, dtype=np.int64))
        return LabeledSet(np.concatenate(xs), np.concatenate(ys))

    train = draw(counts)
    test = draw([spec.test_per_class] * spec.num_classes)
    return train, test, {c: n for c, n in enumerate(counts)}


def num_steps(num_classes: int, base: int, increment: int) -> int:
    if base < 1 or base > num_classes:
        raise ProtocolError(f"base={base} incompatible with {num_classes} classes")
    rest = num_classes - base
    if rest == 0:
        return 1
    if increment < 1 or rest % increment:
        raise ProtocolError(
            f"{num_classes} classes cannot be split as {base} + k*{increment}"
        )
    return 1 + rest // increment


def split_scenario(
    train: LabeledSet,
    test: LabeledSet,
    counts: dict[int, int],
    base: int,
    increment: int,
    order_seed: int | None = None,
    order=None,
) -> TaskSequence:
    """Partition a dataset into a base step followed by equal increments.

    The class order is either given explicitly through ``order`` or drawn
    as a random permutation from ``order_seed``.
    """
    num_classes = len(counts)
    T = num_steps(num_classes, base, increment)
    if order is None:
        order = np.random.default_rng(order_seed).permutation(sorted(counts))
    order = tuple(int(c) for c in order)
    if sorted(order) != sorted(counts):
        raise ProtocolError("class order must be a permutation of the dataset classes")

    steps = []
    for t in range(T):
        lo = 0 if t == 0 else base + (t - 1) * increment
        hi = base if t == 0 else lo + increment
        classes = order[lo:hi]
        tr = train.subset(np.isin(train.y, classes))
        te = test.subset(np.isin(test.y, classes))
        steps.append(TaskDataset(tr, te, classes, {c: counts[c] for c in classes}))
    return TaskSequence(tuple(steps), order)


def class_orders(num_classes: int, num_orders: int, master_seed: int) -> list[list[int]]:
    """Deterministic class permutations, pairwise distinct when possible."""
    if num_orders < 1:
        raise ValueError("num_orders must be >= 1")
    rng = np.random.default_rng(master_seed)
    # cap distinct attempts so tiny class counts cannot loop forever
    distinct_possible = math.factorial(num_classes) >= num_orders
    orders: list[list[int]] = []
    while len(orders) < num_orders:
        perm = [int(c) for c in rng.permutation(num_classes)]
        if distinct_possible and perm in orders:
            continue
        orders.append(perm)
    return orders


def save_samples(path, data: LabeledSet, num_classes: int | None = None) -> None:
    """Write ``label,f1,...,fD`` lines under a ``#dim=D classes=K`` header."""
    k = num_classes if num_classes is not None else int(data.y.max()) + 1 if len(data) else 0
    Path(path).write_text(format_samples(data, k))


def format_samples(data: LabeledSet, num_classes: int, sections: bool = False) -> str:
    dim = data.x.shape[1] if data.x.ndim == 2 else 0
    lines = [f"#dim={dim} classes={num_classes}"]
    current = None
    for xi, yi in zip(data.x, data.y):
        if sections and yi != current:
            current = yi
            lines.append(f"#class={int(yi)}")
        lines.append(",".join([str(int(yi))] + [repr(float(v)) for v in xi]))
    return "\n".join(lines) + "\n"


def parse_samples(text: str) -> tuple[LabeledSet, int]:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#dim="):
        raise ValueError("missing '#dim=D classes=K' header")
    header = dict(tok.split("=") for tok in lines[0][1:].split())
    dim, k = int(header["dim"]), int(header["classes"])
    xs, ys = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != dim + 1:
            raise ValueError(f"line {lineno}: expected {dim + 1} fields, got {len(parts)}")
        ys.append(int(parts[0]))
        xs.append([float(v) for v in parts[1:]])
    x = np.asarray(xs, dtype=np.float64).reshape(len(xs), dim)
    return LabeledSet(x, np.asarray(ys, dtype=np.int64)), k


def load_samples(path) -> tuple[LabeledSet, int]:
    return parse_samples(Path(path).read_text())
