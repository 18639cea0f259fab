"""Incremental training loop, evaluation and multi-order experiments."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import losses as L
from .dataset import LabeledSet, TaskDataset, class_orders, split_scenario
from .memory import MemoryBuffer, rehearsal_pool, update_buffer
from .metrics import average_accuracy, average_forgetting, step_accuracies, step_forgetting
from .model import SGD, Model, backward, snapshot

log = logging.getLogger(__name__)

CLASSIFICATION_LOSSES = ("cbc", "lbc", "ce")
MARGIN_LOSSES = ("dm", "vanilla", "none")


@dataclass(frozen=True)
class Seeds:
    data: int = 0
    order: int = 1
    init: int = 2
    noise: int = 3
    shuffle: int = 4


@dataclass(frozen=True)
class RunConfig:
    base: int
    increment: int
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0005
    loss: L.LossConfig = field(default_factory=L.LossConfig)
    memory: int = 20
    num_orders: int = 3
    hidden: tuple[int, ...] = (64,)
    embedding_dim: int = 32
    classification: str = "cbc"
    margin_loss: str = "dm"
    use_kd: bool = True
    seeds: Seeds = field(default_factory=Seeds)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.memory < 1 or self.num_orders < 1:
            raise ValueError("memory and num_orders must be >= 1")
        if self.classification not in CLASSIFICATION_LOSSES:
            raise ValueError(f"classification must be one of {CLASSIFICATION_LOSSES}")
        if self.margin_loss not in MARGIN_LOSSES:
            raise ValueError(f"margin_loss must be one of {MARGIN_LOSSES}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        if "loss" in d:
            d["loss"] = L.LossConfig(**d["loss"])
        if "seeds" in d:
            d["seeds"] = Seeds(**d["seeds"])
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


def baseline_mode(config: RunConfig, cbc: bool, dm: bool) -> RunConfig:
    """Ablation variant: CE instead of the CIL-balanced loss and/or no margin loss.

    Knowledge distillation stays on, so ``cbc=dm=False`` is the CE + KD baseline.
    """
    return replace(config, classification="cbc" if cbc else "ce", margin_loss="dm" if dm else "none")


def ablation_grid(config: RunConfig) -> list[tuple[str, RunConfig]]:
    return [
        ("ce+kd", baseline_mode(config, False, False)),
        ("ce+dm+kd", baseline_mode(config, False, True)),
        ("cbc+kd", baseline_mode(config, True, False)),
        ("cbc+dm+kd", baseline_mode(config, True, True)),
    ]


def _stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, *keys])


@dataclass
class StepContext:
    """Everything ``train_step`` needs about the current step besides the model."""

    table: L.FrequencyTable
    new_cols: np.ndarray
    rhat: np.ndarray
    num_old: int


def classification_loss(kind: str, logits, labels, table: L.FrequencyTable, alpha: float):
    if kind == "cbc":
        return L.cil_balanced_loss(logits, labels, table, alpha)
    if kind == "lbc":
        return L.logit_balanced_loss(logits, labels, table)
    return L.softmax_cross_entropy(logits, labels)


def batch_loss(model: Model, xb, yb, memb, teacher_logits, ctx: StepContext, config: RunConfig, noise_rng):
    """Forward pass and combined loss of one mini-batch.

    Returns ``(total, parts, grads, cache)``; ``parts`` holds the three
    unweighted loss values.
    """
    logits, h, cache = model.forward(xb)
    cols = model.classifier.columns(yb)
    cls = classification_loss(config.classification, logits, cols, ctx.table, config.loss.alpha)
    cls_part = (cls[0], {"logits": cls[1]})

    margin_part = (0.0, {})
    anchors = np.flatnonzero(memb)
    if config.margin_loss != "none" and ctx.num_old and len(anchors):
        w = model.classifier.weight
        if config.margin_loss == "dm":
            ranges = L.DistributionRanges.draw(ctx.rhat, len(anchors), len(ctx.new_cols), w.shape[1], noise_rng)
            val, gh, gw = L.distribution_margin_loss(h[anchors], w, cols[anchors], ctx.new_cols, ranges, config.loss.margin)
        else:
            val, gh, gw = L.vanilla_margin_loss(h[anchors], w, cols[anchors], ctx.new_cols, config.loss.margin)
        grad_h = np.zeros_like(h)
        grad_h[anchors] = gh
        margin_part = (val, {"embeddings": grad_h, "weight": gw})

    kd_part = (0.0, {})
    if config.use_kd and ctx.num_old and teacher_logits is not None:
        val, g = L.kd_loss(logits[:, : ctx.num_old], teacher_logits)
        full = np.zeros_like(logits)
        full[:, : ctx.num_old] = g
        kd_part = (val, {"logits": full})

    total, grads = L.total_loss(cls_part, margin_part, kd_part, config.loss)
    return total, (cls_part[0], margin_part[0], kd_part[0]), grads, cache


def train_step(model: Model, pool: LabeledSet, from_memory, teacher: Model | None, ctx: StepContext,
               config: RunConfig, shuffle_rng, noise_rng) -> list[float]:
    """Run ``config.epochs`` passes of shuffled mini-batches over the pool.

    Returns the mean total loss of each epoch.
    """
    teacher_logits = None
    if teacher is not None and ctx.num_old:
        teacher_logits = teacher.predict_logits(pool.x)
        if teacher_logits.shape[1] != ctx.num_old:
            raise ValueError("teacher must cover exactly the old classes")
    opt = SGD(config.learning_rate, config.momentum, config.weight_decay)
    n = len(pool)
    history = []
    for epoch in range(config.epochs):
        perm = shuffle_rng.permutation(n)
        total_epoch = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            tl = teacher_logits[idx] if teacher_logits is not None else None
            total, parts, grads, cache = batch_loss(
                model, pool.x[idx], pool.y[idx], from_memory[idx], tl, ctx, config, noise_rng
            )
            if not np.isfinite(total):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch}, batch offset {start}: "
                    f"classification={parts[0]!r} margin={parts[1]!r} kd={parts[2]!r}"
                )
            g = backward(model, cache, grads.get("logits"), grads.get("embeddings"), grads.get("weight"))
            opt.step(model, g)
            total_epoch += total * len(idx)
        history.append(total_epoch / n)
    return history


def predict(model: Model, x) -> np.ndarray:
    """Arg-max class over all seen classes; ties go to the lowest class id."""
    logits = model.predict_logits(x)
    classes = np.asarray(model.classifier.classes)
    order = np.argsort(classes, kind="stable")
    return classes[order][np.argmax(logits[:, order], axis=1)]


def evaluate(model: Model, tasks) -> list[float]:
    """Accuracy on each given task's test set."""
    row = []
    for i, task in enumerate(tasks):
        if len(task.test) == 0:
            raise ValueError(f"task {i + 1} has an empty test set")
        row.append(float(np.mean(predict(model, task.test.x) == task.test.y)))
    return row


@dataclass
class OrderResult:
    order: list[int]
    matrix: list[list[float]]
    losses: list[list[float]]


def run_order(config: RunConfig, train: LabeledSet, test: LabeledSet, counts: dict[int, int],
              order, order_index: int = 0, on_step=None) -> OrderResult:
    """Full incremental run for one class order."""
    seq = split_scenario(train, test, counts, config.base, config.increment, order=order)
    seeds = config.seeds
    init_rng = _stream(seeds.init, order_index)
    model = Model.init(train.x.shape[1], config.hidden, config.embedding_dim, init_rng)
    buffer = MemoryBuffer(config.memory)
    matrix: list[list[float]] = []
    loss_log = []
    for t, step in enumerate(seq.steps):
        old = list(model.classifier.classes)
        teacher = snapshot(model) if t else None
        model.expand(step.classes, init_rng)
        pool, from_memory = rehearsal_pool(buffer, step)
        table = L.category_frequency(step.counts, old, config.memory, buffer.counts(), model.classifier.classes)
        rhat = L.inherent_ratios(model.classifier.classes, counts)
        ctx = StepContext(table, model.classifier.columns(step.classes), rhat, len(old))
        hist = train_step(
            model, pool, from_memory, teacher, ctx, config,
            _stream(seeds.shuffle, order_index, t), _stream(seeds.noise, order_index, t),
        )
        loss_log.append(hist)
        matrix.append(evaluate(model, seq.steps[: t + 1]))
        buffer = update_buffer(buffer, step, model.embed)
        log.debug("order %d step %d acc %s", order_index, t + 1, matrix[-1])
        if on_step is not None:
            on_step(t, model, buffer, teacher)
    return OrderResult(list(seq.class_order), matrix, loss_log)


@dataclass
class RunReport:
    config: dict
    orders: list[list[int]]
    matrices: list[list[list[float]]]
    acc: list[float]
    fgt: list[float]
    acc_mean: float
    acc_std: float
    fgt_mean: float
    fgt_std: float
    step_accuracy: list[list[float]]
    step_forgetting: list[list[float]]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(**d)

    def curves(self) -> list[tuple[int, float, float]]:
        """(step, mean average accuracy, mean forgetting) across orders."""
        acc = np.mean(self.step_accuracy, axis=0)
        fgt = np.mean(self.step_forgetting, axis=0)
        return [(t + 1, float(a), float(f)) for t, (a, f) in enumerate(zip(acc, fgt))]


def run_experiment(config: RunConfig, dataset, orders=None) -> RunReport:
    """Run every class order and aggregate Acc/Fgt.

    Args:
        dataset: ``(train, test, counts)`` as produced by ``generate_longtail``.
        orders: explicit class orders; drawn from ``config.seeds.order`` if omitted.
    """
    train, test, counts = dataset
    if orders is None:
        orders = class_orders(len(counts), config.num_orders, config.seeds.order)
    results = [run_order(config, train, test, counts, o, k) for k, o in enumerate(orders)]
    mats = [r.matrix for r in results]
    acc = [average_accuracy(m) for m in mats]
    fgt = [average_forgetting(m) for m in mats]
    return RunReport(
        config=config.to_dict(),
        orders=[r.order for r in results],
        matrices=mats,
        acc=acc,
        fgt=fgt,
        acc_mean=float(np.mean(acc)),
        acc_std=float(np.std(acc)),
        fgt_mean=float(np.mean(fgt)),
        fgt_std=float(np.std(fgt)),
        step_accuracy=[step_accuracies(m) for m in mats],
        step_forgetting=[step_forgetting(m) for m in mats],
    )


def joint_accuracy(config: RunConfig, dataset) -> float:
    """Upper bound: all classes learned in a single step."""
    train, test, counts = dataset
    joint = replace(config, base=len(counts), increment=1, num_orders=1)
    return run_experiment(joint, dataset).acc_mean
