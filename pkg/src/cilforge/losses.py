"""Loss objectives for imbalance-aware class-incremental training.

Every loss is a pure function returning its value together with analytic
gradients w.r.t. its inputs. Logit-space losses work on column indices of
the classifier; :class:`FrequencyTable` carries the per-column statistics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import cosine, unit_rows, unit_rows_backward

DEFAULT_MARGIN = 0.4


@dataclass(frozen=True)
class FrequencyTable:
    """Category frequencies of the rehearsal pool of one step.

    Attributes:
        classes: class ids in classifier column order.
        pool_counts: samples per class in the pool (``m`` for old classes).
        is_old: boolean mask of classes learned in earlier steps.
        m: memory size per old class.
    """

    classes: tuple[int, ...]
    pool_counts: np.ndarray
    is_old: np.ndarray
    m: int

    @property
    def pool_size(self) -> int:
        return int(self.pool_counts.sum())

    @property
    def r(self) -> np.ndarray:
        return self.pool_counts / self.pool_size

    @property
    def log_r(self) -> np.ndarray:
        return np.log(self.r)

    @property
    def v(self) -> np.ndarray:
        """``v[a, b] = log r_b - log r_a`` over column indices."""
        lr = self.log_r
        return lr[None, :] - lr[:, None]

    def column(self, cls: int) -> int:
        try:
            return self.classes.index(int(cls))
        except ValueError:
            raise KeyError(f"class {cls} has not been seen") from None

    def frequency(self) -> dict[int, float]:
        return {c: float(x) for c, x in zip(self.classes, self.r)}


def category_frequency(counts, old_classes, m: int, old_counts=None, classes=None) -> FrequencyTable:
    """Build the frequency table of ``D_t`` joined with the memory buffer.

    Args:
        counts: training-sample counts ``q_c`` of the current step's classes.
        old_classes: classes of earlier steps, each represented by ``m``
            exemplars.
        m: memory slots per old class.
        old_counts: optional actual exemplar counts of old classes, for
            classes that held fewer than ``m`` samples.
        classes: column order; defaults to old classes then new classes in
            the order given.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    if not counts:
        raise ValueError("current step has no classes")
    old_classes = [int(c) for c in old_classes]
    old_counts = dict(old_counts or {})
    pool = {c: old_counts.get(c, m) for c in old_classes}
    for c, q in counts.items():
        if int(c) in pool:
            raise ValueError(f"class {c} is both old and new")
        pool[int(c)] = int(q)
    if any(q < 1 for q in pool.values()):
        raise ValueError("every seen class needs at least one sample in the pool")
    order = tuple(int(c) for c in classes) if classes is not None else tuple(pool)
    if sorted(order) != sorted(pool):
        raise ValueError("column order must list exactly the seen classes")
    old = set(old_classes)
    return FrequencyTable(
        order,
        np.array([pool[c] for c in order], dtype=np.float64),
        np.array([c in old for c in order]),
        m,
    )


def uniform_table(classes) -> FrequencyTable:
    """Table with equal frequencies and no old classes (all adjustments 0)."""
    classes = tuple(int(c) for c in classes)
    return FrequencyTable(classes, np.ones(len(classes)), np.zeros(len(classes), dtype=bool), 1)


def logit_adjustment(table: FrequencyTable, label: int, cls: int) -> float:
    """``v_{label,cls} = log r_cls - log r_label`` for class ids."""
    return float(table.log_r[table.column(cls)] - table.log_r[table.column(label)])


def _logsumexp(z: np.ndarray) -> np.ndarray:
    zmax = np.max(z, axis=1, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    return (zmax + np.log(np.sum(np.exp(z - zmax), axis=1, keepdims=True)))[:, 0]


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - np.max(z, axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _shifted_ce(logits: np.ndarray, labels: np.ndarray, shift: np.ndarray, target_shift: np.ndarray):
    """Mean of ``logsumexp(p + shift) - (p_y + target_shift)`` and its gradient.

    ``shift`` is ``(n, K)`` and added before the softmax; ``target_shift`` is
    ``(n,)`` and added to the true-class numerator only.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(logits)
    z = logits + shift
    rows = np.arange(n)
    per_sample = _logsumexp(z) - (logits[rows, labels] + target_shift)
    grad = _softmax(z)
    grad[rows, labels] -= 1.0
    return float(per_sample.mean()), grad / n


def softmax_cross_entropy(logits, labels):
    """Plain cross-entropy over columns; returns ``(loss, dloss/dlogits)``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    zero = np.zeros_like(logits)
    return _shifted_ce(logits, labels, zero, np.zeros(len(labels)))


def logit_balanced_loss(logits, labels, table: FrequencyTable, verify: bool = False):
    """Softmax cross-entropy on logits shifted by ``log r_c``.

    With ``verify=True`` the equivalent form using the pairwise adjustments
    ``v_{y,j}`` is evaluated as well and the two are required to agree.
    """
    labels = np.asarray(labels, dtype=np.int64)
    lr = table.log_r
    n = len(labels)
    loss, grad = _shifted_ce(logits, labels, np.broadcast_to(lr, (n, len(lr))), lr[labels])
    if verify:
        other, other_grad = logit_balanced_loss_pairwise(logits, labels, table)
        if not (np.isclose(loss, other, rtol=1e-10, atol=1e-10) and np.allclose(grad, other_grad, atol=1e-10)):
            raise AssertionError(f"log-frequency and pairwise forms disagree: {loss!r} vs {other!r}")
    return loss, grad


def logit_balanced_loss_pairwise(logits, labels, table: FrequencyTable):
    """Same loss written with ``exp(p_y)`` over ``sum_j exp(p_j + v_{y,j})``."""
    labels = np.asarray(labels, dtype=np.int64)
    v = table.v[labels]
    return _shifted_ce(logits, labels, v, np.zeros(len(labels)))


def cil_balanced_loss(logits, labels, table: FrequencyTable, alpha: float):
    """Logit-balanced loss with old-class terms scaled by ``alpha``.

    Per sample: ``-log(g_y e^{p_y} / sum_j g_j e^{p_j + v_{y,j}})`` with
    ``g = alpha`` on old classes and 1 on new ones. ``alpha = 1`` recovers
    :func:`logit_balanced_loss`.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    labels = np.asarray(labels, dtype=np.int64)
    with np.errstate(divide="ignore"):
        log_gamma = np.where(table.is_old, np.log(alpha), 0.0)
    if alpha == 0.0 and np.any(table.is_old[labels]):
        raise ValueError("alpha = 0 makes the loss of old-class samples infinite")
    shift = log_gamma[None, :] + table.v[labels]
    return _shifted_ce(logits, labels, shift, log_gamma[labels])


def _check_anchors(labels, new_cols, n_anchor):
    labels = np.asarray(labels, dtype=np.int64)
    new_cols = np.asarray(new_cols, dtype=np.int64)
    if labels.shape != (n_anchor,):
        raise ValueError("one label per anchor embedding required")
    if np.isin(labels, new_cols).any():
        raise ValueError("margin anchors must belong to old classes")
    return labels, new_cols


def _cos_grads(a: np.ndarray, b: np.ndarray, g: np.ndarray):
    """Cosine of paired rows plus gradients of ``sum(g * cos)`` w.r.t. a and b."""
    an, bn = unit_rows(a), unit_rows(b)
    cos = np.sum(an * bn, axis=-1)
    ga = unit_rows_backward(a, g[..., None] * bn)
    gb = unit_rows_backward(b, g[..., None] * an)
    return cos, ga, gb


def vanilla_margin_loss(embeddings, weight, labels, new_cols, margin: float = DEFAULT_MARGIN):
    """Hinge ``max(0, cos(h, w_c) - cos(h, w_y) + margin)`` summed over anchors and new classes.

    Returns ``(loss, grad_embeddings, grad_weight)``.
    """
    if margin < 0:
        raise ValueError("margin must be non-negative")
    h = np.asarray(embeddings, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    labels, new_cols = _check_anchors(labels, new_cols, h.shape[0])
    grad_h = np.zeros_like(h)
    grad_w = np.zeros_like(weight)
    if h.shape[0] == 0 or len(new_cols) == 0:
        return 0.0, grad_h, grad_w
    pos = cosine(h, weight[labels])
    neg = cosine(h[:, None, :], weight[new_cols][None, :, :])
    hinge = neg - pos[:, None] + margin
    active = (hinge > 0).astype(np.float64)
    # upstream gradient on the full (anchor, class) cosine matrix
    hn, wn = unit_rows(h), unit_rows(weight)
    g = np.zeros((len(h), len(weight)))
    g[:, new_cols] = active
    g[np.arange(len(labels)), labels] -= active.sum(axis=1)
    grad_h = unit_rows_backward(h, g @ wn)
    grad_w = unit_rows_backward(weight, g.T @ hn)
    return float(np.sum(hinge * active)), grad_h, grad_w


def perturb_weight(w, rhat, noise):
    """Perturbed class weight ``w + noise * rhat``."""
    w = np.asarray(w, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[-1] != w.shape[-1]:
        raise ValueError("noise and weight dimensions differ")
    return w + noise * rhat


@dataclass(frozen=True)
class DistributionRanges:
    """Class ratios and the Gaussian draws of one forward pass.

    Attributes:
        rhat: per-column share of the historical training counts of all seen
            classes (sums to 1).
        negative_noise: ``(n_anchors, n_new, dim)`` draws for the perturbed
            new-class weights.
        positive_noise: ``(n_anchors, dim)`` draws for the perturbed weight
            of each anchor's own class.
    """

    rhat: np.ndarray
    negative_noise: np.ndarray
    positive_noise: np.ndarray

    @classmethod
    def draw(cls, rhat, n_anchors: int, n_new: int, dim: int, rng: np.random.Generator):
        neg = rng.standard_normal((n_anchors, n_new, dim))
        pos = rng.standard_normal((n_anchors, dim))
        return cls(np.asarray(rhat, dtype=np.float64), neg, pos)

    @classmethod
    def zero(cls, n_classes: int, n_anchors: int, n_new: int, dim: int):
        return cls(np.zeros(n_classes), np.zeros((n_anchors, n_new, dim)), np.zeros((n_anchors, dim)))


def inherent_ratios(classes, historical_counts) -> np.ndarray:
    """Share of each class in the summed training counts of all seen classes."""
    q = np.array([historical_counts[int(c)] for c in classes], dtype=np.float64)
    return q / q.sum()


def distribution_margin_loss(
    embeddings,
    weight,
    labels,
    new_cols,
    ranges: DistributionRanges,
    margin: float = DEFAULT_MARGIN,
    intra_term: bool = True,
):
    """Margin loss against Gaussian-perturbed class weights.

    Term one pushes each old-class anchor ``h`` away from every perturbed
    new-class weight: ``max(0, cos(h, w~_c) - cos(h, w_y) + margin)``. Term
    two keeps it inside its own perturbed range:
    ``max(0, cos(w~_y, w_y) - cos(h, w_y))``. Noise is a constant for
    differentiation. Hinges have zero subgradient at the kink.

    Args:
        embeddings: ``(n, dim)`` anchor embeddings (memory exemplars).
        weight: ``(K, dim)`` classifier weights.
        labels: column index of each anchor's (old) class.
        new_cols: column indices of the current step's classes.

    Returns:
        ``(loss, grad_embeddings, grad_weight)``.
    """
    if margin < 0:
        raise ValueError("margin must be non-negative")
    h = np.asarray(embeddings, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    n = h.shape[0]
    labels, new_cols = _check_anchors(labels, new_cols, n)
    grad_h = np.zeros_like(h)
    grad_w = np.zeros_like(weight)
    if n == 0 or len(new_cols) == 0:
        return 0.0, grad_h, grad_w

    w_y = weight[labels]
    pos_cos = cosine(h, w_y)

    # inter-class term over (anchor, new class) pairs
    w_tilde = weight[new_cols][None, :, :] + ranges.negative_noise * ranges.rhat[new_cols][None, :, None]
    h_pairs = np.broadcast_to(h[:, None, :], w_tilde.shape)
    neg_cos = cosine(h_pairs, w_tilde)
    hinge = neg_cos - pos_cos[:, None] + margin
    active = (hinge > 0).astype(np.float64)
    loss = float(np.sum(hinge * active))

    _, gh_neg, gw_neg = _cos_grads(h_pairs, w_tilde, active)
    grad_h += gh_neg.sum(axis=1)
    np.add.at(grad_w, new_cols, gw_neg.sum(axis=0))
    pos_weight = -active.sum(axis=1)

    if intra_term:
        w_y_tilde = w_y + ranges.positive_noise * ranges.rhat[labels][:, None]
        spread = cosine(w_y_tilde, w_y)
        slack = spread - pos_cos
        inside = (slack > 0).astype(np.float64)
        loss += float(np.sum(slack * inside))
        # d cos(w~_y, w_y)/d w_y flows through both arguments
        _, ga, gb = _cos_grads(w_y_tilde, w_y, inside)
        np.add.at(grad_w, labels, ga + gb)
        pos_weight = pos_weight - inside

    _, gh_pos, gw_pos = _cos_grads(h, w_y, pos_weight)
    grad_h += gh_pos
    np.add.at(grad_w, labels, gw_pos)
    return loss, grad_h, grad_w


def kd_loss(current_logits, teacher_logits):
    """Mean over samples of the summed absolute logit drift on old classes.

    Returns ``(loss, dloss/dcurrent)``; the subgradient at zero drift is 0.
    """
    current = np.asarray(current_logits, dtype=np.float64)
    teacher = np.asarray(teacher_logits, dtype=np.float64)
    if current.shape != teacher.shape:
        raise ValueError(f"student {current.shape} and teacher {teacher.shape} columns differ")
    n = current.shape[0]
    if n == 0 or current.shape[1] == 0:
        return 0.0, np.zeros_like(current)
    diff = current - teacher
    return float(np.abs(diff).sum() / n), np.sign(diff) / n


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    lambda_d: float = 0.3
    lambda_k: float = 0.5
    margin: float = DEFAULT_MARGIN

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.lambda_d < 0 or self.lambda_k < 0:
            raise ValueError("loss weights must be non-negative")
        if self.margin < 0:
            raise ValueError("margin must be non-negative")


def total_loss(classification, margin, distill, config: LossConfig):
    """Combine ``(value, grads)`` pairs as ``cls + lambda_d*margin + lambda_k*kd``.

    Each gradient entry is a dict mapping a target name (e.g. ``"logits"``,
    ``"embeddings"``, ``"weight"``) to an array; entries sharing a key are
    summed with the same weights as the values.
    """
    if config.lambda_d < 0 or config.lambda_k < 0:
        raise ValueError("loss weights must be non-negative")
    value = 0.0
    grads: dict[str, np.ndarray] = {}
    for coef, (v, g) in ((1.0, classification), (config.lambda_d, margin), (config.lambda_k, distill)):
        value += coef * v
        for key, arr in g.items():
            grads[key] = grads[key] + coef * arr if key in grads else coef * np.asarray(arr, dtype=np.float64)
    return value, grads
