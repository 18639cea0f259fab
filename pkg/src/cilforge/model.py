"""Feed-forward feature extractor and cosine-normalized classifier.

Everything is plain float64 numpy with hand-written backward passes. Layer
weights are stored as ``(out, in)`` matrices, so a layer computes
``x @ W.T + b``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NORM_EPS = 1e-12
SCALE_INIT = 10.0
SCALE_MIN = 1e-3
CHECKPOINT_MAGIC = "CILFORGE-CKPT-1"


def unit_rows(v: np.ndarray) -> np.ndarray:
    """Rows of ``v`` divided by ``norm + 1e-12``."""
    return v / (np.linalg.norm(v, axis=-1, keepdims=True) + NORM_EPS)


def unit_rows_backward(v: np.ndarray, grad_u: np.ndarray) -> np.ndarray:
    """Pull a gradient on ``unit_rows(v)`` back to ``v``."""
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    denom = norm + NORM_EPS
    radial = np.sum(v * grad_u, axis=-1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    return grad_u / denom - v * radial / (safe * denom**2) * (norm > 0)


def cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity with the same epsilon guard as the logits."""
    return np.sum(unit_rows(a) * unit_rows(b), axis=-1)


class FeatureExtractor:
    """Multi-layer perceptron; ReLU on hidden layers, identity on the last."""

    def __init__(self, weights, biases):
        if len(weights) != len(biases) or not weights:
            raise ValueError("need one bias per weight matrix")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {i}: weight rows {w.shape[0]} != bias size {b.shape[0]}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i}: input size {w.shape[1]} does not match previous layer")

    @classmethod
    def init(cls, sizes, rng: np.random.Generator) -> "FeatureExtractor":
        """He-initialised network with layer widths ``sizes`` (input first)."""
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            weights.append(rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def embedding_dim(self) -> int:
        return self.weights[-1].shape[0]

    def forward(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(f"expected input of shape (n, {self.input_dim}), got {x.shape}")
        inputs = []
        a = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(a)
            z = a @ w.T + b
            a = np.maximum(z, 0.0) if i < last else z
        return a, inputs

    def backward(self, inputs, grad_out: np.ndarray):
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.weights)
        g = grad_out
        for i in reversed(range(len(self.weights))):
            grads_w[i] = g.T @ inputs[i]
            grads_b[i] = g.sum(axis=0)
            if i:
                # inputs[i] is the ReLU output of layer i-1, positive exactly where active
                g = (g @ self.weights[i]) * (inputs[i] > 0)
        return grads_w, grads_b


class CosineClassifier:
    """One weight row per seen class and a learnable positive scale."""

    def __init__(self, weight, classes, scale: float = SCALE_INIT):
        self.weight = np.asarray(weight, dtype=np.float64)
        self.classes = tuple(int(c) for c in classes)
        if self.weight.ndim != 2 or self.weight.shape[0] != len(self.classes):
            raise ValueError("classifier needs one weight row per class")
        self.scale = float(scale)
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("duplicate class in classifier")

    @classmethod
    def empty(cls, embedding_dim: int, scale: float = SCALE_INIT) -> "CosineClassifier":
        return cls(np.zeros((0, embedding_dim)), (), scale)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def columns(self, labels) -> np.ndarray:
        """Map class identifiers to classifier row/logit column indices."""
        lookup = {c: i for i, c in enumerate(self.classes)}
        try:
            return np.array([lookup[int(c)] for c in np.ravel(labels)], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"class {exc.args[0]} is not in the classifier") from None

    def logits(self, h: np.ndarray):
        if h.shape[-1] != self.weight.shape[1]:
            raise ValueError("embedding size does not match classifier")
        hn = unit_rows(h)
        wn = unit_rows(self.weight)
        cos = hn @ wn.T
        return self.scale * cos, (h, hn, wn, cos)


def cosine_logits(classifier: CosineClassifier, embeddings: np.ndarray) -> np.ndarray:
    return classifier.logits(embeddings)[0]


def expand_classifier(classifier: CosineClassifier, new_classes, rng: np.random.Generator) -> CosineClassifier:
    """Append Gaussian-initialised rows (std ``1/sqrt(dim)``) for ``new_classes``."""
    new_classes = [int(c) for c in new_classes]
    clash = set(new_classes) & set(classifier.classes)
    if clash or len(set(new_classes)) != len(new_classes):
        raise ValueError(f"classes already present or repeated: {sorted(clash) or new_classes}")
    dim = classifier.weight.shape[1]
    rows = rng.standard_normal((len(new_classes), dim)) / np.sqrt(dim)
    return CosineClassifier(
        np.vstack([classifier.weight, rows]),
        classifier.classes + tuple(new_classes),
        classifier.scale,
    )


@dataclass
class ForwardCache:
    inputs: list
    classifier_cache: tuple


@dataclass
class GradientSet:
    weights: list
    biases: list
    classifier: np.ndarray
    scale: float = 0.0

    def arrays(self):
        return [*self.weights, *self.biases, self.classifier, np.asarray(self.scale)]


class Model:
    def __init__(self, extractor: FeatureExtractor, classifier: CosineClassifier):
        self.extractor = extractor
        self.classifier = classifier

    @classmethod
    def init(cls, input_dim: int, hidden=(64,), embedding_dim: int = 32, rng=None) -> "Model":
        rng = rng if rng is not None else np.random.default_rng(0)
        extractor = FeatureExtractor.init([input_dim, *hidden, embedding_dim], rng)
        return cls(extractor, CosineClassifier.empty(embedding_dim))

    def embed(self, x: np.ndarray) -> np.ndarray:
        return self.extractor.forward(x)[0]

    def forward(self, x: np.ndarray):
        """Return ``(logits, embeddings, cache)`` for a batch."""
        h, inputs = self.extractor.forward(x)
        p, ccache = self.classifier.logits(h)
        return p, h, ForwardCache(inputs, ccache)

    def predict_logits(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def parameters(self):
        """Trainable arrays in a fixed order (scale excluded)."""
        return [*self.extractor.weights, *self.extractor.biases, self.classifier.weight]

    def expand(self, new_classes, rng) -> None:
        self.classifier = expand_classifier(self.classifier, new_classes, rng)


def backward(model: Model, cache: ForwardCache, logit_grad=None, embedding_grad=None, weight_grad=None) -> GradientSet:
    """Gradients of all parameters given upstream gradients.

    ``logit_grad`` is the loss gradient w.r.t. the cosine logits,
    ``embedding_grad`` a gradient injected directly at the embeddings, and
    ``weight_grad`` one injected directly at the classifier weight matrix
    (margin losses act on both of the latter).
    """
    h, hn, wn, cos = cache.classifier_cache
    clf = model.classifier
    grad_h = np.zeros_like(h)
    grad_w = np.zeros_like(clf.weight)
    grad_scale = 0.0
    if logit_grad is not None:
        if logit_grad.shape != cos.shape:
            raise ValueError(f"logit gradient shape {logit_grad.shape} != {cos.shape}")
        grad_scale = float(np.sum(logit_grad * cos))
        grad_h += unit_rows_backward(h, clf.scale * logit_grad @ wn)
        grad_w += unit_rows_backward(clf.weight, clf.scale * logit_grad.T @ hn)
    if embedding_grad is not None:
        if embedding_grad.shape != h.shape:
            raise ValueError(f"embedding gradient shape {embedding_grad.shape} != {h.shape}")
        grad_h += embedding_grad
    if weight_grad is not None:
        if weight_grad.shape != clf.weight.shape:
            raise ValueError("classifier weight gradient has the wrong shape")
        grad_w += weight_grad
    gw, gb = model.extractor.backward(cache.inputs, grad_h)
    return GradientSet(gw, gb, grad_w, grad_scale)


@dataclass
class SGD:
    """SGD with heavy-ball momentum and L2 weight decay (scale not decayed)."""

    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0005
    velocity: list = field(default_factory=list)
    scale_velocity: float = 0.0

    def step(self, model: Model, grads: GradientSet) -> None:
        params = model.parameters()
        gparams = [*grads.weights, *grads.biases, grads.classifier]
        for name, g in zip(_param_names(model), gparams + [np.asarray(grads.scale)]):
            if not np.all(np.isfinite(g)):
                bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
                raise FloatingPointError(f"non-finite gradient in {name}: {bad} bad entries")
        if len(self.velocity) != len(params) or any(
            v.shape != p.shape for v, p in zip(self.velocity, params)
        ):
            self.velocity = [np.zeros_like(p) for p in params]
        for p, g, v in zip(params, gparams, self.velocity):
            v *= self.momentum
            v += g + self.weight_decay * p
            p -= self.learning_rate * v
        self.scale_velocity = self.momentum * self.scale_velocity + grads.scale
        clf = model.classifier
        clf.scale = max(clf.scale - self.learning_rate * self.scale_velocity, SCALE_MIN)


def sgd_step(model: Model, grads: GradientSet, state: SGD) -> None:
    state.step(model, grads)


def _param_names(model: Model):
    n = len(model.extractor.weights)
    return [f"layer{i}.weight" for i in range(n)] + [f"layer{i}.bias" for i in range(n)] + [
        "classifier.weight",
        "classifier.scale",
    ]


def _freeze(a: np.ndarray) -> np.ndarray:
    a = a.copy()
    a.flags.writeable = False
    return a


def snapshot(model: Model) -> Model:
    """Deep copy with read-only arrays, used as the distillation teacher."""
    ext = FeatureExtractor([_freeze(w) for w in model.extractor.weights], [_freeze(b) for b in model.extractor.biases])
    clf = copy.copy(model.classifier)
    clf.weight = _freeze(model.classifier.weight)
    return Model(ext, clf)


def save_checkpoint(path, model: Model) -> None:
    """Text dump: magic line, then ``name<TAB>shape<TAB>values`` per tensor."""
    lines = [CHECKPOINT_MAGIC, "classes\t" + ",".join(map(str, model.classifier.classes))]
    tensors = list(zip(_param_names(model), model.parameters() + [np.asarray(model.classifier.scale)]))
    for name, arr in tensors:
        shape = "x".join(map(str, arr.shape))
        values = " ".join(repr(float(v)) for v in np.ravel(arr))
        lines.append(f"{name}\t{shape}\t{values}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> Model:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"not a {CHECKPOINT_MAGIC} checkpoint")
    classes_field = lines[1].split("\t")[1] if "\t" in lines[1] else ""
    classes = [int(c) for c in classes_field.split(",") if c]
    tensors = {}
    for line in lines[2:]:
        name, shape, values = (line.split("\t") + [""])[:3]
        dims = tuple(int(d) for d in shape.split("x") if d)
        tensors[name] = np.array([float(v) for v in values.split()], dtype=np.float64).reshape(dims)
    n = sum(1 for k in tensors if k.endswith(".weight") and k.startswith("layer"))
    ext = FeatureExtractor([tensors[f"layer{i}.weight"] for i in range(n)], [tensors[f"layer{i}.bias"] for i in range(n)])
    clf = CosineClassifier(tensors["classifier.weight"], classes, float(tensors["classifier.scale"]))
    return Model(ext, clf)
