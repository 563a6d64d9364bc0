"""Classification losses for embedding training and the composite
compatibility objectives.

Every loss takes a batch of raw (unnormalized) embeddings; normalization of
embeddings and classifier prototypes happens inside, and the returned
gradients are with respect to the raw inputs.  Batch losses are means over
samples.  Arithmetic is float64 internally, gradients come back in the
input dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOSS_KINDS = ("norm_softmax", "cosface")
DEGENERATE_NORM = 1e-6


class ConfigurationError(ValueError):
    pass


@dataclass
class Classifier:
    """Per-class prototype matrix plus the loss hyperparameters."""

    prototypes: np.ndarray  # (num_classes, K)
    scale: float = 30.0
    margin: float = 0.4
    temperature: float = 0.5
    frozen: bool = False

    def __post_init__(self):
        p = self.prototypes
        if p.ndim != 2 or p.shape[0] < 2:
            raise ValueError("a classifier needs at least two prototype rows")
        if not (self.scale > 0 and self.margin >= 0 and self.temperature > 0):
            raise ValueError("scale and temperature must be positive, margin non-negative")
        if np.any(np.linalg.norm(p, axis=1) == 0):
            raise ValueError("zero prototype row")
        if self.frozen:
            self.prototypes.flags.writeable = False

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    @classmethod
    def init(cls, rng, num_classes: int, dim: int, dtype=np.float32, **kwargs) -> "Classifier":
        protos = rng.standard_normal((num_classes, dim)).astype(dtype)
        return cls(protos, **kwargs)

    def copy(self, frozen: bool | None = None) -> "Classifier":
        return Classifier(np.array(self.prototypes, copy=True), self.scale, self.margin,
                          self.temperature, self.frozen if frozen is None else frozen)

    def logit_scale(self, kind: str) -> float:
        if kind == "norm_softmax":
            return 1.0 / self.temperature
        if kind == "cosface":
            return self.scale
        raise ConfigurationError(f"unknown loss kind {kind!r}")

    def state_dict(self, prefix: str = "classifier.") -> dict[str, np.ndarray]:
        return {
            prefix + "prototypes": self.prototypes,
            prefix + "scale": np.float32(self.scale),
            prefix + "margin": np.float32(self.margin),
            prefix + "temperature": np.float32(self.temperature),
        }

    @classmethod
    def from_state_dict(cls, state, prefix: str = "classifier.", frozen: bool = False) -> "Classifier":
        return cls(np.array(state[prefix + "prototypes"]),
                   float(state[prefix + "scale"]), float(state[prefix + "margin"]),
                   float(state[prefix + "temperature"]), frozen)


@dataclass(frozen=True)
class CompositeWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or (self.lambda1 == 0 and self.lambda2 == 0):
            raise ValueError("composite weights must be non-negative and not both zero")


class _Cosines:
    """Cosine matrix between normalized embeddings and prototypes, with its
    backward pass through both normalizations."""

    def __init__(self, emb, protos):
        self.e = np.atleast_2d(np.asarray(emb, dtype=np.float64))
        self.w = np.asarray(protos, dtype=np.float64)
        if self.e.shape[1] != self.w.shape[1]:
            raise ValueError(f"embedding width {self.e.shape[1]} != prototype width {self.w.shape[1]}")
        norm = np.linalg.norm(self.e, axis=1, keepdims=True)
        # a (near) zero embedding has no direction: cosine 0, no gradient
        self.live = norm > DEGENERATE_NORM
        self.en = np.where(self.live, norm, 1.0)
        self.wn = np.linalg.norm(self.w, axis=1, keepdims=True)
        self.eh = np.where(self.live, self.e / self.en, 0.0)
        self.wh = self.w / self.wn
        self.cos = self.eh @ self.wh.T

    def backward(self, dcos):
        ge = dcos @ self.wh
        gw = dcos.T @ self.eh
        de = (ge - self.eh * np.sum(ge * self.eh, axis=1, keepdims=True)) / self.en * self.live
        dw = (gw - self.wh * np.sum(gw * self.wh, axis=1, keepdims=True)) / self.wn
        return de, dw


def _check_labels(labels, num_classes):
    labels = np.atleast_1d(np.asarray(labels))
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label out of range [0, {num_classes})")
    return labels.astype(np.int64)


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=1, keepdims=True)


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _cross_entropy(logits, labels):
    """Mean CE and its gradient w.r.t. logits."""
    n = logits.shape[0]
    logp = _log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    g = np.exp(logp)
    g[np.arange(n), labels] -= 1.0
    return loss, g / n


def _classification(emb, classifier, labels, kind):
    labels = _check_labels(labels, classifier.num_classes)
    cos = _Cosines(emb, classifier.prototypes)
    n = cos.cos.shape[0]
    if kind == "norm_softmax":
        s = 1.0 / classifier.temperature
        logits = cos.cos * s
    elif kind == "cosface":
        s = classifier.scale
        logits = cos.cos.copy()
        logits[np.arange(n), labels] -= classifier.margin
        logits *= s
    else:
        raise ConfigurationError(f"unknown loss kind {kind!r}")
    loss, glog = _cross_entropy(logits, labels)
    de, dw = cos.backward(glog * s)
    return float(loss), de, dw


def _cast(grad, like):
    return grad.astype(np.asarray(like).dtype, copy=False).reshape(np.shape(like))


def norm_softmax_loss(embedding, classifier: Classifier, labels):
    """Cross entropy over ``cos(theta_j) / temperature``."""
    loss, de, dw = _classification(embedding, classifier, labels, "norm_softmax")
    return loss, {"embedding": _cast(de, embedding), "prototypes": _cast(dw, classifier.prototypes)}


def cosine_margin_loss(embedding, classifier: Classifier, labels):
    """Cross entropy over ``s*(cos(theta_j) - m*[j == y])`` (large-margin cosine loss)."""
    loss, de, dw = _classification(embedding, classifier, labels, "cosface")
    return loss, {"embedding": _cast(de, embedding), "prototypes": _cast(dw, classifier.prototypes)}


def classification_loss(embedding, classifier, labels, kind: str):
    if kind == "norm_softmax":
        return norm_softmax_loss(embedding, classifier, labels)
    if kind == "cosface":
        return cosine_margin_loss(embedding, classifier, labels)
    raise ConfigurationError(f"unknown loss kind {kind!r}")


def bct_composite_loss(embedding, query_classifier: Classifier, gallery_classifier: Classifier,
                       labels, weights: CompositeWeights = CompositeWeights(), base: str = "cosface"):
    """``lambda1 * L(emb, query_cls) + lambda2 * L(emb, gallery_cls)``.

    The gallery classifier is treated as a constant: its gradient entry is
    all zeros and nothing is ever written to it.
    """
    if query_classifier.num_classes != gallery_classifier.num_classes:
        raise ConfigurationError(
            f"query classifier has {query_classifier.num_classes} classes, "
            f"gallery classifier has {gallery_classifier.num_classes}")
    total = 0.0
    de = np.zeros(np.shape(np.atleast_2d(embedding)), dtype=np.float64)
    dq = np.zeros(query_classifier.prototypes.shape, dtype=np.float64)
    if weights.lambda1:
        loss, e1, w1 = _classification(embedding, query_classifier, labels, base)
        total += weights.lambda1 * loss
        de += weights.lambda1 * e1
        dq += weights.lambda1 * w1
    if weights.lambda2:
        loss, e2, _ = _classification(embedding, gallery_classifier, labels, base)
        total += weights.lambda2 * loss
        de += weights.lambda2 * e2
    return total, {
        "embedding": _cast(de, embedding),
        "query_prototypes": _cast(dq, query_classifier.prototypes),
        "gallery_prototypes": np.zeros_like(gallery_classifier.prototypes),
    }


def kd_loss(student_logits, teacher_logits, temperature: float = 4.0):
    """``T^2 * KL(softmax(teacher/T) || softmax(student/T))``, batch mean."""
    s = np.atleast_2d(np.asarray(student_logits, dtype=np.float64))
    t = np.atleast_2d(np.asarray(teacher_logits, dtype=np.float64))
    if s.shape != t.shape:
        raise ValueError(f"student logits {s.shape} vs teacher logits {t.shape}")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    n = s.shape[0]
    log_pt = _log_softmax(t / temperature)
    log_ps = _log_softmax(s / temperature)
    pt = np.exp(log_pt)
    loss = temperature ** 2 * np.sum(pt * (log_pt - log_ps)) / n
    grad = temperature * (np.exp(log_ps) - pt) / n
    return float(max(loss, 0.0)), {"student_logits": _cast(grad, student_logits)}


def cosine_logits(embedding, classifier: Classifier, kind: str) -> np.ndarray:
    """Margin-free logits ``scale * cos`` used as KD inputs."""
    return _Cosines(embedding, classifier.prototypes).cos * classifier.logit_scale(kind)


def kd_composite_loss(embedding, query_classifier: Classifier, labels, teacher_logits,
                      weights: CompositeWeights, base: str = "cosface", temperature: float = 4.0):
    """``lambda1 * L(emb, query_cls) + lambda2 * KD(query logits, teacher logits)``."""
    total = 0.0
    de = np.zeros(np.shape(np.atleast_2d(embedding)), dtype=np.float64)
    dq = np.zeros(query_classifier.prototypes.shape, dtype=np.float64)
    if weights.lambda1:
        loss, e1, w1 = _classification(embedding, query_classifier, labels, base)
        total += weights.lambda1 * loss
        de += weights.lambda1 * e1
        dq += weights.lambda1 * w1
    if weights.lambda2:
        cos = _Cosines(embedding, query_classifier.prototypes)
        scale = query_classifier.logit_scale(base)
        loss, g = kd_loss(cos.cos * scale, teacher_logits, temperature)
        e2, w2 = cos.backward(g["student_logits"] * scale)
        total += weights.lambda2 * loss
        de += weights.lambda2 * e2
        dq += weights.lambda2 * w2
    return total, {"embedding": _cast(de, embedding),
                   "query_prototypes": _cast(dq, query_classifier.prototypes)}
