"""Gallery training, the four query-training methods and pruning-derived
query models.

Methods (``TrainRecipe.method``):

``vanilla``   lambda1 * L(query_cls) only
``kd``        lambda1 * L(query_cls) + lambda2 * KD(query logits, gallery logits)
``finetune``  weights and classifier initialized from the (pruned) gallery, then vanilla
``bct``       lambda1 * L(query_cls) + lambda2 * L(gallery_cls), gallery classifier frozen
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .data import LabeledDataset, augment
from .losses import (Classifier, CompositeWeights, ConfigurationError, bct_composite_loss,
                     classification_loss, cosine_logits, kd_composite_loss)
from .nn import (FLOAT, EmbeddingModel, LrSchedule, OptimizerState, lr_at, load_tensors,
                 save_tensors, sgd_step)

METHODS = ("vanilla", "kd", "finetune", "bct")

# seed-stream tags
_TAG_INIT = 0x1A17
_TAG_EPOCH = 0xA06
_TAG_CLASSIFIER = 0xC1A5
# gallery and query models draw from disjoint streams even under one seed
ROLE_GALLERY = 1
ROLE_QUERY = 2


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainRecipe:
    method: str = "vanilla"
    loss: str = "cosface"
    weights: CompositeWeights = CompositeWeights(1.0, 1.0)
    epochs: int = 40
    batch_size: int = 64
    lr: float = 0.1
    schedule: str = "cosine"
    weight_decay: float = 5e-4
    momentum: float = 0.9
    augment_sigma: float = 0.05
    scale: float = 30.0
    margin: float = 0.4
    temperature: float = 0.5
    kd_temperature: float = 4.0
    max_grad_norm: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.loss not in ("norm_softmax", "cosface"):
            raise ConfigurationError(f"unknown loss {self.loss!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be positive")

    @property
    def effective_weights(self) -> CompositeWeights:
        if self.method in ("vanilla", "finetune"):
            return CompositeWeights(self.weights.lambda1 or 1.0, 0.0)
        return self.weights

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = [self.weights.lambda1, self.weights.lambda2]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainRecipe":
        d = dict(d)
        if "weights" in d:
            d["weights"] = CompositeWeights(*d["weights"])
        return cls(**d)


@dataclass(frozen=True)
class ModelShape:
    """Block kinds and output widths of a dense embedding model."""

    kinds: tuple
    widths: tuple

    def build(self, rng, input_dim: int, embedding_dim: int) -> EmbeddingModel:
        return EmbeddingModel.init(rng, input_dim, self.kinds, self.widths, embedding_dim)

    @classmethod
    def of(cls, model: EmbeddingModel) -> "ModelShape":
        return cls(tuple(b.kind for b in model.blocks), tuple(model.widths))


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)  # dicts: epoch, loss, lr

    def to_json(self) -> str:
        return json.dumps({"epochs": self.epochs}, indent=1)


def seed_rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *tags]))


def steps_per_epoch(n: int, batch_size: int) -> int:
    return max(1, math.ceil(n / batch_size))


def epoch_batches(features: np.ndarray, batch_size: int, sigma: float, seed: int, epoch: int):
    """Augmented features for one epoch and its shuffled batch index lists."""
    rng = seed_rng(seed, _TAG_EPOCH, epoch)
    feats = augment(features, sigma, rng)
    order = rng.permutation(features.shape[0])
    return feats, [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def make_schedule(recipe: TrainRecipe, n: int) -> LrSchedule:
    total = recipe.epochs * steps_per_epoch(n, recipe.batch_size)
    if recipe.schedule == "step":
        # gallery face recipe proportions: drops at 8/16, 12/16, 14/16 of training
        return LrSchedule("step", recipe.lr, total, (0.5, 0.75, 0.875), 0.1)
    return LrSchedule(recipe.schedule, recipe.lr, total)


def make_objective(recipe: TrainRecipe, query_classifier: Classifier,
                   gallery_model: EmbeddingModel | None = None,
                   gallery_classifier: Classifier | None = None):
    """Return ``objective(out, labels, rows) -> (loss, grad_out, grad_prototypes)``
    and an ``on_epoch(features)`` hook."""
    weights = recipe.effective_weights
    method = recipe.method
    cache = {}

    if (method == "bct" and gallery_classifier is None) or \
            (method == "kd" and (gallery_model is None or gallery_classifier is None)):
        raise ConfigurationError(f"method {method!r} needs the gallery checkpoint")
    if method == "bct" and gallery_classifier.num_classes != query_classifier.num_classes:
        raise ConfigurationError("gallery classifier classes differ from the query label set")

    def on_epoch(features):
        if method == "kd" and weights.lambda2:
            cache["teacher"] = cosine_logits(gallery_model.forward(features), gallery_classifier, recipe.loss)

    def objective(out, labels, rows):
        if method == "bct":
            loss, g = bct_composite_loss(out, query_classifier, gallery_classifier, labels, weights, recipe.loss)
            return loss, g["embedding"], g["query_prototypes"]
        if method == "kd":
            teacher = cache["teacher"][rows] if weights.lambda2 else None
            loss, g = kd_composite_loss(out, query_classifier, labels, teacher, weights, recipe.loss,
                                        recipe.kd_temperature)
            return loss, g["embedding"], g["query_prototypes"]
        loss, g = classification_loss(out, query_classifier, labels, recipe.loss)
        return weights.lambda1 * loss, weights.lambda1 * g["embedding"], weights.lambda1 * g["prototypes"]

    return objective, on_epoch


def run_training(train: LabeledDataset, recipe: TrainRecipe, objective, on_epoch,
                 step: Callable, log: TrainLog | None = None) -> TrainLog:
    """Shared epoch/batch loop.

    ``step(x, labels, rows, lr, objective)`` performs forward, backward and the
    parameter update for one batch and returns the batch loss.
    """
    log = log if log is not None else TrainLog()
    n = len(train)
    schedule = make_schedule(recipe, n)
    t = 0
    for epoch in range(recipe.epochs):
        feats, batches = epoch_batches(train.features, recipe.batch_size, recipe.augment_sigma,
                                       recipe.seed, epoch)
        on_epoch(feats)
        total = 0.0
        lr = schedule.base_lr
        for rows in batches:
            lr = lr_at(schedule, t)
            loss = step(feats[rows], train.labels[rows], rows, lr, objective)
            if not math.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss {loss} at epoch {epoch}, step {t}, lr {lr:.4g}; "
                    f"last epoch mean loss {log.epochs[-1]['loss'] if log.epochs else 'n/a'}")
            total += loss * len(rows)
            t += 1
        log.epochs.append({"epoch": epoch, "loss": total / n, "lr": lr})
    return log


def fit(model: EmbeddingModel, classifier: Classifier, train: LabeledDataset, recipe: TrainRecipe,
        gallery_model: EmbeddingModel | None = None, gallery_classifier: Classifier | None = None) -> TrainLog:
    """Train ``model`` and ``classifier`` in place on compact labels."""
    objective, on_epoch = make_objective(recipe, classifier, gallery_model, gallery_classifier)
    params = dict(model.parameters())
    params["classifier.prototypes"] = classifier.prototypes
    state = OptimizerState(recipe.lr, recipe.weight_decay, recipe.momentum, max_grad_norm=recipe.max_grad_norm)

    def step(x, labels, rows, lr, objective):
        out, cache = model.forward_cached(x)
        loss, g_out, g_proto = objective(out, labels, rows)
        grads = model.backward(cache, g_out)
        grads["classifier.prototypes"] = g_proto
        sgd_step(params, grads, state, lr)
        return loss

    return run_training(train, recipe, objective, on_epoch, step)


def _compact(train: LabeledDataset) -> LabeledDataset:
    compact, _ = train.compact()
    return compact


def new_classifier(recipe: TrainRecipe, num_classes: int, dim: int, role: int = ROLE_QUERY) -> Classifier:
    return Classifier.init(seed_rng(recipe.seed, _TAG_CLASSIFIER, role), num_classes, dim,
                           scale=recipe.scale, margin=recipe.margin, temperature=recipe.temperature)


def train_gallery(train: LabeledDataset, shape: ModelShape, recipe: TrainRecipe,
                  embedding_dim: int = 16) -> tuple[EmbeddingModel, Classifier, TrainLog]:
    if recipe.method != "vanilla":
        raise ConfigurationError("the gallery model is trained with the vanilla method")
    train = _compact(train)
    model = shape.build(seed_rng(recipe.seed, _TAG_INIT, ROLE_GALLERY), train.dim, embedding_dim)
    classifier = new_classifier(recipe, train.class_count, embedding_dim, ROLE_GALLERY)
    log = fit(model, classifier, train, recipe)
    return model, classifier, log


def train_query(train: LabeledDataset, shape: ModelShape, recipe: TrainRecipe,
                gallery_model: EmbeddingModel | None = None, gallery_classifier: Classifier | None = None,
                prune_spec: "PruneSpec | None" = None, calibration: np.ndarray | None = None,
                ) -> tuple[EmbeddingModel, Classifier, TrainLog]:
    """Train a query model of ``shape`` with ``recipe.method``.

    ``finetune`` needs ``prune_spec``: the query starts from the pruned
    gallery weights and a copy of the gallery classifier.
    """
    train = _compact(train)
    if gallery_model is not None:
        embedding_dim = gallery_model.embedding_dim
    else:
        embedding_dim = gallery_classifier.prototypes.shape[1] if gallery_classifier is not None else 16
    if recipe.method == "finetune":
        if gallery_model is None or gallery_classifier is None or prune_spec is None:
            raise ConfigurationError("finetune needs the gallery checkpoint and a prune spec")
        model = prune_model(gallery_model, prune_spec, calibration)
        if ModelShape.of(model) != shape:
            raise ConfigurationError(
                f"query shape {shape} is not the pruned gallery shape {ModelShape.of(model)}")
        classifier = gallery_classifier.copy(frozen=False)
        classifier.scale, classifier.margin, classifier.temperature = recipe.scale, recipe.margin, recipe.temperature
    else:
        model = shape.build(seed_rng(recipe.seed, _TAG_INIT, ROLE_QUERY), train.dim, embedding_dim)
        classifier = new_classifier(recipe, train.class_count, embedding_dim, ROLE_QUERY)
    log = fit(model, classifier, train, recipe, gallery_model, gallery_classifier)
    return model, classifier, log


# -- pruning ----------------------------------------------------------------

@dataclass(frozen=True)
class PruneSpec:
    method: str = "magnitude"  # magnitude | activation
    fraction: float = 0.9

    def __post_init__(self):
        if self.method not in ("magnitude", "activation"):
            raise ConfigurationError(f"unknown prune method {self.method!r}")
        if not 0 <= self.fraction < 1:
            raise ConfigurationError("prune fraction must lie in [0, 1)")


def kept_units(width: int, fraction: float) -> int:
    return int(round(width * (1.0 - fraction)))


def unit_scores(model: EmbeddingModel, spec: PruneSpec, calibration: np.ndarray | None) -> list[np.ndarray]:
    """Importance of each hidden unit, one array per block."""
    if spec.method == "magnitude":
        # L1 norm of each unit's filter (its row of incoming weights)
        return [np.abs(b.layers[0].weight).astype(np.float64).sum(axis=1) for b in model.blocks]
    if calibration is None or len(calibration) == 0:
        raise ConfigurationError("activation pruning needs a calibration batch")
    scores = []
    h = np.asarray(calibration, dtype=FLOAT)
    for block in model.blocks:
        h, _ = block.forward(h)
        scores.append(np.abs(h).astype(np.float64).mean(axis=0))
    return scores


def select_units(scores: np.ndarray, keep: int) -> np.ndarray:
    """Indices of the ``keep`` largest scores (ties to the lower index), ascending."""
    order = np.lexsort((np.arange(scores.size), -scores))
    return np.sort(order[:keep])


def prune_model(model: EmbeddingModel, spec: PruneSpec, calibration: np.ndarray | None = None) -> EmbeddingModel:
    """Structured pruning of every hidden layer; the embedding head keeps width K.

    Returns a new model whose weights are slices of ``model`` aligned to the
    kept units.
    """
    if any(b.kind not in (0, 1) for b in model.blocks):
        raise ConfigurationError("pruning supports linear and linear+relu blocks only")
    keeps = []
    for b in model.blocks:
        k = kept_units(b.out_features, spec.fraction)
        if k < 1:
            raise ConfigurationError(f"pruning {spec.fraction:.0%} of {b.out_features} units leaves none")
        keeps.append(k)
    scores = unit_scores(model, spec, calibration)
    kept = [select_units(s, k) for s, k in zip(scores, keeps)]
    pruned = model.copy()
    for p in pruned.parameters().values():
        p.flags.writeable = True
    prev = None
    for block, idx in zip(pruned.blocks, kept):
        layer = block.layers[0]
        w = layer.weight if prev is None else layer.weight[:, prev]
        layer.weight = np.ascontiguousarray(w[idx])
        layer.bias = np.ascontiguousarray(layer.bias[idx])
        prev = idx
    if prev is not None:
        pruned.head.weight = np.ascontiguousarray(pruned.head.weight[:, prev])
    return pruned


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(path, model: EmbeddingModel, classifier: Classifier | None = None) -> None:
    tensors = dict(model.state_dict())
    if classifier is not None:
        tensors.update(classifier.state_dict())
    save_tensors(path, tensors)


def load_checkpoint(path, frozen: bool = False) -> tuple[EmbeddingModel, Classifier | None]:
    tensors = load_tensors(path)
    model = EmbeddingModel.from_state_dict(tensors)
    classifier = None
    if "classifier.prototypes" in tensors:
        classifier = Classifier.from_state_dict(tensors, frozen=frozen)
    if frozen:
        model.freeze()
    return model, classifier


def write_log(path, log: TrainLog, **extra) -> None:
    payload = {"epochs": log.epochs, **extra}
    Path(path).write_text(json.dumps(payload, indent=1) + "\n")


def with_method(recipe: TrainRecipe, method: str, **changes) -> TrainRecipe:
    return replace(recipe, method=method, **changes)
