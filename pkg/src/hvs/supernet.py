"""Weight-sharing super-network over a stack of choice blocks.

Each layer stores one block per kind at the maximum width; a sub-network
uses the prefix slice ``[:width, :in_width]`` of every stored weight, so
sub-networks that agree on a layer literally share its parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset
from .losses import Classifier
from .nn import (FLOAT, Block, Dense, EmbeddingModel, OptimizerState, bottleneck_width, clip_grad_norm,
                 dense_backward, dense_forward, l2_normalize, load_tensors, save_tensors, sgd_update)
from .train import ModelShape, TrainLog, TrainRecipe, make_objective, new_classifier, run_training, seed_rng

DEFAULT_WIDTH_CHOICES = tuple(round(0.2 * (i + 1), 10) for i in range(10))

_TAG_SUPERNET_INIT = 0x5B1
_TAG_SAMPLE = 0x5A3


@dataclass(frozen=True)
class SearchSpace:
    num_layers: int = 6
    block_kinds: tuple = (0, 1, 2, 3)
    width_choices: tuple = DEFAULT_WIDTH_CHOICES
    base_width: int = 32
    embedding_dim: int = 16
    input_dim: int = 32

    def __post_init__(self):
        kinds = self.block_kinds
        if isinstance(kinds, int):
            kinds = tuple(range(kinds))
        object.__setattr__(self, "block_kinds", tuple(int(k) for k in kinds))
        object.__setattr__(self, "width_choices", tuple(float(w) for w in self.width_choices))
        if not self.block_kinds or any(k not in (0, 1, 2, 3) for k in self.block_kinds):
            raise ValueError("block kinds must be a non-empty subset of 0..3")
        w = self.width_choices
        if not w or any(x <= 0 for x in w) or any(b <= a for a, b in zip(w, w[1:])):
            raise ValueError("width choices must be positive and strictly increasing")
        if not 1 <= self.num_layers <= 20:
            raise ValueError("num_layers must lie in [1, 20]")

    def width(self, choice: int) -> int:
        return max(1, math.ceil(self.width_choices[choice] * self.base_width - 1e-9))

    @property
    def max_width(self) -> int:
        return self.width(len(self.width_choices) - 1)

    @property
    def size(self) -> int:
        return (len(self.block_kinds) * len(self.width_choices)) ** self.num_layers

    def to_dict(self) -> dict:
        return {"num_layers": self.num_layers, "block_kinds": list(self.block_kinds),
                "width_choices": list(self.width_choices), "base_width": self.base_width,
                "embedding_dim": self.embedding_dim, "input_dim": self.input_dim}


@dataclass(frozen=True, order=True)
class ArchDescriptor:
    """Per-layer ``(block_choice, width_choice)`` index pairs."""

    genes: tuple

    @classmethod
    def of(cls, pairs) -> "ArchDescriptor":
        return cls(tuple((int(b), int(w)) for b, w in pairs))

    def __len__(self) -> int:
        return len(self.genes)

    def __str__(self) -> str:
        return "-".join(f"b{b}w{w}" for b, w in self.genes)

    @classmethod
    def parse(cls, text: str) -> "ArchDescriptor":
        pairs = []
        for tok in text.split("-"):
            b, w = tok[1:].split("w")
            pairs.append((int(b), int(w)))
        return cls.of(pairs)

    def validate(self, space: SearchSpace) -> None:
        if len(self.genes) != space.num_layers:
            raise ValueError(f"descriptor has {len(self.genes)} layers, space has {space.num_layers}")
        for b, w in self.genes:
            if not (0 <= b < len(space.block_kinds) and 0 <= w < len(space.width_choices)):
                raise ValueError(f"gene ({b}, {w}) outside the search space")


def sample_uniform(space: SearchSpace, rng: np.random.Generator) -> ArchDescriptor:
    """Every layer's block and width drawn independently and uniformly."""
    pairs = []
    for _ in range(space.num_layers):
        b = int(rng.integers(len(space.block_kinds)))
        w = int(rng.integers(len(space.width_choices)))
        pairs.append((b, w))
    return ArchDescriptor.of(pairs)


def arch_widths(space: SearchSpace, arch: ArchDescriptor) -> list[int]:
    return [space.width(w) for _, w in arch.genes]


def arch_flops(space: SearchSpace, arch: ArchDescriptor) -> int:
    """``count_flops`` of the sub-network without materializing it."""
    arch.validate(space)
    total = 0
    prev = space.input_dim
    for (b, w), width in zip(arch.genes, arch_widths(space, arch)):
        kind = space.block_kinds[b]
        if kind == 2:
            h = bottleneck_width(width)
            total += 2 * prev * h + 2 * h * width
        else:
            total += 2 * prev * width
        prev = width
    return total + 2 * prev * space.embedding_dim


def arch_shape(space: SearchSpace, arch: ArchDescriptor) -> ModelShape:
    """Block kinds and widths of ``arch`` for training it as a standalone model."""
    arch.validate(space)
    return ModelShape(tuple(space.block_kinds[b] for b, _ in arch.genes), tuple(arch_widths(space, arch)))


def max_arch(space: SearchSpace, block_choice: int = 0) -> ArchDescriptor:
    return ArchDescriptor.of([(block_choice, len(space.width_choices) - 1)] * space.num_layers)


@dataclass
class SuperNet:
    space: SearchSpace
    layers: list  # layers[i][b] -> Block at maximum width
    head: Dense
    classifier: Classifier
    velocity: dict = field(default_factory=dict, repr=False)

    @classmethod
    def init(cls, space: SearchSpace, num_classes: int, seed: int = 0,
             recipe: TrainRecipe | None = None) -> "SuperNet":
        rng = seed_rng(seed, _TAG_SUPERNET_INIT)
        layers = []
        prev = space.input_dim
        for _ in range(space.num_layers):
            layers.append([Block.init(rng, kind, prev, space.max_width) for kind in space.block_kinds])
            prev = space.max_width
        head = Dense.init(rng, prev, space.embedding_dim)
        recipe = recipe or TrainRecipe(seed=seed)
        return cls(space, layers, head, new_classifier(recipe, num_classes, space.embedding_dim))

    # -- weight sharing ------------------------------------------------------

    def _slices(self, arch: ArchDescriptor):
        """Yield ``(layer_index, block, [(layer, out, in), ...])`` for the active path."""
        prev = self.space.input_dim
        for i, ((b, _), width) in enumerate(zip(arch.genes, arch_widths(self.space, arch))):
            block = self.layers[i][b]
            if block.kind == 2:
                h = bottleneck_width(width)
                dims = [(block.layers[0], h, prev), (block.layers[1], width, h)]
            else:
                dims = [(block.layers[0], width, prev)]
            yield i, b, block, dims
            prev = width

    def view(self, arch: ArchDescriptor) -> EmbeddingModel:
        """Sub-network whose parameters are views into the supernet storage."""
        arch.validate(self.space)
        blocks = []
        prev = self.space.input_dim
        for _, _, block, dims in self._slices(arch):
            dense = [Dense(layer.weight[:o, :n], layer.bias[:o], layer.relu) for layer, o, n in dims]
            blocks.append(Block(block.kind, dense))
            prev = dims[-1][1]
        head = Dense(self.head.weight[:, :prev], self.head.bias, False)
        return EmbeddingModel(blocks, head)

    def subnet_forward(self, arch: ArchDescriptor, x: np.ndarray) -> np.ndarray:
        return l2_normalize(self.view(arch).forward(x))

    def extract_standalone(self, arch: ArchDescriptor) -> EmbeddingModel:
        """Self-contained copy of the active slices."""
        return self.view(arch).copy()

    def flops(self, arch: ArchDescriptor) -> int:
        return arch_flops(self.space, arch)

    def all_parameters(self) -> dict[str, np.ndarray]:
        params = {}
        for i, layer in enumerate(self.layers):
            for b, block in enumerate(layer):
                for j, dense in enumerate(block.layers):
                    params[f"layers.{i}.block{b}.fc{j}.weight"] = dense.weight
                    params[f"layers.{i}.block{b}.fc{j}.bias"] = dense.bias
        params["head.weight"] = self.head.weight
        params["head.bias"] = self.head.bias
        params["classifier.prototypes"] = self.classifier.prototypes
        return params

    def freeze(self) -> "SuperNet":
        for p in self.all_parameters().values():
            p.flags.writeable = False
        return self

    # -- warm-up path: average all block kinds at maximum width ------------------

    def warmup_forward(self, x):
        caches = []
        h = x
        for layer in self.layers:
            outs = []
            block_caches = []
            for block in layer:
                y, acts = block.forward(h)
                outs.append(y)
                block_caches.append(acts)
            avg = outs[0].copy()
            for y in outs[1:]:
                avg += y
            avg /= len(outs)
            caches.append(block_caches)
            h = avg
        out = dense_forward(self.head, h)
        return out, (caches, h, out)

    def warmup_backward(self, cache, upstream):
        caches, h, out = cache
        grads = {}
        d, grads["head.weight"], grads["head.bias"] = dense_backward(self.head, h, out, upstream)
        for i in range(len(self.layers) - 1, -1, -1):
            dy = d / len(self.layers[i])
            dx_total = None
            for b, block in enumerate(self.layers[i]):
                dx, layer_grads = block.backward(caches[i][b], dy)
                for j, (dw, db) in enumerate(layer_grads):
                    grads[f"layers.{i}.block{b}.fc{j}.weight"] = dw
                    grads[f"layers.{i}.block{b}.fc{j}.bias"] = db
                dx_total = dx if dx_total is None else dx_total + dx
            d = dx_total
        return grads

    # -- updates ----------------------------------------------------------------

    def _velocity(self, name: str, like: np.ndarray) -> np.ndarray:
        v = self.velocity.get(name)
        if v is None:
            v = self.velocity[name] = np.zeros_like(like)
        return v

    def apply_subnet_grads(self, arch: ArchDescriptor, grads: dict, lr: float, state: OptimizerState) -> None:
        """SGD on the active slices only; every other stored value stays bit-identical."""
        params = self.all_parameters()
        prev = self.space.input_dim
        for i, b, block, dims in self._slices(arch):
            for j, (layer, o, n) in enumerate(dims):
                for what, sl in (("weight", (slice(0, o), slice(0, n))), ("bias", (slice(0, o),))):
                    name = f"layers.{i}.block{b}.fc{j}.{what}"
                    full = params[name]
                    sgd_update(full[sl], grads[f"blocks.{i}.fc{j}.{what}"], self._velocity(name, full)[sl],
                               lr, state.weight_decay, state.momentum)
            prev = dims[-1][1]
        hw = params["head.weight"]
        sgd_update(hw[:, :prev], grads["head.weight"], self._velocity("head.weight", hw)[:, :prev],
                   lr, state.weight_decay, state.momentum)
        for name in ("head.bias", "classifier.prototypes"):
            sgd_update(params[name], grads[name], self._velocity(name, params[name]), lr,
                       state.weight_decay, state.momentum)

    def apply_full_grads(self, grads: dict, lr: float, state: OptimizerState) -> None:
        params = self.all_parameters()
        for name, g in grads.items():
            sgd_update(params[name], g, self._velocity(name, params[name]), lr,
                       state.weight_decay, state.momentum)

    # -- persistence --------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        s = self.space
        tensors = {
            "space.num_layers": np.float32(s.num_layers),
            "space.block_kinds": np.asarray(s.block_kinds, dtype=FLOAT),
            "space.width_choices": np.asarray(s.width_choices, dtype=FLOAT),
            "space.base_width": np.float32(s.base_width),
            "space.embedding_dim": np.float32(s.embedding_dim),
            "space.input_dim": np.float32(s.input_dim),
        }
        for name, value in self.all_parameters().items():
            if name != "classifier.prototypes":
                tensors["supernet." + name] = value
        tensors.update(self.classifier.state_dict())
        return tensors

    def save(self, path) -> None:
        save_tensors(path, self.state_dict())

    @classmethod
    def load(cls, path) -> "SuperNet":
        t = load_tensors(path)
        space = SearchSpace(
            num_layers=int(t["space.num_layers"]),
            block_kinds=tuple(int(k) for k in t["space.block_kinds"]),
            # float32 storage: recover the decimal multipliers
            width_choices=tuple(round(float(w), 6) for w in t["space.width_choices"]),
            base_width=int(t["space.base_width"]),
            embedding_dim=int(t["space.embedding_dim"]),
            input_dim=int(t["space.input_dim"]),
        )
        layers = []
        for i in range(space.num_layers):
            row = []
            for b, kind in enumerate(space.block_kinds):
                n_fc = 2 if kind == 2 else 1
                dense = []
                for j in range(n_fc):
                    w = t[f"supernet.layers.{i}.block{b}.fc{j}.weight"]
                    bias = t[f"supernet.layers.{i}.block{b}.fc{j}.bias"]
                    relu = kind in (1, 3) or (kind == 2 and j == 0)
                    dense.append(Dense(np.array(w), np.array(bias), relu))
                row.append(Block(kind, dense))
            layers.append(row)
        head = Dense(np.array(t["supernet.head.weight"]), np.array(t["supernet.head.bias"]))
        return cls(space, layers, head, Classifier.from_state_dict(t))


def train_supernet(supernet: SuperNet, train: LabeledDataset, recipe: TrainRecipe, warmup_epochs: int = 10,
                   gallery_classifier: Classifier | None = None, seed: int | None = None) -> TrainLog:
    """Uniform-sampling supernet training with an all-blocks warm-up.

    ``recipe.method`` is ``bct`` (composite loss against the frozen gallery
    classifier) or ``vanilla`` (first term only); ``recipe.epochs`` counts the
    warm-up epochs too.  One architecture is sampled per batch after warm-up.
    """
    if warmup_epochs > recipe.epochs:
        raise ValueError("warmup_epochs cannot exceed epochs")
    if recipe.method not in ("bct", "vanilla"):
        raise ValueError("supernets are trained with the bct or vanilla method")
    train, _ = train.compact()
    objective, on_epoch = make_objective(recipe, supernet.classifier, None, gallery_classifier)
    state = OptimizerState(recipe.lr, recipe.weight_decay, recipe.momentum, max_grad_norm=recipe.max_grad_norm)
    sampler = seed_rng(recipe.seed if seed is None else seed, _TAG_SAMPLE)
    batches_per_epoch = -(-len(train) // recipe.batch_size)
    counter = {"step": 0}

    def step(x, labels, rows, lr, objective):
        epoch = counter["step"] // batches_per_epoch
        counter["step"] += 1
        if epoch < warmup_epochs:
            out, cache = supernet.warmup_forward(x)
            loss, g_out, g_proto = objective(out, labels, rows)
            grads = supernet.warmup_backward(cache, g_out)
            grads["classifier.prototypes"] = g_proto
            supernet.apply_full_grads(clip_grad_norm(grads, state.max_grad_norm), lr, state)
            return loss
        arch = sample_uniform(supernet.space, sampler)
        model = supernet.view(arch)
        out, cache = model.forward_cached(x)
        loss, g_out, g_proto = objective(out, labels, rows)
        grads = model.backward(cache, g_out)
        grads["classifier.prototypes"] = g_proto
        supernet.apply_subnet_grads(arch, clip_grad_norm(grads, state.max_grad_norm), lr, state)
        return loss

    return run_training(train, recipe, objective, on_epoch, step)
