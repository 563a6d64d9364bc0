"""Minimal dense network engine: layers, blocks, analytic backprop, SGD and
the binary checkpoint format.

Everything is plain numpy.  Parameters default to float32; the same code
runs in float64, which the gradient checks use.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FLOAT = np.float32
NORM_EPS = 1e-12

BLOCK_KINDS = ("linear", "linear_relu", "bottleneck", "residual")

CHECKPOINT_MAGIC = b"HVSC"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class FrozenParameterError(RuntimeError):
    pass


class CheckpointFormatError(ValueError):
    pass


def kaiming_uniform(rng: np.random.Generator, fan_out: int, fan_in: int, dtype=FLOAT) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype)


@dataclass
class Dense:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    relu: bool = False

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"bias {self.bias.shape} does not match weight {self.weight.shape}")

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, rng, in_features, out_features, relu=False, dtype=FLOAT):
        return cls(kaiming_uniform(rng, out_features, in_features, dtype),
                   np.zeros(out_features, dtype=dtype), relu)

    def copy(self) -> "Dense":
        return Dense(np.array(self.weight, copy=True), np.array(self.bias, copy=True), self.relu)

    def flops(self) -> int:
        return 2 * self.in_features * self.out_features


def _affine(layer: Dense, x: np.ndarray) -> np.ndarray:
    # Contiguous operands make sliced views and extracted copies hit the
    # same BLAS path, which keeps weight-shared forwards bit-identical.
    w = np.ascontiguousarray(layer.weight)
    x = np.ascontiguousarray(x)
    if w.shape[1] > 4096:
        y = (x.astype(np.float64) @ w.T.astype(np.float64)).astype(w.dtype)
    else:
        y = x @ w.T
    y += layer.bias
    return y


def dense_forward(layer: Dense, x: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != layer.in_features:
        raise ShapeError(f"input {x.shape} does not fit layer with {layer.in_features} inputs")
    y = _affine(layer, x)
    if layer.relu:
        np.maximum(y, 0, out=y)
    return y


def dense_backward(layer: Dense, x: np.ndarray, y: np.ndarray, dy: np.ndarray):
    """Return ``(dx, dW, db)`` for one layer given its input and output."""
    if dy.shape != y.shape:
        raise ShapeError(f"upstream gradient {dy.shape} does not match output {y.shape}")
    if layer.relu:
        dy = dy * (y > 0)
    dw = np.ascontiguousarray(dy.T) @ np.ascontiguousarray(x)
    db = dy.sum(axis=0)
    dx = dy @ np.ascontiguousarray(layer.weight)
    return dx, dw, db


def forward(layers: Sequence[Dense], x: np.ndarray) -> np.ndarray:
    """Evaluate a plain chain of dense layers."""
    for layer in layers:
        x = dense_forward(layer, x)
    return x


def backward(layers: Sequence[Dense], x: np.ndarray, upstream: np.ndarray):
    """Gradients of ``sum(upstream * forward(layers, x))``.

    Returns ``(dx, [(dW, db), ...])`` with one pair per layer.
    """
    acts = [x]
    for layer in layers:
        acts.append(dense_forward(layer, acts[-1]))
    if upstream.shape != acts[-1].shape:
        raise ShapeError(f"upstream gradient {upstream.shape} does not match output {acts[-1].shape}")
    grads = []
    d = upstream
    for i in range(len(layers) - 1, -1, -1):
        d, dw, db = dense_backward(layers[i], acts[i], acts[i + 1], d)
        grads.append((dw, db))
    return d, grads[::-1]


def l2_normalize(v: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    """Scale ``v`` (a vector, or each row of a matrix) to unit L2 norm."""
    v = np.asarray(v)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms <= eps):
        raise DegenerateInputError("cannot normalize a (near) zero vector")
    return v / norms


def _shortcut(x: np.ndarray, width: int) -> np.ndarray:
    n = x.shape[1]
    if n >= width:
        return x[:, :width]
    out = np.zeros((x.shape[0], width), dtype=x.dtype)
    out[:, :n] = x
    return out


def bottleneck_width(width: int) -> int:
    return max(1, -(-width // 2))


@dataclass
class Block:
    """One choice block.

    kind 0 ``linear``       y = Wx + b
    kind 1 ``linear_relu``  y = relu(Wx + b)
    kind 2 ``bottleneck``   y = W2 relu(W1 x + b1) + b2, hidden = ceil(width / 2)
    kind 3 ``residual``     y = relu(Wx + b) + x, shortcut truncated or zero-padded
    """

    kind: int
    layers: list

    @classmethod
    def init(cls, rng, kind: int, in_features: int, out_features: int, dtype=FLOAT) -> "Block":
        if kind == 0:
            layers = [Dense.init(rng, in_features, out_features, False, dtype)]
        elif kind == 1 or kind == 3:
            layers = [Dense.init(rng, in_features, out_features, True, dtype)]
        elif kind == 2:
            hidden = bottleneck_width(out_features)
            layers = [Dense.init(rng, in_features, hidden, True, dtype),
                      Dense.init(rng, hidden, out_features, False, dtype)]
        else:
            raise ValueError(f"unknown block kind {kind}")
        return cls(kind, layers)

    @property
    def in_features(self) -> int:
        return self.layers[0].in_features

    @property
    def out_features(self) -> int:
        return self.layers[-1].out_features

    def forward(self, x):
        acts = [x]
        for layer in self.layers:
            acts.append(dense_forward(layer, acts[-1]))
        y = acts[-1]
        if self.kind == 3:
            y = y + _shortcut(x, self.out_features)
        return y, acts

    def backward(self, acts, dy):
        grads = []
        d = dy
        for i in range(len(self.layers) - 1, -1, -1):
            d, dw, db = dense_backward(self.layers[i], acts[i], acts[i + 1], d)
            grads.append((dw, db))
        if self.kind == 3:
            m = min(d.shape[1], dy.shape[1])
            d[:, :m] += dy[:, :m]
        return d, grads[::-1]

    def flops(self) -> int:
        return sum(layer.flops() for layer in self.layers)

    def copy(self) -> "Block":
        return Block(self.kind, [layer.copy() for layer in self.layers])


@dataclass
class EmbeddingModel:
    """A stack of choice blocks followed by a linear embedding head.

    ``forward`` returns the raw head output; ``embed`` returns unit-norm rows.
    """

    blocks: list
    head: Dense

    @property
    def input_dim(self) -> int:
        return self.blocks[0].in_features if self.blocks else self.head.in_features

    @property
    def embedding_dim(self) -> int:
        return self.head.out_features

    @property
    def widths(self) -> list[int]:
        return [b.out_features for b in self.blocks]

    @classmethod
    def init(cls, rng, input_dim: int, kinds: Sequence[int], widths: Sequence[int],
             embedding_dim: int, dtype=FLOAT) -> "EmbeddingModel":
        if len(kinds) != len(widths):
            raise ShapeError("one width per block is required")
        blocks = []
        prev = input_dim
        for kind, width in zip(kinds, widths):
            blocks.append(Block.init(rng, kind, prev, width, dtype))
            prev = width
        return cls(blocks, Dense.init(rng, prev, embedding_dim, False, dtype))

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.forward_cached(x)[0]

    def forward_cached(self, x: np.ndarray):
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"input {x.shape} does not fit model with input width {self.input_dim}")
        caches = []
        h = x
        for block in self.blocks:
            h, acts = block.forward(h)
            caches.append(acts)
        out = dense_forward(self.head, h)
        return out, (caches, h, out)

    def backward(self, cache, upstream: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients of ``sum(upstream * forward(x))``."""
        caches, h, out = cache
        if upstream.shape != out.shape:
            raise ShapeError(f"upstream gradient {upstream.shape} does not match output {out.shape}")
        grads = {}
        d, grads["head.weight"], grads["head.bias"] = dense_backward(self.head, h, out, upstream)
        for i in range(len(self.blocks) - 1, -1, -1):
            d, layer_grads = self.blocks[i].backward(caches[i], d)
            for j, (dw, db) in enumerate(layer_grads):
                grads[f"blocks.{i}.fc{j}.weight"] = dw
                grads[f"blocks.{i}.fc{j}.bias"] = db
        return grads

    def embed(self, x: np.ndarray) -> np.ndarray:
        return l2_normalize(self.forward(x))

    def parameters(self) -> dict[str, np.ndarray]:
        params = {}
        for i, block in enumerate(self.blocks):
            for j, layer in enumerate(block.layers):
                params[f"blocks.{i}.fc{j}.weight"] = layer.weight
                params[f"blocks.{i}.fc{j}.bias"] = layer.bias
        params["head.weight"] = self.head.weight
        params["head.bias"] = self.head.bias
        return params

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel([b.copy() for b in self.blocks], self.head.copy())

    def freeze(self) -> "EmbeddingModel":
        for p in self.parameters().values():
            p.flags.writeable = False
        return self

    def flops(self) -> int:
        return sum(b.flops() for b in self.blocks) + self.head.flops()

    def describe(self) -> str:
        return "-".join(f"{BLOCK_KINDS[b.kind][0]}{b.out_features}" for b in self.blocks) or "linear"

    # checkpoint naming: blocks.{i}.{kind}.fc{j}.weight keeps the architecture
    # recoverable from tensor names and shapes alone
    def state_dict(self, prefix: str = "model.") -> dict[str, np.ndarray]:
        state = {}
        for i, block in enumerate(self.blocks):
            for j, layer in enumerate(block.layers):
                base = f"{prefix}blocks.{i}.{BLOCK_KINDS[block.kind]}.fc{j}"
                state[base + ".weight"] = layer.weight
                state[base + ".bias"] = layer.bias
        state[prefix + "head.weight"] = self.head.weight
        state[prefix + "head.bias"] = self.head.bias
        return state

    @classmethod
    def from_state_dict(cls, state: dict[str, np.ndarray], prefix: str = "model.") -> "EmbeddingModel":
        layers: dict[int, dict[int, dict[str, np.ndarray]]] = {}
        kinds: dict[int, int] = {}
        for name, value in state.items():
            if not name.startswith(prefix + "blocks."):
                continue
            _, idx, kind, fc, what = name[len(prefix):].split(".")
            i, j = int(idx), int(fc[2:])
            kinds[i] = BLOCK_KINDS.index(kind)
            layers.setdefault(i, {}).setdefault(j, {})[what] = value
        blocks = []
        for i in sorted(layers):
            kind = kinds[i]
            dense = []
            for j in sorted(layers[i]):
                relu = kind in (1, 3) or (kind == 2 and j == 0)
                dense.append(Dense(layers[i][j]["weight"], layers[i][j]["bias"], relu))
            blocks.append(Block(kind, dense))
        try:
            head = Dense(state[prefix + "head.weight"], state[prefix + "head.bias"])
        except KeyError as exc:
            raise CheckpointFormatError(f"checkpoint has no {prefix}head tensors") from exc
        return cls(blocks, head)


def count_flops(model) -> int:
    """Dense flops: 2*in*out per layer; activations, biases and shortcuts are free."""
    if isinstance(model, Dense):
        return model.flops()
    if hasattr(model, "flops"):
        return model.flops()
    return sum(layer.flops() for layer in model)


# -- optimization -----------------------------------------------------------

@dataclass
class OptimizerState:
    learning_rate: float = 0.1
    weight_decay: float = 5e-4
    momentum: float = 0.9
    velocity: dict = field(default_factory=dict)
    max_grad_norm: float | None = None  # global L2 clip; None disables

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.max_grad_norm is not None and not self.max_grad_norm > 0:
            raise ValueError("max_grad_norm must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


def sgd_update(w: np.ndarray, g: np.ndarray, v: np.ndarray, lr: float,
               weight_decay: float, momentum: float) -> None:
    """In-place ``v = momentum*v + g + wd*w; w -= lr*v``."""
    if not w.flags.writeable:
        raise FrozenParameterError("refusing to update a frozen parameter")
    if g.shape != w.shape:
        raise ShapeError(f"gradient {g.shape} does not match parameter {w.shape}")
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient")
    d = g + weight_decay * w if weight_decay else g
    v *= momentum
    v += d
    w -= lr * v


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> dict[str, np.ndarray]:
    """Rescale all gradients together so their global L2 norm is at most ``max_norm``."""
    if max_norm is None:
        return grads
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if not math.isfinite(total):
        raise NumericError("non-finite gradient")
    if total <= max_norm:
        return grads
    scale = max_norm / total
    return {k: (g * scale).astype(g.dtype, copy=False) for k, g in grads.items()}


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             state: OptimizerState, lr: float | None = None) -> dict[str, np.ndarray]:
    """Apply one SGD step in place and return ``params``."""
    lr = state.learning_rate if lr is None else lr
    grads = clip_grad_norm(grads, state.max_grad_norm)
    for name, g in grads.items():
        w = params[name]
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(w)
        sgd_update(w, g, v, lr, state.weight_decay, state.momentum)
    return params


@dataclass(frozen=True)
class LrSchedule:
    kind: str = "cosine"  # constant | cosine | step
    base_lr: float = 0.1
    total_steps: int = 1
    milestones: tuple = ()  # step schedule only: fractions of total_steps
    gamma: float = 0.1

    def __post_init__(self):
        if self.kind not in ("constant", "cosine", "step"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not self.base_lr > 0:
            raise ValueError("base_lr must be positive")
        if self.total_steps < 1:
            raise ValueError("total_steps must be at least 1")


def lr_at(schedule: LrSchedule, step: int) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    if schedule.kind == "constant":
        return schedule.base_lr
    if schedule.kind == "cosine":
        return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * step / schedule.total_steps))
    drops = sum(step >= m * schedule.total_steps for m in schedule.milestones)
    return schedule.base_lr * schedule.gamma ** drops


# -- checkpoint format --------------------------------------------------------

def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write the HVSC container: names, shapes, little-endian float32 data."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointFormatError(f"tensor {name!r} cannot be encoded")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_tensors(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: not an HVSC checkpoint")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
        pos = 12
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * size > len(data):
                raise CheckpointFormatError(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).astype(FLOAT).reshape(shape)
            pos += 4 * size
    except struct.error as exc:
        raise CheckpointFormatError(f"{path}: truncated checkpoint") from exc
    if pos != len(data):
        raise CheckpointFormatError(f"{path}: trailing bytes after last tensor")
    return tensors


def iter_parameters(models: Iterable) -> Iterable[np.ndarray]:
    for m in models:
        yield from m.parameters().values()
