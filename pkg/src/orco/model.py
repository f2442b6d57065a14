"""Encoder + projection head with hand-written backprop and optimizers.

The network is a stack of dense layers: the encoder ``f`` (any depth) then
a two-layer head ``g``, followed by row-wise L2 normalisation so outputs
live on the unit sphere. Parameters are plain numpy arrays ordered
``[W_0, b_0, W_1, b_1, ...]`` encoder first.
"""
from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    InvalidArgumentError,
    InvalidStateError,
    NumericalFailureError,
    ParseError,
    ScheduleExhaustedError,
)
from .geometry import rng_from_seed

_ACTIVATIONS = ("relu", "identity")
_HEADER = "orco-model v1"
_versions = itertools.count(1)


@dataclass
class Layer:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.activation not in _ACTIVATIONS:
            raise InvalidArgumentError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise InvalidArgumentError("layer weight/bias shapes do not match")


@dataclass(frozen=True)
class FreezePlan:
    encoder_frozen: bool = False
    head_frozen: bool = False

    def __post_init__(self):
        if self.encoder_frozen and self.head_frozen:
            raise InvalidArgumentError("freezing both encoder and head leaves nothing to train")


HEAD_ONLY = FreezePlan(encoder_frozen=True)
TRAIN_ALL = FreezePlan()


def _init_layer(rng, n_in, n_out, activation):
    bound = 1.0 / math.sqrt(n_in)
    return Layer(rng.uniform(-bound, bound, size=(n_in, n_out)), np.zeros(n_out), activation)


class ProjectionModel:
    """Encoder layers followed by exactly two head layers and sphere normalisation."""

    def __init__(self, encoder_layers, head_layers):
        self.encoder_layers = list(encoder_layers)
        self.head_layers = list(head_layers)
        if len(self.head_layers) != 2:
            raise InvalidArgumentError("the projection head must have exactly two layers")
        dims = [layer.weight.shape for layer in self.layers]
        for (_, out), (nxt_in, _) in zip(dims, dims[1:]):
            if out != nxt_in:
                raise InvalidArgumentError(f"layer shapes do not chain: {dims}")
        self.version = next(_versions)

    @classmethod
    def initialize(cls, input_dim=64, encoder_dims=(64, 64), hidden_dim=128, output_dim=16, seed=0):
        """Uniform fan-in initialisation, ReLU everywhere except the head's output layer."""
        rng = rng_from_seed(seed)
        encoder, n_in = [], int(input_dim)
        for width in encoder_dims:
            encoder.append(_init_layer(rng, n_in, int(width), "relu"))
            n_in = int(width)
        head = [
            _init_layer(rng, n_in, int(hidden_dim), "relu"),
            _init_layer(rng, int(hidden_dim), int(output_dim), "identity"),
        ]
        return cls(encoder, head)

    @property
    def layers(self):
        return self.encoder_layers + self.head_layers

    @property
    def input_dim(self):
        return self.layers[0].weight.shape[0]

    @property
    def embedding_dim(self):
        return self.head_layers[0].weight.shape[0]

    @property
    def hidden_dim(self):
        return self.head_layers[0].weight.shape[1]

    @property
    def output_dim(self):
        return self.head_layers[1].weight.shape[1]

    def parameters(self) -> list:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def trainable_mask(self, freeze: FreezePlan) -> list:
        n_enc = 2 * len(self.encoder_layers)
        return [not freeze.encoder_frozen] * n_enc + [not freeze.head_frozen] * 4

    def set_parameters(self, params) -> None:
        params = list(params)
        if len(params) != 2 * len(self.layers):
            raise InvalidArgumentError("wrong number of parameter arrays")
        for k, layer in enumerate(self.layers):
            w, b = np.asarray(params[2 * k], np.float64), np.asarray(params[2 * k + 1], np.float64)
            if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
                raise InvalidArgumentError("parameter shape mismatch")
            layer.weight, layer.bias = w, b
        self.version = next(_versions)

    def copy(self) -> "ProjectionModel":
        def dup(layers):
            return [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in layers]

        return ProjectionModel(dup(self.encoder_layers), dup(self.head_layers))

    def encode(self, inputs) -> np.ndarray:
        """Encoder output only (no head, no normalisation)."""
        h = np.asarray(inputs, dtype=np.float64)
        for layer in self.encoder_layers:
            h = _act(h @ layer.weight + layer.bias, layer.activation)
        return h

    def embed(self, inputs) -> np.ndarray:
        return forward(self, inputs)[0]


def _act(x, kind):
    return np.maximum(x, 0.0) if kind == "relu" else x


@dataclass
class ForwardCache:
    model_id: int
    version: int
    layer_inputs: list
    pre_activations: list
    raw_output: np.ndarray
    norms: np.ndarray
    output: np.ndarray


def forward(model: ProjectionModel, inputs, freeze: FreezePlan = TRAIN_ALL):
    """Unit-norm embeddings of ``inputs`` and the activation cache for :func:`backward`."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise InvalidArgumentError(f"expected inputs of shape (n, {model.input_dim}), got {x.shape}")
    layer_inputs, pre = [], []
    h = x
    for layer in model.layers:
        layer_inputs.append(h)
        a = h @ layer.weight + layer.bias
        pre.append(a)
        h = _act(a, layer.activation)
    norms = np.linalg.norm(h, axis=1, keepdims=True)
    if not np.all(np.isfinite(norms)):
        raise NumericalFailureError("non-finite embedding")
    dead = np.flatnonzero(norms[:, 0] < 1e-12)
    if dead.size:
        raise NumericalFailureError(f"zero embedding before normalisation for rows {dead[:5].tolist()}")
    out = h / norms
    return out, ForwardCache(id(model), model.version, layer_inputs, pre, h, norms, out)


def backward(model: ProjectionModel, cache: ForwardCache, grad_output, freeze: FreezePlan = TRAIN_ALL) -> list:
    """Parameter gradients given ``d loss / d output``; frozen parameters get exact zeros."""
    if cache.model_id != id(model) or cache.version != model.version:
        raise InvalidStateError("forward cache is stale: parameters changed since it was computed")
    g = np.asarray(grad_output, dtype=np.float64)
    if g.shape != cache.output.shape:
        raise InvalidArgumentError("grad_output shape does not match the forward output")
    z = cache.output
    g = (g - np.sum(g * z, axis=1, keepdims=True) * z) / np.maximum(cache.norms, 1e-12)

    mask = model.trainable_mask(freeze)
    layers = model.layers
    grads = [None] * (2 * len(layers))
    # the encoder is first, so backprop can stop once only frozen layers remain
    lowest_trainable = next((k // 2 for k, m in enumerate(mask) if m), len(layers))
    for k in range(len(layers) - 1, -1, -1):
        layer = layers[k]
        if layer.activation == "relu":
            g = g * (cache.pre_activations[k] > 0)
        if mask[2 * k]:
            grads[2 * k] = cache.layer_inputs[k].T @ g
            grads[2 * k + 1] = g.sum(axis=0)
        else:
            grads[2 * k] = np.zeros_like(layer.weight)
            grads[2 * k + 1] = np.zeros_like(layer.bias)
        if k > lowest_trainable:
            g = g @ layer.weight.T
        elif k == lowest_trainable:
            for j in range(k):
                grads[2 * j] = np.zeros_like(layers[j].weight)
                grads[2 * j + 1] = np.zeros_like(layers[j].bias)
            break
    return grads


def input_gradient(model: ProjectionModel, cache: ForwardCache, grad_output) -> np.ndarray:
    """``d loss / d inputs`` (used for Jacobian checks)."""
    z = cache.output
    g = np.asarray(grad_output, dtype=np.float64)
    g = (g - np.sum(g * z, axis=1, keepdims=True) * z) / np.maximum(cache.norms, 1e-12)
    for k in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[k]
        if layer.activation == "relu":
            g = g * (cache.pre_activations[k] > 0)
        g = g @ layer.weight.T
    return g


class OptimizerKind(str, enum.Enum):
    SGD_MOMENTUM = "sgd"
    LARS = "lars"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise InvalidArgumentError(f"unknown optimizer {value!r}") from None


@dataclass(frozen=True)
class CosineWarmup:
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if self.total_steps < 1 or not 0 <= self.warmup_steps <= self.total_steps:
            raise InvalidArgumentError("need 0 <= warmup_steps <= total_steps and total_steps >= 1")

    @classmethod
    def for_epochs(cls, epochs, batches_per_epoch, warmup_fraction=0.05):
        total = max(1, int(epochs) * int(batches_per_epoch))
        return cls(int(round(warmup_fraction * total)), total)

    def factor(self, t: int) -> float:
        """Multiplier of ``lr_max`` at step ``t`` (1-based)."""
        w, total = self.warmup_steps, self.total_steps
        if w and t <= w:
            return t / w
        if total == w:
            return 1.0
        progress = (t - w) / (total - w)
        return 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    kind: OptimizerKind
    lr_max: float
    schedule: CosineWarmup
    momentum: float = 0.9
    trust_coefficient: float = 1.0
    eps_lars: float = 1e-9
    velocity: list = field(default_factory=list)
    step_count: int = 0

    def __post_init__(self):
        self.kind = OptimizerKind.parse(self.kind)
        if self.lr_max <= 0:
            raise InvalidArgumentError("lr_max must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidArgumentError("momentum must lie in [0, 1)")

    def lr_at(self, t: int) -> float:
        return self.lr_max * self.schedule.factor(t)


def optimizer_step(opt: OptimizerState, params, grads, trainable=None):
    """One momentum step at the scheduled rate; returns ``(new_params, opt)``.

    SGD: ``v = m v + g; w -= lr v``. LARS scales ``g`` per parameter array by
    ``eta * ||w|| / (||g|| + eps)`` (ratio 1 when either norm is zero).
    Arrays whose ``trainable`` flag is False are returned untouched.
    """
    params, grads = list(params), list(grads)
    if len(params) != len(grads):
        raise InvalidArgumentError("params and grads differ in length")
    trainable = [True] * len(params) if trainable is None else list(trainable)
    if opt.step_count >= opt.schedule.total_steps:
        raise ScheduleExhaustedError(f"schedule of {opt.schedule.total_steps} steps is exhausted")
    if not opt.velocity:
        opt.velocity = [np.zeros_like(p) for p in params]
    t = opt.step_count + 1
    lr = opt.lr_at(t)
    new_params = []
    for k, (w, g) in enumerate(zip(params, grads)):
        if not trainable[k]:
            new_params.append(w)
            continue
        if g.shape != w.shape:
            raise InvalidArgumentError("gradient shape does not match parameter")
        if opt.kind is OptimizerKind.LARS:
            wn, gn = float(np.linalg.norm(w)), float(np.linalg.norm(g))
            ratio = opt.trust_coefficient * wn / (gn + opt.eps_lars) if wn > 0 and gn > 0 else 1.0
            g = ratio * g
        v = opt.momentum * opt.velocity[k] + g
        opt.velocity[k] = v
        new_params.append(w - lr * v)
    opt.step_count = t
    return new_params, opt


def save_model(model: ProjectionModel, path) -> None:
    lines = [_HEADER, f"encoder_layers={len(model.encoder_layers)} head_layers={len(model.head_layers)}"]
    for section, layers in (("encoder", model.encoder_layers), ("head", model.head_layers)):
        for k, layer in enumerate(layers):
            n_in, n_out = layer.weight.shape
            lines.append(f"layer {section} {k} {layer.activation} {n_in} {n_out}")
            lines += [" ".join(f"{x:.17g}" for x in row) for row in layer.weight]
            lines.append(" ".join(f"{x:.17g}" for x in layer.bias))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_model(path) -> ProjectionModel:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != _HEADER:
        raise ParseError(f"expected header {_HEADER!r}", line=1)
    pos = 2
    layers = {"encoder": [], "head": []}

    def floats(lineno, n):
        try:
            row = [float(x) for x in lines[lineno - 1].split()]
        except (ValueError, IndexError):
            raise ParseError("expected a row of floats", line=lineno) from None
        if len(row) != n or not all(math.isfinite(x) for x in row):
            raise ParseError(f"expected {n} finite values", line=lineno)
        return row

    while pos < len(lines):
        lineno = pos + 1
        parts = lines[pos].split()
        if len(parts) != 6 or parts[0] != "layer" or parts[1] not in layers:
            raise ParseError(f"malformed layer line {lines[pos]!r}", line=lineno)
        try:
            n_in, n_out = int(parts[4]), int(parts[5])
        except ValueError:
            raise ParseError("layer shape is not integer", line=lineno) from None
        w = np.array([floats(lineno + 1 + r, n_out) for r in range(n_in)]).reshape(n_in, n_out)
        b = np.array(floats(lineno + 1 + n_in, n_out))
        layers[parts[1]].append(Layer(w, b, parts[3]))
        pos += n_in + 2
    try:
        return ProjectionModel(layers["encoder"], layers["head"])
    except InvalidArgumentError as exc:
        raise ParseError(str(exc)) from None
