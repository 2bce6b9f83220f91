"""Small feedforward networks with hand-written backpropagation.

A :class:`Model` is a stack of dense layers split into a feature extractor
and a classifier head. ``forward_with_representation`` returns both the
extractor output (the representation) and the logits, and caches what the
backward pass needs. All arithmetic is float64.
"""

from __future__ import annotations

import copy
import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import rng as rng_streams

ACTIVATIONS = ("relu", "linear", "tanh")

_tokens = itertools.count(1)


class ShapeError(ValueError):
    pass


class StateError(RuntimeError):
    pass


@dataclass
class Layer:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.weight.ndim != 2 or self.bias.shape[0] != self.weight.shape[1]:
            raise ShapeError(
                f"bias of length {self.bias.shape[0]} does not match weight {self.weight.shape}"
            )

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[1]


@dataclass
class Model:
    extractor: list[Layer]
    head: list[Layer]
    input_dim: int
    version: int = 0
    token: int = field(default_factory=lambda: next(_tokens))

    def __post_init__(self):
        width = self.input_dim
        for name, layer in self.named_layers():
            if layer.fan_in != width:
                raise ShapeError(f"{name} expects input width {layer.fan_in}, got {width}")
            width = layer.fan_out

    @property
    def layers(self) -> list[Layer]:
        return self.extractor + self.head

    def named_layers(self):
        for i, layer in enumerate(self.extractor):
            yield f"extractor[{i}]", layer
        for i, layer in enumerate(self.head):
            yield f"head[{i}]", layer

    @property
    def representation_dim(self) -> int:
        return self.extractor[-1].fan_out if self.extractor else self.input_dim

    @property
    def num_classes(self) -> int:
        return self.head[-1].fan_out if self.head else self.representation_dim

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])


def build_model(widths: Sequence[int], seed: int, representation_index: int = -2) -> Model:
    """He-initialised MLP over ``widths`` = [input, hidden..., classes].

    Layers up to ``widths[representation_index]`` form the extractor, the rest
    the head. ReLU sits between layers; the last layer of each part is linear.
    """
    widths = [int(w) for w in widths]
    if len(widths) < 2 or min(widths) < 1:
        raise ValueError(f"need at least input and output widths, got {widths}")
    split = representation_index % len(widths)
    gen = rng_streams.stream(seed, "init")

    def make(lo: int, hi: int) -> list[Layer]:
        layers = []
        for i in range(lo, hi):
            fan_in, fan_out = widths[i], widths[i + 1]
            w = gen.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            act = "linear" if i == hi - 1 else "relu"
            layers.append(Layer(w, np.zeros(fan_out), act))
        return layers

    return Model(make(0, split), make(split, len(widths) - 1), widths[0])


def clone_model(model: Model) -> Model:
    """Deep copy with a fresh identity, so traces of the original do not apply to it."""
    twin = copy.deepcopy(model)
    twin.token = next(_tokens)
    twin.version = 0
    return twin


@dataclass
class ForwardTrace:
    representation: np.ndarray
    logits: np.ndarray
    inputs: list[np.ndarray]  # input to each layer, extractor then head
    pre_activations: list[np.ndarray]
    model_token: int
    model_version: int


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(z: np.ndarray, kind: str, upstream: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return upstream * (z > 0.0)
    if kind == "tanh":
        return upstream * (1.0 - np.tanh(z) ** 2)
    return upstream


def forward_with_representation(model: Model, batch: np.ndarray) -> ForwardTrace:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ShapeError(f"batch must be 2-D, got shape {x.shape}")
    inputs, pres = [], []
    representation = x
    last_extractor = len(model.extractor) - 1
    for i, (name, layer) in enumerate(model.named_layers()):
        if x.shape[1] != layer.fan_in:
            raise ShapeError(f"{name} expects input width {layer.fan_in}, got {x.shape[1]}")
        inputs.append(x)
        z = x @ layer.weight + layer.bias
        pres.append(z)
        x = _activate(z, layer.activation)
        if i == last_extractor:
            representation = x
    return ForwardTrace(representation, x, inputs, pres, model.token, model.version)


def predict(model: Model, batch: np.ndarray) -> np.ndarray:
    return forward_with_representation(model, batch).logits


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _check_labels(labels, n: int, num_classes: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != n:
        raise ShapeError(f"{y.shape[0]} labels for {n} rows")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return y


def per_sample_cross_entropy(logits: np.ndarray, labels) -> np.ndarray:
    logp = log_softmax(np.atleast_2d(logits))
    y = _check_labels(labels, logp.shape[0], logp.shape[1])
    return -logp[np.arange(len(y)), y]


def cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient ``(softmax - onehot) / n``."""
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    n = z.shape[0]
    y = _check_labels(labels, n, z.shape[1])
    logp = log_softmax(z)
    loss = float(-logp[np.arange(n), y].mean()) if n else 0.0
    grad = np.exp(logp)
    grad[np.arange(n), y] -= 1.0
    return loss, grad / max(n, 1)


def kl_divergence(
    logits_p: np.ndarray,
    logits_q: np.ndarray,
    detach_p: bool = False,
    detach_q: bool = False,
) -> tuple[float, Optional[np.ndarray], Optional[np.ndarray]]:
    """Batch-mean KL(softmax(p) || softmax(q)) with gradients for each side.

    A detached side gets ``None`` in place of its gradient.
    """
    zp = np.atleast_2d(np.asarray(logits_p, dtype=np.float64))
    zq = np.atleast_2d(np.asarray(logits_q, dtype=np.float64))
    if zp.shape != zq.shape:
        raise ShapeError(f"KL arguments differ in shape: {zp.shape} vs {zq.shape}")
    n = max(zp.shape[0], 1)
    logp, logq = log_softmax(zp), log_softmax(zq)
    p = np.exp(logp)
    diff = logp - logq
    rows = (p * diff).sum(axis=1)
    loss = float(rows.mean()) if zp.shape[0] else 0.0
    grad_p = None if detach_p else p * (diff - rows[:, None]) / n
    grad_q = None if detach_q else (np.exp(logq) - p) / n
    return loss, grad_p, grad_q


def backward(
    model: Model,
    trace: ForwardTrace,
    grad_logits: Optional[np.ndarray] = None,
    grad_representation: Optional[np.ndarray] = None,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Parameter gradients, one ``(dW, db)`` per layer in ``model.layers`` order."""
    if trace.model_token != model.token or trace.model_version != model.version:
        raise StateError("trace was not produced by the current state of this model")
    layers = model.layers
    grads: list[Optional[tuple[np.ndarray, np.ndarray]]] = [None] * len(layers)
    n_ext = len(model.extractor)

    upstream = None
    if grad_logits is not None:
        upstream = np.asarray(grad_logits, dtype=np.float64)
        if upstream.shape != trace.logits.shape:
            raise ShapeError(f"logit gradient {upstream.shape} vs logits {trace.logits.shape}")
    for i in range(len(layers) - 1, -1, -1):
        if i == n_ext - 1 and grad_representation is not None:
            g = np.asarray(grad_representation, dtype=np.float64)
            if g.shape != trace.representation.shape:
                raise ShapeError(
                    f"representation gradient {g.shape} vs representation {trace.representation.shape}"
                )
            upstream = g if upstream is None else upstream + g
        layer = layers[i]
        if upstream is None:
            grads[i] = (np.zeros_like(layer.weight), np.zeros_like(layer.bias))
            continue
        d_pre = _activation_grad(trace.pre_activations[i], layer.activation, upstream)
        grads[i] = (trace.inputs[i].T @ d_pre, d_pre.sum(axis=0))
        upstream = d_pre @ layer.weight.T if i > 0 else None
    return grads  # type: ignore[return-value]


class OptimizerState:
    """Plain SGD with gradient accumulators shaped like the model's parameters."""

    def __init__(self, model: Model, learning_rate: float):
        if not learning_rate >= 0.0:
            raise ValueError("learning_rate must be non-negative")
        self.learning_rate = float(learning_rate)
        self.accumulators = [(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in model.layers]

    def zero(self) -> None:
        for gw, gb in self.accumulators:
            gw.fill(0.0)
            gb.fill(0.0)

    def accumulate(self, grads, scale: float = 1.0) -> None:
        if len(grads) != len(self.accumulators):
            raise ShapeError("gradient list does not match model layers")
        for (aw, ab), (gw, gb) in zip(self.accumulators, grads):
            if aw.shape != gw.shape or ab.shape != gb.shape:
                raise ShapeError(f"gradient shape {gw.shape} vs accumulator {aw.shape}")
            if scale == 1.0:
                aw += gw
                ab += gb
            else:
                aw += scale * gw
                ab += scale * gb

    def step(self, model: Model) -> Model:
        if len(model.layers) != len(self.accumulators):
            raise ShapeError("optimizer state belongs to a different architecture")
        lr = self.learning_rate
        for layer, (gw, gb) in zip(model.layers, self.accumulators):
            layer.weight -= lr * gw
            layer.bias -= lr * gb
        model.version += 1
        self.zero()
        return model


def backward_and_step(model: Model, opt: OptimizerState, *terms) -> Model:
    """Accumulate gradients of every ``(trace, grad_logits, grad_representation)`` term, then step.

    All traces must come from the current model state; one SGD step is taken.
    """
    for trace, grad_logits, grad_repr in terms:
        opt.accumulate(backward(model, trace, grad_logits, grad_repr))
    return opt.step(model)
