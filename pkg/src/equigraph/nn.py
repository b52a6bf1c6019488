"""Layers, loss, optimiser and parameter checkpoints built on :mod:`equigraph.tensor`."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import Index, Tensor

ACTIVATIONS = ("swish", "identity")


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / max(fan_in + fan_out, 1))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class DropoutStream:
    """Counter-based dropout masks: call ``k`` of a stream with key ``seed``
    always draws the same mask, independent of any other randomness."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.counter = 0

    def mask(self, shape: tuple[int, ...], rate: float) -> np.ndarray:
        gen = np.random.Generator(np.random.Philox(key=self.seed, counter=self.counter))
        self.counter += 1
        keep = gen.random(shape) >= rate
        return keep / (1.0 - rate)


class Mlp:
    """Fully connected network: swish after every hidden layer, linear output."""

    def __init__(self, widths: Sequence[int], rng: np.random.Generator, name: str = "mlp",
                 activation: str = "swish", dropout: float = 0.0):
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if not 0.0 <= dropout < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.widths = [int(w) for w in widths]
        self.activation = activation
        self.dropout = dropout
        self.name = name
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for k, (n_in, n_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            self.weights.append(Tensor(glorot_uniform(rng, n_in, n_out), True, f"{name}.W{k}"))
            self.biases.append(Tensor(np.zeros(n_out), True, f"{name}.b{k}"))

    @property
    def in_width(self) -> int:
        return self.widths[0]

    @property
    def out_width(self) -> int:
        return self.widths[-1]

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for w, b in zip(self.weights, self.biases):
            out[w.name] = w
            out[b.name] = b
        return out

    def _hidden(self, h: Tensor, training: bool, stream: DropoutStream | None) -> Tensor:
        if self.activation == "swish":
            h = T.swish(h)
        if training and self.dropout > 0.0:
            if stream is None:
                raise ValueError("training-mode dropout needs a DropoutStream")
            h = h * stream.mask(h.shape, self.dropout)
        return h

    def _rest(self, h: Tensor, training: bool, stream: DropoutStream | None) -> Tensor:
        n = len(self.weights)
        for k in range(1, n):
            h = self._hidden(h, training, stream)
            h = T.linear(h, self.weights[k], self.biases[k])
        return h

    def __call__(self, x: Tensor, training: bool = False,
                 stream: DropoutStream | None = None) -> Tensor:
        if x.shape[-1] != self.in_width:
            raise T.ShapeError(f"{self.name}: expected width {self.in_width}, got {x.shape[-1]}")
        return self._rest(T.linear(x, self.weights[0], self.biases[0]), training, stream)

    def apply_parts(self, parts: Sequence[tuple[Tensor, Index | None]], rows: int,
                    training: bool = False, stream: DropoutStream | None = None) -> Tensor:
        """Evaluate on the row-wise concatenation of ``parts`` without building it.

        Each part is ``(values, index)``; with an index the part contributes
        ``values[index]`` to each row.  The first layer is applied per part
        before gathering, which equals ``concat(...) @ W`` up to rounding.
        """
        width = sum(p.shape[1] for p, _ in parts)
        if width != self.in_width:
            raise T.ShapeError(f"{self.name}: parts give width {width}, expected {self.in_width}")
        w0 = self.weights[0]
        terms = []
        offset = 0
        for values, index in parts:
            k = values.shape[1]
            if k == 0:
                continue
            terms.append((values @ T.slice_rows(w0, offset, offset + k), index))
            offset += k
        h = T.gather_sum(terms, self.biases[0], rows)
        return self._rest(h, training, stream)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of integer ``labels``."""
    labels = np.asarray(labels, dtype=np.intp)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    return -T.mean(T.sum(T.log_softmax(logits) * onehot, axis=1))


class Adam:
    """Adam with bias correction; parameters are updated in place."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.step_count = 0

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        missing = [k for k in self.params if k not in grads]
        if missing:
            raise KeyError(f"no gradient for parameters: {missing[:5]}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for k, p in self.params.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# --- checkpoints ----------------------------------------------------------------

def format_floats(values) -> str:
    """JSON array text with every float written to 17 significant digits."""
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(flat)):
        raise ValueError("cannot serialise non-finite values")
    return "[" + ",".join(format(float(v), ".17g") for v in flat) + "]"


def dump_params(params: Mapping[str, Tensor]) -> str:
    entries = []
    for name, p in params.items():
        shape = json.dumps(list(p.shape))
        entries.append(f'{json.dumps(name)}: {{"shape": {shape}, "data": {format_floats(p.data)}}}')
    return "{" + ", ".join(entries) + "}"


def load_params(doc: Mapping, params: Mapping[str, Tensor]) -> None:
    """Copy values from a parsed parameter document into ``params`` in place."""
    missing = set(params) - set(doc)
    if missing:
        raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    for name, p in params.items():
        entry = doc[name]
        shape = tuple(entry["shape"])
        if shape != p.shape:
            raise T.ShapeError(f"{name}: checkpoint shape {shape} != model shape {p.shape}")
        p.data[...] = np.asarray(entry["data"], dtype=np.float64).reshape(shape)


def save_params(path: str | Path, params: Mapping[str, Tensor]) -> None:
    Path(path).write_text(dump_params(params))
