"""Tiny byte-level MLP language model with a hand-written backward pass.

The model embeds each byte of a fixed context window, concatenates the
embeddings, runs them through tanh hidden layers and predicts the next byte.

All parameters live in one flat float64 vector in this order:

1. embedding table, shape ``(256, embed_dim)``, row-major;
2. for each hidden layer: weight ``(fan_in, fan_out)`` row-major, then bias;
3. output weight ``(hidden_last, 256)`` row-major, then output bias.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from decaylab.data import VOCAB, Batch
from decaylab.errors import ValidationError
from decaylab.rng import Rng

D_MAX = 50_000
ORACLE_D_MAX = 5_000


@dataclass(frozen=True)
class ModelConfig:
    context_window: int
    embed_dim: int
    hidden_dims: tuple[int, ...] = ()
    activation: str = "tanh"
    d_max: int = D_MAX

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))

    @cached_property
    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = [("embedding", (VOCAB, self.embed_dim))]
        fan_in = self.context_window * self.embed_dim
        for i, width in enumerate(self.hidden_dims):
            shapes.append((f"hidden{i}.weight", (fan_in, width)))
            shapes.append((f"hidden{i}.bias", (width,)))
            fan_in = width
        shapes.append(("output.weight", (fan_in, VOCAB)))
        shapes.append(("output.bias", (VOCAB,)))
        return shapes

    @property
    def n_params(self) -> int:
        return sum(math.prod(s) for _, s in self.shapes)

    @property
    def oracle_eligible(self) -> bool:
        return self.n_params <= ORACLE_D_MAX

    def validate(self) -> list[str]:
        problems = []
        for name in ("context_window", "embed_dim"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if any(h < 1 for h in self.hidden_dims):
            problems.append("hidden_dims entries must be >= 1")
        if self.activation != "tanh":
            problems.append(f"unsupported activation {self.activation!r}")
        if not problems and self.n_params > self.d_max:
            problems.append(f"parameter count {self.n_params} exceeds d_max {self.d_max}")
        return problems

    def to_dict(self) -> dict:
        return {
            "context_window": self.context_window,
            "embed_dim": self.embed_dim,
            "hidden_dims": list(self.hidden_dims),
            "activation": self.activation,
            "d_max": self.d_max,
        }

    # Objective interface shared with the sharpness probes.
    def loss(self, params: np.ndarray, batch: Batch) -> float:
        return forward_loss(self, params, batch)

    def grad(self, params: np.ndarray, batch: Batch) -> np.ndarray:
        return grad(self, params, batch)


def unflatten(config: ModelConfig, params: np.ndarray) -> dict[str, np.ndarray]:
    """Views into ``params`` keyed by tensor name."""
    if params.ndim != 1 or len(params) != config.n_params:
        raise ValidationError(f"expected {config.n_params} parameters, got shape {params.shape}")
    out = {}
    offset = 0
    for name, shape in config.shapes:
        size = math.prod(shape)
        out[name] = params[offset : offset + size].reshape(shape)
        offset += size
    return out


def init_params(config: ModelConfig, seed: int) -> np.ndarray:
    """Weights ~ U(-b, b) with b = sqrt(6 / (fan_in + fan_out)); biases zero."""
    problems = config.validate()
    if problems:
        raise ValidationError("; ".join(problems))
    rng = Rng.from_seed(seed).derive("init")
    params = np.zeros(config.n_params)
    views = unflatten(config, params)
    for name, shape in config.shapes:
        if len(shape) == 2:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            u = rng.uniform(math.prod(shape))
            views[name][...] = (bound * (2.0 * u - 1.0)).reshape(shape)
    return params


def _check_batch(batch: Batch, config: ModelConfig) -> None:
    if batch.inputs.ndim != 2 or batch.inputs.shape[1] != config.context_window:
        raise ValidationError(
            f"batch inputs shape {batch.inputs.shape} does not match context_window {config.context_window}"
        )
    if batch.targets.shape != (batch.inputs.shape[0],) or len(batch.targets) == 0:
        raise ValidationError("batch targets must be a non-empty vector matching inputs")


def _forward(config: ModelConfig, params: np.ndarray, batch: Batch):
    _check_batch(batch, config)
    w = unflatten(config, params)
    b = len(batch)
    x = w["embedding"][batch.inputs].reshape(b, -1)
    acts = [x]
    h = x
    for i in range(len(config.hidden_dims)):
        h = np.tanh(h @ w[f"hidden{i}.weight"] + w[f"hidden{i}.bias"])
        acts.append(h)
    logits = h @ w["output.weight"] + w["output.bias"]
    shift = logits.max(axis=1, keepdims=True)
    z = logits - shift
    lse = np.log(np.exp(z).sum(axis=1))
    per_example = lse - z[np.arange(b), batch.targets]
    return w, acts, z, lse, per_example


def _mean(values: np.ndarray) -> float:
    total = 0.0
    for v in values.tolist():  # fixed sequential order
        total += v
    return total / len(values)


def forward_loss(config: ModelConfig, params: np.ndarray, batch: Batch) -> float:
    """Mean next-byte cross-entropy in nats."""
    return _mean(_forward(config, params, batch)[4])


def loss_and_grad(config: ModelConfig, params: np.ndarray, batch: Batch) -> tuple[float, np.ndarray]:
    w, acts, z, lse, per_example = _forward(config, params, batch)
    b = len(batch)
    probs = np.exp(z - lse[:, None])
    probs[np.arange(b), batch.targets] -= 1.0
    dlogits = probs / b

    g = np.zeros_like(params)
    gw = unflatten(config, g)
    h = acts[-1]
    gw["output.weight"][...] = h.T @ dlogits
    gw["output.bias"][...] = dlogits.sum(axis=0)
    dh = dlogits @ w["output.weight"].T
    for i in reversed(range(len(config.hidden_dims))):
        h = acts[i + 1]
        da = dh * (1.0 - h * h)
        gw[f"hidden{i}.weight"][...] = acts[i].T @ da
        gw[f"hidden{i}.bias"][...] = da.sum(axis=0)
        dh = da @ w[f"hidden{i}.weight"].T
    dx = dh.reshape(b * config.context_window, config.embed_dim)
    np.add.at(gw["embedding"], batch.inputs.reshape(-1), dx)
    return _mean(per_example), g


def grad(config: ModelConfig, params: np.ndarray, batch: Batch) -> np.ndarray:
    """Exact gradient of :func:`forward_loss`, same layout as ``params``."""
    return loss_and_grad(config, params, batch)[1]
