"""AdamW with decoupled weight decay and global-norm gradient clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from decaylab.errors import NumericError, ValidationError


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    clip_norm: float = 1.0

    @classmethod
    def zeros(cls, d: int, **hparams) -> OptimizerState:
        return cls(np.zeros(d), np.zeros(d), **hparams)

    def copy(self) -> OptimizerState:
        return OptimizerState(
            self.m.copy(), self.v.copy(), self.step,
            self.beta1, self.beta2, self.eps, self.weight_decay, self.clip_norm,
        )

    @property
    def hparams(self) -> dict:
        return {
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "clip_norm": self.clip_norm,
        }


def _require_finite(name: str, x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{name} contains non-finite values")


def clip_gradient(g: np.ndarray, clip_norm: float) -> np.ndarray:
    """Rescale ``g`` to L2 norm ``clip_norm`` if it is longer; otherwise return it as-is."""
    if not clip_norm > 0:
        raise ValidationError("clip_norm must be positive")
    _require_finite("gradient", g)
    norm = float(np.linalg.norm(g))
    if norm > clip_norm:
        return g * (clip_norm / norm)
    return g


def adamw_step(
    params: np.ndarray, state: OptimizerState, g: np.ndarray, lr: float
) -> tuple[np.ndarray, OptimizerState]:
    """One AdamW update; returns new arrays and leaves the inputs untouched.

    ``g`` is expected to be clipped already.  The decay term uses the
    pre-update parameters: ``p' = p * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)``.
    """
    if params.shape != g.shape or params.shape != state.m.shape:
        raise ValidationError("params, gradient and optimizer moments must have equal length")
    if not lr >= 0 or not math.isfinite(lr):
        raise ValidationError(f"learning rate must be finite and non-negative, got {lr}")
    _require_finite("params", params)
    _require_finite("gradient", g)

    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    m = b1 * state.m + (1 - b1) * g
    v = b2 * state.v + (1 - b2) * (g * g)
    m_hat = m / (1 - b1**step)
    v_hat = v / (1 - b2**step)
    new_params = params * (1 - lr * state.weight_decay) - lr * (m_hat / (np.sqrt(v_hat) + state.eps))
    _require_finite("updated params", new_params)
    new_state = OptimizerState(m, v, step, b1, b2, state.eps, state.weight_decay, state.clip_norm)
    return new_params, new_state
