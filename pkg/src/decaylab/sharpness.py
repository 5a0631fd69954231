"""Hessian-trace sharpness: Hutchinson estimates and an exact loss-only oracle.

Functions here accept any *objective* exposing ``n_params``,
``loss(params, batch)`` and ``grad(params, batch)``; :class:`ModelConfig`
is one, and tests plug in quadratic surrogates.

Hessian-vector products are central differences of the analytic gradient
along the normalised direction.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from decaylab.errors import NumericError, ValidationError
from decaylab.rng import Rng

EVAL_SPLITS = ("pretrain_valid", "sft_valid")
Sampler = Callable[[Rng, int], object]


@dataclass(frozen=True)
class SharpnessProbeConfig:
    n_samples: int = 50
    probe_stride: int = 250
    eval_split: str = "pretrain_valid"
    batch_size: int = 32
    max_batches: int = 4096
    fd_epsilon_base: float = 1e-4
    seed: int = 0
    fresh_batches: bool = True

    def validate(self) -> list[str]:
        problems = []
        if self.n_samples < 1:
            problems.append("n_samples must be >= 1")
        if self.probe_stride < 1:
            problems.append("probe_stride must be >= 1")
        if not self.fd_epsilon_base > 0:
            problems.append("fd_epsilon_base must be positive")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.max_batches < 1:
            problems.append("max_batches must be >= 1")
        if self.eval_split not in EVAL_SPLITS:
            problems.append(f"eval_split must be one of {EVAL_SPLITS}")
        return problems

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "probe_stride": self.probe_stride,
            "eval_split": self.eval_split,
            "batch_size": self.batch_size,
            "max_batches": self.max_batches,
            "fd_epsilon_base": self.fd_epsilon_base,
            "seed": self.seed,
            "fresh_batches": self.fresh_batches,
        }


@dataclass(frozen=True)
class SharpnessSample:
    step: int
    mean_trace: float
    stderr: float
    n_samples: int
    seed: int
    eval_split: str = "pretrain_valid"
    values: tuple[float, ...] = field(default=(), repr=False, compare=False)


def hvp_fd(objective, params: np.ndarray, batch, v: np.ndarray, eps: float) -> np.ndarray:
    """Approximate ``H @ v`` by differencing the gradient along ``v / |v|``."""
    if not eps > 0:
        raise ValidationError("eps must be positive")
    norm = float(np.linalg.norm(v))
    if not math.isfinite(norm) or norm < 1e-300:
        raise ValidationError("direction must have a finite, non-zero norm")
    unit = v / norm
    g_plus = objective.grad(params + eps * unit, batch)
    g_minus = objective.grad(params - eps * unit, batch)
    hv = (g_plus - g_minus) / (2.0 * eps) * norm
    if not np.all(np.isfinite(hv)):
        raise NumericError("Hessian-vector product is not finite")
    return hv


def probe_epsilon(params: np.ndarray, base: float) -> float:
    return base * (1.0 + float(np.linalg.norm(params)) / math.sqrt(len(params)))


def exact_trace(objective, params: np.ndarray, batch, h: float = 1e-3) -> float:
    """Sum of second differences of the loss along every coordinate axis.

    Uses loss evaluations only, so it checks the gradient code independently.
    """
    d = objective.n_params
    if d > getattr(objective, "oracle_d_max", 5_000):
        raise ValidationError(f"model with {d} parameters is too large for the exact-trace oracle")
    if not h > 0:
        raise ValidationError("h must be positive")
    center = objective.loss(params, batch)
    work = np.array(params, dtype=np.float64, copy=True)
    total = 0.0
    for i in range(d):
        orig = work[i]
        work[i] = orig + h
        up = objective.loss(work, batch)
        work[i] = orig - h
        down = objective.loss(work, batch)
        work[i] = orig
        total += (up - 2.0 * center + down) / (h * h)
    return total


def probe_batches(sampler: Sampler, probe: SharpnessProbeConfig) -> list:
    """The evaluation batch used by each Hutchinson sample, in sample order."""
    root = Rng.from_seed(probe.seed).derive("hutchinson")
    if not probe.fresh_batches:
        batch = sampler(root.derive("batch", 0), probe.batch_size)
        return [batch] * probe.n_samples
    cache: dict[int, object] = {}
    out = []
    for i in range(probe.n_samples):
        k = i % probe.max_batches
        if k not in cache:
            cache[k] = sampler(root.derive("batch", k), probe.batch_size)
        out.append(cache[k])
    return out


def hutchinson_trace(
    objective,
    params: np.ndarray,
    sampler: Sampler,
    probe: SharpnessProbeConfig,
    step: int = 0,
    jobs: int = 1,
) -> SharpnessSample:
    """Estimate Tr(H) as the mean of ``z.T @ H @ z`` over Rademacher ``z``.

    ``sampler(rng, batch_size)`` returns an evaluation batch.  Sample ``i``
    draws its probe vector from a stream keyed by ``(seed, i)``, so the
    result does not depend on ``jobs``.
    """
    problems = probe.validate()
    if problems:
        raise ValidationError("; ".join(problems))
    d = len(params)
    eps = probe_epsilon(params, probe.fd_epsilon_base)
    batches = probe_batches(sampler, probe)
    root = Rng.from_seed(probe.seed).derive("hutchinson")

    def one(i: int) -> float:
        z = root.derive("probe", i).signs(d)
        return float(z @ hvp_fd(objective, params, batches[i], z, eps))

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            values = list(pool.map(one, range(probe.n_samples)))
    else:
        values = [one(i) for i in range(probe.n_samples)]
    mean, stderr = mean_and_stderr(values)
    return SharpnessSample(step, mean, stderr, probe.n_samples, probe.seed, probe.eval_split, tuple(values))


def mean_and_stderr(values) -> tuple[float, float]:
    """Sequential mean and ``sample std / sqrt(n)`` (0 for a single value)."""
    n = len(values)
    total = 0.0
    for x in values:
        total += x
    mean = total / n
    if n < 2:
        return mean, 0.0
    ss = 0.0
    for x in values:
        ss += (x - mean) ** 2
    return mean, math.sqrt(ss / (n - 1)) / math.sqrt(n)


class QuadraticObjective:
    """``L(theta) = 0.5 * theta.T @ A @ theta``; ignores the batch."""

    def __init__(self, a: np.ndarray, oracle_d_max: Optional[int] = None):
        self.a = np.asarray(a, dtype=np.float64)
        self.n_params = self.a.shape[0]
        if oracle_d_max is not None:
            self.oracle_d_max = oracle_d_max

    def loss(self, params, batch=None) -> float:
        return 0.5 * float(params @ self.a @ params)

    def grad(self, params, batch=None) -> np.ndarray:
        return self.a @ params
