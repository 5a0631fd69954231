"""Closed-form learning-rate schedules.

Every schedule shares a linear warmup ``eta_max * t / t_warmup`` for
``t <= t_warmup`` and then follows its family:

* ``wso``: constant ``eta_max``.
* ``wsd``: constant until ``t_stable``, then linear to ``alpha_pre * eta_max``.
* ``cosine``: half-cosine from ``eta_max`` to ``alpha_pre * eta_max``.
* ``linear``: linear from ``eta_max`` to ``alpha_pre * eta_max``.
* ``sft-cosine``: cosine to zero (``alpha_pre`` is ignored).

A mid-training stage continues from the final pre-training LR and decays it
linearly to ``alpha_mid`` times that value over ``t_mid`` steps.

Step indices are integers; ``lr_at(spec, 0) == 0`` for every family.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Union

from decaylab.errors import ScheduleRangeError, ValidationError


class Family(str, enum.Enum):
    WSO = "wso"
    WSD = "wsd"
    COSINE = "cosine"
    LINEAR = "linear"
    SFT_COSINE = "sft-cosine"


@dataclass(frozen=True)
class ScheduleSpec:
    family: Family
    eta_max: float
    alpha_pre: float = 0.0
    t_warmup: int = 0
    t_total: int = 1
    stable_ratio: float = 0.75

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))

    @property
    def t_stable(self) -> int:
        # round() is ties-to-even
        return self.t_warmup + round(self.stable_ratio * (self.t_total - self.t_warmup))

    @property
    def effective_alpha(self) -> float:
        if self.family is Family.WSO:
            return 1.0
        if self.family is Family.SFT_COSINE:
            return 0.0
        return self.alpha_pre

    def to_dict(self) -> dict:
        return {
            "family": self.family.value,
            "eta_max": self.eta_max,
            "alpha_pre": self.alpha_pre,
            "t_warmup": self.t_warmup,
            "t_total": self.t_total,
            "stable_ratio": self.stable_ratio,
        }


@dataclass(frozen=True)
class MidScheduleSpec:
    base: ScheduleSpec
    alpha_mid: float
    t_mid: int

    @property
    def t_start(self) -> int:
        return self.base.t_total

    @property
    def t_end(self) -> int:
        return self.base.t_total + self.t_mid


AnySchedule = Union[ScheduleSpec, MidScheduleSpec]


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def validate(spec: AnySchedule) -> list[str]:
    """Return human-readable invariant violations; empty means valid."""
    if isinstance(spec, MidScheduleSpec):
        problems = validate(spec.base)
        if not 0.0 <= spec.alpha_mid <= 1.0:
            problems.append("alpha_mid out of [0,1]")
        if not _is_int(spec.t_mid) or spec.t_mid <= 0:
            problems.append("t_mid must be a positive integer")
        return problems

    problems = []
    if not (isinstance(spec.eta_max, (int, float)) and math.isfinite(spec.eta_max) and spec.eta_max > 0):
        problems.append("eta_max must be positive and finite")
    if not 0.0 <= spec.alpha_pre <= 1.0:
        problems.append("alpha_pre out of [0,1]")
    if not _is_int(spec.t_warmup) or spec.t_warmup < 0:
        problems.append("t_warmup must be a non-negative integer")
    if not _is_int(spec.t_total):
        problems.append("t_total must be an integer")
    elif _is_int(spec.t_warmup) and spec.t_total <= spec.t_warmup:
        problems.append("t_total must exceed t_warmup")
    if spec.family is Family.WSD:
        if not 0.0 < spec.stable_ratio <= 1.0:
            problems.append("stable_ratio out of (0,1]")
        elif not problems and not spec.t_warmup < spec.t_stable <= spec.t_total:
            problems.append("t_stable must satisfy t_warmup < t_stable <= t_total")
    return problems


def _check(spec: AnySchedule) -> None:
    # specs are frozen, so a spec that validated once stays valid
    if spec.__dict__.get("_valid"):
        return
    problems = validate(spec)
    if problems:
        raise ValidationError("; ".join(problems))
    spec.__dict__["_valid"] = True


def _warmup(spec: ScheduleSpec, t: int) -> float:
    if t == 0:
        return 0.0
    return spec.eta_max * (t / spec.t_warmup)


def _lr(spec: ScheduleSpec, t: int) -> float:
    if t <= spec.t_warmup:
        return _warmup(spec, t)
    eta = spec.eta_max
    family = spec.family
    if family is Family.WSO:
        return eta
    if family is Family.WSD:
        t_stable = spec.t_stable
        if t <= t_stable:
            return eta
        a = spec.alpha_pre
        return eta * ((1 - a) * ((spec.t_total - t) / (spec.t_total - t_stable)) + a)
    if family is Family.LINEAR:
        a = spec.alpha_pre
        return eta * ((1 - a) * ((spec.t_total - t) / (spec.t_total - spec.t_warmup)) + a)
    a = spec.effective_alpha  # cosine, sft-cosine
    progress = (t - spec.t_warmup) / (spec.t_total - spec.t_warmup)
    return eta * (a + (1 - a) / 2 * (1 + math.cos(progress * math.pi)))


def lr_at(spec: ScheduleSpec, t: int) -> float:
    """Learning rate of ``spec`` at integer step ``t`` in ``[0, t_total]``."""
    _check(spec)
    if not 0 <= t <= spec.t_total:
        raise ScheduleRangeError(f"step {t} outside [0, {spec.t_total}]")
    return _lr(spec, t)


def mid_lr_at(spec: MidScheduleSpec, t: int) -> float:
    """Mid-training LR at absolute step ``t`` in ``(t_pre, t_pre + t_mid]``."""
    _check(spec)
    if not spec.t_start < t <= spec.t_end:
        raise ScheduleRangeError(f"step {t} outside ({spec.t_start}, {spec.t_end}]")
    a = spec.alpha_mid
    start = _lr(spec.base, spec.base.t_total)
    return start * ((1 - a) * ((spec.t_end - t) / spec.t_mid) + a)


def schedule_at(spec: AnySchedule, t: int) -> float:
    if isinstance(spec, MidScheduleSpec):
        return mid_lr_at(spec, t)
    return lr_at(spec, t)


def schedule_trace(spec: AnySchedule, stride: int) -> list[tuple[int, float]]:
    """Sample the schedule every ``stride`` steps, always including the last step.

    Pre-training style specs start at 0; mid specs start at the first step
    after the pre-training window.
    """
    if stride < 1:
        raise ValidationError("stride must be >= 1")
    _check(spec)
    if isinstance(spec, MidScheduleSpec):
        steps = list(range(spec.t_start + stride, spec.t_end + 1, stride))
        if not steps or steps[0] != spec.t_start + 1:
            steps.insert(0, spec.t_start + 1)
        end = spec.t_end
    else:
        steps = list(range(0, spec.t_total + 1, stride))
        end = spec.t_total
    if steps[-1] != end:
        steps.append(end)
    return [(t, schedule_at(spec, t)) for t in steps]
