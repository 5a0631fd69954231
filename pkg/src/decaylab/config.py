"""Pipeline and experiment configuration, JSON (de)serialisation, grid expansion.

Config files are a single JSON document; see ``README.md`` for the schema.
Parse errors raise :class:`ConfigError` naming the offending field path.
"""

from __future__ import annotations

import copy
import hashlib
import itertools
import json
import math
import os
from dataclasses import dataclass, field, replace
from typing import Any, Optional

from decaylab.errors import ValidationError
from decaylab.model import ModelConfig
from decaylab.optim import OptimizerState
from decaylab.schedule import AnySchedule, Family, MidScheduleSpec, ScheduleSpec, validate
from decaylab.sharpness import SharpnessProbeConfig

SCHEMA_VERSION = 1
STAGES = ("pre", "mid", "sft")
SFT_DEFAULT_WARMUP = 100

_OPT_DEFAULTS = {"beta1": 0.9, "beta2": 0.95, "eps": 1e-8, "weight_decay": 0.1, "clip_norm": 1.0}
_SFT_OPT_DEFAULTS = {**_OPT_DEFAULTS, "weight_decay": 0.0}


class ConfigError(ValidationError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass(frozen=True)
class CorpusRef:
    path: str
    split_fraction: float = 0.9


@dataclass(frozen=True)
class StageConfig:
    stage: str
    corpus: str
    schedule: AnySchedule
    steps: int
    batch_size: int = 32
    optimizer: dict = field(default_factory=dict, hash=False)
    probes: tuple[SharpnessProbeConfig, ...] = ()
    eval_stride: int = 100

    def optimizer_hparams(self) -> dict:
        base = _SFT_OPT_DEFAULTS if self.stage == "sft" else _OPT_DEFAULTS
        return {**base, **self.optimizer}

    def fresh_optimizer(self, d: int) -> OptimizerState:
        return OptimizerState.zeros(d, **self.optimizer_hparams())

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"stage": self.stage, "corpus": self.corpus, "steps": self.steps}
        if isinstance(self.schedule, MidScheduleSpec):
            out["schedule"] = {"alpha_mid": self.schedule.alpha_mid}
        else:
            out["schedule"] = self.schedule.to_dict()
        out["batch_size"] = self.batch_size
        out["optimizer"] = dict(sorted(self.optimizer.items()))
        out["probes"] = [p.to_dict() for p in self.probes]
        out["eval_stride"] = self.eval_stride
        return out

    def key(self) -> str:
        """Canonical identity of this stage's choices, used by the selection procedures."""
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass(frozen=True)
class PipelineConfig:
    model: ModelConfig
    corpora: dict
    stages: tuple[StageConfig, ...]
    seed: int = 0
    eval_batches: int = 8
    eval_batch_size: int = 64
    carry_optimizer_state: bool = False
    checkpoint_every: int = 0

    def stage(self, name: str) -> Optional[StageConfig]:
        for s in self.stages:
            if s.stage == name:
                return s
        return None

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "corpora": {
                name: {"path": ref.path, "split_fraction": ref.split_fraction}
                for name, ref in sorted(self.corpora.items())
            },
            "stages": [s.to_dict() for s in self.stages],
            "seed": self.seed,
            "eval": {"batches": self.eval_batches, "batch_size": self.eval_batch_size},
            "carry_optimizer_state": self.carry_optimizer_state,
            "checkpoint_every": self.checkpoint_every,
        }

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @property
    def run_id(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:12]

    def validate(self) -> list[str]:
        problems = [f"model: {p}" for p in self.model.validate()]
        names = [s.stage for s in self.stages]
        if not names or names[0] != "pre":
            problems.append("stages: the first stage must be 'pre'")
        if names != [n for n in STAGES if n in names] or len(set(names)) != len(names):
            problems.append("stages: must be pre, optional mid, optional sft, in that order")
        for i, s in enumerate(self.stages):
            where = f"stages[{i}]"
            if s.corpus not in self.corpora:
                problems.append(f"{where}.corpus: unknown corpus {s.corpus!r}")
            if s.steps < 0:
                problems.append(f"{where}.steps: must be >= 0")
            if s.batch_size < 1:
                problems.append(f"{where}.batch_size: must be >= 1")
            if s.eval_stride < 1:
                problems.append(f"{where}.eval_stride: must be >= 1")
            if s.steps > 0:
                problems += [f"{where}.schedule: {p}" for p in validate(s.schedule)]
                if isinstance(s.schedule, MidScheduleSpec):
                    if s.schedule.t_mid != s.steps:
                        problems.append(f"{where}.schedule: t_mid must equal steps")
                elif s.schedule.t_total != s.steps:
                    problems.append(f"{where}.schedule: t_total must equal steps")
            for j, p in enumerate(s.probes):
                problems += [f"{where}.probes[{j}]: {m}" for m in p.validate()]
                if p.eval_split == "sft_valid" and self.stage("sft") is None:
                    problems.append(f"{where}.probes[{j}]: sft_valid requires an sft stage")
        for name, ref in self.corpora.items():
            if not 0.0 < ref.split_fraction < 1.0:
                problems.append(f"corpora.{name}.split_fraction: must be in (0,1)")
        if self.eval_batches < 1 or self.eval_batch_size < 1:
            problems.append("eval: batches and batch_size must be >= 1")
        return problems


@dataclass(frozen=True)
class SweepGrid:
    """Per-stage value lists; the grid is their cartesian product."""

    pre_family: tuple[str, ...] = ()
    alpha_pre: tuple[float, ...] = ()
    alpha_mid: tuple[float, ...] = ()
    sft_eta_max: tuple[float, ...] = ()
    seeds: tuple[int, ...] = ()

    def to_dict(self) -> dict:
        out: dict[str, Any] = {}
        if self.pre_family or self.alpha_pre:
            out["pre"] = {}
            if self.pre_family:
                out["pre"]["family"] = list(self.pre_family)
            if self.alpha_pre:
                out["pre"]["alpha_pre"] = list(self.alpha_pre)
        if self.alpha_mid:
            out["mid"] = {"alpha_mid": list(self.alpha_mid)}
        if self.sft_eta_max:
            out["sft"] = {"eta_max": list(self.sft_eta_max)}
        if self.seeds:
            out["seeds"] = list(self.seeds)
        return out


@dataclass(frozen=True)
class ExperimentConfig:
    base: PipelineConfig
    sweep: Optional[SweepGrid] = None
    output_dir: str = "out"
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        out = {"schema_version": self.schema_version, **self.base.to_dict(), "output_dir": self.output_dir}
        if self.sweep is not None:
            out["sweep"] = self.sweep.to_dict()
        return out

    def expand(self) -> list[PipelineConfig]:
        """Cartesian product of the sweep lists, de-duplicated, each one validated."""
        grid = self.sweep or SweepGrid()
        pre = self.base.stage("pre")
        families = grid.pre_family or (pre.schedule.family.value,)
        alphas = grid.alpha_pre or (pre.schedule.alpha_pre,)
        mid = self.base.stage("mid")
        alpha_mids = grid.alpha_mid or ((mid.schedule.alpha_mid,) if mid else (None,))
        sft = self.base.stage("sft")
        sft_lrs = grid.sft_eta_max or ((sft.schedule.eta_max,) if sft else (None,))
        seeds = grid.seeds or (self.base.seed,)

        out: list[PipelineConfig] = []
        seen = set()
        for fam, a_pre, a_mid, lr, seed in itertools.product(families, alphas, alpha_mids, sft_lrs, seeds):
            if Family(fam) is Family.WSO:
                a_pre = 1.0
            new_pre_sched = replace(pre.schedule, family=Family(fam), alpha_pre=a_pre)
            stages = []
            for s in self.base.stages:
                if s.stage == "pre":
                    stages.append(replace(s, schedule=new_pre_sched))
                elif s.stage == "mid":
                    stages.append(replace(s, schedule=MidScheduleSpec(new_pre_sched, a_mid, s.schedule.t_mid)))
                else:
                    stages.append(replace(s, schedule=replace(s.schedule, eta_max=lr)))
            cfg = replace(self.base, stages=tuple(stages), seed=seed)
            problems = cfg.validate()
            if problems:
                raise ConfigError("sweep", f"expanded config invalid: {'; '.join(problems)}")
            if cfg.run_id not in seen:
                seen.add(cfg.run_id)
                out.append(cfg)
        return out


# ---------------------------------------------------------------------------
# Parsing


def _get(obj: dict, key: str, path: str, kind, default=...):
    if not isinstance(obj, dict):
        raise ConfigError(path, "expected an object")
    if key not in obj:
        if default is ...:
            raise ConfigError(f"{path}.{key}" if path else key, "missing required field")
        return default
    value = obj[key]
    where = f"{path}.{key}" if path else key
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ConfigError(where, f"expected a finite number, got {value!r}")
        return float(value)
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(where, f"expected an integer, got {value!r}")
        return value
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(where, f"expected true/false, got {value!r}")
        return value
    if not isinstance(value, kind):
        raise ConfigError(where, f"expected {kind.__name__}, got {type(value).__name__}")
    return value


def _list(obj: dict, key: str, path: str, kind) -> tuple:
    values = _get(obj, key, path, list, [])
    out = []
    for i, v in enumerate(values):
        out.append(_get({key: v}, key, path, kind) if kind is not str else _str_item(v, f"{path}.{key}[{i}]"))
    return tuple(out)


def _str_item(v, where):
    if not isinstance(v, str):
        raise ConfigError(where, f"expected a string, got {v!r}")
    return v


def _parse_schedule(obj: dict, path: str, stage: str, steps: int) -> ScheduleSpec:
    default_family = "sft-cosine" if stage == "sft" else ...
    family = _get(obj, "family", path, str, default_family)
    try:
        family = Family(family)
    except ValueError:
        raise ConfigError(f"{path}.family", f"unknown family {family!r}; expected one of "
                          f"{[f.value for f in Family]}") from None
    default_warmup = min(SFT_DEFAULT_WARMUP, steps // 10) if stage == "sft" else ...
    return ScheduleSpec(
        family=family,
        eta_max=_get(obj, "eta_max", path, float),
        alpha_pre=_get(obj, "alpha_pre", path, float, 1.0 if family is Family.WSO else 0.0),
        t_warmup=_get(obj, "t_warmup", path, int, default_warmup),
        t_total=_get(obj, "t_total", path, int, steps),
        stable_ratio=_get(obj, "stable_ratio", path, float, 0.75),
    )


def _parse_probe(obj: dict, path: str) -> SharpnessProbeConfig:
    d = SharpnessProbeConfig()
    probe = SharpnessProbeConfig(
        n_samples=_get(obj, "n_samples", path, int, d.n_samples),
        probe_stride=_get(obj, "probe_stride", path, int, d.probe_stride),
        eval_split=_get(obj, "eval_split", path, str, d.eval_split),
        batch_size=_get(obj, "batch_size", path, int, d.batch_size),
        max_batches=_get(obj, "max_batches", path, int, d.max_batches),
        fd_epsilon_base=_get(obj, "fd_epsilon_base", path, float, d.fd_epsilon_base),
        seed=_get(obj, "seed", path, int, d.seed),
        fresh_batches=_get(obj, "fresh_batches", path, bool, d.fresh_batches),
    )
    problems = probe.validate()
    if problems:
        raise ConfigError(path, "; ".join(problems))
    return probe


def _parse_stage(obj: dict, path: str, pre_schedule: Optional[ScheduleSpec]) -> StageConfig:
    stage = _get(obj, "stage", path, str)
    if stage not in STAGES:
        raise ConfigError(f"{path}.stage", f"expected one of {STAGES}, got {stage!r}")
    steps = _get(obj, "steps", path, int)
    sched_obj = _get(obj, "schedule", path, dict)
    if stage == "mid":
        if pre_schedule is None:
            raise ConfigError(f"{path}.stage", "mid stage requires a preceding pre stage")
        schedule: AnySchedule = MidScheduleSpec(
            pre_schedule, _get(sched_obj, "alpha_mid", f"{path}.schedule", float), steps
        )
    else:
        schedule = _parse_schedule(sched_obj, f"{path}.schedule", stage, steps)
    opt_obj = _get(obj, "optimizer", path, dict, {})
    optimizer = {}
    for k in opt_obj:
        if k not in _OPT_DEFAULTS:
            raise ConfigError(f"{path}.optimizer.{k}", f"unknown optimizer setting; expected {list(_OPT_DEFAULTS)}")
        optimizer[k] = _get(opt_obj, k, f"{path}.optimizer", float)
    probes = tuple(
        _parse_probe(p, f"{path}.probes[{i}]") for i, p in enumerate(_get(obj, "probes", path, list, []))
    )
    return StageConfig(
        stage=stage,
        corpus=_get(obj, "corpus", path, str),
        schedule=schedule,
        steps=steps,
        batch_size=_get(obj, "batch_size", path, int, 32),
        optimizer=optimizer,
        probes=probes,
        eval_stride=_get(obj, "eval_stride", path, int, 100),
    )


def parse_pipeline(obj: dict) -> PipelineConfig:
    m = _get(obj, "model", "", dict)
    model = ModelConfig(
        context_window=_get(m, "context_window", "model", int),
        embed_dim=_get(m, "embed_dim", "model", int),
        hidden_dims=_list(m, "hidden_dims", "model", int),
        activation=_get(m, "activation", "model", str, "tanh"),
        d_max=_get(m, "d_max", "model", int, 50_000),
    )
    corpora = {}
    for name, ref in _get(obj, "corpora", "", dict).items():
        where = f"corpora.{name}"
        corpora[name] = CorpusRef(_get(ref, "path", where, str), _get(ref, "split_fraction", where, float, 0.9))
    stages = []
    pre_schedule = None
    for i, s in enumerate(_get(obj, "stages", "", list)):
        parsed = _parse_stage(s, f"stages[{i}]", pre_schedule)
        if parsed.stage == "pre":
            pre_schedule = parsed.schedule
        stages.append(parsed)
    ev = _get(obj, "eval", "", dict, {})
    cfg = PipelineConfig(
        model=model,
        corpora=corpora,
        stages=tuple(stages),
        seed=_get(obj, "seed", "", int, 0),
        eval_batches=_get(ev, "batches", "eval", int, 8),
        eval_batch_size=_get(ev, "batch_size", "eval", int, 64),
        carry_optimizer_state=_get(obj, "carry_optimizer_state", "", bool, False),
        checkpoint_every=_get(obj, "checkpoint_every", "", int, 0),
    )
    problems = cfg.validate()
    if problems:
        first = problems[0]
        path, _, msg = first.partition(": ")
        raise ConfigError(path, msg or first)
    return cfg


def parse_experiment(obj: dict) -> ExperimentConfig:
    version = _get(obj, "schema_version", "", int, SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported version {version}; expected {SCHEMA_VERSION}")
    base = parse_pipeline(obj)
    sweep = None
    if "sweep" in obj:
        sw = _get(obj, "sweep", "", dict)
        pre = _get(sw, "pre", "sweep", dict, {})
        mid = _get(sw, "mid", "sweep", dict, {})
        sft = _get(sw, "sft", "sweep", dict, {})
        sweep = SweepGrid(
            pre_family=_list(pre, "family", "sweep.pre", str),
            alpha_pre=_list(pre, "alpha_pre", "sweep.pre", float),
            alpha_mid=_list(mid, "alpha_mid", "sweep.mid", float),
            sft_eta_max=_list(sft, "eta_max", "sweep.sft", float),
            seeds=_list(sw, "seeds", "sweep", int),
        )
        for i, fam in enumerate(sweep.pre_family):
            if fam not in {f.value for f in Family}:
                raise ConfigError(f"sweep.pre.family[{i}]", f"unknown family {fam!r}")
        if sweep.alpha_mid and base.stage("mid") is None:
            raise ConfigError("sweep.mid", "alpha_mid sweep requires a mid stage")
        if sweep.sft_eta_max and base.stage("sft") is None:
            raise ConfigError("sweep.sft", "eta_max sweep requires an sft stage")
    return ExperimentConfig(
        base=base,
        sweep=sweep,
        output_dir=_get(obj, "output_dir", "", str, "out"),
        schema_version=version,
    )


def load_experiment(path: str | os.PathLike) -> ExperimentConfig:
    with open(path, encoding="utf-8") as f:
        text = f.read()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise ConfigError("", "top-level JSON value must be an object")
    return parse_experiment(obj)


def dump_experiment(config: ExperimentConfig) -> str:
    return json.dumps(config.to_dict(), indent=2, sort_keys=False) + "\n"


def pipeline_from_dict(obj: dict) -> PipelineConfig:
    return parse_pipeline(copy.deepcopy(obj))
