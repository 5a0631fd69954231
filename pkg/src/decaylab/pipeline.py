"""Staged training (pre -> optional mid -> SFT) and pipeline selection.

A run threads one parameter vector through its stages.  Each stage draws
training batches from its own stream (derived from the run seed and the
stage name), evaluates validation loss on a fixed set of batches, and takes
Hutchinson sharpness samples at the configured cadence.

``greedy_select`` picks the best configuration stage by stage, each on its
own stage metric; ``joint_select`` picks the configuration whose final
stage is best.  All metrics are validation losses, so lower is better.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from decaylab.checkpoint import Checkpoint, save_checkpoint
from decaylab.config import PipelineConfig, StageConfig
from decaylab.data import Corpus, Batch, check_window, load_corpus, sample_batch
from decaylab.errors import NumericError, ValidationError
from decaylab.model import forward_loss, init_params, loss_and_grad
from decaylab.optim import OptimizerState, adamw_step, clip_gradient
from decaylab.rng import Rng
from decaylab.schedule import MidScheduleSpec, lr_at, mid_lr_at
from decaylab.sharpness import SharpnessProbeConfig, SharpnessSample, hutchinson_trace

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SeriesPoint:
    step: int
    lr: float
    train_loss: float
    valid_loss: float


@dataclass
class StageRecord:
    stage: str
    series: list[SeriesPoint] = field(default_factory=list)
    sharpness: list[SharpnessSample] = field(default_factory=list)
    final_valid_loss: float = math.nan
    steps_completed: int = 0
    status: str = "ok"
    message: str = ""

    def copy(self) -> StageRecord:
        return replace(self, series=list(self.series), sharpness=list(self.sharpness))


@dataclass
class RunRecord:
    config: PipelineConfig
    stages: list[StageRecord] = field(default_factory=list)
    status: str = "ok"
    message: str = ""
    wall_clock: float = 0.0

    @property
    def run_id(self) -> str:
        return self.config.run_id

    @property
    def seed(self) -> int:
        return self.config.seed

    def stage(self, name: str) -> Optional[StageRecord]:
        for s in self.stages:
            if s.stage == name:
                return s
        return None

    @property
    def stage_metrics(self) -> tuple[float, ...]:
        """Final validation loss per configured stage; inf where missing or diverged."""
        out = []
        for cfg in self.config.stages:
            rec = self.stage(cfg.stage)
            value = rec.final_valid_loss if rec is not None and rec.status == "ok" else math.inf
            out.append(value if math.isfinite(value) else math.inf)
        return tuple(out)

    @property
    def post_metric(self) -> float:
        return self.stage_metrics[-1]

    @property
    def stage_keys(self) -> tuple[str, ...]:
        """Key of each stage prefix: everything that determines the model after that stage."""
        d = self.config.to_dict()
        common = {k: v for k, v in d.items() if k != "stages"}
        return tuple(
            json.dumps({**common, "stages": d["stages"][: i + 1]}, sort_keys=True)
            for i in range(len(d["stages"]))
        )


@dataclass
class TrainState:
    params: np.ndarray
    opt: OptimizerState
    rng: Rng
    step: int = 0

    def copy(self) -> TrainState:
        return TrainState(self.params.copy(), self.opt.copy(), self.rng.copy(), self.step)


# ---------------------------------------------------------------------------
# Running


def load_corpora(config: PipelineConfig, base_dir: str | os.PathLike = ".") -> dict[str, Corpus]:
    corpora = {}
    for name, ref in config.corpora.items():
        path = ref.path if os.path.isabs(ref.path) else os.path.join(base_dir, ref.path)
        corpora[name] = load_corpus(path, ref.split_fraction, name=name)
    return corpora


def stage_lr(stage: StageConfig, k: int) -> float:
    """LR for the ``k``-th update (1-based) of a stage."""
    if isinstance(stage.schedule, MidScheduleSpec):
        return mid_lr_at(stage.schedule, stage.schedule.t_start + k)
    return lr_at(stage.schedule, k)


def stage_rng(config: PipelineConfig, stage: StageConfig) -> Rng:
    return Rng.from_seed(config.seed).derive("stage", stage.stage)


def eval_batches(config: PipelineConfig, corpus: Corpus) -> list[Batch]:
    rng = Rng.from_seed(config.seed).derive("eval", corpus.name)
    out = []
    for _ in range(config.eval_batches):
        batch, rng = sample_batch(corpus, "valid", config.model.context_window, config.eval_batch_size, rng)
        out.append(batch)
    return out


def mean_loss(config: PipelineConfig, params: np.ndarray, batches: Sequence[Batch]) -> float:
    total = 0.0
    for b in batches:
        total += forward_loss(config.model, params, b)
    return total / len(batches)


def probe_sampler(config: PipelineConfig, corpus: Corpus):
    window = config.model.context_window

    def sampler(rng: Rng, batch_size: int) -> Batch:
        return sample_batch(corpus, "valid", window, batch_size, rng)[0]

    return sampler


def probe_corpus(config: PipelineConfig, corpora: dict[str, Corpus], eval_split: str) -> Corpus:
    stage = "pre" if eval_split == "pretrain_valid" else "sft"
    cfg = config.stage(stage)
    if cfg is None:
        raise ValidationError(f"eval split {eval_split!r} needs a {stage} stage")
    return corpora[cfg.corpus]


def run_probe(
    config: PipelineConfig,
    corpora: dict[str, Corpus],
    params: np.ndarray,
    probe: SharpnessProbeConfig,
    step: int,
) -> SharpnessSample:
    corpus = probe_corpus(config, corpora, probe.eval_split)
    effective = replace(probe, seed=(probe.seed + config.seed) % 2**64)
    return hutchinson_trace(config.model, params, probe_sampler(config, corpus), effective, step=step)


def initial_state(config: PipelineConfig, stage: StageConfig, params: np.ndarray,
                  previous: Optional[OptimizerState] = None) -> TrainState:
    """State at the start of ``stage``; moments carry over only if the config asks."""
    fresh = stage.fresh_optimizer(len(params))
    if previous is not None and config.carry_optimizer_state:
        fresh = OptimizerState(previous.m.copy(), previous.v.copy(), previous.step, **stage.optimizer_hparams())
    return TrainState(params.copy(), fresh, stage_rng(config, stage), 0)


def state_from_checkpoint(stage: StageConfig, ckpt: Checkpoint, opt_step_offset: int = 0) -> TrainState:
    opt = OptimizerState(ckpt.m, ckpt.v, ckpt.step + opt_step_offset, **stage.optimizer_hparams())
    return TrainState(ckpt.params, opt, ckpt.rng, ckpt.step)


def _checkpoint(directory, name: str, state: TrainState) -> None:
    save_checkpoint(os.path.join(directory, name), state.step, state.params, state.opt.m, state.opt.v, state.rng)


def run_stage(
    config: PipelineConfig,
    stage: StageConfig,
    state: TrainState,
    corpora: dict[str, Corpus],
    record: Optional[StageRecord] = None,
    checkpoint_dir: Optional[str] = None,
    stop_at: Optional[int] = None,
) -> tuple[TrainState, StageRecord]:
    """Train from ``state.step`` to ``stage.steps`` (or ``stop_at``), logging into ``record``.

    Each update is sample -> gradient -> clip -> AdamW with the scheduled LR.
    Validation loss is logged every ``eval_stride`` steps and at the last
    step; sharpness probes run every ``probe_stride`` steps and at the last
    step.  A non-finite loss ends the stage with status ``"diverged"``.
    """
    model = config.model
    corpus = corpora[stage.corpus]
    record = record if record is not None else StageRecord(stage.stage)
    valid = eval_batches(config, corpus)
    state = state.copy()
    last = stage.steps if stop_at is None else min(stop_at, stage.steps)

    if stage.steps == 0:
        record.final_valid_loss = mean_loss(config, state.params, valid)
        return state, record

    while state.step < last:
        k = state.step + 1
        batch, _ = sample_batch(corpus, "train", model.context_window, stage.batch_size, state.rng)
        lr = stage_lr(stage, k)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                loss, g = loss_and_grad(model, state.params, batch)
                if not math.isfinite(loss):
                    raise NumericError(f"non-finite training loss {loss}")
                g = clip_gradient(g, state.opt.clip_norm)
                params, opt = adamw_step(state.params, state.opt, g, lr)
        except NumericError as exc:
            record.status = "diverged"
            record.message = f"step {k}: {exc}"
            log.warning("stage %s diverged at step %d: %s", stage.stage, k, exc)
            return state, record
        state = TrainState(params, opt, state.rng, k)
        record.steps_completed = k

        final = k == stage.steps
        if final or k % stage.eval_stride == 0:
            valid_loss = mean_loss(config, state.params, valid)
            if not math.isfinite(valid_loss):
                record.status = "diverged"
                record.message = f"step {k}: non-finite validation loss"
                return state, record
            record.series.append(SeriesPoint(k, lr, loss, valid_loss))
            if final:
                record.final_valid_loss = valid_loss
        for probe in stage.probes:
            if final or k % probe.probe_stride == 0:
                try:
                    record.sharpness.append(run_probe(config, corpora, state.params, probe, k))
                except NumericError as exc:
                    log.warning("sharpness probe failed at step %d: %s", k, exc)
        if checkpoint_dir is not None:
            if config.checkpoint_every and k % config.checkpoint_every == 0:
                _checkpoint(checkpoint_dir, f"{stage.stage}-{k:08d}.ckpt", state)
            if final:
                _checkpoint(checkpoint_dir, f"{stage.stage}-final.ckpt", state)
    return state, record


def run_pipeline(
    config: PipelineConfig,
    corpora: Optional[dict[str, Corpus]] = None,
    base_dir: str | os.PathLike = ".",
    checkpoint_dir: Optional[str] = None,
) -> RunRecord:
    """Run every stage in order, passing parameters (and optionally moments) along."""
    problems = config.validate()
    if problems:
        raise ValidationError("; ".join(problems))
    if corpora is None:
        corpora = load_corpora(config, base_dir)
    for stage in config.stages:
        check_window(corpora[stage.corpus], config.model.context_window)

    started = time.perf_counter()
    record = RunRecord(config)
    params = init_params(config.model, config.seed)
    opt: Optional[OptimizerState] = None
    for stage in config.stages:
        state = initial_state(config, stage, params, opt)
        state, stage_record = run_stage(config, stage, state, corpora, checkpoint_dir=checkpoint_dir)
        record.stages.append(stage_record)
        params, opt = state.params, state.opt
        if stage_record.status != "ok":
            record.status = stage_record.status
            record.message = f"{stage.stage}: {stage_record.message}"
            break
    record.wall_clock = time.perf_counter() - started
    return record


def _run_one(args) -> RunRecord:
    config, base_dir, checkpoint_root = args
    ckpt = None
    if checkpoint_root is not None:
        ckpt = os.path.join(checkpoint_root, config.run_id)
        os.makedirs(ckpt, exist_ok=True)
    try:
        return run_pipeline(config, base_dir=base_dir, checkpoint_dir=ckpt)
    except (ValidationError, OSError) as exc:
        return RunRecord(config, status="error", message=str(exc))


def run_grid(
    configs: Sequence[PipelineConfig],
    base_dir: str | os.PathLike = ".",
    jobs: int = 1,
    checkpoint_root: Optional[str] = None,
) -> list[RunRecord]:
    """Run independent pipelines, optionally in worker processes; result order follows ``configs``."""
    tasks = [(c, base_dir, checkpoint_root) for c in configs]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_one, tasks))
    return [_run_one(t) for t in tasks]


# ---------------------------------------------------------------------------
# Selection


def _check_grid(records: Sequence[RunRecord]) -> None:
    if not records:
        raise ValidationError("selection needs a non-empty grid")
    shape = [s.stage for s in records[0].config.stages]
    for r in records:
        if [s.stage for s in r.config.stages] != shape:
            raise ValidationError("all grid members must share the same stage structure")


def _group_metric(group: Sequence[RunRecord], i: int) -> float:
    total = 0.0
    for r in group:
        total += r.stage_metrics[i]
    return total / len(group)


def greedy_select(records: Sequence[RunRecord]) -> RunRecord:
    """Stage-wise choice: fix the best earlier stage before looking at later ones."""
    _check_grid(records)
    candidates = list(records)
    for i in range(len(records[0].config.stages)):
        groups: dict[str, list[RunRecord]] = {}
        for r in candidates:
            groups.setdefault(r.stage_keys[i], []).append(r)
        best = min(groups, key=lambda key: (_group_metric(groups[key], i), key))
        candidates = groups[best]
    return min(candidates, key=lambda r: r.config.canonical_json())


def joint_select(records: Sequence[RunRecord]) -> RunRecord:
    """Best final-stage metric over all full pipelines; ties by canonical config order."""
    _check_grid(records)
    return min(records, key=lambda r: (r.post_metric, r.config.canonical_json()))


@dataclass(frozen=True)
class SelectionReport:
    greedy: RunRecord
    joint: RunRecord

    @property
    def agree(self) -> bool:
        return self.greedy.run_id == self.joint.run_id

    def summary(self) -> dict:
        return {
            "greedy_run_id": self.greedy.run_id,
            "greedy_post_metric": self.greedy.post_metric,
            "joint_run_id": self.joint.run_id,
            "joint_post_metric": self.joint.post_metric,
            "agree": self.agree,
            "post_metric_gap": self.greedy.post_metric - self.joint.post_metric,
        }


def compare_selections(records: Sequence[RunRecord]) -> SelectionReport:
    return SelectionReport(greedy_select(records), joint_select(records))
