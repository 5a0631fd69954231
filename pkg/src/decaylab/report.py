"""Run-record serialisation, relative-delta tables, and correlation summaries."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from decaylab.config import PipelineConfig, pipeline_from_dict
from decaylab.errors import FormatError, ValidationError
from decaylab.pipeline import RunRecord, SeriesPoint, StageRecord
from decaylab.schedule import Family, MidScheduleSpec
from decaylab.sharpness import SharpnessSample

RECORD_SCHEMA_VERSION = 1
CSV_HEADER = ("run_id", "stage", "step", "kind", "value", "eval_split")
KINDS = ("lr", "train_loss", "valid_loss", "sharpness_mean", "sharpness_stderr")


# ---------------------------------------------------------------------------
# CSV / JSON


def record_rows(record: RunRecord) -> list[tuple]:
    rows = []
    for st in record.stages:
        for p in st.series:
            rows.append((record.run_id, st.stage, p.step, "lr", p.lr, ""))
            rows.append((record.run_id, st.stage, p.step, "train_loss", p.train_loss, ""))
            rows.append((record.run_id, st.stage, p.step, "valid_loss", p.valid_loss, ""))
        for s in st.sharpness:
            rows.append((record.run_id, st.stage, s.step, "sharpness_mean", s.mean_trace, s.eval_split))
            rows.append((record.run_id, st.stage, s.step, "sharpness_stderr", s.stderr, s.eval_split))
    return rows


def rows_to_csv(rows: Iterable[tuple]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for run_id, stage, step, kind, value, split in rows:
        writer.writerow([run_id, stage, step, kind, repr(float(value)), split])
    return buf.getvalue()


def record_to_csv(record: RunRecord) -> str:
    """One row per logged event; floats use ``repr`` so they round-trip exactly."""
    return rows_to_csv(record_rows(record))


def _finite_or_none(x: float):
    return x if math.isfinite(x) else None


def record_to_json(record: RunRecord) -> dict:
    return {
        "schema_version": RECORD_SCHEMA_VERSION,
        "run_id": record.run_id,
        "seed": record.seed,
        "status": record.status,
        "message": record.message,
        "wall_clock_seconds": record.wall_clock,
        "config": record.config.to_dict(),
        "stages": [
            {
                "stage": st.stage,
                "status": st.status,
                "message": st.message,
                "steps_completed": st.steps_completed,
                "final_valid_loss": _finite_or_none(st.final_valid_loss),
                "sharpness": [
                    {"step": s.step, "eval_split": s.eval_split, "mean_trace": s.mean_trace,
                     "stderr": s.stderr, "n_samples": s.n_samples, "seed": s.seed, "values": list(s.values)}
                    for s in st.sharpness
                ],
            }
            for st in record.stages
        ],
    }


def write_record(record: RunRecord, directory: str | os.PathLike) -> tuple[str, str]:
    os.makedirs(directory, exist_ok=True)
    csv_path = os.path.join(directory, f"{record.run_id}.csv")
    json_path = os.path.join(directory, f"{record.run_id}.json")
    with open(csv_path, "w", encoding="utf-8", newline="") as f:
        f.write(record_to_csv(record))
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(record_to_json(record), f, indent=2)
        f.write("\n")
    return csv_path, json_path


def read_csv_rows(path: str | os.PathLike) -> list[tuple]:
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if tuple(header or ()) != CSV_HEADER:
            raise FormatError(f"{path}: unexpected CSV header {header}")
        rows = []
        for line in reader:
            run_id, stage, step, kind, value, split = line
            if kind not in KINDS:
                raise FormatError(f"{path}: unknown kind {kind!r}")
            rows.append((run_id, stage, int(step), kind, float(value), split))
        return rows


def read_record(json_path: str | os.PathLike) -> RunRecord:
    """Rebuild a record from its JSON sidecar and (if present) its CSV series."""
    with open(json_path, encoding="utf-8") as f:
        obj = json.load(f)
    if obj.get("schema_version") != RECORD_SCHEMA_VERSION:
        raise FormatError(f"{json_path}: unsupported record schema {obj.get('schema_version')}")
    config = pipeline_from_dict(obj["config"])
    record = RunRecord(config, status=obj["status"], message=obj["message"],
                       wall_clock=obj.get("wall_clock_seconds", 0.0))
    for st in obj["stages"]:
        final = st["final_valid_loss"]
        record.stages.append(StageRecord(
            stage=st["stage"],
            final_valid_loss=math.nan if final is None else final,
            steps_completed=st["steps_completed"],
            status=st["status"],
            message=st["message"],
            sharpness=[
                SharpnessSample(s["step"], s["mean_trace"], s["stderr"], s["n_samples"], s["seed"],
                                s["eval_split"], tuple(s.get("values", ())))
                for s in st["sharpness"]
            ],
        ))
    csv_path = os.path.splitext(os.fspath(json_path))[0] + ".csv"
    if os.path.exists(csv_path):
        points: dict[tuple[str, int], dict[str, float]] = {}
        for _, stage, step, kind, value, _ in read_csv_rows(csv_path):
            if kind in ("lr", "train_loss", "valid_loss"):
                points.setdefault((stage, step), {})[kind] = value
        for (stage, step), vals in points.items():
            rec = record.stage(stage)
            if rec is not None and len(vals) == 3:
                rec.series.append(SeriesPoint(step, vals["lr"], vals["train_loss"], vals["valid_loss"]))
        for st in record.stages:
            st.series.sort(key=lambda p: p.step)
    return record


def read_records(directory: str | os.PathLike) -> list[RunRecord]:
    if not os.path.isdir(directory):
        raise ValidationError(f"records directory {os.fspath(directory)!r} does not exist")
    names = sorted(n for n in os.listdir(directory) if n.endswith(".json"))
    records = []
    for n in names:
        with open(os.path.join(directory, n), encoding="utf-8") as f:
            try:
                obj = json.load(f)
            except json.JSONDecodeError:
                continue
        if isinstance(obj, dict) and "run_id" in obj and "config" in obj:
            records.append(read_record(os.path.join(directory, n)))
    if not records:
        raise ValidationError(f"no run records found in {os.fspath(directory)!r}")
    return records


# ---------------------------------------------------------------------------
# Delta tables


@dataclass(frozen=True)
class MetricSpec:
    name: str
    higher_is_better: bool = False


@dataclass(frozen=True)
class Row:
    family: str
    alpha_pre: float
    alpha_mid: Optional[float] = None

    @property
    def decays(self) -> bool:
        """True if any stage lowers the LR below its peak."""
        pre_decays = self.family != Family.WSO.value and self.alpha_pre < 1.0
        return pre_decays or (self.alpha_mid is not None and self.alpha_mid < 1.0)

    def label(self) -> str:
        names = {"wso": "WSO", "wsd": "WSD", "cosine": "Cosine", "linear": "Linear", "sft-cosine": "SFT-Cosine"}
        return names.get(self.family, self.family)


@dataclass
class DeltaTable:
    metrics: tuple[MetricSpec, ...]
    rows: list[Row]
    values: dict[Row, dict[str, float]]
    deltas: dict[Row, dict[str, float]]
    baselines: dict[str, Row]
    best: dict[str, Row] = field(default_factory=dict)

    def render(self, digits: int = 3) -> str:
        """Aligned plain-text table; best value per column is marked with ``*``."""
        show_mid = any(r.alpha_mid is not None for r in self.rows)
        head = ["Scheduler", "alpha_pre"] + (["alpha_mid"] if show_mid else [])
        head += [f"{m.name} {'(up)' if m.higher_is_better else '(down)'} delta" for m in self.metrics]
        lines = [head]
        for r in self.rows:
            cells = [r.label(), f"{r.alpha_pre:.1f}"]
            if show_mid:
                cells.append("-" if r.alpha_mid is None else f"{r.alpha_mid:.1f}")
            for m in self.metrics:
                d = self.deltas[r][m.name]
                text = "nan" if math.isnan(d) else f"{d:+.{digits}f}"
                if self.best.get(m.name) == r:
                    text += "*"
                if self.baselines[m.name] == r:
                    text += " (base)"
                cells.append(text)
            lines.append(cells)
        widths = [max(len(line[i]) for line in lines) for i in range(len(head))]
        out = []
        for j, line in enumerate(lines):
            out.append("  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip())
            if j == 0:
                out.append("  ".join("-" * w for w in widths))
        return "\n".join(out) + "\n"


def _better(a: float, b: float, higher: bool) -> bool:
    return a > b if higher else a < b


def delta_table(entries: Sequence[tuple[Row, dict[str, float]]], metrics: Sequence[MetricSpec]) -> DeltaTable:
    """Differences of every row from the best decay-based row, per column.

    ``entries`` pairs a row key with its metric values.  Rows that never
    decay (WSO-like) can't be a baseline.  For both directions the delta is
    ``candidate - baseline``.
    """
    metrics = tuple(metrics)
    values: dict[Row, dict[str, float]] = {}
    for row, vals in entries:
        if row in values:
            raise ValidationError(f"duplicate row {row}")
        missing = [m.name for m in metrics if m.name not in vals]
        if missing:
            raise ValidationError(f"row {row} lacks metrics {missing}")
        values[row] = {m.name: float(vals[m.name]) for m in metrics}
    rows = sorted(values, key=lambda r: (r.decays, r.family, -r.alpha_pre,
                                         -(r.alpha_mid if r.alpha_mid is not None else 2.0)))
    decay_rows = [r for r in rows if r.decays]
    if not decay_rows:
        raise ValidationError("delta table needs at least one decay-based row")

    def key(r: Row):
        return (r.family, r.alpha_pre, -1.0 if r.alpha_mid is None else r.alpha_mid)

    baselines, best = {}, {}
    for m in metrics:
        base = None
        for r in sorted(decay_rows, key=key):
            v = values[r][m.name]
            if math.isnan(v):
                continue
            if base is None or _better(v, values[base][m.name], m.higher_is_better):
                base = r
        if base is None:
            raise ValidationError(f"no finite decay-based value for {m.name}")
        baselines[m.name] = base
        top = None
        for r in sorted(rows, key=key):
            v = values[r][m.name]
            if not math.isnan(v) and (top is None or _better(v, values[top][m.name], m.higher_is_better)):
                top = r
        best[m.name] = top
    deltas = {r: {m.name: values[r][m.name] - values[baselines[m.name]][m.name] for m in metrics} for r in rows}
    return DeltaTable(metrics, rows, values, deltas, baselines, best)


def row_of(config: PipelineConfig) -> Row:
    pre = config.stage("pre").schedule
    mid = config.stage("mid")
    alpha_mid = mid.schedule.alpha_mid if mid is not None and isinstance(mid.schedule, MidScheduleSpec) else None
    return Row(pre.family.value, pre.effective_alpha, alpha_mid)


def stage_metric_names(config: PipelineConfig) -> list[str]:
    return [f"{s.stage}_valid_loss" for s in config.stages]


def best_per_pretrained(records: Sequence[RunRecord]) -> dict[tuple[Row, int], RunRecord]:
    """For each (scheduler row, seed), the run whose SFT learning rate gave the best post metric."""
    groups: dict[tuple[Row, int], RunRecord] = {}
    for r in sorted(records, key=lambda r: r.config.canonical_json()):
        k = (row_of(r.config), r.seed)
        if k not in groups or r.post_metric < groups[k].post_metric:
            groups[k] = r
    return groups


def aggregate_rows(records: Sequence[RunRecord]) -> tuple[list[tuple[Row, dict[str, float]]], list[MetricSpec]]:
    """Collapse records to one entry per scheduler row.

    Within a (row, seed) group the SFT learning rate with the lowest SFT loss
    is kept, then values are averaged over seeds.
    """
    if not records:
        raise ValidationError("no records to aggregate")
    names = stage_metric_names(records[0].config)
    groups = best_per_pretrained(records)
    per_row: dict[Row, list[dict[str, float]]] = {}
    for (row, _), r in sorted(groups.items(), key=lambda kv: (kv[0][1], kv[0][0].family, kv[0][0].alpha_pre,
                                                                kv[0][0].alpha_mid or 0.0)):
        per_row.setdefault(row, []).append(dict(zip(names, r.stage_metrics)))
    entries = []
    for row, dicts in per_row.items():
        avg = {}
        for n in names:
            total = 0.0
            for d in dicts:
                total += d[n]
            avg[n] = total / len(dicts) if math.isfinite(total) else math.nan
        entries.append((row, avg))
    return entries, [MetricSpec(n) for n in names]


# ---------------------------------------------------------------------------
# Correlation


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Sample Pearson correlation coefficient."""
    n = len(xs)
    if n != len(ys) or n < 2:
        raise ValidationError("pearson needs two sequences of equal length >= 2")
    mx = math.fsum(xs) / n
    my = math.fsum(ys) / n
    sxy = math.fsum((x - mx) * (y - my) for x, y in zip(xs, ys))
    sxx = math.fsum((x - mx) ** 2 for x in xs)
    syy = math.fsum((y - my) ** 2 for y in ys)
    if sxx == 0.0 or syy == 0.0:
        raise ValidationError("correlation undefined: zero variance")
    r = sxy / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def final_pre_sharpness(record: RunRecord, eval_split: str = "pretrain_valid") -> Optional[float]:
    pre = record.stage("pre")
    if pre is None:
        return None
    samples = [s for s in pre.sharpness if s.eval_split == eval_split]
    if not samples:
        return None
    return max(samples, key=lambda s: s.step).mean_trace


def sharpness_correlation(records: Sequence[RunRecord], eval_split: str = "pretrain_valid") -> dict:
    """Pearson r between final pre-stage sharpness and the post-stage metric.

    One point per pretrained model, using its best SFT learning rate.
    """
    xs, ys, ids = [], [], []
    for r in sorted(best_per_pretrained(records).values(), key=lambda r: r.run_id):
        s = final_pre_sharpness(r, eval_split)
        if s is not None and math.isfinite(r.post_metric):
            xs.append(s)
            ys.append(r.post_metric)
            ids.append(r.run_id)
    out = {"eval_split": eval_split, "n": len(xs), "run_ids": ids, "sharpness": xs, "post_metric": ys}
    try:
        out["pearson_r"] = pearson(xs, ys)
    except ValidationError as exc:
        out["pearson_r"] = None
        out["note"] = str(exc)
    return out
