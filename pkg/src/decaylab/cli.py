"""Command-line entry point: ``decaylab {run,sweep,probe,report,make-corpus}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from typing import Optional, Sequence

from decaylab.checkpoint import load_checkpoint
from decaylab.config import ConfigError, ExperimentConfig, dump_experiment, load_experiment
from decaylab.data import check_window, synthetic_text
from decaylab.errors import FormatError, ValidationError
from decaylab.pipeline import (
    RunRecord,
    compare_selections,
    load_corpora,
    run_grid,
    run_pipeline,
    run_probe,
    stage_lr,
)
from decaylab.plot import Axes, plot_series
from decaylab.report import (
    aggregate_rows,
    delta_table,
    read_records,
    rows_to_csv,
    sharpness_correlation,
    write_record,
)
from decaylab.sharpness import EVAL_SPLITS, SharpnessProbeConfig

log = logging.getLogger("decaylab")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2


def _write_json(path: str, obj) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_text(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(text)


def _fail(out: Optional[str], command: str, message: str, code: int = EXIT_FAILED) -> int:
    print(f"decaylab {command}: error: {message}", file=sys.stderr)
    if out is not None:
        _write_json(os.path.join(out, "error.json"), {"command": command, "error": message})
    return code


def _load(args) -> tuple[ExperimentConfig, str, str]:
    exp = load_experiment(args.config)
    if args.seed is not None:
        sweep = replace(exp.sweep, seeds=()) if exp.sweep is not None else None
        exp = replace(exp, base=replace(exp.base, seed=args.seed), sweep=sweep)
    out = args.out or exp.output_dir
    base_dir = os.path.dirname(os.path.abspath(args.config))
    return exp, out, base_dir


def _out_hint(args) -> Optional[str]:
    return getattr(args, "out", None)


def cmd_run(args) -> int:
    try:
        exp, out, base_dir = _load(args)
    except (ConfigError, OSError) as exc:
        return _fail(_out_hint(args), "run", str(exc), EXIT_CONFIG)
    config = exp.base
    _write_text(os.path.join(out, "config.json"), dump_experiment(exp))
    ckpt_dir = os.path.join(out, "checkpoints", config.run_id)
    os.makedirs(ckpt_dir, exist_ok=True)
    try:
        record = run_pipeline(config, base_dir=base_dir, checkpoint_dir=ckpt_dir)
    except (ValidationError, OSError) as exc:
        return _fail(out, "run", str(exc), EXIT_CONFIG)
    csv_path, _ = write_record(record, os.path.join(out, "runs"))
    if record.status != "ok":
        return _fail(out, "run", f"run {record.run_id} {record.status}: {record.message}")
    print(f"run {record.run_id}: ok ({csv_path})")
    for st in record.stages:
        print(f"  {st.stage}: final valid loss {st.final_valid_loss:.6f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    try:
        exp, out, base_dir = _load(args)
        configs = exp.expand()
    except (ConfigError, OSError) as exc:
        return _fail(_out_hint(args), "sweep", str(exc), EXIT_CONFIG)
    _write_text(os.path.join(out, "config.json"), dump_experiment(exp))
    records = run_grid(configs, base_dir=base_dir, jobs=args.jobs,
                       checkpoint_root=os.path.join(out, "checkpoints"))
    runs_dir = os.path.join(out, "runs")
    for r in records:
        write_record(r, runs_dir)

    summary: dict = {
        "mode": args.mode,
        "n_configs": len(records),
        "runs": [{"run_id": r.run_id, "status": r.status, "message": r.message,
                  "stage_metrics": [m if m != float("inf") else None for m in r.stage_metrics]}
                 for r in records],
    }
    ok = [r for r in records if r.status == "ok"]
    if not ok:
        return _fail(out, "sweep", "every run in the sweep failed")
    report = compare_selections(ok)
    if args.mode in ("greedy", "both"):
        summary["greedy"] = {"run_id": report.greedy.run_id, "post_metric": report.greedy.post_metric}
    if args.mode in ("joint", "both"):
        summary["joint"] = {"run_id": report.joint.run_id, "post_metric": report.joint.post_metric}
    if args.mode == "both":
        summary["agree"] = report.agree
        summary["post_metric_gap"] = report.greedy.post_metric - report.joint.post_metric
    _write_table(records, out, summary)
    _write_json(os.path.join(out, "summary.json"), summary)
    print(f"sweep: {len(ok)}/{len(records)} runs ok")
    for key in ("greedy", "joint"):
        if key in summary:
            print(f"  {key}: {summary[key]['run_id']} post metric {summary[key]['post_metric']:.6f}")
    if "agree" in summary:
        print(f"  selections agree: {summary['agree']}")
    for r in records:
        if r.status != "ok":
            print(f"  [{r.status}] {r.run_id}: {r.message}")
    return EXIT_OK


def _write_table(records: Sequence[RunRecord], out: str, summary: dict) -> None:
    entries, metrics = aggregate_rows(records)
    try:
        table = delta_table(entries, metrics)
    except ValidationError as exc:
        summary["delta_table"] = {"note": str(exc)}
        return
    text = table.render()
    _write_text(os.path.join(out, "delta_table.txt"), text)
    summary["delta_table"] = {
        "baselines": {m: table.baselines[m].__dict__ for m in table.baselines},
        "rows": [{"row": r.__dict__, "deltas": table.deltas[r], "values": table.values[r]} for r in table.rows],
    }
    print(text, end="")


def cmd_probe(args) -> int:
    try:
        exp, out, base_dir = _load(args)
        ckpt = load_checkpoint(args.checkpoint)
    except (ConfigError, OSError, FormatError) as exc:
        return _fail(_out_hint(args), "probe", str(exc), EXIT_CONFIG)
    config = exp.base
    if len(ckpt.params) != config.model.n_params:
        return _fail(out, "probe", f"checkpoint has {len(ckpt.params)} parameters, "
                                   f"model expects {config.model.n_params}", EXIT_CONFIG)
    try:
        corpora = load_corpora(config, base_dir)
        for c in corpora.values():
            check_window(c, config.model.context_window)
        rows = []
        for split in args.splits:
            probe = SharpnessProbeConfig(n_samples=args.n_samples, eval_split=split,
                                         batch_size=args.batch_size, seed=args.probe_seed,
                                         fresh_batches=not args.fixed_batch)
            sample = run_probe(config, corpora, ckpt.params, probe, ckpt.step)
            rows.append((config.run_id, "probe", sample.step, "sharpness_mean", sample.mean_trace, split))
            rows.append((config.run_id, "probe", sample.step, "sharpness_stderr", sample.stderr, split))
            print(f"{split}: trace {sample.mean_trace:.6g} +- {sample.stderr:.3g} (n={sample.n_samples})")
    except (ValidationError, OSError) as exc:
        return _fail(out, "probe", str(exc), EXIT_CONFIG)
    name = os.path.splitext(os.path.basename(args.checkpoint))[0]
    _write_text(os.path.join(out, "probes", f"{name}.csv"), rows_to_csv(rows))
    return EXIT_OK


def cmd_report(args) -> int:
    src = args.records
    if os.path.isdir(os.path.join(src, "runs")):
        src = os.path.join(src, "runs")
    out = args.out or os.path.join(args.records, "report")
    try:
        records = read_records(src)
    except (ValidationError, FormatError) as exc:
        return _fail(out, "report", str(exc))

    entries, metrics = aggregate_rows(records)
    try:
        table_text = delta_table(entries, metrics).render()
    except ValidationError as exc:
        table_text = f"(no delta table: {exc})\n"
    _write_text(os.path.join(out, "delta_table.txt"), table_text)
    corr = sharpness_correlation(records)
    _write_json(os.path.join(out, "correlation.json"), corr)

    ordered = sorted(records, key=lambda r: r.run_id)
    sched_series = []
    vlines = ()
    for r in ordered:
        pts = []
        offset = 0
        for stage_cfg in r.config.stages:
            if stage_cfg.steps > 0:
                pts += [(offset + k, stage_lr(stage_cfg, k)) for k in _trace_steps(stage_cfg.steps)]
            offset += stage_cfg.steps
        if pts:
            sched_series.append((_label(r), pts))
    if sched_series:
        pre = ordered[0].config.stage("pre")
        vlines = (float(pre.steps),) if len(ordered[0].config.stages) > 1 else ()
        _write_text(os.path.join(out, "schedules.svg"), plot_series(
            sched_series, Axes(title="Learning rate", xlabel="step", ylabel="lr", vlines=vlines)))
    loss_series = []
    for r in ordered:
        pts = []
        offset = 0
        for st, cfg in zip(r.stages, r.config.stages):
            pts += [(offset + p.step, p.valid_loss) for p in st.series]
            offset += cfg.steps
        if pts:
            loss_series.append((_label(r), pts))
    if loss_series:
        _write_text(os.path.join(out, "valid_loss.svg"), plot_series(
            loss_series, Axes(title="Validation loss", xlabel="step", ylabel="nats", vlines=vlines)))
    sharp_series = []
    for r in ordered:
        pre = r.stage("pre")
        if pre is None:
            continue
        for split in EVAL_SPLITS:
            pts = [(s.step, s.mean_trace) for s in pre.sharpness if s.eval_split == split]
            if pts:
                sharp_series.append((f"{_label(r)} [{split}]", sorted(pts)))
    if sharp_series:
        _write_text(os.path.join(out, "sharpness.svg"), plot_series(
            sharp_series, Axes(title="Hessian trace (pre-training)", xlabel="step", ylabel="trace")))

    print(table_text, end="")
    if corr.get("pearson_r") is not None:
        print(f"pearson r (final pre sharpness vs post metric, n={corr['n']}): {corr['pearson_r']:.4f}")
    else:
        print(f"pearson r: undefined ({corr.get('note', 'not enough sharpness samples')})")
    return EXIT_OK


def _trace_steps(steps: int, n: int = 200) -> list[int]:
    stride = max(1, steps // n)
    ks = list(range(1, steps + 1, stride))
    if ks[-1] != steps:
        ks.append(steps)
    return ks


def _label(r: RunRecord) -> str:
    pre = r.config.stage("pre").schedule
    text = f"{pre.family.value} a={pre.effective_alpha:g}"
    mid = r.config.stage("mid")
    if mid is not None:
        text += f" mid={mid.schedule.alpha_mid:g}"
    return f"{text} s{r.seed}"


def cmd_make_corpus(args) -> int:
    data = synthetic_text(args.bytes, args.seed, args.style)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "wb") as f:
        f.write(data)
    print(f"wrote {len(data)} bytes to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="decaylab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment JSON file")
        p.add_argument("--out", help="output directory (overrides output_dir in the config)")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")

    p = sub.add_parser("run", help="run the base pipeline of a config")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="expand the sweep grid, run it, and select")
    common(p)
    p.add_argument("--mode", choices=("greedy", "joint", "both"), default="both")
    p.add_argument("--jobs", type=int, default=1, help="concurrent runs")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("probe", help="Hutchinson sharpness of a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--splits", nargs="+", choices=EVAL_SPLITS, default=["pretrain_valid"])
    p.add_argument("--n-samples", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--probe-seed", type=int, default=0)
    p.add_argument("--fixed-batch", action="store_true", help="evaluate every sample on one batch")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("report", help="delta table, correlation, and SVG plots from run records")
    p.add_argument("--records", required=True, help="directory holding run records (or a sweep output dir)")
    p.add_argument("--out", help="report directory (default: <records>/report)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("make-corpus", help="write a deterministic synthetic text corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--bytes", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--style", choices=("prose", "dialog"), default="prose")
    p.set_defaults(func=cmd_make_corpus)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
