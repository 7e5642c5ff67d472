"""Run one configuration over its stream and record per-frame metrics.

The stream's labels stay here: the engine gets the image, the evaluator gets
the engine's detections plus the labels.

Run directory contents:

    config.txt     effective configuration
    summary.json   RunSummary (per-cell mAP@0.5, mean, Iter., skip rate, provenance)
    trace.csv      one row per frame, columns in TRACE_COLUMNS order
    ops.log        per-frame operation sequence (only with run.trace_ops)
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

from . import config as cfgmod
from . import modelio
from .config import RunConfig
from .engine import Engine
from .evaluation import MetricRecord, RunSummary, make_record, summarize
from .streams import build_stream, prefetch
from .toydet import NUM_CLASSES, ParamStore

TRACE_COLUMNS = (
    ["frame", "round", "domain", "domain_tag", "decision", "n_det", "n_gt", "tp", "fp", "fn"]
    + ["lbar", "lbar_ema", "ratio"]
    + [f"thr_{c}" for c in range(NUM_CLASSES)]
    + ["n_pseudo", "loss_total", "loss_pl", "loss_cl", "loss_kl"]
    + ["reset_count", "fim_min", "fim_median", "fim_max"]
)


class MissingSourceModel(FileNotFoundError):
    pass


@dataclass
class RunResult:
    summary: RunSummary
    records: list[MetricRecord]
    rows: list[dict]
    ops: list[list[str]]
    engine: Engine


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def trace_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in TRACE_COLUMNS])
    return buf.getvalue()


def resolve_source(cfg: RunConfig, source: ParamStore | None) -> tuple[ParamStore, dict]:
    if source is not None:
        return source, {"checksum": source.checksum()}
    if not cfg.run.source_model:
        raise MissingSourceModel("no source model given; run `amrod pretrain` first and set run.source_model")
    try:
        store, prov = modelio.load(cfg.run.source_model)
    except FileNotFoundError as e:
        raise MissingSourceModel(str(e)) from None
    return store, {**prov, "path": cfg.run.source_model, "checksum": store.checksum()}


def run(cfg: RunConfig, source: ParamStore | None = None, out_dir: str | Path | None = None, threaded: bool = False) -> RunResult:
    cfg.validate()
    store, provenance = resolve_source(cfg, source)
    engine = Engine(store, cfg)
    records, rows, ops = [], [], []
    frames = build_stream(cfg.stream)
    if threaded:
        frames = prefetch(frames)
    for fr in frames:
        res = engine.step(fr.scene.image)
        rec = make_record(fr.frame_index, fr.domain_tag, fr.domain_index, fr.round_index, res.decision.value, res.detections, fr.scene.labels)
        records.append(rec)
        row = {
            "frame": fr.frame_index,
            "round": fr.round_index,
            "domain": fr.domain_index,
            "domain_tag": fr.domain_tag,
            "decision": res.decision.value,
            "n_gt": sum(rec.gt_counts),
            "tp": sum(rec.tp),
            "fp": sum(rec.fp),
            "fn": sum(rec.fn),
            **res.info,
        }
        rows.append(row)
        if cfg.run.trace_ops:
            ops.append(res.ops)
    summary = summarize(records, cfg.run.name)
    summary.extra = {"source": provenance, "forward_passes": engine.forward_passes}
    result = RunResult(summary, records, rows, ops, engine)
    target = out_dir or cfg.run.output_dir
    if target:
        write_run_dir(Path(target), cfg, result)
    return result


def write_run_dir(path: Path, cfg: RunConfig, result: RunResult) -> None:
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.txt").write_text(cfgmod.dumps(cfg), encoding="utf-8")
    (path / "summary.json").write_text(result.summary.to_json() + "\n", encoding="utf-8")
    (path / "trace.csv").write_text(trace_csv(result.rows), encoding="utf-8")
    if result.ops:
        (path / "ops.log").write_text(
            "".join(f"{i} {' '.join(o)}\n" for i, o in enumerate(result.ops)), encoding="utf-8"
        )


def read_run_dir(path: str | Path) -> tuple[RunConfig, RunSummary]:
    p = Path(path)
    summary = RunSummary.from_dict(json.loads((p / "summary.json").read_text(encoding="utf-8")))
    cfg = cfgmod.load(str(p / "config.txt"))
    return cfg, summary
