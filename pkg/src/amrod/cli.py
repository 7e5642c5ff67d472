"""Command line entry point.

    amrod pretrain     --out source.amrod
    amrod run          --source source.amrod --out runs/full [--preset long] [--set k=v ...]
    amrod ablate       --source source.amrod --out runs/ablation
    amrod report       runs/ablation [runs/other ...] [--csv DIR] [--grids]
    amrod dump-stream  --out frames/ [--limit N]

Configuration resolves in order: preset, ``--config`` file, ``--set`` flags.
On failure the last stderr line is a JSON object ``{"error": ..., "message": ...}``
and the exit status is nonzero (2 for usage and config errors, 1 otherwise).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import experiments, modelio, runner, streams
from .config import ConfigError, RunConfig


class UsageError(ValueError):
    pass


def _config(args) -> RunConfig:
    seed = args.seed if args.seed is not None else 0
    base = cfgmod.long_term_config(seed) if args.preset == "long" else cfgmod.short_term_config(seed)
    if args.config:
        base = cfgmod.load(args.config, base)
    cfg = cfgmod.apply_overrides(base, cfgmod.parse_overrides(args.set or []))
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "source", None):
        cfg = replace(cfg, run=replace(cfg.run, source_model=args.source))
    return cfg.validate()


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=("short", "long"), default="short", help="short-term or long-term defaults")
    p.add_argument("--config", help="config file (section.key = value lines)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int, help="reseed both the stream and the engine")


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    pc = cfg.pretrain
    store, prov = streams.pretrain_source(
        n_frames=pc.frames,
        epochs=pc.epochs,
        seed=pc.seed,
        lr=pc.lr,
        momentum=pc.momentum,
        heldout=pc.heldout,
        target_map=pc.target_map,
        min_map=pc.min_map,
        log=lambda m: print(m, file=sys.stderr),
    )
    modelio.save(args.out, store, prov)
    print(f"wrote {args.out}: clean mAP@0.5 {prov['clean_map']:.4f} after {prov['epochs_run']} epochs")
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    cfg = replace(cfg, run=replace(cfg.run, output_dir=args.out, trace_ops=cfg.run.trace_ops or args.trace_ops))
    res = runner.run(cfg, out_dir=args.out, threaded=args.prefetch)
    s = res.summary
    print(f"{cfg.run.name}: mean mAP@0.5 {s.mean_map:.4f}, Iter. {s.iterations}/{s.total_frames}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    source, _ = runner.resolve_source(cfg, None)
    table = experiments.ablate(cfg, source, args.out, jobs=args.jobs)
    sys.stdout.write(table)
    return 0


def cmd_report(args) -> int:
    sys.stdout.write(experiments.report(args.runs, args.csv, grids=args.grids))
    return 0


def _pgm(pixels: np.ndarray) -> bytes:
    img = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def cmd_dump_stream(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["# file round domain domain_tag class cx cy w h"]
    for fr in streams.build_stream(cfg.stream):
        if args.limit is not None and fr.frame_index >= args.limit:
            break
        name = f"frame_{fr.frame_index:06d}.pgm"
        (out / name).write_bytes(_pgm(fr.scene.image.pixels[0]))
        for d in fr.scene.labels:
            b = d.box
            lines.append(f"{name} {fr.round_index} {fr.domain_index} {fr.domain_tag} {d.class_id} {b.cx!r} {b.cy!r} {b.w!r} {b.h!r}")
    (out / "labels.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="amrod", description="continual test-time adaptation on synthetic detection streams")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train the source model on clean scenes")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="model file to write")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("run", help="adapt over one stream")
    _add_config_flags(p)
    p.add_argument("--source", help="pretrained source model file")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--trace-ops", action="store_true", help="log the per-frame operation sequence")
    p.add_argument("--prefetch", action="store_true", help="generate frames on a background thread")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="run the component and variant matrices")
    _add_config_flags(p)
    p.add_argument("--source", help="pretrained source model file")
    p.add_argument("--out", required=True, help="ablation directory")
    p.add_argument("--jobs", type=int, default=1, help="parallel runs")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="compare completed runs")
    p.add_argument("runs", nargs="+", help="run or ablation directories; the first run is the Gain baseline")
    p.add_argument("--csv", help="directory for cells.csv and rounds.csv")
    p.add_argument("--grids", action="store_true", help="also print per-run round x domain grids")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("dump-stream", help="write stream frames as PGM images plus labels.txt")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int, help="stop after this many frames")
    p.set_defaults(func=cmd_dump_stream)
    return ap


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        if e.code in (0, None):
            return 0
        return _fail("UsageError", "invalid command line", 2)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as e:
        return _fail(type(e).__name__, str(e), 2)
    except (runner.MissingSourceModel, modelio.ModelFileError, streams.SourceModelError, experiments.AblationError, experiments.ReportError) as e:
        return _fail(type(e).__name__, str(e), 1)
    except OSError as e:
        return _fail(type(e).__name__, str(e), 1)


if __name__ == "__main__":
    sys.exit(main())
