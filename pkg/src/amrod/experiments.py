"""Ablation matrices and comparison reports.

Two matrices are derived from one base configuration. Each row is a named
set of overrides, and the audit checks that a row's effective config differs
from the base only in the keys the row declares.

components   MT, MT+ARR, MT+AM, MT+OCL, MT+OCL+AM, full
variants     student, FT0.7, FT0.8, FT0.9, SR, DR, full

``MT`` is the bare mean teacher with fixed thresholds (the base
``variant.fixed_threshold``), no skipping, no OCL, no KL and no restoration.

An ablation directory holds one run directory per row plus ``ablation.json``
(the manifest) and ``table.txt``. ``report`` on that directory re-renders the
same table from the run directories alone.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

from . import config as cfgmod
from .config import RunConfig
from .evaluation import RunSummary, with_gain
from .runner import read_run_dir, run
from .toydet import ParamStore

_MT = {
    "restore.mode": "none",
    "variant.use_ocl": "false",
    "variant.use_am_threshold": "false",
    "variant.use_am_skip": "false",
    "variant.use_kl": "false",
}
_AM = {"variant.use_am_threshold": "true", "variant.use_am_skip": "true"}


def _mt(**extra: str) -> dict[str, str]:
    return {**_MT, **extra}


COMPONENT_ROWS: list[tuple[str, dict[str, str]]] = [
    ("MT", _mt()),
    ("MT+ARR", _mt(**{"restore.mode": "arr"})),
    ("MT+AM", {**_mt(), **_AM}),
    ("MT+OCL", _mt(**{"variant.use_ocl": "true"})),
    ("MT+OCL+AM", {**_mt(**{"variant.use_ocl": "true"}), **_AM}),
    ("full", {}),
]

VARIANT_ROWS: list[tuple[str, dict[str, str]]] = [
    ("student", {"variant.supervision_source": "student"}),
    ("FT0.7", {"variant.use_am_threshold": "false", "variant.fixed_threshold": "0.7"}),
    ("FT0.8", {"variant.use_am_threshold": "false", "variant.fixed_threshold": "0.8"}),
    ("FT0.9", {"variant.use_am_threshold": "false", "variant.fixed_threshold": "0.9"}),
    ("SR", {"restore.mode": "sr"}),
    ("DR", {"restore.mode": "dr"}),
    ("full", {}),
]

MATRICES = {"components": COMPONENT_ROWS, "variants": VARIANT_ROWS}


class AblationError(RuntimeError):
    def __init__(self, variant: str, cause: BaseException):
        super().__init__(f"variant {variant!r} failed: {type(cause).__name__}: {cause}")
        self.variant = variant


class ReportError(ValueError):
    pass


@dataclass
class Row:
    section: str
    name: str
    overrides: dict[str, str]
    config: RunConfig


def derive(base: RunConfig, name: str, overrides: dict[str, str]) -> RunConfig:
    cfg = cfgmod.apply_overrides(base, overrides)
    return replace(cfg, run=replace(cfg.run, name=name))


def audit(base: RunConfig, row: Row) -> None:
    """The row's config may differ from ``base`` only in keys it declares."""
    changed = {k for k in cfgmod.diff(base, row.config) if not k.startswith("run.")}
    extra = changed - set(row.overrides)
    if extra:
        raise AblationError(row.name, ValueError(f"config changes undeclared keys {sorted(extra)}"))


def plan(base: RunConfig) -> list[Row]:
    rows = []
    for section, spec in MATRICES.items():
        for name, ov in spec:
            row = Row(section, name, ov, derive(base, name, ov))
            audit(base, row)
            rows.append(row)
    return rows


def _row_dir(out: Path, row: Row) -> Path:
    return out / row.section / row.name


def _run_row(args) -> RunSummary:
    cfg, source, path = args
    return run(cfg, source, path).summary


def ablate(base: RunConfig, source: ParamStore | None = None, out_dir: str | Path | None = None, jobs: int = 1) -> str:
    """Run both matrices and return the combined table.

    The shared ``full`` row runs once and is reused in both sections.
    """
    rows = plan(base)
    out = Path(out_dir) if out_dir else None
    unique: dict[str, Row] = {}
    for r in rows:
        unique.setdefault(r.name, r)
    tasks = [(r.config, source, _row_dir(out, r) if out else None) for r in unique.values()]
    results: dict[str, RunSummary] = {}
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            futures = {name: ex.submit(_run_row, t) for name, t in zip(unique, tasks)}
            for name, fut in futures.items():
                try:
                    results[name] = fut.result()
                except Exception as e:
                    raise AblationError(name, e) from e
    else:
        for name, t in zip(unique, tasks):
            try:
                results[name] = _run_row(t)
            except Exception as e:
                raise AblationError(name, e) from e
    sections = [(s, [(n, results[n]) for n, _ in spec]) for s, spec in MATRICES.items()]
    table = render(sections)
    if out:
        manifest = {
            "sections": [
                {"name": s, "rows": [{"name": n, "dir": str(_row_dir(out, unique[n]).relative_to(out))} for n, _ in spec]}
                for s, spec in MATRICES.items()
            ]
        }
        (out / "ablation.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
        (out / "table.txt").write_text(table, encoding="utf-8")
        write_csvs(out, sections)
    return table


# ------------------------------------------------------------------ render


def _pct(x: float | None) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "-"
    return f"{100.0 * x:.1f}"


def _signed(x: float) -> str:
    return f"{100.0 * x:+.1f}"


def _domain_means(s: RunSummary) -> list[float]:
    g = s.grid()
    return [float(v) for v in g.mean(axis=0)]


def check_compatible(named: list[tuple[str, RunSummary]]) -> None:
    if not named:
        raise ReportError("no runs to report")
    ref_name, ref = named[0]
    shape = [(c.round_index, c.domain_index, c.domain_tag, c.frames) for c in ref.cells]
    for name, s in named[1:]:
        if [(c.round_index, c.domain_index, c.domain_tag, c.frames) for c in s.cells] != shape:
            raise ReportError(f"run {name!r} covers a different stream than {ref_name!r}")


def render_section(title: str, named: list[tuple[str, RunSummary]]) -> str:
    """Per-domain mAP (averaged over rounds), Mean, Gain vs the first row, Iter., skip rate."""
    check_compatible(named)
    base = named[0][1]
    tags = base.domain_tags()
    width = max(10, *(len(n) for n, _ in named)) + 1
    head = f"{'':<{width}}" + "".join(f"{t:>18}" for t in tags) + f"{'Mean':>8}{'Gain':>8}{'Iter.':>8}{'Skip%':>8}"
    lines = [f"== {title} ==", head]
    for name, s in named:
        g = with_gain(s, base)
        cells = "".join(f"{_pct(v):>18}" for v in _domain_means(s))
        lines.append(
            f"{name:<{width}}{cells}{_pct(s.mean_map):>8}{_signed(g.gain):>8}{s.iterations:>8}{100.0 * s.skip_rate:>8.1f}"
        )
    return "\n".join(lines) + "\n"


def render_grid(name: str, s: RunSummary, baseline: RunSummary | None = None) -> str:
    """Rounds x domains grid; with a baseline each cell also shows its gain."""
    tags = s.domain_tags()
    gains = with_gain(s, baseline).cell_gains if baseline is not None else None
    lines = [f"-- {name} --", f"{'round':<7}" + "".join(f"{t:>22}" for t in tags) + f"{'Mean':>8}"]
    g = s.grid()
    for r in range(g.shape[0]):
        row = []
        for d in range(g.shape[1]):
            v = _pct(g[r, d])
            if gains is not None:
                v = f"{v} ({_signed(gains[r * g.shape[1] + d])})"
            row.append(f"{v:>22}")
        lines.append(f"{r + 1:<7}" + "".join(row) + f"{_pct(s.round_means[r]):>8}")
    return "\n".join(lines) + "\n"


def render(sections: list[tuple[str, list[tuple[str, RunSummary]]]]) -> str:
    return "\n".join(render_section(t, rows) for t, rows in sections)


def write_csvs(out: Path, sections: list[tuple[str, list[tuple[str, RunSummary]]]]) -> None:
    """cells.csv (per round/domain with gain), rounds.csv (per-round mean curves)."""
    cells, rounds = io.StringIO(), io.StringIO()
    wc = csv.writer(cells, lineterminator="\n")
    wr = csv.writer(rounds, lineterminator="\n")
    wc.writerow(["section", "run", "round", "domain", "domain_tag", "map50", "gain", "frames", "adapted"])
    wr.writerow(["section", "run", "round", "mean_map50"])
    for title, named in sections:
        base = named[0][1]
        for name, s in named:
            g = with_gain(s, base)
            for c, gain in zip(s.cells, g.cell_gains):
                wc.writerow([title, name, c.round_index + 1, c.domain_index, c.domain_tag, repr(c.map50), repr(gain), c.frames, c.adapted])
            for r, m in enumerate(s.round_means):
                wr.writerow([title, name, r + 1, repr(m)])
    out.mkdir(parents=True, exist_ok=True)
    (out / "cells.csv").write_text(cells.getvalue(), encoding="utf-8")
    (out / "rounds.csv").write_text(rounds.getvalue(), encoding="utf-8")


def _load_named(path: Path) -> tuple[str, RunSummary]:
    try:
        _, s = read_run_dir(path)
    except FileNotFoundError as e:
        raise ReportError(f"{path} is not a completed run directory ({e.filename} missing)") from None
    return (s.name or path.name), s


def collect(paths: list[str | Path]) -> list[tuple[str, list[tuple[str, RunSummary]]]]:
    """Sections to report. An ablation directory expands to its manifest's sections."""
    sections = []
    loose: list[tuple[str, RunSummary]] = []
    for p in map(Path, paths):
        manifest = p / "ablation.json"
        if manifest.exists():
            m = json.loads(manifest.read_text(encoding="utf-8"))
            for sec in m["sections"]:
                sections.append((sec["name"], [(r["name"], _load_named(p / r["dir"])[1]) for r in sec["rows"]]))
        else:
            loose.append(_load_named(p))
    if loose:
        sections.append(("runs", loose))
    return sections


def report(paths: list[str | Path], out_dir: str | Path | None = None, grids: bool = False) -> str:
    sections = collect(paths)
    text = render(sections)
    if grids:
        parts = [text]
        for title, named in sections:
            base = named[0][1]
            parts.extend(render_grid(f"{title}/{n}", s, base) for n, s in named)
        text = "\n".join(parts)
    if out_dir:
        write_csvs(Path(out_dir), sections)
    return text
