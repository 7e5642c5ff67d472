import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from amrod import cli, experiments, modelio, runner, streams
from amrod import config as cfgmod
from amrod.config import ConfigError


# ------------------------------------------------------------------ config


def test_config_text_roundtrip():
    cfg = cfgmod.long_term_config(3)
    again = cfgmod.loads(cfgmod.dumps(cfg))
    assert again == cfg
    assert cfgmod.dumps(again) == cfgmod.dumps(cfg)


def test_config_comments_and_overrides():
    text = "# comment\ntrainer.gamma = 0.05  # trailing\nstream.domains = blur-2,contrast-1\n\nvariant.use_kl = no\n"
    cfg = cfgmod.loads(text)
    assert cfg.trainer.gamma == 0.05
    assert [d.tag for d in cfg.stream.domain_sequence] == ["blur-2", "contrast-1"]
    assert cfg.variant.use_kl is False


@pytest.mark.parametrize(
    "pairs",
    [{"trainer.nope": "1"}, {"nosection.x": "1"}, {"trainer.gamma": "abc"}, {"variant.use_kl": "maybe"}, {"restore.mode": "global"}, {"stream.rounds": "0"}],
)
def test_bad_config_rejected(pairs):
    with pytest.raises(ConfigError):
        cfgmod.apply_overrides(cfgmod.RunConfig(), pairs).validate()


def test_invalid_monitor_config_rejected_at_validate():
    cfg = cfgmod.apply_overrides(cfgmod.RunConfig(), {"monitor.delta0": "0.95"})
    with pytest.raises(ValueError):
        cfg.validate()


def test_presets():
    s, l = cfgmod.short_term_config(), cfgmod.long_term_config()
    assert s.stream.total_frames == 1000 and s.stream.rounds == 1
    assert l.stream.total_frames == 5000 and l.stream.rounds == 10
    assert s.restore.q == 0.01 and l.restore.q == 0.0001
    assert s.monitor.beta_s == 0.7 and l.monitor.beta_s == 0.75
    assert s.trainer.tau == 0.07 and s.trainer.lambda_cl == 0.5 and s.trainer.mu_kl == 1.0


def test_with_seed_reseeds_both():
    c = cfgmod.short_term_config(0).with_seed(9)
    assert c.stream.seed == 9 and c.run.seed == 9


# ------------------------------------------------------------------ runs


def test_run_dir_contents(tiny_source, tiny_cfg, tmp_path):
    res = runner.run(tiny_cfg, tiny_source[0], tmp_path / "r")
    d = tmp_path / "r"
    assert {p.name for p in d.iterdir()} == {"config.txt", "summary.json", "trace.csv"}
    rows = list(csv.reader((d / "trace.csv").open()))
    assert rows[0] == list(runner.TRACE_COLUMNS)
    spec = tiny_cfg.stream
    assert len(rows) - 1 == spec.rounds * len(spec.domain_sequence) * spec.frames_per_domain == 12
    cfg2, summ = runner.read_run_dir(d)
    assert cfg2 == tiny_cfg
    assert summ.to_json() == res.summary.to_json()
    assert summ.extra["source"]["checksum"] == tiny_source[0].checksum()


def test_trace_ops_log(tiny_source, tiny_cfg, tmp_path):
    c = tiny_cfg.set("run.trace_ops", "true")
    runner.run(c, tiny_source[0], tmp_path)
    lines = (tmp_path / "ops.log").read_text().splitlines()
    assert len(lines) == 12
    assert all(l.split()[1] == "teacher_predict" for l in lines)


def test_trace_csv_byte_identical(tiny_source, tiny_cfg, tmp_path):
    runner.run(tiny_cfg, tiny_source[0], tmp_path / "a")
    runner.run(tiny_cfg, tiny_source[0], tmp_path / "b")
    assert (tmp_path / "a/trace.csv").read_bytes() == (tmp_path / "b/trace.csv").read_bytes()


def test_threaded_run_matches(tiny_source, tiny_cfg):
    a = runner.run(tiny_cfg, tiny_source[0])
    b = runner.run(tiny_cfg, tiny_source[0], threaded=True)
    assert runner.trace_csv(a.rows) == runner.trace_csv(b.rows)


def test_missing_source_model_error(tiny_cfg):
    with pytest.raises(runner.MissingSourceModel, match="pretrain"):
        runner.run(tiny_cfg)
    with pytest.raises(runner.MissingSourceModel, match="pretrain"):
        runner.run(tiny_cfg.set("run.source_model", "/nonexistent/model.amrod"))


def test_mt_row_is_plain_self_training(tiny_source, tiny_cfg):
    mt_cfg = cfgmod.apply_overrides(tiny_cfg, dict(experiments.COMPONENT_ROWS[0][1]))
    res = runner.run(mt_cfg, tiny_source[0], None)
    assert res.summary.iterations == res.summary.total_frames
    assert all(r["loss_cl"] == 0.0 and r["loss_kl"] == 0.0 for r in res.rows)


# ------------------------------------------------------------------ ablation


def test_plan_rows_and_audit():
    rows = experiments.plan(cfgmod.short_term_config())
    comp = [r.name for r in rows if r.section == "components"]
    var = [r.name for r in rows if r.section == "variants"]
    assert comp == ["MT", "MT+ARR", "MT+AM", "MT+OCL", "MT+OCL+AM", "full"]
    assert var == ["student", "FT0.7", "FT0.8", "FT0.9", "SR", "DR", "full"]


def test_audit_catches_undeclared_change():
    base = cfgmod.short_term_config()
    row = experiments.Row("x", "bad", {"restore.mode": "sr"}, experiments.derive(base, "bad", {"restore.mode": "sr", "trainer.gamma": "0.5"}))
    with pytest.raises(experiments.AblationError, match="trainer.gamma"):
        experiments.audit(base, row)


def test_every_row_diff_matches_declaration():
    base = cfgmod.short_term_config()
    for r in experiments.plan(base):
        changed = {k for k in cfgmod.diff(base, r.config) if not k.startswith("run.")}
        assert changed <= set(r.overrides)


@pytest.fixture(scope="module")
def ablation(tiny_source, tmp_path_factory):
    base = cfgmod.apply_overrides(
        cfgmod.short_term_config(0, 2), {"stream.domains": "gaussian_noise-5,blur-5"}
    )
    out = tmp_path_factory.mktemp("abl")
    table = experiments.ablate(base, tiny_source[0], out)
    return base, out, table


def test_ablate_table_shape(ablation):
    _, out, table = ablation
    sections = table.split("== ")[1:]
    assert [s.splitlines()[0] for s in sections] == ["components ==", "variants =="]
    body = [len(s.strip().splitlines()) - 2 for s in sections]
    assert body == [6, 7]
    full_lines = [l for l in table.splitlines() if l.startswith("full ")]
    assert len(full_lines) == 2
    # identical numbers in both sections; only Gain differs because each section has its own baseline
    a, b = full_lines[0].split(), full_lines[1].split()
    assert a[:-3] + a[-2:] == b[:-3] + b[-2:]
    assert (out / "table.txt").read_text() == table
    assert json.loads((out / "ablation.json").read_text())["sections"][0]["rows"][0]["name"] == "MT"


def test_report_reproduces_ablation_table(ablation):
    _, out, table = ablation
    assert experiments.report([out]) == table


def test_report_single_run_gain_zero(ablation):
    _, out, _ = ablation
    text = experiments.report([out / "components" / "full"])
    line = [l for l in text.splitlines() if l.startswith("full")][0]
    assert line.split()[-3] == "+0.0"


def test_report_gain_is_candidate_minus_baseline(ablation, tmp_path):
    _, out, _ = ablation
    a, b = out / "components" / "MT", out / "components" / "full"
    experiments.report([a, b], tmp_path)
    rows = list(csv.DictReader((tmp_path / "cells.csv").open()))
    _, sa = runner.read_run_dir(a)
    _, sb = runner.read_run_dir(b)
    full_rows = [r for r in rows if r["run"] == "full"]
    for r, ca, cb in zip(full_rows, sa.cells, sb.cells):
        assert float(r["gain"]) == cb.map50 - ca.map50
    assert (tmp_path / "rounds.csv").exists()


def test_report_grids(ablation):
    _, out, _ = ablation
    text = experiments.report([out / "components" / "MT", out / "components" / "full"], grids=True)
    assert "-- runs/full --" in text
    assert "(+" in text or "(-" in text


def test_report_incompatible_streams(ablation, tiny_source, tmp_path):
    _, out, _ = ablation
    other = cfgmod.short_term_config(0, 1)
    other = cfgmod.apply_overrides(other, {"stream.domains": "contrast-5"})
    runner.run(other, tiny_source[0], tmp_path / "other")
    with pytest.raises(experiments.ReportError):
        experiments.report([out / "components" / "MT", tmp_path / "other"])


def test_report_missing_dir(tmp_path):
    with pytest.raises(experiments.ReportError):
        experiments.report([tmp_path])


def test_ablation_failure_names_variant(tiny_source, monkeypatch):
    base = cfgmod.short_term_config(0, 1)

    def boom(args):
        if args[0].run.name == "MT+OCL":
            raise RuntimeError("synthetic failure")
        return runner.run(*args).summary

    monkeypatch.setattr(experiments, "_run_row", boom)
    with pytest.raises(experiments.AblationError, match="MT\\+OCL"):
        experiments.ablate(base, tiny_source[0])


def test_parallel_ablation_matches_serial(ablation, tiny_source, tmp_path):
    base, _, table = ablation
    assert experiments.ablate(base, tiny_source[0], tmp_path, jobs=2) == table


# ------------------------------------------------------------------ model files


def test_model_roundtrip(tiny_source, tmp_path):
    store, prov = tiny_source
    modelio.save(tmp_path / "m", store, prov)
    back, p2 = modelio.load(tmp_path / "m")
    assert back == store and back.checksum() == store.checksum() and p2 == json.loads(json.dumps(prov))


def test_provenance_matches_fresh_evaluation(tiny_source, tmp_path):
    store, prov = tiny_source
    modelio.save(tmp_path / "m", store, prov)
    back, p2 = modelio.load(tmp_path / "m")
    held = streams.clean_scenes(p2["seed"] + 10_000, p2["heldout"])
    assert abs(streams.evaluate_clean(back, held) - p2["clean_map"]) < 1e-9


@pytest.mark.parametrize("cut", [4, 11, 30, -8, -1])
def test_corrupt_model_file_reports_offset(tiny_source, cut):
    data = modelio.dumps(tiny_source[0])
    with pytest.raises(modelio.ModelFileError, match="offset"):
        modelio.loads(data[:cut])


def test_bad_magic(tiny_source):
    data = bytearray(modelio.dumps(tiny_source[0]))
    data[0:2] = b"XX"
    with pytest.raises(modelio.ModelFileError, match="offset 0"):
        modelio.loads(bytes(data))


def test_trailing_bytes(tiny_source):
    with pytest.raises(modelio.ModelFileError, match="trailing"):
        modelio.loads(modelio.dumps(tiny_source[0]) + b"\0" * 8)


# ------------------------------------------------------------------ CLI


def run_cli(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def last_error(err):
    return json.loads(err.strip().splitlines()[-1])


def test_cli_usage_error(capsys):
    code, _, err = run_cli(capsys, "frobnicate")
    assert code == 2 and last_error(err)["error"] == "UsageError"


def test_cli_config_error(capsys, tmp_path):
    code, _, err = run_cli(capsys, "run", "--out", str(tmp_path), "--set", "trainer.bogus=1")
    assert code == 2 and last_error(err)["error"] == "ConfigError"


def test_cli_missing_source(capsys, tmp_path):
    code, _, err = run_cli(capsys, "run", "--out", str(tmp_path))
    e = last_error(err)
    assert code == 1 and e["error"] == "MissingSourceModel" and "pretrain" in e["message"]


def test_cli_run_and_report(capsys, tiny_source, tmp_path):
    model = tmp_path / "src.amrod"
    modelio.save(model, *tiny_source)
    sets = ["--set", "stream.frames_per_domain=2", "--set", "stream.domains=blur-5"]
    code, out, _ = run_cli(capsys, "run", "--source", str(model), "--out", str(tmp_path / "r"), "--trace-ops", *sets)
    assert code == 0 and "Iter." in out
    assert (tmp_path / "r" / "ops.log").exists()
    code, out, _ = run_cli(capsys, "report", str(tmp_path / "r"), "--csv", str(tmp_path / "csv"))
    assert code == 0 and "== runs ==" in out
    assert (tmp_path / "csv" / "cells.csv").exists()
    code, _, err = run_cli(capsys, "report", str(tmp_path / "nothing"))
    assert code == 1 and last_error(err)["error"] == "ReportError"


def test_cli_config_file_and_seed(capsys, tiny_source, tmp_path):
    model = tmp_path / "src.amrod"
    modelio.save(model, *tiny_source)
    (tmp_path / "c.txt").write_text("stream.frames_per_domain = 1\nstream.domains = contrast-3\n")
    code, _, _ = run_cli(capsys, "run", "--source", str(model), "--out", str(tmp_path / "r"), "--config", str(tmp_path / "c.txt"), "--seed", "7")
    assert code == 0
    cfg, _ = runner.read_run_dir(tmp_path / "r")
    assert cfg.stream.seed == 7 and cfg.run.seed == 7 and cfg.stream.total_frames == 1


def test_cli_dump_stream(capsys, tmp_path):
    code, _, _ = run_cli(capsys, "dump-stream", "--out", str(tmp_path), "--limit", "3")
    assert code == 0
    pgms = sorted(tmp_path.glob("*.pgm"))
    assert len(pgms) == 3
    assert pgms[0].read_bytes().startswith(b"P5\n32 32\n255\n") and len(pgms[0].read_bytes()) == 13 + 1024
    lines = (tmp_path / "labels.txt").read_text().splitlines()
    assert lines[0].startswith("# file")
    first = lines[1].split()
    assert first[0] == "frame_000000.pgm" and first[3] == "gaussian_noise-5"
    float(first[5])


def test_cli_entry_point_module(tmp_path):
    p = subprocess.run([sys.executable, "-m", "amrod", "run", "--out", str(tmp_path)], capture_output=True, text=True)
    assert p.returncode == 1
    assert json.loads(p.stderr.strip().splitlines()[-1])["error"] == "MissingSourceModel"
