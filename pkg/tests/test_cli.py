import json

import numpy as np
import pytest
import yaml

from gazestab import cli
from gazestab.kinematics import canonical_chain
from gazestab.scenarios import read_trace_csv

SHORT = {"scenario": {"duration": 16.0}}


def write_config(tmp_path, doc):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(doc))
    return str(path)


def test_default_config_round_trips_through_yaml(tmp_path):
    doc = cli.load_config(write_config(tmp_path, cli.default_config()))
    cfg = cli.config_from_dict(doc)
    assert cfg.kind.value == "SelfRobot" and cfg.amplitude == 0.48 and cfg.k_okr == 0.8


def test_config_overrides_and_chain_definition(tmp_path):
    chain = canonical_chain().to_dict()
    chain["joints"][2]["offset"]["translation"] = [0.0, 0.0, 0.7]
    doc = {
        "schema": "gazestab-config/1",
        "chain": chain,
        "sensors": {"gyro": {"noise_std": 0.0}, "camera": {"rate": 60.0}},
        "controller": {"name": "combined", "combiner": "sum", "k_vor": 0.5},
        "seed": 9,
    }
    cfg = cli.config_from_dict(cli.load_config(write_config(tmp_path, doc)))
    assert cfg.label == "sum" and cfg.k_vor == 0.5 and cfg.seed == 9
    assert cfg.gyro.noise_std == 0.0 and cfg.camera.rate == 60.0
    assert cfg.chain.joints[2].parent_offset.translation[2] == pytest.approx(0.7)
    cfg = cli.config_from_dict(cli.load_config(write_config(tmp_path, doc)), "ExternalTarget", "okr", 3)
    assert (cfg.kind.value, cfg.label, cfg.seed, cfg.amplitude) == ("ExternalTarget", "okr", 3, 0.1)


def test_config_schema_is_checked(tmp_path):
    with pytest.raises(ValueError, match="schema"):
        cli.load_config(write_config(tmp_path, {"schema": "other/2"}))
    assert cli.main(["run", "--config", write_config(tmp_path, {"schema": "x"})]) == 1


def test_run_writes_trace(tmp_path, capsys):
    cfg = write_config(tmp_path, SHORT)
    code = cli.main(["run", "--config", cfg, "--scenario", "ExternalRobot", "--controller", "vor",
                     "--seed", "2", "--out", str(tmp_path / "o")])
    assert code == 0
    assert "ExternalRobot vor seed=2: index =" in capsys.readouterr().out
    header, data = read_trace_csv(tmp_path / "o" / "ExternalRobot_vor_seed2.csv")
    assert data.shape[0] == 16000
    assert (tmp_path / "o" / "ExternalRobot_vor_seed2_flow.npz").exists()


def test_run_with_combiner_flag(tmp_path, capsys):
    code = cli.main(["run", "--config", write_config(tmp_path, SHORT), "--combiner", "mean", "--out", str(tmp_path)])
    assert code == 0
    assert "SelfRobot mean" in capsys.readouterr().out


def test_output_directory_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "envout"))
    assert cli.main(["run", "--config", write_config(tmp_path, SHORT), "--controller", "none"]) == 0
    assert (tmp_path / "envout" / "SelfRobot_none_seed0.csv").exists()


def test_single_zero_amplitude_cell(tmp_path):
    doc = cli._merge(cli.default_config(), {"scenario": {"amplitude": 0.0, "duration": 16.0},
                                            "experiment": {"reference_perturbations": False}})
    plan = cli.plan_from_config(doc, tmp_path, ["SelfRobot"], ["none"], repetitions=1)
    report = cli.run_matrix(plan)
    assert len(report["cells"]) == 1
    assert report["cells"][0]["index_mean"] == 0.0


def test_individual_matrix_has_twelve_rows(tmp_path):
    plan = cli.plan_from_config(cli.default_config(), tmp_path, controllers=["none,ik,vor,okr"], repetitions=1)
    report = cli.run_matrix(plan)
    rows = [(r["scenario"], r["controller"]) for r in report["cells"]]
    assert len(rows) == 12 and len(set(rows)) == 12
    assert rows[:4] == [("SelfRobot", c) for c in ("none", "ik", "vor", "okr")]
    assert all(r["status"] == "ok" for r in report["cells"])
    assert report["schema"] == "gazestab-report/1" and report["tool_version"]
    assert all(len(r["config_hash"]) == 16 for r in report["cells"])


def test_repetitions_use_distinct_seeds_and_repeat_identically(tmp_path):
    doc = cli._merge(cli.default_config(), SHORT)
    plan = cli.plan_from_config(doc, tmp_path, ["SelfRobot"], ["okr"], seed=4, repetitions=3)
    a, b = cli.run_matrix(plan), cli.run_matrix(plan)
    assert a["seeds"] == [4, 5, 6]
    assert a == b
    assert len(set(a["cells"][0]["indices"])) == 3


def test_invalid_cell_is_recorded_and_others_proceed(tmp_path):
    doc = cli._merge(cli.default_config(), SHORT)
    plan = cli.plan_from_config(doc, tmp_path, ["SelfRobot"], ["vor", "pid"], repetitions=1)
    report = cli.run_matrix(plan)
    status = {r["controller"]: r["status"] for r in report["cells"]}
    assert status == {"vor": "ok", "pid": "invalid"}
    assert "pid" in report["cells"][1]["error"]


def test_fault_cell_exit_status(tmp_path, capsys):
    doc = {"scenario": {"duration": 16.0, "amplitude": 2.0}, "experiment": {"reference_perturbations": False}}
    code = cli.main(["matrix", "--config", write_config(tmp_path, doc), "--scenario", "ExternalRobot",
                     "--controller", "none", "--repetitions", "1", "--out", str(tmp_path / "m")])
    assert code == 2
    report = cli.load_report(tmp_path / "m" / "report.json")
    assert report["cells"][0]["status"] == "fault"


def test_nan_abort_is_reported(tmp_path):
    doc = {"scenario": {"duration": 16.0}, "controller": {"k_vor": float("nan")}}
    code = cli.main(["matrix", "--config", write_config(tmp_path, doc), "--scenario", "SelfRobot",
                     "--controller", "vor", "--repetitions", "1", "--out", str(tmp_path / "m")])
    assert code == 2
    row = cli.load_report(tmp_path / "m" / "report.json")["cells"][0]
    assert row["status"] in ("aborted", "invalid")


def test_matrix_parallel_workers_match_serial(tmp_path):
    doc = cli._merge(cli.default_config(), SHORT)
    serial = cli.plan_from_config(doc, tmp_path, ["SelfRobot", "ExternalTarget"], ["vor", "okr"], repetitions=2)
    parallel = cli.plan_from_config(doc, tmp_path, ["SelfRobot", "ExternalTarget"], ["vor", "okr"],
                                    repetitions=2, workers=2)
    assert cli.run_matrix(serial) == cli.run_matrix(parallel)


def test_matrix_command_writes_report_and_traces(tmp_path, capsys):
    out = tmp_path / "m"
    code = cli.main(["matrix", "--config", write_config(tmp_path, SHORT), "--scenario", "SelfRobot",
                     "--controller", "ik", "--combiner", "sum", "--repetitions", "1", "--traces", "--out", str(out)])
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert [r["controller"] for r in report["cells"]] == ["ik", "sum"]
    assert "report written" in capsys.readouterr().out
    assert (out / "report.txt").read_text().startswith("scenario")
    meta = json.loads((out / "report.meta.json").read_text())
    assert "created" in meta and "created" not in report
    assert (out / "traces" / "SelfRobot_sum_seed0.csv").exists()


def fake_report(values, scenario="SelfRobot"):
    return {
        "schema": "gazestab-report/1",
        "cells": [{"scenario": scenario, "controller": c, "status": "ok", "index_mean": v} for c, v in values.items()],
    }


def test_compare_ranking_and_margin():
    res = cli.compare(fake_report({"none": 10.0, "ik": 1.0, "vor": 2.0, "okr": 5.0, "reafference": 1.1}))
    entry = res["scenarios"][0]
    assert entry["ranking"] == [["ik"], ["reafference"], ["vor"], ["okr"], ["none"]]
    assert entry["margin"]["best_individual"] == "ik"
    assert entry["margin"]["ratio"] == pytest.approx(1.1)


def test_compare_three_way_ranking():
    res = cli.compare(fake_report({"vor": 2.0, "none": 10.0, "ik": 1.0}))
    assert res["scenarios"][0]["ranking"] == [["ik"], ["vor"], ["none"]]


def test_compare_reports_ties():
    res = cli.compare(fake_report({"none": 3.0, "ik": 3.0, "vor": 1.0, "okr": 2.0, "reafference": 1.0}))
    assert res["scenarios"][0]["ranking"] == [["reafference", "vor"], ["okr"], ["ik", "none"]]


def test_compare_marks_missing_cells_incomparable():
    res = cli.compare(fake_report({"none": 3.0, "vor": 1.0}))
    m = res["scenarios"][0]["margin"]
    assert m["status"] == "incomparable" and set(m["missing"]) == {"ik", "okr", "reafference"}
    assert "incomparable" in cli.compare_table(res)


def test_compare_command(tmp_path, capsys):
    path = tmp_path / "r.json"
    path.write_text(json.dumps(fake_report({"none": 3.0, "ik": 2.0, "vor": 1.0, "okr": 2.5, "reafference": 0.9})))
    assert cli.main(["compare", str(path), "--out", str(tmp_path / "c.json")]) == 0
    out = capsys.readouterr().out
    assert "SelfRobot: reafference < vor < ik < okr < none" in out
    assert json.loads((tmp_path / "c.json").read_text())["schema"] == "gazestab-compare/1"
    bad = tmp_path / "bad.json"
    bad.write_text("{}")
    assert cli.main(["compare", str(bad)]) == 1


def test_dump_trace(tmp_path, capsys):
    out = tmp_path / "o"
    cli.main(["run", "--config", write_config(tmp_path, SHORT), "--controller", "okr", "--out", str(out)])
    trace = out / "SelfRobot_okr_seed0.csv"
    capsys.readouterr()
    assert cli.main(["dump-trace", str(trace), "--channels", "slip_aff", "--every", "1000"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "t,slip_aff_u,slip_aff_v"
    assert len(lines) == 17
    header, data = read_trace_csv(trace)
    assert float(lines[2].split(",")[1]) == data[1000, header.index("slip_aff_u")]
    assert cli.main(["dump-trace", str(trace), "--channels", "nothing"]) == 1
    assert cli.main(["dump-trace", str(trace), "--out", str(tmp_path / "all.csv")]) == 0
    assert np.loadtxt(tmp_path / "all.csv", delimiter=",", skiprows=1).shape == data.shape


def test_module_entry_point():
    import subprocess
    import sys

    res = subprocess.run([sys.executable, "-m", "gazestab", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "dump-trace" in res.stdout
