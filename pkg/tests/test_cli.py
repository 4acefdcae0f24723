from __future__ import annotations

import json

import pytest

from fixcon.cli import main


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["desk", "--seed", "0", "--images", "40", "--out", str(d / "src.json"), "--data", str(d / "data")]) == 0
    return d


def args(d, *extra):
    return ["--source", str(d / "src.json"), "--data", str(d / "data"), *extra]


def test_inspect(files, capsys):
    assert main(["inspect", str(files / "src.json")]) == 0
    out = capsys.readouterr().out
    assert "conv1" in out and "idom=" in out


def test_localize_identical_is_empty(files, capsys):
    assert main(["localize", *args(files, "--target", str(files / "src.json"))]) == 0
    assert json.loads(capsys.readouterr().out) == []


def test_inject_localize_repair_fixed(files, capsys):
    bad = files / "pp.json"
    assert main(["inject", "--source", str(files / "src.json"), "--category", "PP", "--out", str(bad),
                 "--record", str(files / "pp.record.json")]) == 0
    assert json.loads((files / "pp.record.json").read_text())["touched"] == ["model-input"]
    report = files / "report.json"
    assert main(["localize", *args(files, "--target", str(bad), "--report", str(report))]) == 0
    assert [r["category"] for r in json.loads(report.read_text())] == ["PP"]
    capsys.readouterr()
    assert main(["repair", *args(files, "--target", str(bad), "--out", str(files / "fixed.json"))]) == 0
    assert "final dissimilarity 0.00%" in capsys.readouterr().out
    assert main(["eval", *args(files, "--target", str(files / "fixed.json"))]) == 0
    assert "dissimilarity 0.00%" in capsys.readouterr().out


def test_repair_time_limit_exits_1(files):
    bad = files / "oot.json"
    assert main(["inject", "--source", str(files / "src.json"), "--category", "OUT_OF_TAXONOMY",
                 "--out", str(bad)]) == 0
    out = files / "oot_fixed.json"
    code = main(["repair", *args(files, "--target", str(bad), "--out", str(out), "--time-limit", "0.2",
                                 "--diss-no", "1000")])
    assert code == 1
    meta = json.loads((files / "oot_fixed.eval.json").read_text())
    assert meta["termination_reason"] == "time-limit"


def test_repair_stagnation_exits_1(files):
    code = main(["repair", *args(files, "--target", str(files / "oot.json"), "--out", str(files / "s.json"),
                                 "--diss-no", "1", "--analysis-iters", "1")])
    assert code == 1
    assert json.loads((files / "s.eval.json").read_text())["termination_reason"] == "stagnation"


def test_errors_exit_2(files, capsys):
    assert main(["eval", *args(files, "--target", str(files / "missing.json"))]) == 2
    assert "fixcon: error:" in capsys.readouterr().err
    assert main(["inject", "--source", str(files / "src.json"), "--category", "WB", "--layer", "relu1",
                 "--out", str(files / "x.json")]) == 2
    assert main(["repair", *args(files, "--target", str(files / "src.json"), "--out", str(files / "y.json"),
                                 "--significance", "2")]) == 2


def test_usage_error_exits_2(capsys):
    with pytest.raises(SystemExit) as info:
        main(["repair"])
    assert info.value.code == 2
    assert "usage:" in capsys.readouterr().err
