import json

import pytest

from hubnet.cli import build_parser, main


def test_toy_benchmark(tmp_path, capsys):
    assert main(["toy", "--scenario", "benchmark", "--out", str(tmp_path)]) == 0
    assert "toy-benchmark" in capsys.readouterr().out
    assert (tmp_path / "report.json").exists()


def test_run_config_batch(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"scenarios": [
        {"id": "one", "source": "builtin:toy", "variant": "lower_only", "prices": 1.0},
        {"id": "two", "source": "builtin:toy", "variant": "revenue", "price_cap": 2.0},
    ]}))
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--out", str(out), "--jobs", "1"]) == 0
    assert json.loads((out / "two" / "report.json").read_text())["converged"] is True
    assert (out / "one" / "flows.csv").exists()


def test_unreachable_gap_exits_nonzero(tmp_path):
    assert main(["toy", "--scenario", "base", "--gap", "1e-300", "--out", str(tmp_path)]) == 1


def test_compare(tmp_path, capsys):
    main(["toy", "--scenario", "benchmark", "--out", str(tmp_path / "a")])
    main(["toy", "--scenario", "base", "--out", str(tmp_path / "b")])
    assert main(["compare", str(tmp_path / "a"), str(tmp_path / "b"), "--out", str(tmp_path / "c")]) == 0
    assert "revenue delta +24.3" in capsys.readouterr().out
    summary = json.loads((tmp_path / "c" / "comparison.json").read_text())
    assert summary["revenue_delta"] == pytest.approx(24.3, abs=0.05)
    assert (tmp_path / "c" / "comparison.csv").read_text().startswith("link,")


def test_oracle(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"source": "builtin:toy", "variant": "revenue", "price_cap": 1.0}))
    assert main(["oracle", "--config", str(cfg), "--step", "0.5", "--rounds", "0", "--out", str(tmp_path)]) == 0
    res = json.loads((tmp_path / "oracle.json").read_text())
    assert res["evaluations"] == 27
    assert len((tmp_path / "oracle.csv").read_text().splitlines()) == 28


def test_oracle_rejects_lower_only(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"source": "builtin:toy", "variant": "lower_only"}))
    assert main(["oracle", "--config", str(cfg)]) == 2


def test_parser_requires_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])
