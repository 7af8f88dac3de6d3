import json

import pytest

from hubnet.network import dumps, to_dict
from hubnet.scenarios import (
    ScenarioConfig,
    ScenarioError,
    compare_scenarios,
    default_jobs,
    load_configs,
    load_report,
    run_batch,
    run_scenario,
    toy_config,
    with_overrides,
)

ARTIFACTS = ("report.json", "flows.csv", "summary.json", "prices.csv", "trace.csv", "inner_trace.json",
             "map.svg")


def test_config_requires_one_source(toy):
    with pytest.raises(ScenarioError):
        ScenarioConfig()
    with pytest.raises(ScenarioError):
        ScenarioConfig(source="builtin:toy", inline=to_dict(toy))
    with pytest.raises(ScenarioError):
        ScenarioConfig(source="builtin:toy", variant="flow_max", budget=10.0)
    with pytest.raises(ScenarioError):
        ScenarioConfig(source="builtin:toy", variant="bogus")
    with pytest.raises(ScenarioError):
        ScenarioConfig.from_dict({"source": "builtin:toy", "colour": "red"})


def test_load_configs_inline_and_batch(tmp_path, toy):
    doc = to_dict(toy)
    doc["scenarios"] = [{"id": "a", "variant": "lower_only"}, {"id": "b", "source": "builtin:toy",
                                                                "hyper": {"max_iter": 3}}]
    path = tmp_path / "batch.json"
    path.write_text(json.dumps(doc))
    a, b = load_configs(path)
    assert a.inline is not None and a.source is None
    assert b.source == "builtin:toy" and b.hyper.max_iter == 3


def test_lower_only_report(tmp_path):
    res = run_scenario(toy_config("benchmark"), tmp_path / "bench")
    rep = res.report
    assert rep.variant == "lower_only" and rep.ok(1e-3)
    assert rep.total_demand == 300.0
    for name in ("report.json", "flows.csv", "summary.json", "map.svg", "timing.json"):
        assert (tmp_path / "bench" / name).exists()
    assert not (tmp_path / "bench" / "trace.csv").exists()


def test_revenue_scenario_artifacts(tmp_path):
    res = run_scenario(toy_config("base"), tmp_path / "base")
    rep = res.report
    for name in ARTIFACTS:
        assert (tmp_path / "base" / name).exists()
    assert rep.converged and rep.ok(1e-3)
    assert rep.objective == pytest.approx(24.3, abs=0.05)
    assert rep.share_pct == pytest.approx(round(100 * rep.platform_passengers / rep.total_demand, 2), abs=0.01)
    assert rep.capacity_pct["H"] == pytest.approx(100 * res.lower.v[0], abs=0.01)
    assert "runtime" not in json.loads((tmp_path / "base" / "report.json").read_text())
    assert json.loads((tmp_path / "base" / "timing.json").read_text())["runtime"] >= 0


def test_rerun_bit_identical(tmp_path):
    run_scenario(toy_config("alt"), tmp_path / "r1")
    run_scenario(toy_config("alt"), tmp_path / "r2")
    for name in ARTIFACTS:
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes(), name


def test_report_round_trip(tmp_path):
    res = run_scenario(toy_config("base"), tmp_path / "x")
    again = load_report(tmp_path / "x")
    assert again.to_json() == res.report.to_json()


def test_compare_self_zero(tmp_path):
    rep = run_scenario(toy_config("base")).report
    cmp_ = compare_scenarios(rep, rep)
    assert cmp_.revenue_delta == 0 and cmp_.share_delta == 0
    assert all(r.price_delta == 0 and r.flow_delta == 0 for r in cmp_.links)
    assert cmp_.to_csv().splitlines()[0] == "link,price_a,price_b,price_delta,flow_a,flow_b,flow_delta"


def test_compare_hub_removed():
    base = run_scenario(toy_config("base")).report
    gone = run_scenario(toy_config("base", remove_hub="H", id="no-hub")).report
    cmp_ = compare_scenarios(base, gone)
    assert cmp_.hub_delta_pct["H"] == -100.0
    assert cmp_.revenue_delta == pytest.approx(-base.revenue)
    assert any(r.flow_b is None for r in cmp_.links)


def test_compare_topology_mismatch():
    base = run_scenario(toy_config("benchmark")).report
    links = tuple(type(r)(r.id, r.head, r.tail, r.price, r.flow) for r in base.links)
    other = type(base)(**{**base.__dict__, "links": links})
    with pytest.raises(ScenarioError):
        compare_scenarios(base, other)


def test_value_of_hub_scenario():
    rep = run_scenario(toy_config("base", value_of_hub="H")).report
    assert rep.hub_value["without_hub"] == 0.0
    assert rep.hub_value["difference"] == pytest.approx(rep.objective, abs=0.05)


def test_flow_max_scenario():
    cfg = ScenarioConfig(id="fm", source="builtin:toy", variant="flow_max", base_price=1.0, budget=5.0)
    rep = run_scenario(cfg).report
    assert rep.subsidy <= 5.0 + 0.05


def test_network_file_source(tmp_path, toy):
    path = tmp_path / "toy.json"
    path.write_text(dumps(toy))
    rep = run_scenario(ScenarioConfig(source=str(path), variant="lower_only")).report
    ref = run_scenario(toy_config("benchmark")).report
    assert rep.links == ref.links


def test_synthetic_source_and_seed_override():
    cfg = with_overrides(ScenarioConfig(source="synthetic", variant="lower_only"), seed=5)
    assert cfg.source == "synthetic:5"
    cfg = with_overrides(toy_config("base"), gap=0.05, time_limit=7.0)
    assert cfg.hyper.tau == 0.05 and cfg.hyper.time_limit == 7.0


def test_batch_parallel(tmp_path, monkeypatch):
    monkeypatch.setenv("HUBNET_JOBS", "2")
    assert default_jobs() == 2
    cfgs = [toy_config("benchmark"), toy_config("alt")]
    reps = run_batch(cfgs, tmp_path)
    assert [r.id for r in reps] == ["toy-benchmark", "toy-alt"]
    assert (tmp_path / "toy-alt" / "report.json").exists()
    with pytest.raises(ScenarioError):
        run_batch([toy_config("alt"), toy_config("alt")], tmp_path)
