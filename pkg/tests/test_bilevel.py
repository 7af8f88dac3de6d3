import math
from dataclasses import replace

import numpy as np
import pytest

from conftest import random_network
from hubnet.bilevel import (
    HyperParams,
    SubsidyScheme,
    compute_gap,
    solution_metrics,
    solve_bilevel,
    upper_objective,
    value_of_hub,
)
from hubnet.lower import lower_solve, platform_metrics
from hubnet.network import Link, Node, build_network


@pytest.fixture(scope="module")
def toy_base(toy):
    return solve_bilevel(toy)


def test_hyperparams_defaults_and_validation():
    h = HyperParams()
    assert (h.rho0, h.psi_plus, h.psi_minus, h.zeta, h.tau, h.eps, h.time_limit, h.max_iter) == \
        (500.0, 10.0, 0.5, 2.0, 1e-3, 1e-6, 600.0, 10)
    for bad in (dict(psi_plus=1.0), dict(psi_minus=1.0), dict(psi_minus=0.0), dict(tau=0.0),
                dict(eps=-1.0), dict(max_iter=0)):
        with pytest.raises(ValueError):
            HyperParams(**bad)


def test_scheme_validation():
    with pytest.raises(ValueError):
        SubsidyScheme("per_city")


def test_compute_gap_cases():
    assert compute_gap([90.8, 90.8], 0.0) == 0.0
    assert compute_gap([90.0, 90.8]) == pytest.approx(0.8 / 90.8)
    assert 0.0087 < compute_gap([90.0, 90.8]) < 0.0089
    assert math.isinf(compute_gap([90.0]))
    assert compute_gap([90.0], 0.2) == 0.2
    assert compute_gap([1.0, 1.0], 0.05) == 0.05


def test_toy_revenue_solution(toy, toy_base):
    sol = toy_base
    assert sol.converged and sol.status == "converged"
    assert sol.gap <= 1e-3
    assert sol.sum_lambda <= 1e-6
    assert sol.objective == pytest.approx(24.2817, abs=1e-3)
    p = sol.prices[toy.priceable]
    assert np.all(p <= toy.p_hat[toy.priceable] + 1e-9)
    assert np.all(sol.subsidies >= -1e-9)


def test_closing_solve_consistency(toy, toy_base):
    again = lower_solve(toy, toy_base.prices)
    assert np.abs(again.x - toy_base.lower.x).max() < 1e-8
    m = platform_metrics(toy, toy_base.prices, again)
    assert m.revenue == pytest.approx(toy_base.objective, rel=1e-6)
    assert solution_metrics(toy_base).revenue == pytest.approx(toy_base.revenue, rel=1e-12)


def test_trace_schedule(toy_base):
    h = HyperParams()
    trace = toy_base.trace
    assert trace[0].rho == h.rho0 and trace[0].k == 0
    for a, b in zip(trace, trace[1:]):
        factor = h.psi_plus * (h.psi_minus if a.gap > h.tau else 1.0)
        assert b.rho == pytest.approx(a.rho * factor)
    lines = toy_base.trace_csv().splitlines()
    assert lines[0] == "k,rho,sum_lambda,gap,upper_obj,wall_ms"
    assert len(lines) == 1 + len(trace)


def test_prices_csv(toy_base):
    lines = toy_base.prices_csv().splitlines()
    assert lines[0] == "link,p_hat,p,subsidy"
    assert [l.split(",")[0] for l in lines[1:]] == ["A-H", "B-H", "C-H"]


def test_iteration_cap_and_status(toy):
    sol = solve_bilevel(toy, hyper=HyperParams(max_iter=1))
    assert len(sol.trace) == 1
    assert sol.converged == (sol.sum_lambda <= HyperParams().eps)
    assert sol.status == ("converged" if sol.converged else "iteration_limit")


def test_flow_max_zero_budget_matches_lower(toy):
    sol = solve_bilevel(toy, "flow_max", base_price=0.5, budget=0.0)
    ref = lower_solve(toy, [0.5, 0.5, 0.5])
    assert np.allclose(sol.prices[toy.priceable], 0.5)
    assert np.abs(sol.lower.x - ref.x).max() < 1e-8
    assert sol.objective == pytest.approx(upper_objective(toy, "flow_max", ref.prices, ref), rel=1e-9)


def test_flow_max_spends_within_budget(toy):
    sol = solve_bilevel(toy, "flow_max", base_price=1.0, budget=5.0)
    m = solution_metrics(sol)
    assert m.total_subsidy <= 5.0 + 1e-4
    base = lower_solve(toy, [1.0, 1.0, 1.0])
    assert sol.objective >= upper_objective(toy, "flow_max", base.prices, base) - 1e-9


def test_per_hub_uniform(corridor):
    small = corridor.with_price_cap(2.0)
    sol = solve_bilevel(small, "revenue", "per_hub", HyperParams(max_iter=2))
    hub_of = small.hub_of_link()
    for h in set(hub_of.values()):
        links = [l for l, hh in hub_of.items() if hh == h]
        assert np.ptp(sol.subsidies[links]) <= 1e-9


def test_per_operator_scheme(toy):
    scheme = SubsidyScheme("per_operator", {"A-H": "east", "B-H": "west", "C-H": "west"})
    sol = solve_bilevel(toy, "revenue", scheme)
    p = sol.prices
    assert p[toy.link_index["B-H"]] == pytest.approx(p[toy.link_index["C-H"]])
    assert sol.objective <= 24.2817 + 1e-3


def test_value_of_hub_toy(toy, toy_base):
    hv = value_of_hub(toy, "H")
    assert hv.without_hub == 0.0
    assert hv.difference == pytest.approx(toy_base.objective, rel=1e-9)


def test_value_of_idle_hub(toy):
    nodes = toy.nodes + (Node("H2", "hub", z=50.0, c=1.0, x=4.0, y=6.0),)
    links = toy.links + (Link("C-H2", "C", "H2", 3.0, 60.0, 1.0, 3.0, "mod_service", True),
                         Link("H2-S", "H2", "S", 0.1, layer="transfer"))
    net = build_network(replace(toy, nodes=nodes, links=links))
    hv = value_of_hub(net, "H2")
    assert abs(hv.difference) <= 1e-6 * (1 + abs(hv.with_hub))


def test_value_of_hub_rejects_non_hub(toy):
    with pytest.raises(ValueError):
        value_of_hub(toy, "S")


@pytest.mark.parametrize("seed", [1, 2])
def test_random_networks_improve_on_caps(seed):
    net = random_network(seed)
    sol = solve_bilevel(net)
    start = lower_solve(net)
    assert sol.objective >= upper_objective(net, "revenue", start.prices, start) - 1e-9
