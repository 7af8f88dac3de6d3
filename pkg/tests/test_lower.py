import json
from dataclasses import replace

import numpy as np
import pytest

from conftest import random_network
from hubnet.lower import (
    assemble_lower_qp,
    capacity_sensitivity,
    flows_csv,
    kkt_residuals,
    link_gradient,
    lower_solve,
    objective_value,
    platform_metrics,
    price_vector,
    rhs_sensitivity,
    solve_lower,
    summary_json,
)
from hubnet.network import OD, DemandTable, Link, Network, Node, build_network

OPT = [0.8333, 0.625, 3.0]


def test_assembly_counts(toy):
    lqp = assemble_lower_qp(toy, [3, 3, 3])
    assert lqp.n_x == 42 and lqp.n_v == 1
    assert lqp.qp.n == 43
    assert lqp.qp.A_ineq.shape == (1, 43)
    # one conservation row per node and OD; one redundant row per OD is dropped
    assert sum(r.size for r in lqp.kept_rows) + toy.n_od == toy.n_nodes * toy.n_od
    assert lqp.qp.A_eq.shape[0] == sum(r.size for r in lqp.kept_rows)


def test_strictly_convex_hessian(toy):
    lqp = assemble_lower_qp(toy, None, scaled=False)
    d = toy.link_array("d")
    assert np.allclose(lqp.qp.hess[:42], np.tile(2 * toy.demand.q_bar * d, 3))
    assert np.all(lqp.qp.hess[:42] > 0)


def test_zero_demand_keeps_costs(toy):
    zero = toy.with_demand([0, 0, 0])
    a = assemble_lower_qp(toy, [1, 1, 1])
    b = assemble_lower_qp(zero, [1, 1, 1])
    assert np.allclose(a.qp.lin[:42] - b.qp.lin[:42],
                       (toy.alpha * toy.link_array("d") * toy.link_array("c_o"))[None, :].repeat(3, 0).ravel())
    assert np.allclose(b.qp.A_ineq.toarray()[0, :42], 0.0)


def test_zero_demand_solution(toy):
    zero = toy.with_demand([0, 0, 0])
    sol = lower_solve(zero)
    assert np.all(sol.x == 0) or np.abs(sol.x).max() < 1e-9
    assert abs(sol.objective) < 1e-9
    assert np.allclose(sol.v, 0)
    rep = kkt_residuals(zero, None, sol)
    assert rep.worst == 0.0


def test_forced_flow():
    net = build_network(Network((Node("o", "centroid"), Node("d", "centroid")),
                                (Link("o-d", "o", "d", 2.0, 3.0),), DemandTable((OD("o", "d", 50.0),)), 0.0))
    sol = lower_solve(net)
    assert sol.x[0, 0] == pytest.approx(1.0, abs=1e-9)
    assert sol.v.size == 0
    assert sol.objective == pytest.approx(50.0 * 2.0 * (1 + 0 + 3.0), rel=1e-9)


def test_toy_solution_feasible_and_repeatable(toy):
    a = lower_solve(toy, OPT)
    b = lower_solve(toy, OPT)
    assert np.abs(a.x - b.x).max() <= 1e-8
    rep = kkt_residuals(toy, OPT, a)
    assert rep.ok, rep
    assert rep.stationarity_max <= 1e-6


def test_residual_detects_perturbation(toy):
    sol = lower_solve(toy, OPT)
    used = np.argwhere(sol.x > 0.05)
    l, s = used[0]
    x = sol.x.copy()
    x[l, s] += 0.01
    rep = kkt_residuals(toy, OPT, replace(sol, x=x))
    d = toy.link_array("d")[l]
    scale = 1.0 + np.max(toy.link_array("d") * (price_vector(toy, OPT) + toy.link_array("c_t")
                                                 + toy.alpha * toy.link_array("c_o")))
    assert rep.stationarity_max >= 2 * d * 0.01 / scale - 1e-12
    assert not rep.ok


def test_link_gradient_sign_pattern(toy):
    sol = lower_solve(toy, OPT)
    g = link_gradient(toy, OPT, sol)
    assert np.all(np.abs(g[sol.x > 1e-7]) < 1e-6)
    assert np.all(g[sol.x <= 1e-9] > -1e-6)


def test_argmin_invariance_toy(toy):
    a = lower_solve(toy, OPT, scaled=True)
    b = lower_solve(toy, OPT, scaled=False)
    assert np.abs(a.x - b.x).max() < 1e-6
    assert np.abs(a.v - b.v).max() < 1e-6
    assert a.lam == pytest.approx(b.lam, abs=1e-8)


def test_objective_value_matches_qp(toy):
    lqp = assemble_lower_qp(toy, OPT, scaled=False, eps_v=0.0)
    sol = solve_lower(lqp)
    y = np.concatenate([sol.x.T.ravel(), sol.v])
    assert lqp.qp.objective(y) == pytest.approx(objective_value(toy, OPT, sol.x, sol.v), rel=1e-9)


def test_hub_value_identity(toy):
    sol = lower_solve(toy, OPT)
    m = platform_metrics(toy, OPT, sol)
    assert 200 * sol.v[0] == pytest.approx(m.per_hub_passengers["H"], rel=1e-6)


def test_metrics_zero_prices(toy):
    sol = lower_solve(toy, [0, 0, 0])
    assert platform_metrics(toy, [0, 0, 0], sol).revenue == 0.0


def test_metrics_revenue_formula(toy):
    sol = lower_solve(toy, OPT)
    p = price_vector(toy, OPT)
    d = toy.link_array("d")
    manual = sum(d[l] * p[l] * sol.x[l, s] * toy.demand.q[s]
                 for l in np.flatnonzero(toy.priceable) for s in range(3))
    m = platform_metrics(toy, OPT, sol)
    assert m.revenue == pytest.approx(manual, rel=1e-12)
    assert m.platform_flow_share == pytest.approx(m.platform_passengers / 300.0)


def test_capacity_sensitivity_binding():
    from hubnet.network import generate_toy
    net = generate_toy().with_node("H", z=20.0)
    p = [0.3, 0.3, 0.3]
    sens = capacity_sensitivity(net, p, "H")
    assert not sens.active_set_changed
    assert sens.finite_difference == pytest.approx(sens.prediction, rel=0.01)
    assert sens.finite_difference < 0
    sol = lower_solve(net, p)
    assert np.allclose(sens.congestion_price, sol.pi[0] * net.demand.q / (20.0 * net.demand.q_bar))


def test_capacity_sensitivity_slack_node():
    net = random_network(3)
    sol = lower_solve(net)
    assert sol.v[0] == 0.0
    sens = capacity_sensitivity(net, None, "H0")
    assert abs(sens.finite_difference) < 1e-9


def test_rhs_sensitivity_matches_dual():
    from hubnet.network import generate_toy
    net = generate_toy()
    fd, pred = rhs_sensitivity(net, OPT, "H")
    assert fd == pytest.approx(pred, rel=0.01)


def test_csv_and_json(toy):
    sol = lower_solve(toy, OPT)
    text = flows_csv(toy, OPT, sol)
    lines = text.splitlines()
    assert lines[0] == "link,od,flow,price"
    assert len(lines) == 1 + 42
    summary = json.loads(summary_json(toy, OPT, sol))
    assert set(summary) >= {"objective", "revenue", "v", "capacity_duals"}
    assert summary["v"]["H"] == pytest.approx(sol.v[0])


def test_price_vector_forms(toy):
    a = price_vector(toy, [1, 2, 3])
    b = price_vector(toy, {"A-H": 1, "B-H": 2, "C-H": 3})
    assert np.array_equal(a, b)
    assert np.all(a[~toy.priceable] == 0)
    assert np.array_equal(price_vector(toy), np.where(toy.priceable, 3.0, 0.0))
