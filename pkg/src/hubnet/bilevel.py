"""Penalty-scheduled iterative solution of the platform pricing problem.

Each iteration solves the lower level at the current prices, boxes the duals
around the warm start, improves the penalized single-level problem locally
and updates the penalty weight by the gap and penalty tests.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import dijkstra

from .lower import LowerSolution, link_gradient, lower_solve, platform_metrics, price_vector
from .network import Network, NetworkError, remove_hub
from .penalty import (
    InnerBudget,
    PenalizedProblem,
    UpperSpec,
    assemble_single_level,
    dual_bounds,
    lift,
    make_upper,
    point_prices,
    solve_penalized,
)

SCHEMES = ("per_link", "per_hub", "per_operator")
VARIANTS = ("revenue", "flow_max")


@dataclass(frozen=True)
class HyperParams:
    """Inputs of the iterative method.

    ``time_limit`` bounds each penalized solve in seconds.
    """

    rho0: float = 500.0
    psi_plus: float = 10.0
    psi_minus: float = 0.5
    zeta: float = 2.0
    tau: float = 1e-3
    eps: float = 1e-6
    time_limit: float = 600.0
    max_iter: int = 10
    inner_iterations: int = 200

    def __post_init__(self):
        if not self.psi_plus > 1:
            raise ValueError("psi_plus must exceed 1")
        if not 0 < self.psi_minus < 1:
            raise ValueError("psi_minus must lie in (0, 1)")
        if not (self.tau > 0 and self.eps > 0):
            raise ValueError("tau and eps must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.rho0 <= 0 or self.zeta < 1:
            raise ValueError("rho0 must be positive and zeta at least 1")


@dataclass(frozen=True)
class SubsidyScheme:
    """Granularity of subsidies: one per link, per hub, or per operator."""

    mode: str = "per_link"
    operator_of: Mapping[str, str] | None = None

    def __post_init__(self):
        if self.mode not in SCHEMES:
            raise ValueError(f"unknown subsidy scheme {self.mode!r}")


@dataclass(frozen=True)
class IterationRecord:
    k: int
    rho: float
    sum_lambda: float
    gap: float
    upper_obj: float
    wall_ms: float


@dataclass(frozen=True)
class BilevelSolution:
    network: Network = field(repr=False)
    variant: str
    scheme: str
    prices: np.ndarray
    subsidies: np.ndarray
    lower: LowerSolution = field(repr=False)
    objective: float
    revenue: float
    gap: float
    sum_lambda: float
    converged: bool
    status: str
    trace: tuple[IterationRecord, ...]
    runtime: float
    zero_price_links: tuple[str, ...] = ()
    inner_trace: tuple[dict, ...] = field(default=(), repr=False)

    def trace_csv(self) -> str:
        return trace_csv(self.trace)

    def prices_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["link", "p_hat", "p", "subsidy"])
        for k, l in enumerate(self.network.links):
            if l.priceable:
                w.writerow([l.id, _fmt(l.p_hat), _fmt(self.prices[k]), _fmt(self.subsidies[k])])
        return buf.getvalue()


def _fmt(v) -> str:
    return "" if v is None else f"{float(v):.10g}"


def trace_csv(trace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k", "rho", "sum_lambda", "gap", "upper_obj", "wall_ms"])
    for r in trace:
        w.writerow([r.k, _fmt(r.rho), _fmt(r.sum_lambda), _fmt(r.gap), _fmt(r.upper_obj), f"{r.wall_ms:.3f}"])
    return buf.getvalue()


def compute_gap(objectives, inner_gap: float | None = None) -> float:
    """Relative change of the upper objective over the last two iterations.

    ``inner_gap`` is the optimality gap reported by the inner solve; the two
    are combined by ``max``. Returns ``inf`` when neither is available.
    """
    objs = list(objectives)
    parts = []
    if len(objs) >= 2:
        a, b = objs[-2], objs[-1]
        parts.append(abs(b - a) / max(abs(b), abs(a)) if (a or b) else 0.0)
    if inner_gap is not None:
        parts.append(inner_gap)
    return float(max(parts)) if parts else math.inf


def upper_objective(net: Network, variant: str, prices, sol: LowerSolution) -> float:
    """Revenue (revenue variant) or MOD passenger-miles (flow_max) at a lower solution."""
    p = price_vector(net, prices)
    d = net.link_array("d")
    X = sol.flows(net).sum(axis=1)
    if variant == "revenue":
        return float(np.sum((d * p * X)[net.priceable]))
    return float(np.sum((d * X)[net.mod_links]))


def activation_prices(net: Network, upper: UpperSpec, sol: LowerSolution) -> np.ndarray | None:
    """Prices that switch on subsidy groups carrying no flow at ``sol``.

    For each idle group the cheapest path through one of its links is
    priced in reduced costs; lowering the group price by that amount
    (divided by the link length) makes the path competitive. The candidate
    sets the group halfway between zero and that threshold. Returns
    ``None`` when no idle group can be activated.
    """
    X = sol.flows(net).sum(axis=1)
    red = np.maximum(link_gradient(net, sol.prices, sol), 0.0)
    tails = np.array([net.node_index[l.tail] for l in net.links])
    heads = np.array([net.node_index[l.head] for l in net.links])
    d = net.link_array("d")
    N = net.n_nodes
    thresholds = {}
    idle = [k for k, g in enumerate(upper.groups) if np.all(X[list(g)] <= 1e-9)]
    if not idle:
        return None
    for s, e in enumerate(net.demand.entries):
        if net.demand.q[s] <= 0:
            continue
        w = red[:, s] + 1e-12
        best = {}
        for l in range(net.n_links):
            key = (tails[l], heads[l])
            best[key] = min(best.get(key, np.inf), w[l])
        r = [k_[0] for k_ in best]
        c = [k_[1] for k_ in best]
        G = sp.csr_matrix((list(best.values()), (r, c)), shape=(N, N))
        from_o = dijkstra(G, indices=net.node_index[e.o])
        to_d = dijkstra(G.T.tocsr(), indices=net.node_index[e.d])
        for k in idle:
            for l in upper.groups[k]:
                if d[l] <= 0:
                    continue
                cost = from_o[tails[l]] + red[l, s] + to_d[heads[l]]
                if np.isfinite(cost):
                    thresholds[k] = min(thresholds.get(k, np.inf), cost / d[l])
    if not thresholds:
        return None
    p = sol.prices.copy()
    changed = False
    for k, delta in thresholds.items():
        g = list(upper.groups[k])
        target = float(np.max(p[g])) - delta
        if target > 0:
            p[g] = np.minimum(p[g], 0.5 * target)
            changed = True
    return p if changed else None


def _spend(net: Network, upper: UpperSpec, p, sol: LowerSolution) -> float:
    d = net.link_array("d")
    return float(np.sum(d * (upper.base_price - p) * sol.flows(net).sum(axis=1)))


def fit_budget(net: Network, upper: UpperSpec, p, warm: LowerSolution | None = None,
               steps: int = 12) -> tuple[np.ndarray, LowerSolution]:
    """Scale the subsidies ``base - p`` by the largest factor in [0, 1] whose spend fits the budget."""
    r = upper.base_price - np.asarray(p, dtype=float)
    sol = lower_solve(net, upper.base_price - r, warm_start=warm)
    if _spend(net, upper, upper.base_price - r, sol) <= upper.budget:
        return upper.base_price - r, sol
    lo, hi = 0.0, 1.0
    best = lower_solve(net, upper.base_price, warm_start=sol)
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        s_mid = lower_solve(net, upper.base_price - mid * r, warm_start=sol)
        if _spend(net, upper, upper.base_price - mid * r, s_mid) <= upper.budget:
            lo, best = mid, s_mid
        else:
            hi = mid
    return upper.base_price - lo * r, best


def _lift_at(problem: PenalizedProblem, prices, warm) -> tuple[np.ndarray, LowerSolution]:
    sol = lower_solve(problem.network, prices, warm_start=warm)
    u = problem.upper.subsidy_from_prices(sol.prices)
    return lift(problem, sol, u), sol


def solve_bilevel(net: Network, variant: str = "revenue", scheme: SubsidyScheme | str = "per_link",
                  hyper: HyperParams | None = None, *, base_price=None, budget: float | None = None,
                  p0=None) -> BilevelSolution:
    """Run the penalty-scheduled method from ``p0`` (default: the price caps).

    ``variant='flow_max'`` maximizes MOD passenger-miles with subsidies on
    top of the fixed ``base_price`` subject to the spend ``budget``.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    hyper = hyper or HyperParams()
    scheme = scheme if isinstance(scheme, SubsidyScheme) else SubsidyScheme(scheme)
    t_start = time.monotonic()
    upper = make_upper(net, variant, scheme.mode, base_price=base_price, budget=budget,
                       operator_of=scheme.operator_of)
    if p0 is None:
        p = upper.base_price.copy()
    else:
        p = price_vector(net, p0)
    p_start = p.copy()
    rho = hyper.rho0
    k = 0
    trace: list[IterationRecord] = []
    inner: list[dict] = []
    objs: list[float] = []
    sol = lower_solve(net, p)
    sum_lambda = math.inf
    gap = math.inf
    status = "iteration_limit"
    while True:
        t_iter = time.monotonic()
        base = assemble_single_level(net, upper, rho)
        z0 = lift(base, sol, upper.subsidy_from_prices(p))
        lo, hi = dual_bounds(base, z0, hyper.zeta)
        starts = []
        cands = []
        act = activation_prices(net, upper, sol) if net.demand.total > 0 else None
        if act is not None:
            cands.append(act)
        if variant == "flow_max" and k == 0 and net.demand.total > 0:
            # spend the whole budget uniformly
            cands.append(np.where(net.priceable, 0.0, upper.base_price))
        for c in cands:
            if variant == "flow_max":
                c, _ = fit_budget(net, upper, c, sol)
            z1, _ = _lift_at(base, c, sol)
            lo1, hi1 = dual_bounds(base, z1, hyper.zeta)
            lo, hi = np.minimum(lo, lo1), np.maximum(hi, hi1)
            starts.append(z1)
        problem = assemble_single_level(net, upper, rho, (lo, hi))

        def snap(z, problem=problem):
            try:
                return _lift_at(problem, point_prices(problem, z), sol)[0]
            except Exception:
                return None

        res = solve_penalized(problem, z0, InnerBudget(time_limit=hyper.time_limit,
                                                       iterations=hyper.inner_iterations),
                              candidates=starts, snap=snap)
        p_new = point_prices(problem, res.point)
        if scheme.mode == "per_hub":
            _assert_uniform(upper, p_new)
        sol_new = lower_solve(net, p_new, warm_start=sol)
        objs.append(upper_objective(net, variant, p_new, sol_new))
        gap = compute_gap(objs, res.gap)
        sum_lambda = float(res.raw_evaluation.penalty.total)
        inner.extend({"k": k, **r} for r in res.trace)
        trace.append(IterationRecord(k, rho, sum_lambda, gap, objs[-1], 1e3 * (time.monotonic() - t_iter)))
        if gap > hyper.tau:
            rho *= hyper.psi_minus
        p, sol = p_new, sol_new
        if sum_lambda <= hyper.eps:
            status = "converged"
            break
        if k + 1 >= hyper.max_iter:
            break
        rho *= hyper.psi_plus
        k += 1

    # idle groups keep their starting price
    X = sol.flows(net).sum(axis=1)
    for g in upper.groups:
        g = list(g)
        if np.all(X[g] <= 1e-9):
            p[g] = p_start[g]
    sol = lower_solve(net, p, warm_start=sol)
    obj = upper_objective(net, variant, p, sol)
    rev = upper_objective(net, "revenue", p, sol)
    subs = np.where(net.priceable, upper.base_price - p, 0.0)
    zero = tuple(l.id for k_, l in enumerate(net.links) if l.priceable and p[k_] <= 0.0)
    return BilevelSolution(net, variant, scheme.mode, p, subs, sol, obj, rev, gap, sum_lambda,
                           status == "converged", status, tuple(trace), time.monotonic() - t_start, zero,
                           tuple(inner))


def _assert_uniform(upper: UpperSpec, p: np.ndarray) -> None:
    for g in upper.groups:
        vals = upper.base_price[list(g)] - p[list(g)]
        if np.ptp(vals) > 1e-9:
            raise AssertionError("per-hub subsidy differs across links of one hub")


@dataclass(frozen=True)
class HubValue:
    hub: str
    with_hub: float
    without_hub: float
    with_solution: BilevelSolution = field(repr=False)
    without_solution: BilevelSolution = field(repr=False)

    @property
    def difference(self) -> float:
        return self.with_hub - self.without_hub


def value_of_hub(net: Network, hub_id: str, variant: str = "revenue", hyper: HyperParams | None = None,
                 scheme: SubsidyScheme | str = "per_link", **kw) -> HubValue:
    """Objective with and without ``hub_id``."""
    node = net.nodes[net.node_index[hub_id]] if hub_id in net.node_index else None
    if node is None or node.kind != "hub":
        raise NetworkError(f"{hub_id!r} is not a hub")
    reduced = remove_hub(net, hub_id)
    a = solve_bilevel(net, variant, scheme, hyper, **kw)
    kw_b = dict(kw)
    if isinstance(kw_b.get("base_price"), Mapping):
        kw_b["base_price"] = {k: v for k, v in kw_b["base_price"].items() if k in reduced.link_index}
    b = solve_bilevel(reduced, variant, scheme, hyper, **kw_b)
    return HubValue(hub_id, a.objective, b.objective, a, b)


def solution_metrics(sol: BilevelSolution):
    return platform_metrics(sol.network, sol.prices, sol.lower, sol.subsidies)


__all__ = [
    "BilevelSolution",
    "HubValue",
    "HyperParams",
    "IterationRecord",
    "SubsidyScheme",
    "activation_prices",
    "compute_gap",
    "solve_bilevel",
    "solution_metrics",
    "trace_csv",
    "upper_objective",
    "value_of_hub",
]
