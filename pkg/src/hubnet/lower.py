"""Lower-level coalition assignment: a strictly convex link-based QP.

Normalized flows ``x[l, s]`` of OD ``s`` and capacity fractions ``v[k]`` of
capacitated node ``k`` minimize (in the default ``1/q_bar`` scaling)

    sum d x^2 + sum d (p + c_t + alpha c_o q_s / q_bar) x + alpha / q_bar sum z c v

subject to per-OD flow conservation, capacity rows ``sum q_s x <= z v`` and
unit boxes. Duals are reported in the scaled convention: ``mu`` free per
(node, OD), ``lam >= 0`` per capacity row, ``beta >= 0`` for ``x <= 1`` and
``pi >= 0`` for ``v <= 1``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import scipy.sparse as sp

from .network import Network, weak_components
from .qp import ActiveSet, QuadraticProgram, QPError, Tolerances, solve_qp

EPS_V = 1e-9


def price_vector(net: Network, prices=None) -> np.ndarray:
    """Per-link prices; non-priceable links always carry 0."""
    out = np.zeros(net.n_links)
    if prices is None:
        out[net.priceable] = net.p_hat[net.priceable]
        return out
    if isinstance(prices, Mapping):
        for key, val in prices.items():
            out[net.link_index[key]] = float(val)
    else:
        arr = np.asarray(prices, dtype=float)
        if arr.size == int(net.priceable.sum()) and arr.size != net.n_links:
            out[net.priceable] = arr
        else:
            out[:] = arr
    out[~net.priceable] = 0.0
    return out


def od_weights(net: Network) -> np.ndarray:
    """``q_s / q_bar`` per OD with ``0/0 := 0``."""
    q = net.demand.q
    qb = net.demand.q_bar
    return q / qb if qb > 0 else np.zeros_like(q)


def capacity_matrix(net: Network) -> sp.csr_matrix:
    """Rows ``sum_s sum_{l counted} q_s x[l, s]`` over x ordered OD-major."""
    inc = net.incidence
    L, S = net.n_links, net.n_od
    q = net.demand.q
    rows, cols, vals = [], [], []
    for k, counted in enumerate(inc.counted):
        for s in range(S):
            for l in counted:
                rows.append(k)
                cols.append(s * L + l)
                vals.append(q[s])
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(inc.capacitated), L * S))


def conservation_rows(net: Network) -> list[np.ndarray]:
    """Kept node rows per OD: one row dropped per weakly connected component.

    The destination row is dropped in its own component so ``mu`` at the
    destination is normalized to zero.
    """
    labels = weak_components(net)
    out = []
    for e in net.demand.entries:
        drop = {}
        dst = net.node_index[e.d]
        drop[labels[dst]] = dst
        for i in range(net.n_nodes):
            drop.setdefault(labels[i], i)
        dropped = set(drop.values())
        out.append(np.array([i for i in range(net.n_nodes) if i not in dropped], dtype=int))
    return out


@dataclass(frozen=True)
class LowerQP:
    network: Network = field(repr=False)
    prices: np.ndarray
    qp: QuadraticProgram = field(repr=False)
    kept_rows: tuple[np.ndarray, ...] = field(repr=False)
    scaled: bool = True
    eps_v: float = EPS_V
    cap_rhs: np.ndarray | None = None

    @property
    def n_x(self) -> int:
        return self.network.n_links * self.network.n_od

    @property
    def n_v(self) -> int:
        return len(self.network.incidence.capacitated)


@dataclass(frozen=True)
class _Structure:
    kept: tuple[np.ndarray, ...]
    A: sp.csr_matrix
    b: np.ndarray
    Cx: sp.csr_matrix
    z: np.ndarray
    c: np.ndarray
    d: np.ndarray
    c_t: np.ndarray
    c_o: np.ndarray


def _structure(net: Network) -> _Structure:
    """Price-independent QP data, cached on the (immutable) network."""
    cached = net.__dict__.get("_lower_structure")
    if cached is not None:
        return cached
    inc = net.incidence
    caps = [net.nodes[i] for i in inc.capacitated]
    kept = conservation_rows(net)
    blocks, rhs = [], []
    for s, e in enumerate(net.demand.entries):
        blocks.append(inc.matrix[kept[s]])
        f = np.zeros(net.n_nodes)
        if e.q > 0:
            # an OD without travellers carries no flow
            f[net.node_index[e.o]] = -1.0
            f[net.node_index[e.d]] = 1.0
        rhs.append(f[kept[s]])
    nv = len(caps)
    A = sp.block_diag(blocks, format="csr")
    A = sp.hstack([A, sp.csr_matrix((A.shape[0], nv))], format="csr")
    out = _Structure(
        kept=tuple(kept),
        A=A,
        b=np.concatenate(rhs),
        Cx=capacity_matrix(net),
        z=np.array([n.z for n in caps], dtype=float),
        c=np.array([n.c for n in caps], dtype=float),
        d=net.link_array("d"),
        c_t=net.link_array("c_t"),
        c_o=net.link_array("c_o"),
    )
    net.__dict__["_lower_structure"] = out
    return out


def assemble_lower_qp(net: Network, prices=None, *, scaled: bool = True, eps_v: float = EPS_V,
                      cap_rhs=None) -> LowerQP:
    """Build the lower-level QP at ``prices``.

    ``scaled=False`` keeps the objective in passenger units (multiplied by
    ``q_bar``). ``cap_rhs`` offsets the right-hand side of each capacity row.
    """
    st = _structure(net)
    p = price_vector(net, prices)
    L, S = net.n_links, net.n_od
    w = od_weights(net)
    qb = net.demand.q_bar
    factor = 1.0 if scaled or qb == 0 else qb
    z, nv = st.z, st.z.size

    hx = np.tile(2.0 * st.d, S)
    base = st.d * (p + st.c_t)
    cx = (base[None, :] + net.alpha * (st.d * st.c_o)[None, :] * w[:, None]).ravel()
    if scaled:
        cv = net.alpha * z * st.c / (qb if qb > 0 else 1.0)
    else:
        cv = net.alpha * z * st.c
    hv = 2.0 * eps_v * np.ones(nv)

    if nv:
        G = sp.hstack([sp.diags(1.0 / z) @ st.Cx, -sp.identity(nv)], format="csr")
        g = np.zeros(nv) if cap_rhs is None else np.asarray(cap_rhs, dtype=float) / z
    else:
        G = sp.csr_matrix((0, L * S))
        g = np.zeros(0)

    qp = QuadraticProgram(
        hess=np.concatenate([hx * factor, hv * factor]),
        lin=np.concatenate([cx * factor, cv]),
        A_eq=st.A, b_eq=st.b, A_ineq=G, b_ineq=g,
        lb=np.zeros(L * S + nv), ub=np.ones(L * S + nv),
    )
    return LowerQP(net, p, qp, st.kept, scaled, eps_v,
                   None if cap_rhs is None else np.asarray(cap_rhs, dtype=float))


@dataclass(frozen=True)
class LowerSolution:
    """Primal-dual optimum of the lower level (duals in the scaled convention)."""

    prices: np.ndarray
    x: np.ndarray
    v: np.ndarray
    mu: np.ndarray
    lam: np.ndarray
    beta: np.ndarray
    pi: np.ndarray
    gamma: np.ndarray
    gamma_v: np.ndarray
    objective: float
    status: str
    iterations: int
    polished: bool
    active: ActiveSet = field(repr=False, compare=False)

    def flows(self, net: Network) -> np.ndarray:
        """Passenger flows ``x[l, s] * q_s``."""
        return self.x * net.demand.q[None, :]


def solve_lower(lqp: LowerQP, tolerances: Tolerances | None = None,
                warm_start: LowerSolution | None = None) -> LowerSolution:
    """Solve the assembled lower-level QP; ``warm_start`` seeds the active set."""
    net = lqp.network
    L, S = net.n_links, net.n_od
    nx, nv = lqp.n_x, lqp.n_v
    warm = warm_start.active if warm_start is not None else None
    try:
        res = solve_qp(lqp.qp, tolerances, warm)
    except QPError as exc:
        raise QPError(f"lower level: {exc}") from exc
    qb = net.demand.q_bar
    unscale = 1.0 if lqp.scaled or qb == 0 else 1.0 / qb
    y = res.y
    x = y[:nx].reshape(S, L).T.copy()
    v = y[nx:].copy()
    mu = np.zeros((net.n_nodes, S))
    off = 0
    for s in range(S):
        rows = lqp.kept_rows[s]
        mu[rows, s] = res.eq_dual[off:off + rows.size] * unscale
        off += rows.size
    caps = [net.nodes[i] for i in net.incidence.capacitated]
    z = np.array([n.z for n in caps], dtype=float)
    lam = res.ineq_dual / z * unscale if nv else np.zeros(0)
    beta = res.upper_dual[:nx].reshape(S, L).T * unscale
    gamma = res.lower_dual[:nx].reshape(S, L).T * unscale
    pi = res.upper_dual[nx:] * unscale
    gamma_v = res.lower_dual[nx:] * unscale
    if nv:
        # v = 0 leaves lam undetermined in [0, alpha c / q_bar]; report the upper end
        idle = (v <= 0.0) & (gamma_v > 0) & (qb > 0)
        lam = np.where(idle, lam + gamma_v / z, lam)
        gamma_v = np.where(idle, 0.0, gamma_v)
    phi1 = objective_value(net, lqp.prices, x, v)
    return LowerSolution(lqp.prices.copy(), x, v, mu, lam, beta, pi, gamma, gamma_v, float(phi1),
                         res.status, res.iterations, res.polished, res.active)


def objective_value(net: Network, prices, x: np.ndarray, v: np.ndarray) -> float:
    """Lower-level objective in passenger units at flows ``x`` and fractions ``v``."""
    p = price_vector(net, prices)
    d = net.link_array("d")
    qb = net.demand.q_bar
    q = net.demand.q
    traveler = qb * float(np.sum(d[:, None] * x * x) + np.sum((d * (p + net.link_array("c_t")))[:, None] * x))
    operator = float(np.sum((d * net.link_array("c_o"))[:, None] * x * q[None, :]))
    caps = [net.nodes[i] for i in net.incidence.capacitated]
    capacity = float(sum(n.z * n.c * vk for n, vk in zip(caps, v)))
    return traveler + net.alpha * (operator + capacity)


def lower_solve(net: Network, prices=None, *, warm_start: LowerSolution | None = None,
                tolerances: Tolerances | None = None, **kw) -> LowerSolution:
    """Assemble and solve in one call."""
    return solve_lower(assemble_lower_qp(net, prices, **kw), tolerances, warm_start)


def link_gradient(net: Network, prices, sol: LowerSolution) -> np.ndarray:
    """Stationarity expression ``g[l, s]`` of the scaled Lagrangian in ``x``."""
    p = price_vector(net, prices)
    d = net.link_array("d")
    c_t = net.link_array("c_t")
    c_o = net.link_array("c_o")
    w = od_weights(net)
    inc = net.incidence
    A = inc.matrix
    g = 2.0 * d[:, None] * sol.x + d[:, None] * (p + c_t)[:, None] + net.alpha * (d * c_o)[:, None] * w[None, :]
    g = g + A.T @ sol.mu
    q = net.demand.q
    for k, counted in enumerate(inc.counted):
        if counted:
            g[list(counted), :] += sol.lam[k] * q[None, :]
    return g + sol.beta


@dataclass(frozen=True)
class ResidualReport:
    stationarity_max: float
    stationarity_mean: float
    dual_feasibility: float
    v_stationarity: float
    conservation: float
    capacity: float
    bounds: float
    complementarity: float
    dual_sign: float
    tol: float

    @property
    def flags(self) -> dict[str, bool]:
        vals = {
            "stationarity": self.stationarity_max,
            "dual_feasibility": self.dual_feasibility,
            "v_stationarity": self.v_stationarity,
            "conservation": self.conservation,
            "capacity": self.capacity,
            "bounds": self.bounds,
            "complementarity": self.complementarity,
            "dual_sign": self.dual_sign,
        }
        return {k: v <= self.tol for k, v in vals.items()}

    @property
    def ok(self) -> bool:
        return all(self.flags.values())

    @property
    def worst(self) -> float:
        return max(self.stationarity_max, self.dual_feasibility, self.v_stationarity, self.conservation,
                   self.capacity, self.bounds, self.complementarity, self.dual_sign)


def kkt_residuals(net: Network, prices, sol: LowerSolution, tol: float = 1e-6,
                  flow_tol: float = 1e-9) -> ResidualReport:
    """Relative KKT residuals of ``sol`` for the scaled lower-level problem."""
    p = price_vector(net, prices)
    d = net.link_array("d")
    scale = 1.0 + float(np.max(d * (p + net.link_array("c_t") + net.alpha * net.link_array("c_o")
                                    * max(od_weights(net).max(initial=0.0), 1.0)), initial=0.0))
    g = link_gradient(net, p, sol)
    used = sol.x > flow_tol
    st = np.abs(g[used]) / scale
    idle = ~used
    dual_feas = float(np.max(np.maximum(-g[idle], 0.0), initial=0.0)) / scale
    dual_feas = max(dual_feas, float(np.max(np.abs(sol.x * g), initial=0.0)) / scale)

    inc = net.incidence
    caps = [net.nodes[i] for i in inc.capacitated]
    z = np.array([n.z for n in caps], dtype=float)
    c = np.array([n.c for n in caps], dtype=float)
    qb = net.demand.q_bar
    kv = 1.0 / qb if qb > 0 else 1.0
    gv = net.alpha * z * c * kv - sol.lam * z + sol.pi
    vscale = 1.0 + float(np.max(net.alpha * z * c * kv, initial=0.0))
    interior = sol.v > flow_tol
    v_st = float(np.max(np.abs(gv[interior]), initial=0.0)) / vscale
    v_st = max(v_st, float(np.max(np.maximum(-gv[~interior], 0.0), initial=0.0)) / vscale)

    A = inc.matrix
    cons = 0.0
    for s, e in enumerate(net.demand.entries):
        f = np.zeros(net.n_nodes)
        if e.q > 0:
            f[net.node_index[e.o]] = -1.0
            f[net.node_index[e.d]] = 1.0
        cons = max(cons, float(np.max(np.abs(A @ sol.x[:, s] - f), initial=0.0)))
    q = net.demand.q
    load = np.array([float((sol.x[list(cnt), :] * q[None, :]).sum()) if cnt else 0.0 for cnt in inc.counted])
    slack = z * sol.v - load
    cap = float(np.max(np.maximum(-slack / z, 0.0), initial=0.0))
    bounds = max(float(np.max(np.maximum(-sol.x, 0.0), initial=0.0)),
                 float(np.max(np.maximum(sol.x - 1.0, 0.0), initial=0.0)),
                 float(np.max(np.maximum(-sol.v, 0.0), initial=0.0)),
                 float(np.max(np.maximum(sol.v - 1.0, 0.0), initial=0.0)))
    comp = max(
        float(np.max(np.abs(sol.lam * slack / z) / vscale, initial=0.0)),
        float(np.max(np.abs(sol.beta * (1.0 - sol.x)) / scale, initial=0.0)),
        float(np.max(np.abs(sol.pi * (1.0 - sol.v)) / vscale, initial=0.0)),
    )
    sign = max(float(np.max(np.maximum(-sol.lam, 0.0), initial=0.0)),
               float(np.max(np.maximum(-sol.beta, 0.0), initial=0.0)),
               float(np.max(np.maximum(-sol.pi, 0.0), initial=0.0)))
    return ResidualReport(
        stationarity_max=float(st.max(initial=0.0)),
        stationarity_mean=float(st.mean()) if st.size else 0.0,
        dual_feasibility=dual_feas,
        v_stationarity=v_st,
        conservation=cons,
        capacity=cap,
        bounds=bounds,
        complementarity=comp,
        dual_sign=sign,
        tol=tol,
    )


@dataclass(frozen=True)
class Sensitivity:
    finite_difference: float
    prediction: float
    congestion_price: np.ndarray
    active_set_changed: bool


def capacity_sensitivity(net: Network, prices, node: str, delta: float = 1e-3,
                         base: LowerSolution | None = None) -> Sensitivity:
    """Central difference of the optimal objective in ``z`` of ``node``.

    The prediction from the envelope theorem is ``v (alpha c - q_bar lam)``
    in passenger units; the congestion price per OD is ``pi q_s / (z q_bar)``.
    """
    inc = net.incidence
    k = [net.nodes[i].id for i in inc.capacitated].index(node)
    n = net.nodes[inc.capacitated[k]]
    sol = base or lower_solve(net, prices)
    up = lower_solve(net.with_node(node, z=n.z * (1 + delta)), prices)
    dn = lower_solve(net.with_node(node, z=n.z * (1 - delta)), prices)
    fd = (up.objective - dn.objective) / (2.0 * n.z * delta)
    qb = net.demand.q_bar
    pred = float(sol.v[k] * (net.alpha * n.c - qb * sol.lam[k]))
    cong = sol.pi[k] * net.demand.q / (n.z * qb) if qb > 0 else np.zeros(net.n_od)

    def pattern(s):
        return (s.x > 1e-9, s.v[k] >= 1 - 1e-9, s.lam[k] > 1e-12)

    changed = any(not np.array_equal(a, b) for s2 in (up, dn) for a, b in zip(pattern(sol), pattern(s2)))
    return Sensitivity(float(fd), pred, cong, changed)


def rhs_sensitivity(net: Network, prices, node: str, delta: float = 1e-3) -> tuple[float, float]:
    """Central difference of the scaled optimum in the capacity row offset.

    Returns ``(finite_difference, -lam)``; the row reads ``load - z v <= offset``.
    """
    inc = net.incidence
    k = [net.nodes[i].id for i in inc.capacitated].index(node)
    nv = len(inc.capacitated)
    sol = lower_solve(net, prices)
    e = np.zeros(nv)
    e[k] = delta
    up = lower_solve(net, prices, cap_rhs=e)
    dn = lower_solve(net, prices, cap_rhs=-e)
    qb = net.demand.q_bar or 1.0
    return float((up.objective - dn.objective) / (2 * delta) / qb), float(-sol.lam[k])


@dataclass(frozen=True)
class PlatformMetrics:
    revenue: float
    platform_flow_share: float
    platform_passengers: float
    per_hub_passengers: dict[str, float]
    total_subsidy: float
    mod_passenger_miles: float
    capacity_fraction: dict[str, float]

    def as_dict(self) -> dict:
        return {
            "revenue": self.revenue,
            "platform_flow_share": self.platform_flow_share,
            "platform_passengers": self.platform_passengers,
            "per_hub_passengers": dict(self.per_hub_passengers),
            "total_subsidy": self.total_subsidy,
            "mod_passenger_miles": self.mod_passenger_miles,
            "capacity_fraction": dict(self.capacity_fraction),
        }


def mod_entry_links(net: Network) -> np.ndarray:
    """MOD links whose tail is not reached by another MOD link."""
    mod = net.mod_links
    heads = {l.head for l in net.links if l.layer == "mod_service"}
    return mod & np.array([l.tail not in heads for l in net.links])


def platform_metrics(net: Network, prices, sol: LowerSolution, subsidies=None) -> PlatformMetrics:
    """Revenue, platform share, per-hub passengers and subsidy spending."""
    p = price_vector(net, prices)
    d = net.link_array("d")
    pax = sol.flows(net)
    link_pax = pax.sum(axis=1)
    pr = net.priceable
    revenue = float(np.sum(d[pr] * p[pr] * link_pax[pr]))
    entry = mod_entry_links(net)
    platform = float(link_pax[entry].sum())
    total = net.demand.total
    inc = net.incidence
    per_hub = {}
    frac = {}
    for k, i in enumerate(inc.capacitated):
        node = net.nodes[i]
        frac[node.id] = float(sol.v[k])
        if node.kind == "hub":
            per_hub[node.id] = float(link_pax[list(inc.counted[k])].sum()) if inc.counted[k] else 0.0
    r = np.zeros(net.n_links) if subsidies is None else price_vector(net, subsidies)
    subsidy = float(np.sum(d * r * link_pax))
    pmiles = float(np.sum(d[net.mod_links] * link_pax[net.mod_links]))
    return PlatformMetrics(revenue, platform / total if total > 0 else 0.0, platform, per_hub, subsidy,
                           pmiles, frac)


def flows_csv(net: Network, prices, sol: LowerSolution) -> str:
    p = price_vector(net, prices)
    pax = sol.flows(net)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["link", "od", "flow", "price"])
    for l, link in enumerate(net.links):
        for s, e in enumerate(net.demand.entries):
            w.writerow([link.id, e.label, f"{pax[l, s]:.6f}", f"{p[l]:.6f}"])
    return buf.getvalue()


def summary_dict(net: Network, prices, sol: LowerSolution, subsidies=None) -> dict:
    m = platform_metrics(net, prices, sol, subsidies)
    inc = net.incidence
    ids = [net.nodes[i].id for i in inc.capacitated]
    return {
        "objective": sol.objective,
        "revenue": m.revenue,
        "platform_flow_share": m.platform_flow_share,
        "platform_passengers": m.platform_passengers,
        "per_hub_passengers": m.per_hub_passengers,
        "total_subsidy": m.total_subsidy,
        "v": {i: float(v) for i, v in zip(ids, sol.v)},
        "capacity_duals": {i: float(v) for i, v in zip(ids, sol.lam)},
        "status": sol.status,
    }


def summary_json(net: Network, prices, sol: LowerSolution, subsidies=None) -> str:
    return json.dumps(summary_dict(net, prices, sol, subsidies), indent=2, sort_keys=True) + "\n"
