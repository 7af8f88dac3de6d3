"""Single-level KKT reformulation of the pricing problem and its penalty relaxation.

Upper variables are subsidies ``u`` per group; link prices are
``p = p_base - T u`` where ``T`` maps groups to priceable links. For the
revenue variant ``p_base`` is the cap, so ``u`` is the discount from the cap.

The penalized objective is ``-Phi0 + rho * P`` with

    P = sum x * g + sum lam * (z v - load) + sum beta * (1 - x) + sum pi * (1 - v)

where ``g`` is the stationarity expression of the lower level in ``x``.
``g`` is linear in all variables, so dual feasibility ``g >= 0``, flow
conservation, capacity rows and the ``v`` stationarity row are linear
constraints; the flow-max spend cap ``sum d r X <= R`` is bilinear.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .lower import LowerSolution, _structure, od_weights
from .network import Network, relevant_pairs
from .qp import QPError, QuadraticProgram, Tolerances, solve_qp

BLOCKS = ("u", "x", "v", "mu", "lam", "beta", "pi")


@dataclass(frozen=True)
class UpperSpec:
    """Upper-level variant and subsidy grouping.

    ``groups[k]`` lists the link indices sharing subsidy ``u[k]``.
    """

    variant: str
    groups: tuple[tuple[int, ...], ...]
    base_price: np.ndarray
    u_max: np.ndarray
    budget: float | None = None
    labels: tuple[str, ...] = ()

    @property
    def n_u(self) -> int:
        return len(self.groups)

    def T(self, n_links: int) -> sp.csr_matrix:
        rows = [l for g in self.groups for l in g]
        cols = [k for k, g in enumerate(self.groups) for _ in g]
        return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_links, self.n_u))

    def prices(self, u: np.ndarray) -> np.ndarray:
        p = self.base_price.copy()
        for k, g in enumerate(self.groups):
            p[list(g)] -= u[k]
        return p

    def subsidies(self, u: np.ndarray) -> np.ndarray:
        r = np.zeros_like(self.base_price)
        for k, g in enumerate(self.groups):
            r[list(g)] += u[k]
        return r

    def subsidy_from_prices(self, p: np.ndarray) -> np.ndarray:
        """Group subsidy reproducing ``p`` (averaged over the group)."""
        return np.array([float(np.mean(self.base_price[list(g)] - p[list(g)])) for g in self.groups])


@dataclass(frozen=True)
class Layout:
    sizes: dict[str, int]

    @property
    def slices(self) -> dict[str, slice]:
        out, off = {}, 0
        for b in BLOCKS:
            out[b] = slice(off, off + self.sizes[b])
            off += self.sizes[b]
        return out

    @property
    def n(self) -> int:
        return sum(self.sizes.values())

    def split(self, z: np.ndarray) -> dict[str, np.ndarray]:
        return {b: z[s] for b, s in self.slices.items()}

    def join(self, parts: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([np.asarray(parts[b], dtype=float).ravel() for b in BLOCKS])


@dataclass(frozen=True)
class PenalizedProblem:
    """Assembled penalized single-level problem at penalty weight ``rho``."""

    network: Network = field(repr=False)
    upper: UpperSpec = field(repr=False)
    rho: float
    layout: Layout
    lo: np.ndarray = field(repr=False)
    hi: np.ndarray = field(repr=False)
    data: dict = field(repr=False)

    @property
    def variant(self) -> str:
        return self.upper.variant

    def with_rho(self, rho: float) -> "PenalizedProblem":
        return replace(self, rho=float(rho))

    def with_bounds(self, lo: np.ndarray, hi: np.ndarray) -> "PenalizedProblem":
        return replace(self, lo=lo, hi=hi)


@dataclass(frozen=True)
class PenaltyBreakdown:
    Lambda: np.ndarray
    sum_lambda: float
    stationarity: float
    capacity_comp: float
    upper_comp: float
    v_upper_comp: float
    v_stationarity: float

    @property
    def total(self) -> float:
        return self.sum_lambda + self.capacity_comp + self.upper_comp + self.v_upper_comp


@dataclass(frozen=True)
class Evaluation:
    objective: float
    upper_objective: float
    penalty: PenaltyBreakdown
    violations: dict[str, float]
    gradient: np.ndarray

    @property
    def max_violation(self) -> float:
        return max(self.violations.values(), default=0.0)


def make_upper(net: Network, variant: str = "revenue", scheme: str = "per_link", *,
               base_price=None, budget: float | None = None, operator_of=None) -> UpperSpec:
    """Group priceable links by ``scheme`` and set subsidy bounds.

    For ``revenue`` the base price is the cap and ``u`` ranges over
    ``[0, p_hat]``. For ``flow_max`` the base price ``p'`` is fixed and the
    subsidy ranges over ``[0, p']``.
    """
    if variant not in ("revenue", "flow_max"):
        raise ValueError(f"unknown variant {variant!r}")
    pr = np.flatnonzero(net.priceable)
    p_hat = net.p_hat
    if variant == "revenue":
        base = p_hat.copy()
        base[~net.priceable] = 0.0
    else:
        if base_price is None or budget is None:
            raise ValueError("flow_max needs a fixed base price and a budget")
        from .lower import price_vector
        base = price_vector(net, base_price)
    if scheme == "per_link":
        groups = [(int(l),) for l in pr]
        labels = [net.links[l].id for l in pr]
    elif scheme in ("per_hub", "per_operator"):
        if scheme == "per_hub":
            key = net.hub_of_link()
        else:
            key = {int(l): (operator_of or {}).get(net.links[l].id, "operator") for l in pr}
        names = sorted(set(key.values()))
        groups = [tuple(int(l) for l in pr if key[int(l)] == nm) for nm in names]
        labels = names
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    u_max = np.array([float(np.min(base[list(g)])) for g in groups])
    return UpperSpec(variant, tuple(groups), base, u_max, budget, tuple(labels))


@dataclass(frozen=True)
class Support:
    """Pairs ``(s, l)`` with ``l`` on an origin-destination path of OD ``s``.

    Off-support flows are zero at every lower-level optimum; the lifted
    problem fixes them (and their upper-bound duals) at zero and imposes
    dual feasibility only on support pairs. Node potentials are free for
    nodes touched by support links, the destination excluded, and fixed at
    zero elsewhere.
    """

    pair_s: np.ndarray
    pair_l: np.ndarray
    mu_s: np.ndarray
    mu_n: np.ndarray

    @property
    def m(self) -> int:
        return self.pair_s.size


def support(net: Network) -> Support:
    cached = net.__dict__.get("_penalty_support")
    if cached is not None:
        return cached
    rel = relevant_pairs(net)
    ps, pl, ms, mn = [], [], [], []
    tails = np.array([net.node_index[l.tail] for l in net.links], dtype=int)
    heads = np.array([net.node_index[l.head] for l in net.links], dtype=int)
    for s, e in enumerate(net.demand.entries):
        links = np.flatnonzero(rel[:, s])
        ps.extend([s] * links.size)
        pl.extend(links.tolist())
        dest = net.node_index[e.d]
        nodes = sorted((set(tails[links].tolist()) | set(heads[links].tolist())) - {dest})
        ms.extend([s] * len(nodes))
        mn.extend(nodes)
    out = Support(np.array(ps, dtype=int), np.array(pl, dtype=int), np.array(ms, dtype=int),
                  np.array(mn, dtype=int))
    net.__dict__["_penalty_support"] = out
    return out


def _default_bounds(layout: Layout, upper: UpperSpec, sup: Support, L: int, N: int) -> tuple[np.ndarray, np.ndarray]:
    sl = layout.slices
    lo = np.full(layout.n, -np.inf)
    hi = np.full(layout.n, np.inf)
    lo[sl["u"]] = 0.0
    hi[sl["u"]] = upper.u_max
    lo[sl["v"]] = 0.0
    hi[sl["v"]] = 1.0
    for b in ("lam", "beta", "pi"):
        lo[sl[b]] = 0.0
    on = np.zeros(sl["x"].stop - sl["x"].start, dtype=bool)
    on[sup.pair_s * L + sup.pair_l] = True
    lo[sl["x"]] = 0.0
    hi[sl["x"]] = np.where(on, 1.0, 0.0)
    hi[sl["beta"]] = np.where(on, np.inf, 0.0)
    free_mu = np.zeros(sl["mu"].stop - sl["mu"].start, dtype=bool)
    free_mu[sup.mu_s * N + sup.mu_n] = True
    lo[sl["mu"]] = np.where(free_mu, -np.inf, 0.0)
    hi[sl["mu"]] = np.where(free_mu, np.inf, 0.0)
    return lo, hi


def assemble_single_level(net: Network, upper: UpperSpec, rho: float, warm_bounds=None) -> PenalizedProblem:
    """Assemble the penalized problem; ``warm_bounds`` is an optional ``(lo, hi)`` pair.

    Blocks: ``u`` per subsidy group, ``x`` and ``beta`` per (OD, link),
    ``mu`` per (OD, node), ``v``, ``lam`` and ``pi`` per capacitated node.
    """
    if rho <= 0:
        raise ValueError("rho must be positive")
    if upper.variant == "flow_max" and upper.budget is None:
        raise ValueError("flow_max needs a budget")
    st = _structure(net)
    sup = support(net)
    L, S, N = net.n_links, net.n_od, net.n_nodes
    m = sup.m
    nv = st.z.size
    layout = Layout({"u": upper.n_u, "x": L * S, "v": nv, "mu": N * S, "lam": nv, "beta": L * S, "pi": nv})
    sl = layout.slices
    n = layout.n
    inc = net.incidence
    q = net.demand.q
    w = od_weights(net)
    qb = net.demand.q_bar
    kv = 1.0 / qb if qb > 0 else 1.0
    d = st.d
    ps, pl = sup.pair_s, sup.pair_l
    tails = np.array([net.node_index[l.tail] for l in net.links], dtype=int)
    heads = np.array([net.node_index[l.head] for l in net.links], dtype=int)
    free_mu = set((sup.mu_s * N + sup.mu_n).tolist())
    T = upper.T(L).tocsr()
    cap_of: dict[int, list[int]] = {}
    for c, counted in enumerate(inc.counted):
        for l in counted:
            cap_of.setdefault(l, []).append(c)

    # dual feasibility rows g = Jg z + g0 >= 0, one per support pair
    rows, cols, vals = [], [], []
    crow, ccol, cval = [], [], []
    for r, (s, l) in enumerate(zip(ps.tolist(), pl.tolist())):
        xcol = sl["x"].start + s * L + l
        rows.append(r); cols.append(xcol); vals.append(2.0 * d[l])
        for j in range(T.indptr[l], T.indptr[l + 1]):
            rows.append(r); cols.append(sl["u"].start + T.indices[j]); vals.append(-d[l] * T.data[j])
        for node, sign in ((heads[l], 1.0), (tails[l], -1.0)):
            key = s * N + int(node)
            if key in free_mu:
                rows.append(r); cols.append(sl["mu"].start + key); vals.append(sign)
                crow.append(key); ccol.append(xcol); cval.append(sign)
        for c in cap_of.get(l, ()):
            rows.append(r); cols.append(sl["lam"].start + c); vals.append(q[s])
        rows.append(r); cols.append(sl["beta"].start + s * L + l); vals.append(1.0)
    Jg = sp.csr_matrix((vals, (rows, cols)), shape=(m, n))
    g0 = d[pl] * (upper.base_price[pl] + st.c_t[pl]) + net.alpha * d[pl] * st.c_o[pl] * w[ps]

    # flow conservation, one row per free potential
    keys = np.sort(np.fromiter(free_mu, dtype=int, count=len(free_mu)))
    row_of = {int(k_): i for i, k_ in enumerate(keys)}
    E_cons = sp.csr_matrix((cval, ([row_of[k_] for k_ in crow], ccol)), shape=(keys.size, n))
    b_cons = np.zeros(keys.size)
    for s, e in enumerate(net.demand.entries):
        if e.q > 0:
            b_cons[row_of[s * N + net.node_index[e.o]]] = -1.0

    def block(name, mat):
        out = sp.lil_matrix((mat.shape[0], n))
        out[:, sl[name]] = mat
        return out.tocsr()

    if nv:
        I_cap = (block("x", sp.diags(1.0 / st.z) @ st.Cx) + block("v", -sp.identity(nv))).tocsr()
        vscale = 1.0 + net.alpha * st.z * st.c * kv
        E_v = (block("lam", sp.diags(-st.z / vscale)) + block("pi", sp.diags(1.0 / vscale))).tocsr()
        b_v = -net.alpha * st.z * st.c * kv / vscale
    else:
        I_cap = sp.csr_matrix((0, n))
        E_v = sp.csr_matrix((0, n))
        b_v = np.zeros(0)
    gscale = 1.0 + np.abs(g0) + 2.0 * d[pl]
    lo, hi = _default_bounds(layout, upper, sup, L, N)
    if warm_bounds is not None:
        lo = np.maximum(lo, warm_bounds[0])
        hi = np.minimum(hi, warm_bounds[1])
    data = dict(
        Jg=Jg, JgT=Jg.T.tocsr(), g0=g0, gscale=gscale, E_cons=E_cons, b_cons=b_cons, I_cap=I_cap,
        E_v=E_v, b_v=b_v, Cx=st.Cx, z=st.z, d=d, q=q, T=T, priceable=net.priceable.copy(),
        mod=net.mod_links.copy(), L=L, S=S, nv=nv, N=N, support=sup, xpos=ps * L + pl,
    )
    return PenalizedProblem(net, upper, float(rho), layout, lo, hi, data)


def lift(problem: PenalizedProblem, sol: LowerSolution, u: np.ndarray | None = None) -> np.ndarray:
    """Stack a lower-level primal-dual solution into a penalized-problem point."""
    up = problem.upper
    sup = problem.data["support"]
    N = problem.data["N"]
    if u is None:
        u = up.subsidy_from_prices(sol.prices)
    mu = np.zeros(sol.mu.size)
    keys = sup.mu_s * N + sup.mu_n
    mu[keys] = sol.mu.T.ravel()[keys]
    on = np.zeros(sol.x.size, dtype=bool)
    on[problem.data["xpos"]] = True
    parts = {
        "u": u,
        "x": np.where(on, sol.x.T.ravel(), 0.0),
        "v": sol.v,
        "mu": mu,
        "lam": sol.lam,
        "beta": np.where(on, sol.beta.T.ravel(), 0.0),
        "pi": sol.pi,
    }
    return problem.layout.join(parts)


def point_prices(problem: PenalizedProblem, z: np.ndarray) -> np.ndarray:
    return problem.upper.prices(z[problem.layout.slices["u"]])


def _link_volume(problem: PenalizedProblem, x: np.ndarray) -> np.ndarray:
    D = problem.data
    return (x.reshape(D["S"], D["L"]) * D["q"][:, None]).sum(axis=0)


def upper_value(problem: PenalizedProblem, u: np.ndarray, x: np.ndarray) -> float:
    """Upper-level objective (to maximize) at subsidies ``u`` and flows ``x``."""
    D = problem.data
    X = _link_volume(problem, x)
    if problem.variant == "revenue":
        p = problem.upper.prices(u)
        return float(np.sum((D["d"] * p * X)[D["priceable"]]))
    return float(np.sum((D["d"] * X)[D["mod"]]))


def budget_scale(problem: PenalizedProblem) -> float:
    return 1.0 + abs(float(problem.upper.budget or 0.0))


def _budget(problem: PenalizedProblem, u, x):
    """Budget row ``sum d r X - R`` and its gradients in ``u`` and ``x``."""
    D = problem.data
    r = problem.upper.subsidies(u)
    X = _link_volume(problem, x)
    val = float(np.sum(D["d"] * r * X)) - float(problem.upper.budget)
    gu = D["T"].T @ (D["d"] * X)
    gx = ((D["d"] * r)[None, :] * D["q"][:, None]).ravel()
    return val, gu, gx


def evaluate(problem: PenalizedProblem, z: np.ndarray) -> Evaluation:
    """Objective, penalty breakdown, constraint violations and exact gradient."""
    D = problem.data
    sl = problem.layout.slices
    L, S = D["L"], D["S"]
    xpos = D["xpos"]
    u, x, v = z[sl["u"]], z[sl["x"]], z[sl["v"]]
    lam, beta, pi = z[sl["lam"]], z[sl["beta"]], z[sl["pi"]]
    g = D["Jg"] @ z + D["g0"]
    xr = x[xpos]
    slack = D["z"] * v - D["Cx"] @ x
    Lam = xr * g
    comp_cap = lam * slack
    comp_beta = beta * (1.0 - x)
    comp_pi = pi * (1.0 - v)
    P = float(Lam.sum() + comp_cap.sum() + comp_beta.sum() + comp_pi.sum())

    grad_P = D["JgT"] @ xr
    gx = -beta - D["Cx"].T @ lam
    gx[xpos] += g
    grad_P[sl["x"]] += gx
    grad_P[sl["v"]] += lam * D["z"] - pi
    grad_P[sl["lam"]] += slack
    grad_P[sl["beta"]] += 1.0 - x
    grad_P[sl["pi"]] += 1.0 - v

    grad_U = np.zeros_like(z)
    q, d = D["q"], D["d"]
    X = _link_volume(problem, x)
    if problem.variant == "revenue":
        p = problem.upper.prices(u)
        pr = D["priceable"]
        U = float(np.sum((d * p * X)[pr]))
        grad_U[sl["u"]] = -(D["T"].T @ np.where(pr, d * X, 0.0))
        grad_U[sl["x"]] = (np.where(pr, d * p, 0.0)[None, :] * q[:, None]).ravel()
    else:
        mod = D["mod"]
        U = float(np.sum((d * X)[mod]))
        grad_U[sl["x"]] = (np.where(mod, d, 0.0)[None, :] * q[:, None]).ravel()

    obj = -U + problem.rho * P
    grad = -grad_U + problem.rho * grad_P

    vstat = float(np.abs(D["E_v"] @ z - D["b_v"]).max(initial=0.0))
    viol = {
        "conservation": float(np.abs(D["E_cons"] @ z - D["b_cons"]).max(initial=0.0)),
        "capacity": float(np.maximum(D["I_cap"] @ z, 0.0).max(initial=0.0)),
        "v_stationarity": vstat,
        "dual_feasibility": float(np.maximum(-g / D["gscale"], 0.0).max(initial=0.0)),
        "bounds": float(max(np.maximum(problem.lo - z, 0.0).max(initial=0.0),
                            np.maximum(z - problem.hi, 0.0).max(initial=0.0))),
    }
    if problem.variant == "flow_max":
        viol["budget"] = max(_budget(problem, u, x)[0], 0.0) / budget_scale(problem)
    lam_full = np.zeros(L * S)
    lam_full[xpos] = Lam
    br = PenaltyBreakdown(
        Lambda=lam_full.reshape(S, L).T,
        sum_lambda=float(Lam.sum()),
        stationarity=float(np.abs(g[xr > 1e-9]).max(initial=0.0)),
        capacity_comp=float(comp_cap.sum()),
        upper_comp=float(comp_beta.sum()),
        v_upper_comp=float(comp_pi.sum()),
        v_stationarity=vstat,
    )
    return Evaluation(float(obj), U, br, viol, grad)


def hessian_diagonal(problem: PenalizedProblem) -> np.ndarray:
    """Diagonal of the objective Hessian (only the flow block is nonzero)."""
    D = problem.data
    h = np.zeros(problem.layout.n)
    h[problem.layout.slices["x"]] = 4.0 * problem.rho * np.tile(D["d"], D["S"])
    return h


def dual_bounds(problem: PenalizedProblem, z: np.ndarray, zeta: float) -> tuple[np.ndarray, np.ndarray]:
    """Bounds on dual blocks obtained by widening the current duals by ``zeta``.

    Nonzero duals get ``[val / zeta, val * zeta]`` (sign aware); zero duals
    get ``[0, zeta * max(1, largest value in the same family)]``.
    """
    if zeta < 1:
        raise ValueError("zeta must be at least 1")
    sl = problem.layout.slices
    D = problem.data
    lo, hi = _default_bounds(problem.layout, problem.upper, D["support"], D["L"], D["N"])
    for b in ("mu", "lam", "beta", "pi"):
        val = z[sl[b]]
        top = zeta * max(1.0, float(np.abs(val).max(initial=0.0)))
        nz = np.abs(val) > 1e-12
        a, c = val / zeta, val * zeta
        blo = np.where(nz, np.minimum(a, c), 0.0 if b != "mu" else -top)
        bhi = np.where(nz, np.maximum(a, c), top)
        lo[sl[b]] = np.maximum(lo[sl[b]], blo)
        hi[sl[b]] = np.minimum(hi[sl[b]], bhi)
    return lo, hi


# ---------------------------------------------------------------- local solver

@dataclass(frozen=True)
class InnerBudget:
    time_limit: float = 600.0
    iterations: int = 200
    tol: float = 1e-7


@dataclass(frozen=True)
class InnerResult:
    point: np.ndarray
    objective: float
    evaluation: Evaluation = field(repr=False)
    raw_point: np.ndarray = field(repr=False)
    raw_evaluation: Evaluation = field(repr=False)
    iterations: int
    converged: bool
    budget_exhausted: bool
    gap: float = float("inf")
    trace: list = field(default_factory=list, repr=False)


class _Merit:
    """Penalized objective plus an exact penalty on spend above the budget."""

    def __init__(self, problem: PenalizedProblem):
        self.p = problem
        D = problem.data
        self.Aeq = sp.vstack([D["E_cons"], D["E_v"]], format="csr")
        self.beq = np.concatenate([D["b_cons"], D["b_v"]])
        gs = D["gscale"]
        self.Ain = sp.vstack([D["I_cap"], -(sp.diags(1.0 / gs) @ D["Jg"])], format="csr")
        self.bin = np.concatenate([np.zeros(D["I_cap"].shape[0]), -D["g0"] / gs])
        self.budget = problem.variant == "flow_max"
        self.weight = 1e3 * (1.0 + problem.rho) * budget_scale(problem) if self.budget else 0.0

    def budget_row(self, z):
        sl = self.p.layout.slices
        val, gu, gx = _budget(self.p, z[sl["u"]], z[sl["x"]])
        grad = np.zeros_like(z)
        grad[sl["u"]] = gu
        grad[sl["x"]] = gx
        bs = budget_scale(self.p)
        return val / bs, grad / bs

    def value(self, z):
        ev = evaluate(self.p, z)
        val = ev.objective
        if self.budget:
            val += self.weight * max(self.budget_row(z)[0], 0.0)
        return val, ev

    def violation(self, z):
        v = max(np.abs(self.Aeq @ z - self.beq).max(initial=0.0),
                np.maximum(self.Ain @ z + self.bin, 0.0).max(initial=0.0),
                np.maximum(self.p.lo - z, 0.0).max(initial=0.0),
                np.maximum(z - self.p.hi, 0.0).max(initial=0.0))
        if self.budget:
            v = max(v, self.budget_row(z)[0])
        return float(v)


def _row_normalize(M: sp.csr_matrix, b: np.ndarray):
    norms = np.asarray(abs(M).max(axis=1).todense()).ravel() if M.shape[0] else np.zeros(0)
    norms = np.where(norms > 0, norms, 1.0)
    return (sp.diags(1.0 / norms) @ M).tocsr(), b / norms


def _step(merit: _Merit, z, grad, h, radius, scale, free):
    """Proximal step: convex QP over the linearized constraints and a trust box.

    The QP is posed in ``w = dz / scale`` with normalized rows and objective.
    """
    p = merit.p
    idx = np.flatnonzero(free)
    sc = scale[idx]
    lb = np.minimum(np.maximum(p.lo - z, -radius * scale)[idx] / sc, 0.0)
    ub = np.maximum(np.minimum(p.hi - z, radius * scale)[idx] / sc, 0.0)
    Dsc = sp.diags(sc)
    Aeq = merit.Aeq[:, idx] @ Dsc
    beq = merit.beq - merit.Aeq @ z
    Ain = merit.Ain[:, idx] @ Dsc
    bin_ = np.maximum(-(merit.Ain @ z + merit.bin), 0.0)
    hess, lin = h[idx] * sc * sc, grad[idx] * sc
    if merit.budget:
        bval, bgrad = merit.budget_row(z)
        Aeq = sp.hstack([Aeq, sp.csr_matrix((Aeq.shape[0], 1))], format="csr")
        Ain = sp.vstack([sp.hstack([Ain, sp.csr_matrix((Ain.shape[0], 1))]),
                         sp.hstack([sp.csr_matrix((bgrad[idx] * sc)[None, :]), sp.csr_matrix([[-1.0]])])],
                        format="csr")
        bin_ = np.concatenate([bin_, [-bval]])
        hess = np.concatenate([hess, [1e-8]])
        lin = np.concatenate([lin, [merit.weight]])
        big = abs(bval) + float(np.abs(bgrad[idx] * sc).sum() * radius) + 1.0
        lb = np.concatenate([lb, [0.0]])
        ub = np.concatenate([ub, [big]])
    Aeq, beq = _row_normalize(Aeq.tocsr(), beq)
    Ain, bin_ = _row_normalize(Ain.tocsr(), bin_)
    fs = max(1.0, float(np.abs(lin).max(initial=0.0)), float(hess.max(initial=0.0)))
    qp = QuadraticProgram(hess=hess / fs, lin=lin / fs, A_eq=Aeq, b_eq=beq, A_ineq=Ain, b_ineq=bin_,
                          lb=lb, ub=ub)
    res = solve_qp(qp, Tolerances(max_iter=300))
    dz = np.zeros_like(z)
    dz[idx] = res.y[: idx.size] * sc
    return dz, float(res.objective) * fs


def _scaling(problem: PenalizedProblem):
    width = problem.hi - problem.lo
    scale = np.where(np.isfinite(width), np.minimum(width, 1e3), 1.0)
    free = scale > 0
    return np.where(free, np.maximum(scale, 1e-12), 1.0), free


def stationarity_gap(problem: PenalizedProblem, z: np.ndarray) -> float:
    """Relative decrease predicted by one unit proximal step at ``z``.

    Zero exactly at first-order stationary points of the penalized problem
    over its retained constraints.
    """
    merit = _Merit(problem)
    scale, free = _scaling(problem)
    f, ev = merit.value(z)
    h = hessian_diagonal(problem) + 1.0 / (scale * scale)
    try:
        _, pred = _step(merit, z, ev.gradient, h, 1.0, scale, free)
    except QPError:
        return float("inf")
    if merit.budget:
        pred -= merit.weight * max(merit.budget_row(z)[0], 0.0)
    return max(0.0, -pred) / (1.0 + abs(f))


def local_descent(problem: PenalizedProblem, start: np.ndarray, budget: InnerBudget,
                  deadline: float) -> tuple[np.ndarray, int, bool, list]:
    """Monotone proximal descent of the merit function from a feasible ``start``."""
    merit = _Merit(problem)
    lo, hi = problem.lo, problem.hi
    scale, free = _scaling(problem)
    hbase = hessian_diagonal(problem)
    z = np.minimum(np.maximum(start, lo), hi)
    f, ev = merit.value(z)
    t = 1.0
    trace = []
    it = 0
    converged = False
    stall = 0
    for it in range(1, budget.iterations + 1):
        if time.monotonic() > deadline:
            break
        grad = ev.gradient
        h = hbase + 1.0 / (t * scale * scale)
        try:
            dz, pred = _step(merit, z, grad, h, max(t, 1e-8), scale, free)
        except QPError:
            t *= 0.2
            if t < 1e-10:
                break
            continue
        if merit.budget:
            pred -= merit.weight * max(merit.budget_row(z)[0], 0.0)
        step = float(np.abs(dz / scale).max(initial=0.0))
        if step <= budget.tol or pred > -budget.tol * (1.0 + abs(f)):
            converged = True
            break
        zn = np.minimum(np.maximum(z + dz, lo), hi)
        fn, evn = merit.value(zn)
        if fn <= f + 1e-4 * pred:
            dec = f - fn
            z, f, ev = zn, fn, evn
            t = min(t * 3.0, 1e6)
            trace.append({"objective": ev.objective, "sum_lambda": ev.penalty.total,
                          "max_violation": merit.violation(z), "step": step})
            stall = stall + 1 if dec <= budget.tol * (1.0 + abs(f)) else 0
            if stall >= 3:
                converged = True
                break
        else:
            t *= 0.2
            if t < 1e-10:
                converged = True
                break
    return z, it, converged, trace


def trace_json(trace) -> str:
    """Inner iteration records as a JSON array."""
    return json.dumps([{k: float(v) for k, v in r.items()} for r in trace], indent=1) + "\n"


def solve_penalized(problem: PenalizedProblem, start: np.ndarray, budget: InnerBudget | None = None,
                    candidates: list[np.ndarray] | None = None, snap=None) -> InnerResult:
    """Local solve of the penalized problem with a descent guarantee.

    Each start (``start`` plus optional ``candidates``) is improved by
    proximal QP steps that keep the linear constraints satisfied. ``snap``
    optionally maps a point to the lower-level primal-dual solution at the
    same upper variables (a feasibility projection). The returned point is
    the feasible one with the lowest penalized objective, so it is never
    worse than a feasible ``start``.
    """
    budget = budget or InnerBudget()
    deadline = time.monotonic() + budget.time_limit
    merit = _Merit(problem)
    feas_tol = 1e-6

    z0 = np.minimum(np.maximum(start, problem.lo), problem.hi)
    best = z0
    best_f, best_eval = merit.value(z0)
    if merit.violation(z0) > feas_tol:
        best_f = np.inf
    raw_z, raw_eval = z0, best_eval
    iters = 0
    converged = False
    trace = []
    starts = [z0] + [np.minimum(np.maximum(c, problem.lo), problem.hi) for c in (candidates or [])]
    for j, zs in enumerate(starts):
        if j > 0 and time.monotonic() > deadline:
            break
        z, it, conv, tr = local_descent(problem, zs, budget, deadline)
        iters += it
        trace.extend(tr)
        fz, ez = merit.value(z)
        if j == 0:
            raw_z, raw_eval, converged = z, ez, conv
        pool = [(z, fz, ez)]
        if snap is not None:
            zz = snap(z)
            if zz is not None:
                fzz, ezz = merit.value(zz)
                pool.append((zz, fzz, ezz))
        for cand, fc, ec in pool:
            if merit.violation(cand) <= feas_tol and fc < best_f - 1e-12 * (1.0 + abs(best_f)):
                best, best_f, best_eval = cand, fc, ec
    exhausted = time.monotonic() > deadline
    return InnerResult(best, float(best_eval.objective), best_eval, raw_z, raw_eval, iters, converged,
                       exhausted, stationarity_gap(problem, best), trace)
