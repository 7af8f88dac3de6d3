"""Brute-force references: grid search over upper variables and active-set enumeration."""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .bilevel import upper_objective
from .lower import LowerSolution, assemble_lower_qp, lower_solve, platform_metrics
from .network import Network, relevant_pairs
from .penalty import make_upper
from .qp import QuadraticProgram

MAX_GRID_VARS = 4
MAX_INEQUALITIES = 12


class GuardError(ValueError):
    """Problem too large for exhaustive search."""


@dataclass(frozen=True)
class GridSpec:
    """Box and step per upper variable plus the refinement schedule."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    step: tuple[float, ...]
    rounds: int = 3
    shrink: float = 0.1

    def __post_init__(self):
        if not len(self.lower) == len(self.upper) == len(self.step):
            raise ValueError("lower, upper and step must have equal length")
        if any(s <= 0 for s in self.step):
            raise ValueError("steps must be positive")
        if any(lo > hi for lo, hi in zip(self.lower, self.upper)):
            raise ValueError("empty variable range")
        if not 0 < self.shrink < 1 or self.rounds < 0:
            raise ValueError("shrink must lie in (0, 1) and rounds be nonnegative")

    @classmethod
    def uniform(cls, upper, step: float = 0.1, rounds: int = 3, shrink: float = 0.1, lower=None) -> "GridSpec":
        upper = tuple(float(u) for u in upper)
        lower = tuple(0.0 for _ in upper) if lower is None else tuple(float(v) for v in lower)
        return cls(lower, upper, tuple(step for _ in upper), rounds, shrink)


@dataclass(frozen=True)
class OracleResult:
    best: np.ndarray
    objective: float
    evaluations: int
    prices: np.ndarray
    solution: LowerSolution = field(repr=False)
    incumbents: tuple[float, ...] = ()
    points: list = field(default_factory=list, repr=False)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n = self.best.size
        w.writerow([f"u{i}" for i in range(n)] + ["objective", "feasible"])
        for vec, obj, ok in self.points:
            w.writerow([f"{v:.10g}" for v in vec] + [f"{obj:.10g}", int(ok)])
        return buf.getvalue()


def _axis(lo: float, hi: float, step: float) -> np.ndarray:
    k = int(np.floor((hi - lo) / step + 1e-9))
    pts = lo + step * np.arange(k + 1)
    if hi - pts[-1] > 1e-12:
        pts = np.append(pts, hi)
    return pts


def grid_oracle(net: Network, variant: str = "revenue", grid: GridSpec | None = None, *,
                scheme: str = "per_link", base_price=None, budget: float | None = None,
                step: float = 0.1, rounds: int = 3, shrink: float = 0.1) -> OracleResult:
    """Exhaustive grid search with refinement around the incumbent.

    Upper variables are group prices for ``revenue`` and group subsidies for
    ``flow_max``; in ``flow_max`` a point is feasible when its spend does
    not exceed ``budget``. Each evaluation is an exact lower-level solve.
    Ties are broken toward the lexicographically smallest vector.
    """
    upper = make_upper(net, variant, scheme, base_price=base_price, budget=budget)
    nvar = upper.n_u
    if nvar > MAX_GRID_VARS:
        raise GuardError(f"{nvar} upper variables exceed the grid guard of {MAX_GRID_VARS}")
    if grid is None:
        grid = GridSpec.uniform(upper.u_max, step, rounds, shrink)
    if len(grid.lower) != nvar:
        raise ValueError(f"grid has {len(grid.lower)} variables, problem has {nvar}")
    d = net.link_array("d")
    points = []
    warm = [None]

    def prices_of(vec):
        if variant == "revenue":
            return upper.prices(upper.u_max - vec)
        return upper.prices(vec)

    def evaluate(vec):
        p = prices_of(vec)
        sol = lower_solve(net, p, warm_start=warm[0])
        warm[0] = sol
        platform_metrics(net, p, sol)
        obj = upper_objective(net, variant, p, sol)
        ok = True
        if variant == "flow_max":
            X = sol.flows(net).sum(axis=1)
            spend = float(np.sum(d * upper.subsidies(vec) * X))
            ok = spend <= budget + 1e-9 * (1.0 + abs(budget))
        points.append((tuple(float(v) for v in vec), obj, ok))
        return obj, ok, sol

    best_vec, best_obj, best_sol = None, -np.inf, None
    seen: dict[tuple, float] = {}

    def consider(vec):
        nonlocal best_vec, best_obj, best_sol
        key = tuple(np.round(vec, 12))
        if key in seen:
            return
        obj, ok, sol = evaluate(np.array(vec))
        seen[key] = obj
        if not ok:
            return
        if best_vec is None or obj > best_obj or (obj == best_obj and tuple(vec) < tuple(best_vec)):
            best_vec, best_obj, best_sol = np.array(vec), obj, sol

    lo = np.array(grid.lower)
    hi = np.array(grid.upper)
    steps = np.array(grid.step)
    axes = [_axis(lo[i], hi[i], steps[i]) for i in range(nvar)]
    for vec in itertools.product(*axes):
        consider(vec)
    incumbents = [best_obj]
    for _ in range(grid.rounds):
        if best_vec is None:
            break
        new = steps * grid.shrink
        axes = [_axis(max(lo[i], best_vec[i] - steps[i]), min(hi[i], best_vec[i] + steps[i]), new[i])
                for i in range(nvar)]
        for vec in itertools.product(*axes):
            consider(vec)
        steps = new
        incumbents.append(best_obj)
    if best_vec is None:
        raise ValueError("no feasible grid point")
    return OracleResult(best_vec, float(best_obj), len(points), prices_of(best_vec), best_sol,
                        tuple(incumbents), points)


# ---------------------------------------------------------------- enumeration

@dataclass(frozen=True)
class EnumerationResult:
    y: np.ndarray
    eq_dual: np.ndarray
    ineq_dual: np.ndarray
    lower_dual: np.ndarray
    upper_dual: np.ndarray
    objective: float
    active: tuple[int, ...]
    checked: int


def _candidates(qp: QuadraticProgram):
    out = [("lb", i) for i in range(qp.n) if np.isfinite(qp.lb[i])]
    out += [("ub", i) for i in range(qp.n) if np.isfinite(qp.ub[i])]
    out += [("row", r) for r in range(qp.A_ineq.shape[0])]
    return out


def enumerate_active_sets(qp: QuadraticProgram, tol: float = 1e-9) -> EnumerationResult:
    """Exact optimum of a tiny strictly convex QP by trying every active set.

    Each candidate set is imposed as equalities and the KKT system solved
    directly; sets with singular systems are skipped. The optimum is the
    best candidate that is primal feasible with correctly signed duals.
    """
    cands = _candidates(qp)
    if len(cands) > MAX_INEQUALITIES:
        raise GuardError(f"{len(cands)} inequalities exceed the enumeration guard of {MAX_INEQUALITIES}")
    n = qp.n
    A = qp.A_eq.toarray() if sp.issparse(qp.A_eq) else np.asarray(qp.A_eq, dtype=float).reshape(-1, n)
    G = qp.A_ineq.toarray() if sp.issparse(qp.A_ineq) else np.asarray(qp.A_ineq, dtype=float).reshape(-1, n)
    me = A.shape[0]
    H = np.diag(qp.hess)
    best = None
    checked = 0
    scale = 1.0 + np.abs(qp.lin).max(initial=0.0)
    for size in range(len(cands) + 1):
        for subset in itertools.combinations(range(len(cands)), size):
            rows, rhs = [], []
            for j in subset:
                kind, i = cands[j]
                if kind == "row":
                    rows.append(G[i]); rhs.append(qp.b_ineq[i])
                else:
                    e = np.zeros(n)
                    e[i] = 1.0
                    rows.append(e); rhs.append(qp.lb[i] if kind == "lb" else qp.ub[i])
            C = np.vstack([A] + ([np.array(rows)] if rows else [])) if me or rows else np.zeros((0, n))
            c = np.concatenate([qp.b_eq, np.array(rhs, dtype=float)]) if me or rows else np.zeros(0)
            m = C.shape[0]
            K = np.block([[H, C.T], [C, np.zeros((m, m))]])
            rhs_k = np.concatenate([-qp.lin, c])
            checked += 1
            try:
                if np.linalg.matrix_rank(K) < K.shape[0]:
                    continue
                sol = np.linalg.solve(K, rhs_k)
            except np.linalg.LinAlgError:
                continue
            y, mult = sol[:n], sol[n:]
            if np.any(y < qp.lb - tol) or np.any(y > qp.ub + tol):
                continue
            if G.shape[0] and np.any(G @ y > qp.b_ineq + tol * (1.0 + np.abs(qp.b_ineq))):
                continue
            # stationarity: H y + q + C^T mult = 0 with multipliers of active rows
            eq_dual = mult[:me]
            act = mult[me:]
            zl = np.zeros(n)
            zu = np.zeros(n)
            lam = np.zeros(G.shape[0])
            ok = True
            for j, val in zip(subset, act):
                kind, i = cands[j]
                # lower bound rows enter as +e_i with multiplier -zl
                if kind == "lb":
                    zl[i] = -val
                    ok &= zl[i] >= -tol * scale
                elif kind == "ub":
                    zu[i] = val
                    ok &= zu[i] >= -tol * scale
                else:
                    lam[i] = val
                    ok &= lam[i] >= -tol * scale
            if not ok:
                continue
            obj = qp.objective(y)
            if best is None or obj < best.objective - 1e-14:
                best = EnumerationResult(y, eq_dual, np.maximum(lam, 0.0), np.maximum(zl, 0.0),
                                         np.maximum(zu, 0.0), obj, tuple(subset), checked)
    if best is None:
        raise ValueError("no KKT point found; the QP is infeasible")
    return EnumerationResult(best.y, best.eq_dual, best.ineq_dual, best.lower_dual, best.upper_dual,
                             best.objective, best.active, checked)


@dataclass(frozen=True)
class ReducedLowerQP:
    """Lower-level QP restricted to links on origin-destination paths."""

    qp: QuadraticProgram
    x_index: np.ndarray
    v_index: np.ndarray
    cap_rows: np.ndarray
    n_links: int
    n_od: int

    def expand(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        L, S = self.n_links, self.n_od
        x = np.zeros(L * S)
        x[self.x_index] = y[: self.x_index.size]
        v = np.zeros(self.v_index.max(initial=-1) + 1 if self.v_index.size else 0)
        v[self.v_index] = y[self.x_index.size:]
        return x.reshape(S, L).T, v


def _acyclic(edges: list[tuple[int, int]]) -> bool:
    adj: dict[int, list[int]] = {}
    for a, b in edges:
        adj.setdefault(a, []).append(b)
    state: dict[int, int] = {}

    def visit(u) -> bool:
        state[u] = 1
        for w in adj.get(u, ()):
            if state.get(w) == 1 or (w not in state and not visit(w)):
                return False
        state[u] = 2
        return True

    return all(visit(u) for u in list(adj) if u not in state)


def reduced_lower_qp(net: Network, prices=None) -> ReducedLowerQP:
    """Drop off-path flows, empty rows and implied ``x <= 1`` bounds.

    On an acyclic support, unit demand bounds every link flow by one, so
    the upper bounds are redundant and omitted. Capacitated nodes with no
    counted support link are dropped (their fraction is zero).
    """
    full = assemble_lower_qp(net, prices)
    qp = full.qp
    L, S = net.n_links, net.n_od
    rel = relevant_pairs(net)
    x_index = np.array([s * L + l for s in range(S) for l in range(L) if rel[l, s]], dtype=int)
    G = qp.A_ineq.tocsr()
    nx = L * S
    nv = G.shape[0]
    keep_rows = np.array([r for r in range(nv) if np.any(np.isin(G[r].indices, x_index))], dtype=int)
    v_index = keep_rows.copy()
    cols = np.concatenate([x_index, nx + v_index])
    A = qp.A_eq.tocsr()[:, cols]
    nonzero = np.diff(A.indptr) > 0
    A = A[nonzero]
    b = qp.b_eq[nonzero]
    Gr = G[keep_rows][:, cols]
    ub = qp.ub[cols].copy()
    tails = [net.node_index[l.tail] for l in net.links]
    heads = [net.node_index[l.head] for l in net.links]
    for s in range(S):
        links = np.flatnonzero(rel[:, s])
        if _acyclic([(tails[l], heads[l]) for l in links]):
            ub[: x_index.size][np.isin(x_index, s * L + links)] = np.inf
    red = QuadraticProgram(qp.hess[cols], qp.lin[cols], A.tocsr(), b, Gr.tocsr(), qp.b_ineq[keep_rows],
                           qp.lb[cols], ub)
    return ReducedLowerQP(red, x_index, v_index, keep_rows, L, S)
