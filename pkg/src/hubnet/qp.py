"""Primal-dual interior point solver for convex QPs with a diagonal Hessian.

The problem form is::

    minimize    0.5 * y' diag(h) y + c' y + const
    subject to  A y  = b
                G y <= g
                lb <= y <= ub          (finite bounds)

The solver runs Mehrotra predictor-corrector steps on the normal equations
and finishes with an active-set polish that recovers the exact optimum of
the identified face. Duals follow the Lagrangian

    L = f(y) + mu'(A y - b) + lam'(G y - g) - zl'(y - lb) + zu'(y - ub)

so ``lam, zl, zu >= 0`` and ``mu`` is free.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

_DENSE_ROWS = 400
_DENSE_COLS = 4000


class QPError(RuntimeError):
    """Raised when the interior point method fails to converge."""


@dataclass(frozen=True)
class QuadraticProgram:
    """Data of a diagonal-Hessian QP with finite variable bounds."""

    hess: np.ndarray
    lin: np.ndarray
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    A_ineq: sp.csr_matrix
    b_ineq: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    const: float = 0.0

    @property
    def n(self) -> int:
        return self.lin.size

    def objective(self, y: np.ndarray) -> float:
        return float(0.5 * np.dot(self.hess * y, y) + np.dot(self.lin, y) + self.const)


@dataclass(frozen=True)
class Tolerances:
    """Relative stopping tolerances and iteration limit."""

    primal: float = 1e-8
    dual: float = 1e-8
    gap: float = 1e-8
    max_iter: int = 200
    polish: bool = True


@dataclass(frozen=True)
class ActiveSet:
    """Bound and row activity pattern with reference duals, used to warm start."""

    at_lower: np.ndarray
    at_upper: np.ndarray
    rows: np.ndarray
    mu: np.ndarray | None = None
    lam: np.ndarray | None = None


@dataclass(frozen=True)
class QPResult:
    y: np.ndarray
    eq_dual: np.ndarray
    ineq_dual: np.ndarray
    lower_dual: np.ndarray
    upper_dual: np.ndarray
    objective: float
    status: str
    iterations: int
    polished: bool
    active: ActiveSet = field(repr=False)


class _Ops:
    """Constraint matrices in dense or sparse storage with the few products needed."""

    def __init__(self, qp: QuadraticProgram):
        me, mi = qp.A_eq.shape[0], qp.A_ineq.shape[0]
        self.me, self.mi = me, mi
        self.dense = (me + mi) <= _DENSE_ROWS and qp.n <= _DENSE_COLS
        if self.dense:
            self.A = qp.A_eq.toarray() if sp.issparse(qp.A_eq) else np.asarray(qp.A_eq, dtype=float)
            self.G = qp.A_ineq.toarray() if sp.issparse(qp.A_ineq) else np.asarray(qp.A_ineq, dtype=float)
            self.A = self.A.reshape(me, qp.n)
            self.G = self.G.reshape(mi, qp.n)
            self.AG = np.vstack([self.A, self.G])
            self.AGt = self.AG.T
        else:
            self.A = sp.csr_matrix(qp.A_eq)
            self.G = sp.csr_matrix(qp.A_ineq)
            self.AG = sp.vstack([self.A, self.G], format="csr")
            self.AGt = self.AG.T.tocsr()

    def normal(self, Dinv: np.ndarray, W: np.ndarray):
        me = self.me
        if self.dense:
            M = (self.AG * Dinv) @ self.AG.T
            m = M.shape[0]
            if m == 0:
                return lambda r: np.zeros(0)
            M[np.arange(me, m), np.arange(me, m)] += W
            M[np.diag_indices(m)] += 1e-14 * max(1.0, float(np.abs(np.diag(M)).max()))
            try:
                cf = sla.cho_factor(M, check_finite=False)
                return lambda r: sla.cho_solve(cf, r, check_finite=False)
            except np.linalg.LinAlgError:
                lu = sla.lu_factor(M, check_finite=False)
                return lambda r: sla.lu_solve(lu, r, check_finite=False)
        M = (self.AG @ sp.diags(Dinv) @ self.AGt).tocsc()
        extra = np.concatenate([np.zeros(me), W])
        extra += 1e-14 * max(1.0, float(np.abs(M.diagonal()).max(initial=0.0)))
        M = (M + sp.diags(extra, format="csc")).tocsc()
        lu = spla.splu(M, permc_spec="MMD_AT_PLUS_A", options={"SymmetricMode": True})
        return lu.solve


def _max_step(w: np.ndarray, dw: np.ndarray) -> float:
    neg = dw < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-w[neg] / dw[neg])))


def _interior_point(qp: QuadraticProgram, ops: _Ops, tol: Tolerances):
    # infeasible problems drive slacks to zero before detection; the status reports it
    with np.errstate(divide="ignore", invalid="ignore"):
        return _ip_loop(qp, ops, tol)


def _ip_loop(qp: QuadraticProgram, ops: _Ops, tol: Tolerances):
    A, G, AG, AGt = ops.A, ops.G, ops.AG, ops.AGt
    me, mi = ops.me, ops.mi
    h, c, lb, ub = qp.hess, qp.lin, qp.lb, qp.ub

    hl, hu = np.isfinite(lb), np.isfinite(ub)
    y = np.where(hl & hu, 0.5 * (lb + ub), np.where(hl, lb + 1.0, np.where(hu, ub - 1.0, 0.0)))
    s = np.maximum(qp.b_ineq - G @ y, 1.0)
    mu = np.zeros(me)
    lam = np.ones(mi)
    # infinite bounds carry a zero multiplier and a unit dummy slack
    zl = hl.astype(float)
    zu = hu.astype(float)
    nb = int(hl.sum() + hu.sum())

    scale_p = 1.0 + max(np.abs(qp.b_eq).max(initial=0.0), np.abs(qp.b_ineq).max(initial=0.0))
    scale_d = 1.0 + np.abs(c).max(initial=0.0)

    for it in range(1, tol.max_iter + 1):
        wl = np.where(hl, y - lb, 1.0)
        wu = np.where(hu, ub - y, 1.0)
        r_d = h * y + c + AGt @ np.concatenate([mu, lam]) - zl + zu
        r_pe = A @ y - qp.b_eq
        r_pi = G @ y + s - qp.b_ineq
        comp = float(s @ lam + wl @ zl + wu @ zu)
        avg = comp / max(mi + nb, 1)
        res_p = max(np.abs(r_pe).max(initial=0.0), np.abs(r_pi).max(initial=0.0)) / scale_p
        res_d = np.abs(r_d).max(initial=0.0) / scale_d
        if res_p <= tol.primal and res_d <= tol.dual and comp <= tol.gap * (1.0 + abs(qp.objective(y))):
            return y, mu, lam, zl, zu, s, it, "optimal"

        Dinv = 1.0 / (h + zl / wl + zu / wu)
        solve = ops.normal(Dinv, s / lam)

        def direction(r_s, r_l, r_u):
            r1 = -r_d + r_l / wl - r_u / wu
            r3 = -r_pi - r_s / lam
            duals = solve(AG @ (Dinv * r1) + np.concatenate([r_pe, -r3]))
            dy = Dinv * (r1 - AGt @ duals)
            ds = -r_pi - G @ dy
            return dy, duals[:me], duals[me:], ds, (r_l - zl * dy) / wl, (r_u + zu * dy) / wu

        dy, _, dlam, ds, dzl, dzu = direction(-s * lam, -wl * zl, -wu * zu)
        a = min(_max_step(s, ds), _max_step(wl[hl], dy[hl]), _max_step(wu[hu], -dy[hu]),
                _max_step(lam, dlam), _max_step(zl[hl], dzl[hl]), _max_step(zu[hu], dzu[hu]))
        comp_aff = float(
            (s + a * ds) @ (lam + a * dlam)
            + (wl + a * dy) @ (zl + a * dzl)
            + (wu - a * dy) @ (zu + a * dzu)
        )
        target = (comp_aff / comp) ** 3 * avg if comp > 0 else 0.0
        dy, dmu, dlam, ds, dzl, dzu = direction(
            -s * lam - ds * dlam + target,
            -wl * zl - dy * dzl + target * hl,
            -wu * zu + dy * dzu + target * hu,
        )
        a = min(_max_step(s, ds), _max_step(wl[hl], dy[hl]), _max_step(wu[hu], -dy[hu]),
                _max_step(lam, dlam), _max_step(zl[hl], dzl[hl]), _max_step(zu[hu], dzu[hu]))
        a = min(1.0, 0.995 * a)
        y = y + a * dy
        s = s + a * ds
        mu = mu + a * dmu
        lam = lam + a * dlam
        zl = zl + a * dzl
        zu = zu + a * dzu
    return y, mu, lam, zl, zu, s, tol.max_iter, "max_iter"


def _identify(qp: QuadraticProgram, y, mu, lam, zl, zu, s, ratio: float = 1.0) -> ActiveSet:
    """Active set from the interior iterate; ``ratio > 1`` keeps only clear cases."""
    wl = y - qp.lb
    wu = qp.ub - y
    lower = zl > ratio * wl
    upper = (zu > ratio * wu) & ~lower
    return ActiveSet(lower, upper, lam > ratio * s, mu, lam)


def _nonempty_rows(M, cols: np.ndarray, dense: bool) -> np.ndarray:
    if dense:
        if M.shape[0] == 0:
            return np.zeros(0, dtype=int)
        return np.flatnonzero(np.any(M[:, cols] != 0, axis=1))
    sub = M[:, cols].tocsr()
    return np.flatnonzero(np.diff(sub.indptr) > 0)


def polish(qp: QuadraticProgram, active: ActiveSet, tol: float = 1e-9, dual_tol: float = 1e-7,
           ops: _Ops | None = None):
    """Solve the equality-constrained QP defined by ``active``.

    Rows without free variables keep the reference duals stored in
    ``active``. Returns ``None`` when the resulting point violates primal
    bounds or inactive rows beyond ``tol``, or dual signs beyond
    ``dual_tol`` (relative).
    """
    ops = ops or _Ops(qp)
    A, G, dense = ops.A, ops.G, ops.dense
    me, mi = ops.me, ops.mi
    free = ~(active.at_lower | active.at_upper)
    fidx = np.flatnonzero(free)
    yB = np.where(active.at_lower, qp.lb, np.where(active.at_upper, qp.ub, 0.0))
    rows = np.flatnonzero(active.rows)
    Ga = G[rows]
    keep_eq = _nonempty_rows(A, fidx, dense)
    keep_in = _nonempty_rows(Ga, fidx, dense)
    nf, ne, ni = fidx.size, keep_eq.size, keep_in.size
    m = ne + ni
    ref_mu = np.zeros(me) if active.mu is None else np.asarray(active.mu, dtype=float)
    ref_lam = np.zeros(mi) if active.lam is None else np.asarray(active.lam, dtype=float)
    rhs = np.concatenate([
        -qp.lin[fidx],
        qp.b_eq[keep_eq] - A[keep_eq] @ yB,
        qp.b_ineq[rows[keep_in]] - Ga[keep_in] @ yB,
    ])
    hf = qp.hess[fidx]
    reg = 1e-11 * max(1.0, float(np.abs(hf).max(initial=0.0)))
    sol = np.concatenate([np.zeros(nf), ref_mu[keep_eq], ref_lam[rows[keep_in]]])
    try:
        if dense:
            C = np.vstack([A[np.ix_(keep_eq, fidx)], Ga[np.ix_(keep_in, fidx)]])
            K = np.block([[np.diag(hf), C.T], [C, np.zeros((m, m))]])
            Kr = K.copy()
            Kr[np.arange(nf), np.arange(nf)] += reg
            Kr[np.arange(nf, nf + m), np.arange(nf, nf + m)] -= reg
            lu = sla.lu_factor(Kr, check_finite=False)
            solve = lambda r: sla.lu_solve(lu, r, check_finite=False)
        else:
            C = sp.vstack([A[keep_eq][:, fidx], Ga[keep_in][:, fidx]], format="csc")
            K = sp.bmat([[sp.diags(hf), C.T], [C, None]], format="csc")
            Kr = sp.bmat([[sp.diags(hf + reg), C.T], [C, sp.diags(-reg * np.ones(m))]], format="csc")
            solve = spla.splu(Kr).solve
        r = rhs - K @ sol
        bound = 1e-13 * (1.0 + np.abs(rhs).max(initial=0.0))
        for _ in range(10):
            sol = sol + solve(r)
            r = rhs - K @ sol
            if np.abs(r).max(initial=0.0) <= bound:
                break
    except (RuntimeError, ValueError, np.linalg.LinAlgError):
        return None
    if not np.all(np.isfinite(sol)):
        return None

    y = yB.copy()
    y[fidx] = sol[:nf]
    mu = ref_mu.copy()
    mu[keep_eq] = sol[nf:nf + ne]
    lam = np.zeros(mi)
    lam[rows] = np.maximum(ref_lam[rows], 0.0)
    lam[rows[keep_in]] = sol[nf + ne:]

    width = qp.ub - qp.lb
    ytol = tol * (1.0 + np.where(np.isfinite(width), np.abs(width), 0.0))
    if np.any(y[fidx] < qp.lb[fidx] - ytol[fidx]) or np.any(y[fidx] > qp.ub[fidx] + ytol[fidx]):
        return None
    y = np.minimum(np.maximum(y, qp.lb), qp.ub)
    red = qp.hess * y + qp.lin + A.T @ mu + G.T @ lam
    dscale = dual_tol * (1.0 + np.abs(qp.lin).max(initial=0.0))
    if np.any(red[active.at_lower] < -dscale) or np.any(red[active.at_upper] > dscale):
        return None
    if np.any(lam < -dscale):
        return None
    gmax = float(np.abs(G).max()) if (G.size if dense else G.nnz) else 0.0
    pscale = tol * (1.0 + np.abs(qp.b_ineq).max(initial=0.0) + gmax)
    if np.any(qp.b_ineq - G @ y < -pscale):
        return None
    lam = np.maximum(lam, 0.0)
    zl = np.where(active.at_lower, np.maximum(red, 0.0), 0.0)
    zu = np.where(active.at_upper, np.maximum(-red, 0.0), 0.0)
    return y, mu, lam, zl, zu


def solve_qp(qp: QuadraticProgram, tol: Tolerances | None = None, warm: ActiveSet | None = None) -> QPResult:
    """Solve ``qp``; ``warm`` is an active set tried before the interior point run."""
    tol = tol or Tolerances()
    ops = _Ops(qp)

    def done(out, status, iters, active):
        y, mu, lam, zl, zu = out
        act = ActiveSet(active.at_lower, active.at_upper, active.rows, mu, lam)
        return QPResult(y, mu, lam, zl, zu, qp.objective(y), status, iters, True, act)

    if warm is not None:
        out = polish(qp, warm, ops=ops)
        if out is not None:
            return done(out, "optimal", 0, warm)
    y, mu, lam, zl, zu, s, iters, status = _interior_point(qp, ops, tol)
    if status != "optimal":
        raise QPError(f"interior point method stopped after {iters} iterations")
    active = _identify(qp, y, mu, lam, zl, zu, s)
    if tol.polish:
        for attempt in range(3):
            if attempt == 2:
                tight = Tolerances(tol.primal * 1e-3, tol.dual * 1e-3, tol.gap * 1e-4, tol.max_iter, False)
                more = _interior_point(qp, ops, tight)
                if more[-1] != "optimal":
                    break
                y, mu, lam, zl, zu, s = more[:6]
                iters += more[6]
            cand = _identify(qp, y, mu, lam, zl, zu, s, 1e3 if attempt == 1 else 1.0)
            out = polish(qp, cand, ops=ops)
            if out is not None:
                return done(out, status, iters, cand)
    y = np.minimum(np.maximum(y, qp.lb), qp.ub)
    return QPResult(y, mu, lam, zl, zu, qp.objective(y), status, iters, False, active)
