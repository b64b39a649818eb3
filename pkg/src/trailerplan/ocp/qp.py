"""Dense strictly-convex QP solver (Goldfarb-Idnani dual active set).

Solves   min_x  0.5 x'Gx - a'x   s.t.  A x >= b,
with the first meq rows of A treated as equalities.  G must be positive
definite (an escalating jitter is applied if the factorization fails).
The dual active-set method starts from the unconstrained minimum and adds
violated constraints one at a time; it needs no feasible starting point and
is deterministic (most violated row enters, lowest index on ties).
Constraint rows are normalized internally; multipliers are reported for the
original scaling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import qr_delete, qr_insert, solve_triangular


@dataclass
class QpResult:
    x: np.ndarray
    lam: np.ndarray          # multipliers per row (eq rows: free sign)
    status: str              # optimal | infeasible | max_iter
    iterations: int
    active: list


def _chol_with_jitter(G):
    scale = max(float(np.trace(G)) / len(G), 1e-12)
    jitter = 0.0
    for _ in range(14):
        try:
            return np.linalg.cholesky(G if jitter == 0.0 else G + jitter * np.eye(len(G)))
        except np.linalg.LinAlgError:
            jitter = 1e-12 * scale if jitter == 0.0 else jitter * 100.0
    raise np.linalg.LinAlgError("QP Hessian not factorizable")


def solve_qp(G, a, A=None, b=None, meq=0, tol=1e-9, max_iter=None) -> QpResult:
    n = len(a)
    G = np.asarray(G, dtype=float)
    a = np.asarray(a, dtype=float)
    if A is None or len(A) == 0:
        A = np.zeros((0, n))
        b = np.zeros(0)
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    m = len(A)
    norms = np.maximum(np.linalg.norm(A, axis=1), 1e-14) if m else np.zeros(0)
    An = A / norms[:, None] if m else A
    bn = b / norms if m else b
    if max_iter is None:
        max_iter = 100 + 10 * m

    L = _chol_with_jitter(G)
    x = solve_triangular(L.T, solve_triangular(L, a, lower=True, check_finite=False),
                         lower=False, check_finite=False)

    active: list[int] = []
    sign = np.ones(m)
    u = np.zeros(0)
    # QR of the active normals in the L^{-1} metric, updated incrementally;
    # Q is kept full (n x n) so scipy's insert/delete routines apply
    Q = np.eye(n)
    R = np.zeros((n, 0))

    def add_one(p, npv, bval):
        """Bring constraint p (signed unit normal npv) into the active set."""
        nonlocal x, u, Q, R
        u_p = 0.0
        v = solve_triangular(L, npv, lower=True, check_finite=False)
        for _ in range(m + n + 2):
            q = len(active)
            if q:
                d1 = (Q.T @ v)[:q]
                rvec = solve_triangular(R[:q, :q], d1, lower=False, check_finite=False)
                w = v - Q[:, :q] @ d1
            else:
                rvec = np.zeros(0)
                w = v
            z = solve_triangular(L.T, w, lower=False, check_finite=False)
            s_p = npv @ x - bval
            zTn = float(z @ npv)
            t1, kblock = np.inf, -1
            for j, idx in enumerate(active):
                if idx >= meq and rvec[j] > tol:
                    tj = u[j] / rvec[j]
                    if tj < t1 - 1e-14:
                        t1, kblock = tj, j
            # scale-free dependency test: zTn = |proj(v)|^2 vs |v|^2
            t2 = np.inf if zTn <= tol * max(float(v @ v), 1e-300) else -s_p / zTn
            if not np.isfinite(t1) and not np.isfinite(t2):
                return "infeasible"
            t = min(t1, t2)
            if q:
                u = u - t * rvec
            u_p += t
            if t2 <= t1:
                x = x + t * z
                active.append(p)
                u = np.append(u, u_p)
                Q, R = qr_insert(Q, R, v, q, which="col", check_finite=False)
                return "added"
            if np.isfinite(t2):
                x = x + t * z
            active.pop(kblock)
            u = np.delete(u, kblock)
            if len(active) == 0:
                Q = np.eye(n)
                R = np.zeros((n, 0))
            else:
                Q, R = qr_delete(Q, R, kblock, which="col", check_finite=False)
        return "cycling"

    def result(status, iters):
        lam = np.zeros(m)
        for j, idx in enumerate(active):
            lam[idx] = sign[idx] * u[j] / norms[idx]
        return QpResult(x, lam, status, iters, list(active))

    iters = 0
    for j in range(meq):
        s_j = An[j] @ x - bn[j]
        sg = -1.0 if s_j > 0.0 else 1.0
        sign[j] = sg
        out = add_one(j, sg * An[j], sg * bn[j])
        iters += 1
        if out in ("infeasible", "cycling"):
            return result("infeasible", iters)

    while iters < max_iter:
        if m == 0:
            return result("optimal", iters)
        s = An @ x - bn
        s[:meq] = np.inf
        if active:
            s[np.array(active)] = np.inf
        p_best = int(np.argmin(s))
        if s[p_best] >= -tol:
            return result("optimal", iters)
        out = add_one(p_best, An[p_best], bn[p_best])
        iters += 1
        if out == "infeasible":
            return result("infeasible", iters)
        if out == "cycling":
            return result("max_iter", iters)

    return result("max_iter", iters)


def solve_qp_elastic(G, a, A, b, meq=0, elastic_rows=None, penalty=1e4,
                     slack_reg=1.0, tol=1e-9):
    """Relaxation with L1+L2 penalized slacks on selected rows.

    elastic_rows: indices of rows to relax (default: all).  Equality rows in
    the set get a signed slack pair.  Returns (QpResult in the original
    variables, max slack used).
    """
    n = len(a)
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    m = len(A)
    if elastic_rows is None:
        elastic_rows = list(range(m))
    elastic_rows = list(elastic_rows)
    n_pos = len(elastic_rows)
    eq_rows = [r for r in elastic_rows if r < meq]
    n_sl = n_pos + len(eq_rows)

    Gt = np.zeros((n + n_sl, n + n_sl))
    Gt[:n, :n] = G
    Gt[n:, n:] = slack_reg * np.eye(n_sl)
    at = np.concatenate([a, -penalty * np.ones(n_sl)])
    At = np.zeros((m + n_sl, n + n_sl))
    bt = np.concatenate([b, np.zeros(n_sl)])
    At[:m, :n] = A
    for k, r in enumerate(elastic_rows):
        At[r, n + k] = 1.0
    for k, r in enumerate(eq_rows):
        At[r, n + n_pos + k] = -1.0
    At[m:, n:] = np.eye(n_sl)
    res = solve_qp(Gt, at, At, bt, meq=meq, tol=tol)
    slack = np.abs(res.x[n:])
    out = QpResult(res.x[:n], res.lam[:m], res.status, res.iterations, res.active)
    return out, float(np.max(slack, initial=0.0))
