"""SQP solver for the transcribed subproblems.

Quadratic models use a Powell-damped BFGS approximation of the Lagrangian
Hessian kept in factored form (scaled identity plus symmetric rank-one
terms).  Each iteration condenses the linearized problem onto the control
and horizon-length variables (the defect recursion eliminates the state
steps exactly), solves the reduced inequality-constrained QP with a dual
active-set method, recovers all multipliers, and globalizes with a
backtracking line search on the l1 merit function.  When the QP is
infeasible an elastic pass with penalized slacks restores progress; if
slacks refuse to vanish the problem is declared infeasible, which signals
"keep the previous solution" upstream.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger("trailerplan.sqp")

from ..vehicle import STATE_DIM
from .qp import solve_qp, solve_qp_elastic
from .transcribe import Nlp, RhpSubproblem, transcribe

NX = STATE_DIM


@dataclass
class SqpOptions:
    tol_kkt: float = 1e-6
    tol_eq: float = 1e-7        # shooting-defect feasibility per node
    tol_ineq: float = 1e-8
    max_iter: int = 100
    ls_max: int = 30
    armijo: float = 1e-4
    bfgs_mem: int = 30          # rank-one terms kept: 2 per update
    elastic_strikes: int = 5    # stagnant restoration iterations allowed
    elastic_penalty: float = 1e4
    qp_tol: float = 1e-10


@dataclass
class NlpSolution:
    states: np.ndarray
    controls: np.ndarray
    T_star: float
    objective: float
    status: str                  # optimal | max_iter | infeasible
    kkt_residual: float
    iterations: int
    n_qp: int = 0
    max_defect: float = 0.0
    diagnostics: dict = field(default_factory=dict)


class FactoredBfgs:
    """H = D0 + sum(coef_j v_j v_j'), Powell-damped updates.

    D0 is a fixed positive diagonal base (here: the exact separable part of
    the objective Hessian), so the very first QP steps are already scaled
    like Newton steps on the smooth cost.
    """

    def __init__(self, n, mem=30, base_diag=None):
        self.n = n
        self.mem = mem
        self.d0 = np.ones(n) if base_diag is None else np.asarray(base_diag, dtype=float)
        self.coefs: list[float] = []
        self.vecs: list[np.ndarray] = []

    def reset(self):
        self.coefs, self.vecs = [], []

    def mult(self, V):
        out = self.d0[:, None] * V
        for cf, v in zip(self.coefs, self.vecs):
            out = out + cf * np.outer(v, v @ V)
        return out

    def dot(self, v):
        out = self.d0 * v
        for cf, w in zip(self.coefs, self.vecs):
            out = out + cf * w * (w @ v)
        return out

    def update(self, s, y):
        sy = float(s @ y)
        Hs = self.dot(s)
        sHs = float(s @ Hs)
        if sHs <= 1e-16:
            return
        # Powell damping keeps the update positive definite
        if sy < 0.2 * sHs:
            theta = 0.8 * sHs / (sHs - sy)
            y = theta * y + (1.0 - theta) * Hs
            sy = float(s @ y)
        if sy <= 1e-14 * sHs:
            return
        if len(self.coefs) >= 2 * self.mem:
            self.reset()
            Hs = self.dot(s)
            sHs = float(s @ Hs)
        self.coefs.append(-1.0 / sHs)
        self.vecs.append(Hs.copy())
        self.coefs.append(1.0 / sy)
        self.vecs.append(y.copy())


def _objective_diag(nlp: Nlp, T):
    """Exact separable objective curvature plus a small ridge."""
    p = nlp.p
    N = nlp.N
    s = T / N
    d = np.full(nlp.n_var, 1e-3)
    qdiag = 2.0 * np.diag(p.weights.Q)
    rdiag = 2.0 * np.diag(p.weights.R)
    wts = np.full(N + 1, s)
    wts[0] = wts[-1] = 0.5 * s
    d[: NX * (N + 1)] += (wts[:, None] * qdiag[None, :]).ravel()
    d[NX * (N + 1): -1] += np.tile(s * rdiag, N)
    d[-1] += 1e-2
    return d


def _build_W(nlp: Nlp, S):
    N, nq = nlp.N, nlp.nq
    W = np.zeros((nlp.n_var, nq))
    W[: NX * (N + 1)] = S.reshape(NX * (N + 1), nq)
    base = NX * (N + 1)
    for j in range(2 * N):
        W[base + j, j] = 1.0
    W[-1, -1] = 1.0
    return W


def _feasibility(cache):
    eq = float(np.max(np.abs(cache.c_eq)))
    ineq = float(max(0.0, -np.min(cache.g_in))) if len(cache.g_in) else 0.0
    return eq, ineq


def _merit(cache, mu_pen):
    eq_l1 = float(np.sum(np.abs(cache.c_eq)))
    in_l1 = float(np.sum(np.maximum(0.0, -cache.g_in))) if len(cache.g_in) else 0.0
    return cache.obj + mu_pen * (eq_l1 + in_l1), eq_l1 + in_l1


def solve(nlp: Nlp, X0, U0, T0, opts: SqpOptions = None) -> NlpSolution:
    """Run SQP from the given initial guess."""
    opts = opts or SqpOptions()
    p = nlp.p
    T0 = float(np.clip(T0, p.T_min, p.T_max))
    X0 = np.asarray(X0, dtype=float)
    U0 = np.asarray(U0, dtype=float)
    if X0.shape != (nlp.N + 1, NX) or U0.shape != (nlp.N, 2):
        raise ValueError("initial guess dimensions do not match the transcription")
    z = nlp.pack(X0, U0, T0)
    cache = nlp.evaluate(z, with_jac=True)
    H = FactoredBfgs(nlp.n_var, mem=opts.bfgs_mem, base_diag=_objective_diag(nlp, T0))
    mu_pen = 10.0
    best = None  # (obj, z, cache, kkt)
    strikes = 0
    n_qp = 0
    iters = 0
    kkt = np.inf
    status = "max_iter"
    stall = 0
    prev_obj = None

    for _ in range(opts.max_iter):
        S, xpart = nlp.condense(cache)
        W = _build_W(nlp, S)
        A_red = nlp.reduced_rows(cache, S)
        gw = nlp.reduced_rows_w(cache, xpart)
        b_red = -(cache.g_in + gw)
        E = S[-1]
        e_rhs = -(cache.c_eq[-NX:] + xpart[-1])
        w_full = np.zeros(nlp.n_var)
        w_full[: NX * (nlp.N + 1)] = xpart.ravel()
        Hw = H.dot(w_full)
        G_red = W.T @ H.mult(W)
        G_red = 0.5 * (G_red + G_red.T)
        a_red = -(W.T @ (Hw + cache.grad))
        A_all = np.vstack([E, A_red])
        b_all = np.concatenate([e_rhs, b_red])

        res = solve_qp(G_red, a_red, A_all, b_all, meq=NX, tol=opts.qp_tol)
        n_qp += 1
        elastic_used = False
        if res.status != "optimal":
            viol = [NX + j for j in np.nonzero(b_red > opts.qp_tol)[0]]
            if len(viol) > 600:
                order = np.argsort(-b_red[np.array(viol) - NX])
                viol = [viol[j] for j in order[:600]]
            rows = list(range(NX)) + viol
            res, slack = solve_qp_elastic(
                G_red, a_red, A_all, b_all, meq=NX, elastic_rows=rows,
                penalty=opts.elastic_penalty, tol=opts.qp_tol,
            )
            n_qp += 1
            elastic_used = True
            if res.status != "optimal":
                status = "infeasible"
                break

        q = res.x
        pstep = W @ q + w_full
        lam_in = np.maximum(res.lam[NX:], 0.0)
        mu_term = res.lam[:NX]
        nu = nlp.recover_eq_multipliers(cache, mu_term, lam_in)

        # KKT residual at the current point with the recovered multipliers
        r_stat = cache.grad - nlp.eq_jacT_dot(cache, nu) - nlp.ineq_jacT_dot(cache, lam_in)
        eq_v, in_v = _feasibility(cache)
        comp = float(np.max(lam_in * np.abs(cache.g_in), initial=0.0))
        kkt = max(float(np.max(np.abs(r_stat))), eq_v, in_v, comp)
        feasible_now = eq_v <= opts.tol_eq and in_v <= opts.tol_ineq
        if feasible_now and (best is None or cache.obj < best[0] - 1e-14):
            best = (cache.obj, z.copy(), cache, kkt)
        if kkt <= opts.tol_kkt and feasible_now and not elastic_used:
            status = "optimal"
            break

        step_norm = float(np.max(np.abs(pstep)))
        if step_norm <= 1e-12 * (1.0 + float(np.max(np.abs(z)))):
            status = "optimal" if (feasible_now and kkt <= 100 * opts.tol_kkt) else "max_iter"
            break

        # l1 merit line search.  The penalty weight follows the QP-model
        # decrease rule, not the multipliers: terminal constraints on weakly
        # controllable directions (lateral trailer motion over short
        # windows) carry transient multipliers of 1e6..1e10 that would
        # otherwise strangle the step length.  The decrease is measured
        # against the violation remaining after the *linearized* step, which
        # elastic steps leave nonzero.
        gTp = float(cache.grad @ pstep)
        pHp = float(pstep @ H.dot(pstep))
        _, viol0 = _merit(cache, 1.0)
        lin = A_all @ q
        lin_viol = float(np.sum(np.abs(lin[:NX] - b_all[:NX])))
        lin_viol += float(np.sum(np.maximum(0.0, b_all[NX:] - lin[NX:])))
        drop = viol0 - lin_viol
        if viol0 > 1e-12:
            if drop <= 1e-10 * (1.0 + viol0):
                # the QP direction cannot reduce infeasibility any further
                strikes += 1
                if strikes >= opts.elastic_strikes:
                    status = "infeasible"
                    break
                H.reset()
                stall += 1
                if stall >= 8:
                    status = "infeasible" if elastic_used else "max_iter"
                    break
                continue
            mu_need = (gTp + max(0.0, 0.5 * pHp)) / (0.5 * drop)
            mu_pen = float(np.clip(1.1 * mu_need, 10.0, 1e8))
        else:
            mu_pen = max(10.0, 0.5 * mu_pen)
        phi0, _ = _merit(cache, mu_pen)
        D = gTp - mu_pen * drop
        if D > -1e-16:
            if viol0 <= opts.tol_eq and float(cache.grad @ pstep) >= -1e-12:
                status = "optimal" if kkt <= 100 * opts.tol_kkt else "max_iter"
                break
            H.reset()
        alpha = 1.0
        accepted = False
        trial_cache = None
        for _ls in range(opts.ls_max):
            trial = z + alpha * pstep
            trial_cache = nlp.evaluate(trial, with_jac=False)
            phi, _ = _merit(trial_cache, mu_pen)
            if phi <= phi0 + opts.armijo * alpha * min(D, 0.0) + 1e-14 * abs(phi0):
                accepted = True
                break
            alpha *= 0.5
        if log.isEnabledFor(logging.DEBUG):
            log.debug(
                "sqp it=%d obj=%.9g kkt=%.3e eq=%.2e in=%.2e |p|=%.2e alpha=%s "
                "mu=%.3g D=%.3e elastic=%s", iters, cache.obj, kkt, eq_v, in_v,
                step_norm, f"{alpha:.3g}" if accepted else "FAIL", mu_pen, D, elastic_used,
            )
        if not accepted:
            if elastic_used:
                # restoration direction rejected by the merit: no way forward
                status = "infeasible"
                break
            if H.coefs:
                # poor quadratic model: discard curvature pairs and retry once
                H.reset()
                stall += 1
                if stall < 8:
                    continue
            status = "max_iter"
            break

        z_new = z + alpha * pstep
        new_cache = nlp.evaluate(z_new, with_jac=True)
        mult_scale = float(np.max(np.abs(np.concatenate([nu, lam_in])), initial=0.0))
        step_scale = alpha * step_norm
        if not elastic_used and mult_scale <= 1e5 and step_scale > 1e-10 * (1.0 + float(np.max(np.abs(z)))):
            # skip curvature updates on restoration steps, with blown-up
            # multipliers (weak-direction transients) or microscopic steps
            glag_old = cache.grad - nlp.eq_jacT_dot(cache, nu) - nlp.ineq_jacT_dot(cache, lam_in)
            glag_new = new_cache.grad - nlp.eq_jacT_dot(new_cache, nu) - nlp.ineq_jacT_dot(new_cache, lam_in)
            H.update(alpha * pstep, glag_new - glag_old)
        z, cache = z_new, new_cache
        iters += 1
        if prev_obj is not None and abs(cache.obj - prev_obj) <= 1e-12 * (1 + abs(cache.obj)):
            stall += 1
            if stall >= 5:
                eq_v, in_v = _feasibility(cache)
                status = "optimal" if (eq_v <= opts.tol_eq and in_v <= opts.tol_ineq
                                       and kkt <= 100 * opts.tol_kkt) else "max_iter"
                break
        else:
            stall = 0
        prev_obj = cache.obj

    # prefer the best feasible iterate seen (warm-start dominance)
    eq_v, in_v = _feasibility(cache)
    feasible_now = eq_v <= opts.tol_eq and in_v <= opts.tol_ineq
    if best is not None and (not feasible_now or best[0] < cache.obj - 1e-14):
        _, z, cache, kkt = best
        if status != "infeasible":
            status = "optimal" if kkt <= 100 * opts.tol_kkt else status
        eq_v, in_v = _feasibility(cache)
        feasible_now = True
    if status == "optimal" and not feasible_now:
        status = "max_iter"

    X, U, T = nlp.unpack(z)
    defect = float(np.max(np.abs(cache.c_eq[NX: NX * (nlp.N + 1)]), initial=0.0))
    return NlpSolution(
        states=X.copy(), controls=U.copy(), T_star=float(T),
        objective=float(cache.obj), status=status, kkt_residual=float(kkt),
        iterations=iters, n_qp=n_qp, max_defect=defect,
        diagnostics={"eq_violation": eq_v, "ineq_violation": in_v},
    )


def solve_subproblem(p: RhpSubproblem, X0, U0, T0, opts: SqpOptions = None) -> NlpSolution:
    return solve(transcribe(p), X0, U0, T0, opts)
