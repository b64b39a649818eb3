"""Direct multiple-shooting transcription with a free horizon length.

Decision vector z = [x_0 .. x_N, u_0 .. u_{N-1}, T]: 9(N+1) + 2N + 1
entries.  The shooting map Phi integrates each interval of length s = T/N
with a fixed, even number of RK4 sub-steps (so T-sensitivities are smooth
and the interval midpoint is available).  Equality constraints pin x_0 to
the current state, tie consecutive nodes through integration defects and
pin x_N to the terminal state.  Inequalities: constraint-envelope boxes on
interior nodes and interval midpoints, control boxes per interval, bounds
on T, and per-node obstacle-clearance and workspace rows (squared-distance
form, optional safety margin).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import vehicle
from ..geometry import Scenario
from ..vehicle import CONTROL_BOX, CONTROL_DIM, STATE_BOX, STATE_DIM, VehicleGeometry

NX, NU = STATE_DIM, CONTROL_DIM
# state-box rows apply to these components (indices into the state)
BOX_IDX = np.array([i for i, _, _ in STATE_BOX])
BOX_BOUND = np.array([b for _, _, b in STATE_BOX])
CTRL_BOUND = np.array([b for _, _, b in CONTROL_BOX])


@dataclass(frozen=True)
class RhpSubproblem:
    """One sliding-window refinement problem (terminal state fixed)."""

    x_cur: np.ndarray
    x_term: np.ndarray
    N: int
    T_init: float
    scenario: Scenario | None
    weights: vehicle.CostWeights
    geom: VehicleGeometry
    T_min: float = None
    T_max: float = None
    margin: float = 0.05
    # state boxes are shrunk by this much for every component except v1:
    # joint angles are not directly actuated, so between constraint points
    # they can arc slightly past a ridden bound.  v1 is exempt because
    # lattice endpoint states sit exactly on the velocity bound and
    # bound-riding velocity arcs are singular (zero input, no overshoot).
    env_margin: float = 0.002

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("need at least two shooting intervals")
        if self.T_init <= 0.0:
            raise ValueError("T_init must be positive")
        if self.T_min is None:
            object.__setattr__(self, "T_min", 0.25 * self.T_init)
        if self.T_max is None:
            object.__setattr__(self, "T_max", 2.0 * self.T_init)
        if not (0.0 < self.T_min <= self.T_init <= self.T_max):
            raise ValueError("need 0 < T_min <= T_init <= T_max")


class EvalCache:
    """All quantities evaluated at one decision vector."""

    def __init__(self):
        self.z = None
        self.X = None        # (N+1, 9)
        self.U = None        # (N, 2)
        self.T = None
        self.phi = None      # (N, 9)
        self.Jx = self.Ju = self.Js = None
        self.mid = None      # (N, 9) interval midpoints
        self.clear_diff = None
        self.Mx = self.Mu = self.Ms = None
        self.obj = None
        self.grad = None     # (n,)
        self.c_eq = None     # (9(N+2),) stacked [initial, defects, terminal]
        self.g_in = None     # stacked inequality values (>= 0 feasible)
        self.with_jac = False


class Nlp:
    """Transcribed problem: evaluation, derivatives and condensing."""

    def __init__(self, p: RhpSubproblem):
        self.p = p
        N = p.N
        self.N = N
        self.n_var = NX * (N + 1) + NU * N + 1
        self.n_eq = NX * (N + 2)
        env_scale = np.array([1.0 if name != "v1" else 0.0 for _, name, _ in STATE_BOX])
        self.box_bound = BOX_BOUND - p.env_margin * env_scale
        self.nq = NU * N + 1  # reduced dimension: controls + T
        # fixed sub-step count: keeps h <= h_max over the whole T range
        h_max = vehicle.DEFAULT_H_MAX
        self.n_sub = max(2, 2 * int(np.ceil(p.T_max / (2.0 * N * h_max) - 1e-12)))
        self._build_row_plan()

    # -- layout -------------------------------------------------------------

    def pack(self, X, U, T):
        return np.concatenate([np.asarray(X).ravel(), np.asarray(U).ravel(), [T]])

    def unpack(self, z):
        N = self.N
        X = z[: NX * (N + 1)].reshape(N + 1, NX)
        U = z[NX * (N + 1): NX * (N + 1) + NU * N].reshape(N, NU)
        return X, U, z[-1]

    def _u_slice(self, i):
        base = NX * (self.N + 1)
        return slice(base + NU * i, base + NU * (i + 1))

    # -- inequality row inventory --------------------------------------------

    def _build_row_plan(self):
        """Row counts per family; values are stacked in this fixed order:
        [node boxes, midpoint boxes, control boxes, T bounds,
         clearance rows, workspace rows]."""
        p, N = self.p, self.N
        self.n_box_nodes = N - 1          # interior nodes 1..N-1
        self.m_node_box = 2 * len(BOX_IDX) * self.n_box_nodes
        self.m_mid_box = 2 * len(BOX_IDX) * N
        self.m_ctrl = 2 * NU * N
        self.m_T = 2
        self.n_obst = 0 if p.scenario is None else len(p.scenario.obstacles)
        self.n_circ = p.geom.n_circles
        self.m_clear = self.n_obst * self.n_circ * self.n_box_nodes
        self.has_bounds = p.scenario is not None and p.scenario.bounds is not None
        self.m_ws = 4 * self.n_circ * self.n_box_nodes if self.has_bounds else 0
        self.m_in = (self.m_node_box + self.m_mid_box + self.m_ctrl + self.m_T
                     + self.m_clear + self.m_ws)

    # -- evaluation -----------------------------------------------------------

    def evaluate(self, z, with_jac=True):
        """Evaluate objective, constraints and (optionally) derivatives."""
        p = self.p
        c = EvalCache()
        c.z = np.asarray(z, dtype=float)
        X, U, T = self.unpack(c.z)
        c.X, c.U, c.T = X, U, T
        s = T / self.N
        c.with_jac = with_jac

        if with_jac:
            (phi, Jx, Ju, Js), (mid, Mx, Mu, Ms) = vehicle.flow_with_jacobians(
                X[:-1], U, s, self.n_sub, p.geom, want_mid=True
            )
            c.phi, c.Jx, c.Ju, c.Js = phi, Jx, Ju, Js
            c.mid, c.Mx, c.Mu, c.Ms = mid, Mx, Mu, Ms
        else:
            half = self.n_sub // 2
            h = s / self.n_sub
            x = X[:-1]
            for j in range(self.n_sub):
                if j == half:
                    c.mid = x
                x = vehicle.rk4_step(x, U, h, p.geom)
            c.phi = x

        # objective: trapezoid with piecewise-constant control
        ell_l = vehicle.stage_cost(X[:-1], U, p.weights)
        ell_r = vehicle.stage_cost(X[1:], U, p.weights)
        c.obj = float(0.5 * s * np.sum(ell_l + ell_r))
        if with_jac:
            g = np.zeros(self.n_var)
            gx, _ = vehicle.stage_cost_grad(X, U, p.weights)
            _, gu = vehicle.stage_cost_grad(X[:-1], U, p.weights)
            w = np.full(self.N + 1, s)
            w[0] = w[-1] = 0.5 * s
            g[: NX * (self.N + 1)] = (gx * w[:, None]).ravel()
            g[NX * (self.N + 1): -1] = (s * gu).ravel()
            g[-1] = c.obj / T
            c.grad = g

        # equalities
        c.c_eq = np.concatenate([
            X[0] - p.x_cur,
            (X[1:] - c.phi).ravel(),
            X[-1] - p.x_term,
        ])

        c.g_in = self._ineq_values(c)
        return c

    def _circle_data(self, states):
        centers, radii = vehicle.body_circles(states, self.p.geom)
        return centers, radii

    def _ineq_values(self, c):
        p, N = self.p, self.N
        Xi = c.X[1:N]  # interior nodes
        parts = []
        # node boxes: bound - x >= 0 and x + bound >= 0
        xb = Xi[:, BOX_IDX]
        bb = self.box_bound
        parts.append(np.stack([bb - xb, xb + bb], axis=-1).ravel())
        # midpoint boxes
        mb = c.mid[:, BOX_IDX]
        parts.append(np.stack([bb - mb, mb + bb], axis=-1).ravel())
        # control boxes
        ub = c.U
        parts.append(np.stack([CTRL_BOUND - ub, ub + CTRL_BOUND], axis=-1).ravel())
        # T bounds
        parts.append(np.array([c.T - p.T_min, p.T_max - c.T]))
        # clearance
        if self.m_clear or self.m_ws:
            centers, radii = self._circle_data(Xi)
        if self.m_clear:
            obs = p.scenario.obstacles
            d = centers[:, :, None, :] - obs[None, None, :, :2]
            d2 = np.sum(d * d, axis=-1)
            R = radii[None, :, None] + obs[None, None, :, 2] + p.margin
            parts.append((d2 - R * R).ravel())
            c.clear_diff = d  # reused by the jacobian rows
        if self.m_ws:
            xmin, xmax, ymin, ymax = p.scenario.bounds
            r = radii[None, :] + p.margin
            cx, cy = centers[..., 0], centers[..., 1]
            ws = np.stack(
                [cx - r - xmin, xmax - cx - r, cy - r - ymin, ymax - cy - r], axis=-1
            )
            parts.append(ws.ravel())
        return np.concatenate(parts) if parts else np.zeros(0)

    # -- condensing -----------------------------------------------------------

    def condense(self, c: EvalCache):
        """Null-space parameterization of the equality constraints.

        Returns (S, xpart) with p_x[i] = xpart[i] + S[i] @ q for the reduced
        step q = [p_u; p_T]; S has shape (N+1, 9, nq).
        """
        N, nq = self.N, self.nq
        r0 = c.c_eq[:NX]
        rdef = c.c_eq[NX: NX * (N + 1)].reshape(N, NX)
        cT = c.Js / self.N  # d phi / d T
        S = np.zeros((N + 1, NX, nq))
        xpart = np.zeros((N + 1, NX))
        xpart[0] = -r0
        for i in range(N):
            S[i + 1] = c.Jx[i] @ S[i]
            S[i + 1][:, NU * i: NU * (i + 1)] += c.Ju[i]
            S[i + 1][:, -1] += cT[i]
            xpart[i + 1] = c.Jx[i] @ xpart[i] - rdef[i]
        return S, xpart

    def reduced_rows(self, c: EvalCache, S):
        """Inequality rows mapped to reduced space: (A_red, with values c.g_in).

        Row order matches _ineq_values.  Also returns the T-derivative
        contribution structure needed nowhere else.
        """
        p, N, nq = self.p, self.N, self.nq
        rows = np.zeros((self.m_in, nq))
        k = 0
        nb = len(BOX_IDX)
        # node boxes: d/dz (bound - x_i[c]) = -e -> row = -S_i[c]; then +S_i[c]
        for i in range(1, N):
            Sc = S[i][BOX_IDX]  # (6, nq)
            rows[k: k + 2 * nb: 2] = -Sc
            rows[k + 1: k + 2 * nb: 2] = Sc
            k += 2 * nb
        # midpoint boxes: mid_i depends on (x_i, u_i, T)
        MT = c.Ms / self.N  # d mid / d T (Ms is already d mid / d s_total)
        for i in range(N):
            base = c.Mx[i][BOX_IDX] @ S[i]  # (6, nq)
            base[:, NU * i: NU * (i + 1)] += c.Mu[i][BOX_IDX]
            base[:, -1] += MT[i][BOX_IDX]
            rows[k: k + 2 * nb: 2] = -base
            rows[k + 1: k + 2 * nb: 2] = base
            k += 2 * nb
        # control boxes: identity into the u-block
        for i in range(N):
            for j in range(NU):
                rows[k, NU * i + j] = -1.0
                rows[k + 1, NU * i + j] = 1.0
                k += 2
        # T bounds
        rows[k, -1] = 1.0
        rows[k + 1, -1] = -1.0
        k += 2
        # clearance rows: g = |c_b - c_o|^2 - R^2, grad wrt pose5 = 2*diff @ Jcirc
        if self.m_clear or self.m_ws:
            Xi = c.X[1:N]
            Jc = vehicle.body_circles_jacobian(Xi, p.geom)  # (N-1, ncirc, 2, 5)
        if self.m_clear:
            d = c.clear_diff  # (N-1, ncirc, nobst, 2)
            # grad5[i, b, o, :] = 2 * d . Jc
            grad5 = 2.0 * np.einsum("ibox,ibxp->ibop", d, Jc)
            for i in range(1, N):
                g5 = grad5[i - 1].reshape(-1, 5)  # (ncirc*nobst, 5)
                rows[k: k + len(g5)] = g5 @ S[i][:5]
                k += len(g5)
        if self.m_ws:
            for i in range(1, N):
                Jci = Jc[i - 1]  # (ncirc, 2, 5)
                for b in range(self.n_circ):
                    gx_ = Jci[b, 0] @ S[i][:5]
                    gy_ = Jci[b, 1] @ S[i][:5]
                    rows[k] = gx_
                    rows[k + 1] = -gx_
                    rows[k + 2] = gy_
                    rows[k + 3] = -gy_
                    k += 4
        assert k == self.m_in
        return rows

    def reduced_rows_w(self, c: EvalCache, xpart):
        """Inhomogeneous part grad(g)' w of each inequality row, where
        w = [xpart; 0; 0] is the particular solution of the linearized
        equalities.  Same row order as _ineq_values/reduced_rows."""
        p, N = self.p, self.N
        out = np.zeros(self.m_in)
        k = 0
        nb = len(BOX_IDX)
        for i in range(1, N):
            xc = xpart[i][BOX_IDX]
            out[k: k + 2 * nb: 2] = -xc
            out[k + 1: k + 2 * nb: 2] = xc
            k += 2 * nb
        for i in range(N):
            base = (c.Mx[i] @ xpart[i])[BOX_IDX]
            out[k: k + 2 * nb: 2] = -base
            out[k + 1: k + 2 * nb: 2] = base
            k += 2 * nb
        k += self.m_ctrl + self.m_T  # zero for control and T rows
        if self.m_clear or self.m_ws:
            Xi = c.X[1:N]
            Jc = vehicle.body_circles_jacobian(Xi, p.geom)
        if self.m_clear:
            grad5 = 2.0 * np.einsum("ibox,ibxp->ibop", c.clear_diff, Jc)
            for i in range(1, N):
                g5 = grad5[i - 1].reshape(-1, 5)
                out[k: k + len(g5)] = g5 @ xpart[i][:5]
                k += len(g5)
        if self.m_ws:
            for i in range(1, N):
                for b in range(self.n_circ):
                    gx_ = Jc[i - 1][b, 0] @ xpart[i][:5]
                    gy_ = Jc[i - 1][b, 1] @ xpart[i][:5]
                    out[k], out[k + 1], out[k + 2], out[k + 3] = gx_, -gx_, gy_, -gy_
                    k += 4
        assert k == self.m_in
        return out

    # -- Jacobian-transpose products (for multipliers and BFGS) ---------------

    def ineq_jacT_dot(self, c: EvalCache, lam):
        """Sum_j lam_j grad(g_j) as a full-space vector (n_var,)."""
        p, N = self.p, self.N
        out = np.zeros(self.n_var)
        xg = np.zeros((N + 1, NX))
        k = 0
        nb = len(BOX_IDX)
        m = self.m_node_box
        lb = lam[k: k + m].reshape(N - 1, nb, 2)
        xg[1:N][:, BOX_IDX] += lb[:, :, 1] - lb[:, :, 0]
        k += m
        m = self.m_mid_box
        lm = lam[k: k + m].reshape(N, nb, 2)
        y = np.zeros((N, NX))
        y[:, BOX_IDX] = lm[:, :, 1] - lm[:, :, 0]
        xg[:N] += np.einsum("iab,ia->ib", c.Mx, y)
        ug = np.einsum("iab,ia->ib", c.Mu, y)
        Tg = float(np.sum(c.Ms / N * y))
        k += m
        m = self.m_ctrl
        lc = lam[k: k + m].reshape(N, NU, 2)
        ug += lc[:, :, 1] - lc[:, :, 0]
        k += m
        Tg += lam[k] - lam[k + 1]
        k += 2
        if self.m_clear:
            Xi = c.X[1:N]
            Jc = vehicle.body_circles_jacobian(Xi, p.geom)
            grad5 = 2.0 * np.einsum("ibox,ibxp->ibop", c.clear_diff, Jc)
            lcl = lam[k: k + self.m_clear].reshape(N - 1, self.n_circ, self.n_obst)
            xg[1:N, :5] += np.einsum("ibo,ibop->ip", lcl, grad5)
            k += self.m_clear
        if self.m_ws:
            Xi = c.X[1:N]
            Jc = vehicle.body_circles_jacobian(Xi, p.geom)
            lw = lam[k: k + self.m_ws].reshape(N - 1, self.n_circ, 4)
            coef_x = lw[:, :, 0] - lw[:, :, 1]
            coef_y = lw[:, :, 2] - lw[:, :, 3]
            xg[1:N, :5] += np.einsum("ib,ibp->ip", coef_x, Jc[:, :, 0, :])
            xg[1:N, :5] += np.einsum("ib,ibp->ip", coef_y, Jc[:, :, 1, :])
            k += self.m_ws
        out[: NX * (N + 1)] = xg.ravel()
        out[NX * (N + 1): -1] = ug.ravel()
        out[-1] = Tg
        return out

    def eq_jacT_dot(self, c: EvalCache, nu):
        """Jeq' nu as a full-space vector; nu ordered [init, defects, term]."""
        N = self.N
        nu0 = nu[:NX]
        nud = nu[NX: NX * (N + 1)].reshape(N, NX)
        mu = nu[NX * (N + 1):]
        out = np.zeros(self.n_var)
        xg = np.zeros((N + 1, NX))
        xg[0] = nu0 - c.Jx[0].T @ nud[0]
        for i in range(1, N):
            xg[i] = nud[i - 1] - c.Jx[i].T @ nud[i]
        xg[N] = nud[N - 1] + mu
        ug = -np.einsum("iab,ia->ib", c.Ju, nud)
        out[: NX * (N + 1)] = xg.ravel()
        out[NX * (N + 1): -1] = ug.ravel()
        out[-1] = -float(np.sum(c.Js / N * nud))
        return out

    def recover_eq_multipliers(self, c: EvalCache, mu, lam):
        """Defect/initial multipliers from stationarity in the x rows."""
        N = self.N
        glag = c.grad - self.ineq_jacT_dot(c, lam)
        gx = glag[: NX * (N + 1)].reshape(N + 1, NX)
        nud = np.zeros((N, NX))
        nud[N - 1] = gx[N] - mu
        for i in range(N - 1, 0, -1):
            nud[i - 1] = gx[i] + c.Jx[i].T @ nud[i]
        nu0 = gx[0] + c.Jx[0].T @ nud[0]
        return np.concatenate([nu0, nud.ravel(), mu])

    # -- dense jacobians (for derivative checks and multiplier recovery) ------

    def eq_jacobian(self, c: EvalCache):
        """Dense equality Jacobian (9(N+2), n_var)."""
        N = self.N
        J = np.zeros((self.n_eq, self.n_var))
        J[:NX, :NX] = np.eye(NX)
        cT = c.Js / N
        for i in range(N):
            r = slice(NX * (i + 1), NX * (i + 2))
            J[r, NX * (i + 1): NX * (i + 2)] = np.eye(NX)
            J[r, NX * i: NX * (i + 1)] = -c.Jx[i]
            J[r, self._u_slice(i)] = -c.Ju[i]
            J[r, -1] = -cT[i]
        J[NX * (N + 1):, NX * N: NX * (N + 1)] = np.eye(NX)
        return J

    def ineq_jacobian(self, c: EvalCache):
        """Dense inequality Jacobian (m_in, n_var); same row order."""
        p, N = self.p, self.N
        J = np.zeros((self.m_in, self.n_var))
        k = 0
        nb = len(BOX_IDX)
        for i in range(1, N):
            for j, comp in enumerate(BOX_IDX):
                J[k, NX * i + comp] = -1.0
                J[k + 1, NX * i + comp] = 1.0
                k += 2
        MT = c.Ms / N
        for i in range(N):
            for j, comp in enumerate(BOX_IDX):
                row = np.zeros(self.n_var)
                row[NX * i: NX * (i + 1)] = c.Mx[i][comp]
                row[self._u_slice(i)] = c.Mu[i][comp]
                row[-1] = MT[i][comp]
                J[k] = -row
                J[k + 1] = row
                k += 2
        for i in range(N):
            for j in range(NU):
                col = NX * (N + 1) + NU * i + j
                J[k, col] = -1.0
                J[k + 1, col] = 1.0
                k += 2
        J[k, -1] = 1.0
        J[k + 1, -1] = -1.0
        k += 2
        if self.m_clear or self.m_ws:
            Xi = c.X[1:N]
            Jc = vehicle.body_circles_jacobian(Xi, p.geom)
        if self.m_clear:
            d = c.clear_diff
            grad5 = 2.0 * np.einsum("ibox,ibxp->ibop", d, Jc)
            for i in range(1, N):
                g5 = grad5[i - 1].reshape(-1, 5)
                J[k: k + len(g5), NX * i: NX * i + 5] = g5
                k += len(g5)
        if self.m_ws:
            for i in range(1, N):
                for b in range(self.n_circ):
                    J[k, NX * i: NX * i + 5] = Jc[i - 1][b, 0]
                    J[k + 1, NX * i: NX * i + 5] = -Jc[i - 1][b, 0]
                    J[k + 2, NX * i: NX * i + 5] = Jc[i - 1][b, 1]
                    J[k + 3, NX * i: NX * i + 5] = -Jc[i - 1][b, 1]
                    k += 4
        return J


def transcribe(p: RhpSubproblem) -> Nlp:
    """Build the NLP for a subproblem (validates dimensions)."""
    return Nlp(p)


def check_derivatives(nlp: Nlp, z, h=1e-6):
    """Worst relative error of analytic derivatives vs central differences."""
    z = np.asarray(z, dtype=float)
    c = nlp.evaluate(z, with_jac=True)
    Jeq = nlp.eq_jacobian(c)
    Jin = nlp.ineq_jacobian(c)
    grad = c.grad
    worst = 0.0
    for j in range(nlp.n_var):
        step = h * max(1.0, abs(z[j]))
        e = np.zeros(nlp.n_var)
        e[j] = step
        cp = nlp.evaluate(z + e, with_jac=False)
        cm = nlp.evaluate(z - e, with_jac=False)
        fd_obj = (cp.obj - cm.obj) / (2 * step)
        fd_eq = (cp.c_eq - cm.c_eq) / (2 * step)
        fd_in = (cp.g_in - cm.g_in) / (2 * step)
        worst = max(worst, abs(fd_obj - grad[j]) / max(1.0, abs(grad[j])))
        worst = max(worst, np.max(np.abs(fd_eq - Jeq[:, j]) / np.maximum(1.0, np.abs(Jeq[:, j]))))
        if nlp.m_in:
            worst = max(worst, np.max(np.abs(fd_in - Jin[:, j]) / np.maximum(1.0, np.abs(Jin[:, j]))))
    return float(worst)
