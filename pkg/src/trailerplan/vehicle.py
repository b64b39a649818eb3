"""Kinematics, constraints, stage cost and integration for the general 2-trailer.

The vehicle is a car-like truck towing a dolly and a semitrailer.  State
vector (9 components, SI units):

    [x3, y3, th3, b3, b2, al, om, v1, a1]

x3/y3/th3: semitrailer axle pose, b3: trailer-dolly joint angle,
b2: dolly-truck joint angle, al: steering angle, om: steering rate,
v1: truck longitudinal velocity, a1: truck longitudinal acceleration.
Control is [u_om, u_a] (steering-rate derivative and jerk).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

STATE_DIM = 9
CONTROL_DIM = 2

# state component indices
X3, Y3, TH3, B3, B2, AL, OM, V1, A1 = range(9)

STATE_NAMES = ("x3", "y3", "th3", "b3", "b2", "al", "om", "v1", "a1")
CONTROL_NAMES = ("u_om", "u_a")

# box constraint envelope (th3 and position are unbounded)
BETA3_MAX = 0.87
BETA2_MAX = 0.87
ALPHA_MAX = 0.73
OMEGA_MAX = 0.8
V1_MAX = 1.0
A1_MAX = 1.0
U_OMEGA_MAX = 10.0
U_A_MAX = 40.0

# (index, name, bound) for the six bounded state components
STATE_BOX = (
    (B3, "b3", BETA3_MAX),
    (B2, "b2", BETA2_MAX),
    (AL, "al", ALPHA_MAX),
    (OM, "om", OMEGA_MAX),
    (V1, "v1", V1_MAX),
    (A1, "a1", A1_MAX),
)
CONTROL_BOX = ((0, "u_om", U_OMEGA_MAX), (1, "u_a", U_A_MAX))

DEFAULT_H_MAX = 0.05  # integrator sub-step cap [s]


@dataclass(frozen=True)
class VehicleGeometry:
    """Link lengths and bounding-circle layout.

    Lengths in meters: L1 truck wheelbase, M1 rear axle to hitch offset,
    L2 hitch to dolly axle, L3 dolly axle to trailer axle.  Each bounding
    circle is (segment, longitudinal offset from the segment axle, radius),
    segment one of "truck" / "dolly" / "trailer".
    """

    L1: float = 4.62
    M1: float = 1.66
    L2: float = 3.87
    L3: float = 8.0
    body_circle_specs: tuple = (
        ("trailer", 1.5, 2.0),
        ("trailer", 6.0, 2.0),
        ("dolly", 1.9, 1.2),
        ("truck", 2.3, 2.0),
    )

    def __post_init__(self):
        if min(self.L1, self.L2, self.L3) <= 0.0:
            raise ValueError("link lengths must be positive")
        for seg, off, r in self.body_circle_specs:
            if seg not in ("truck", "dolly", "trailer"):
                raise ValueError(f"unknown segment {seg!r}")
            if r <= 0.0:
                raise ValueError("circle radii must be positive")

    @property
    def n_circles(self):
        return len(self.body_circle_specs)

    def fingerprint_dict(self):
        return {
            "L1": self.L1,
            "M1": self.M1,
            "L2": self.L2,
            "L3": self.L3,
            "circles": [list(c) for c in self.body_circle_specs],
        }


@dataclass(frozen=True)
class CostWeights:
    """Stage-cost weights: ell(x, u) = time_weight + x'Qx + u'Ru.

    The defaults realize 1 + (al^2 + 10 om^2 + a1^2 + u'u)/2.
    """

    time_weight: float = 1.0
    w_alpha: float = 1.0
    w_omega: float = 10.0
    w_a1: float = 1.0
    w_u: float = 1.0
    Q: np.ndarray = field(default=None, repr=False)
    R: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.time_weight <= 0.0:
            raise ValueError("time_weight must be positive (cost floor)")
        if self.Q is None:
            q = np.zeros(STATE_DIM)
            q[AL], q[OM], q[A1] = self.w_alpha, self.w_omega, self.w_a1
            object.__setattr__(self, "Q", np.diag(0.5 * q))
        if self.R is None:
            object.__setattr__(self, "R", np.diag([0.5 * self.w_u] * CONTROL_DIM))
        if np.any(np.diag(self.Q) < 0) or np.any(np.diag(self.R) < 0):
            raise ValueError("quadratic weights must be non-negative")

    def fingerprint_dict(self):
        return {
            "time_weight": self.time_weight,
            "Q": np.asarray(self.Q).tolist(),
            "R": np.asarray(self.R).tolist(),
        }


def config_fingerprint(geom: VehicleGeometry, weights: CostWeights) -> str:
    """Stable hash of geometry+weights; stored in library/HLUT files."""
    blob = json.dumps(
        {"geometry": geom.fingerprint_dict(), "weights": weights.fingerprint_dict()},
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------

def dynamics(x, u, geom: VehicleGeometry):
    """Time derivative of the state; broadcasts over leading axes of x, u."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    th3, b3, b2 = x[..., TH3], x[..., B3], x[..., B2]
    al, om, v1, a1 = x[..., AL], x[..., OM], x[..., V1], x[..., A1]

    m = geom.M1 / geom.L1
    ta = np.tan(al)
    kappa = m * ta
    cb2, sb2 = np.cos(b2), np.sin(b2)
    cb3, sb3 = np.cos(b3), np.sin(b3)

    th1dot = v1 * ta / geom.L1
    v2 = v1 * (cb2 + kappa * sb2)
    th2dot = v1 * (sb2 - kappa * cb2) / geom.L2
    v3 = v2 * cb3
    th3dot = v2 * sb3 / geom.L3

    f = np.empty(np.broadcast(x[..., 0], u[..., 0]).shape + (STATE_DIM,))
    f[..., X3] = v3 * np.cos(th3)
    f[..., Y3] = v3 * np.sin(th3)
    f[..., TH3] = th3dot
    f[..., B3] = th2dot - th3dot
    f[..., B2] = th1dot - th2dot
    f[..., AL] = om
    f[..., OM] = u[..., 0]
    f[..., V1] = a1
    f[..., A1] = u[..., 1]
    return f


def dynamics_jacobians(x, u, geom: VehicleGeometry):
    """Analytic Jacobians (df/dx, df/du); broadcasts over leading axes."""
    x = np.asarray(x, dtype=float)
    th3, b3, b2 = x[..., TH3], x[..., B3], x[..., B2]
    al, v1 = x[..., AL], x[..., V1]

    L1, L2, L3 = geom.L1, geom.L2, geom.L3
    m = geom.M1 / L1
    ta = np.tan(al)
    sec2 = 1.0 + ta * ta
    kappa = m * ta
    dkappa = m * sec2
    cb2, sb2 = np.cos(b2), np.sin(b2)
    cb3, sb3 = np.cos(b3), np.sin(b3)
    c3, s3 = np.cos(th3), np.sin(th3)

    C = cb2 + kappa * sb2
    D = sb2 - kappa * cb2
    v2 = v1 * C
    v3 = v2 * cb3

    dv2_db2 = v1 * (-sb2 + kappa * cb2)
    dv2_dal = v1 * sb2 * dkappa
    dv2_dv1 = C

    dth2_db2 = v1 * C / L2
    dth2_dal = -v1 * cb2 * dkappa / L2
    dth2_dv1 = D / L2

    dth1_dal = v1 * sec2 / L1
    dth1_dv1 = ta / L1

    dv3_db3 = -v2 * sb3
    dth3_db3 = v2 * cb3 / L3

    shape = x.shape[:-1]
    A = np.zeros(shape + (STATE_DIM, STATE_DIM))
    B = np.zeros(shape + (STATE_DIM, CONTROL_DIM))

    A[..., X3, TH3] = -v3 * s3
    A[..., X3, B3] = c3 * dv3_db3
    A[..., X3, B2] = c3 * cb3 * dv2_db2
    A[..., X3, AL] = c3 * cb3 * dv2_dal
    A[..., X3, V1] = c3 * cb3 * dv2_dv1

    A[..., Y3, TH3] = v3 * c3
    A[..., Y3, B3] = s3 * dv3_db3
    A[..., Y3, B2] = s3 * cb3 * dv2_db2
    A[..., Y3, AL] = s3 * cb3 * dv2_dal
    A[..., Y3, V1] = s3 * cb3 * dv2_dv1

    dth3_db2 = sb3 * dv2_db2 / L3
    dth3_dal = sb3 * dv2_dal / L3
    dth3_dv1 = sb3 * dv2_dv1 / L3
    A[..., TH3, B3] = dth3_db3
    A[..., TH3, B2] = dth3_db2
    A[..., TH3, AL] = dth3_dal
    A[..., TH3, V1] = dth3_dv1

    A[..., B3, B3] = -dth3_db3
    A[..., B3, B2] = dth2_db2 - dth3_db2
    A[..., B3, AL] = dth2_dal - dth3_dal
    A[..., B3, V1] = dth2_dv1 - dth3_dv1

    A[..., B2, B2] = -dth2_db2
    A[..., B2, AL] = dth1_dal - dth2_dal
    A[..., B2, V1] = dth1_dv1 - dth2_dv1

    A[..., AL, OM] = 1.0
    A[..., V1, A1] = 1.0
    B[..., OM, 0] = 1.0
    B[..., A1, 1] = 1.0
    return A, B


# ---------------------------------------------------------------------------
# stage cost
# ---------------------------------------------------------------------------

def stage_cost(x, u, w: CostWeights):
    """ell(x, u); broadcasts over leading axes."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    qx = np.einsum("...i,ij,...j->...", x, w.Q, x)
    ru = np.einsum("...i,ij,...j->...", u, w.R, u)
    return w.time_weight + qx + ru


def stage_cost_grad(x, u, w: CostWeights):
    """(d ell/dx, d ell/du); broadcasts over leading axes."""
    gx = 2.0 * np.asarray(x, dtype=float) @ w.Q
    gu = 2.0 * np.asarray(u, dtype=float) @ w.R
    return gx, gu


# ---------------------------------------------------------------------------
# integration
# ---------------------------------------------------------------------------

def rk4_step(x, u, h, geom: VehicleGeometry):
    """One classical RK4 step of length h with u held constant."""
    k1 = dynamics(x, u, geom)
    k2 = dynamics(x + 0.5 * h * k1, u, geom)
    k3 = dynamics(x + 0.5 * h * k2, u, geom)
    k4 = dynamics(x + h * k3, u, geom)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(x, u, dt, geom: VehicleGeometry, h_max=DEFAULT_H_MAX):
    """Integrate the flow over dt (control constant), sub-steps <= h_max."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    n = max(1, int(np.ceil(dt / h_max - 1e-12)))
    h = dt / n
    x = np.asarray(x, dtype=float)
    for _ in range(n):
        x = rk4_step(x, u, h, geom)
    return x


def _rk4_step_jac(x, u, h, geom):
    """RK4 step plus its Jacobians wrt x, u and the step length h.

    Batched: x is (B, 9), u is (B, 2), h scalar.  Returns
    (x_next, Jx (B,9,9), Ju (B,9,2), Jh (B,9)).
    """
    I = np.eye(STATE_DIM)

    k1 = dynamics(x, u, geom)
    A1, B1 = dynamics_jacobians(x, u, geom)

    x2 = x + 0.5 * h * k1
    k2 = dynamics(x2, u, geom)
    A2, B2 = dynamics_jacobians(x2, u, geom)

    x3 = x + 0.5 * h * k2
    k3 = dynamics(x3, u, geom)
    A3, B3 = dynamics_jacobians(x3, u, geom)

    x4 = x + h * k3
    k4 = dynamics(x4, u, geom)
    A4, B4 = dynamics_jacobians(x4, u, geom)

    # dki/dx
    K1x = A1
    K2x = A2 @ (I + 0.5 * h * K1x)
    K3x = A3 @ (I + 0.5 * h * K2x)
    K4x = A4 @ (I + h * K3x)
    # dki/du
    K1u = B1
    K2u = 0.5 * h * (A2 @ K1u) + B2
    K3u = 0.5 * h * (A3 @ K2u) + B3
    K4u = h * (A4 @ K3u) + B4
    # dki/dh
    K1h = np.zeros_like(k1)
    K2h = np.einsum("...ij,...j->...i", A2, 0.5 * (k1 + h * K1h))
    K3h = np.einsum("...ij,...j->...i", A3, 0.5 * (k2 + h * K2h))
    K4h = np.einsum("...ij,...j->...i", A4, k3 + h * K3h)

    ksum = k1 + 2.0 * k2 + 2.0 * k3 + k4
    x_next = x + (h / 6.0) * ksum
    Jx = I + (h / 6.0) * (K1x + 2.0 * K2x + 2.0 * K3x + K4x)
    Ju = (h / 6.0) * (K1u + 2.0 * K2u + 2.0 * K3u + K4u)
    Jh = ksum / 6.0 + (h / 6.0) * (K1h + 2.0 * K2h + 2.0 * K3h + K4h)
    return x_next, Jx, Ju, Jh


def flow_with_jacobians(x, u, s, n_sub, geom: VehicleGeometry, want_mid=False):
    """Flow over duration s using n_sub RK4 sub-steps, with sensitivities.

    Batched over the leading axis.  Returns (phi, Jx, Ju, Js) where Js is
    d phi / d s (total duration).  With want_mid=True additionally returns
    (mid, Mx, Mu, Ms): the state and sensitivities at s/2 (requires n_sub
    even).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    u = np.atleast_2d(np.asarray(u, dtype=float))
    nb = x.shape[0]
    if want_mid and n_sub % 2 != 0:
        raise ValueError("midpoint extraction requires even n_sub")
    h = s / n_sub

    phi = x
    Jx = np.broadcast_to(np.eye(STATE_DIM), (nb, STATE_DIM, STATE_DIM)).copy()
    Ju = np.zeros((nb, STATE_DIM, CONTROL_DIM))
    Js = np.zeros((nb, STATE_DIM))
    mid = None
    for j in range(n_sub):
        if want_mid and j == n_sub // 2:
            mid = (phi.copy(), Jx.copy(), Ju.copy(), Js.copy())
        phi, Sx, Su, Sh = _rk4_step_jac(phi, u, h, geom)
        Jx = Sx @ Jx
        Ju = Sx @ Ju + Su
        Js = np.einsum("...ij,...j->...i", Sx, Js) + Sh / n_sub
    if want_mid:
        return (phi, Jx, Ju, Js), mid
    return phi, Jx, Ju, Js


def flow(x, u, s, n_sub, geom: VehicleGeometry):
    """Flow over duration s using n_sub RK4 sub-steps (batched, no Jacobians)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    u = np.atleast_2d(np.asarray(u, dtype=float))
    h = s / n_sub
    for _ in range(n_sub):
        x = rk4_step(x, u, h, geom)
    return x


# ---------------------------------------------------------------------------
# constraint envelope
# ---------------------------------------------------------------------------

def check_envelope(x, u=None, tol=1e-6):
    """List of box-constraint violations as (name, value, bound).

    Boundary values are admitted; a violation needs |value| > bound + tol.
    """
    x = np.asarray(x, dtype=float)
    out = []
    for idx, name, bound in STATE_BOX:
        v = float(x[idx])
        if abs(v) > bound + tol:
            out.append((name, v, bound))
    if u is not None:
        u = np.asarray(u, dtype=float)
        for idx, name, bound in CONTROL_BOX:
            v = float(u[idx])
            if abs(v) > bound + tol:
                out.append((name, v, bound))
    return out


def envelope_violation(states, controls=None, tol=0.0):
    """Max envelope overshoot over batched states/controls (0 if none)."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    worst = 0.0
    for idx, _, bound in STATE_BOX:
        worst = max(worst, float(np.max(np.abs(states[:, idx]) - bound, initial=0.0)))
    if controls is not None:
        controls = np.atleast_2d(np.asarray(controls, dtype=float))
        for idx, _, bound in CONTROL_BOX:
            worst = max(worst, float(np.max(np.abs(controls[:, idx]) - bound, initial=0.0)))
    return worst if worst > tol else 0.0


# ---------------------------------------------------------------------------
# body circles
# ---------------------------------------------------------------------------

def _unit(th):
    return np.stack([np.cos(th), np.sin(th)], axis=-1)


def chain_poses(x, geom: VehicleGeometry):
    """World positions (trailer axle, dolly axle, hitch, truck rear axle)
    and headings (th3, th2, th1); broadcasts over leading axes."""
    x = np.asarray(x, dtype=float)
    th3 = x[..., TH3]
    th2 = th3 + x[..., B3]
    th1 = th2 + x[..., B2]
    p3 = x[..., (X3, Y3)]
    p2 = p3 + geom.L3 * _unit(th3)
    ph = p2 + geom.L2 * _unit(th2)
    p1 = ph + geom.M1 * _unit(th1)
    return (p3, p2, ph, p1), (th3, th2, th1)


def body_circles(x, geom: VehicleGeometry):
    """Bounding circles in the world frame: centers (..., n_circ, 2), radii (n_circ,)."""
    (p3, p2, _, p1), (th3, th2, th1) = chain_poses(x, geom)
    anchors = {"trailer": (p3, th3), "dolly": (p2, th2), "truck": (p1, th1)}
    centers = []
    radii = []
    for seg, off, r in geom.body_circle_specs:
        p, th = anchors[seg]
        centers.append(p + off * _unit(th))
        radii.append(r)
    return np.stack(centers, axis=-2), np.array(radii)


def body_circles_jacobian(x, geom: VehicleGeometry):
    """d center / d (x3, y3, th3, b3, b2) for each circle.

    Batched: returns (B, n_circ, 2, 5); column order (x3, y3, th3, b3, b2).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    nb = x.shape[0]
    th3 = x[:, TH3]
    th2 = th3 + x[:, B3]
    th1 = th2 + x[:, B2]
    u3p, u2p, u1p = _unit(th3 + np.pi / 2), _unit(th2 + np.pi / 2), _unit(th1 + np.pi / 2)
    L2, L3, M1 = geom.L2, geom.L3, geom.M1

    J = np.zeros((nb, geom.n_circles, 2, 5))
    for c, (seg, off, _) in enumerate(geom.body_circle_specs):
        J[:, c, 0, 0] = 1.0
        J[:, c, 1, 1] = 1.0
        if seg == "trailer":
            J[:, c, :, 2] = off * u3p
        elif seg == "dolly":
            J[:, c, :, 2] = L3 * u3p + off * u2p
            J[:, c, :, 3] = off * u2p
        else:  # truck
            J[:, c, :, 2] = L3 * u3p + L2 * u2p + (M1 + off) * u1p
            J[:, c, :, 3] = L2 * u2p + (M1 + off) * u1p
            J[:, c, :, 4] = (M1 + off) * u1p
    return J
