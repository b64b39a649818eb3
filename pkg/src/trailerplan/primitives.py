"""Offline motion-primitive library for the state lattice.

Lattice states live on a 1 m position grid with 16 irregularly spaced
headings (integer direction vectors, so short straight segments exist for
every heading) and velocities {-1, 0, +1} m/s; all other vehicle states are
zero at lattice states.  Each primitive is the solution of a fixed-endpoint
free-time OCP in an obstacle-free workspace.  Rotational symmetry is
exploited: only one heading per 90-degree symmetry class is solved, the
rest are rotated copies.
"""

from __future__ import annotations

import io
import json
import logging
import multiprocessing as mp
import zipfile
from dataclasses import dataclass

import numpy as np

from . import vehicle
from .geometry import FREESPACE
from .ocp import RhpSubproblem, SqpOptions, solve_subproblem
from .trajectory import Segment, Trajectory
from .vehicle import TH3, V1, X3, Y3, CostWeights, VehicleGeometry, config_fingerprint

log = logging.getLogger("trailerplan.primitives")

GRID_RES = 1.0  # m
# irregular 16-heading set: atan2(j, i) of these integer vectors, ordered by
# angle so that a 90-degree rotation shifts the index by 4
HEADING_VECTORS = (
    (1, 0), (2, 1), (1, 1), (1, 2), (0, 1), (-1, 2), (-1, 1), (-2, 1),
    (-1, 0), (-2, -1), (-1, -1), (-1, -2), (0, -1), (1, -2), (1, -1), (2, -1),
)
N_HEADINGS = 16
VELOCITIES = (-1.0, 0.0, 1.0)  # indexed by iv in {0, 1, 2}
N_SHOOT = 40  # shooting intervals per primitive OCP

PRIM_KINDS = ("straight", "heading_change", "parallel", "velocity_change")


def heading_set():
    """The 16 lattice headings in radians, in index order."""
    return np.array([np.arctan2(j, i) for i, j in HEADING_VECTORS])


HEADINGS = heading_set()


def rotate_heading_index(ih, quarter_turns):
    return (ih + 4 * quarter_turns) % N_HEADINGS


def rot90_xy(dx, dy, quarter_turns):
    for _ in range(quarter_turns % 4):
        dx, dy = -dy, dx
    return dx, dy


@dataclass(frozen=True)
class LatticeState:
    ix: int
    iy: int
    ih: int
    iv: int

    def __post_init__(self):
        if not (0 <= self.ih < N_HEADINGS and 0 <= self.iv < 3):
            raise ValueError("lattice indices out of range")

    @property
    def velocity(self):
        return VELOCITIES[self.iv]

    @property
    def heading(self):
        return HEADINGS[self.ih]

    def vehicle_state(self):
        x = np.zeros(vehicle.STATE_DIM)
        x[X3] = self.ix * GRID_RES
        x[Y3] = self.iy * GRID_RES
        x[TH3] = self.heading
        x[V1] = self.velocity
        return x


class LibraryError(Exception):
    pass


@dataclass
class MotionPrimitive:
    """A feasible optimal maneuver between lattice states.

    The start state is position-normalized to the origin; `to` holds the
    relative grid displacement and the target heading/velocity indices.
    """

    from_ih: int
    from_iv: int
    to_dx: int
    to_dy: int
    to_ih: int
    to_iv: int
    kind: str
    trajectory: Trajectory
    cost: float
    duration: float

    @property
    def key(self):
        return (self.kind, self.from_ih, self.from_iv,
                self.to_ih, self.to_iv, self.to_dx, self.to_dy)

    def start_state(self):
        return LatticeState(0, 0, self.from_ih, self.from_iv).vehicle_state()

    def end_state(self):
        return LatticeState(self.to_dx, self.to_dy, self.to_ih, self.to_iv).vehicle_state()

    def circle_samples(self, geom, dt=0.1):
        """Body-circle positions along the maneuver, relative to the start
        cell: (n_samples, n_circles, 2) centers plus (n_circles,) radii."""
        if getattr(self, "_circle_cache", None) is None:
            _, states = self.trajectory.sample_states(dt)
            centers, radii = vehicle.body_circles(states, geom)
            self._circle_cache = (centers, radii)
        return self._circle_cache

    def rotated(self, quarter_turns):
        """Exact copy rotated by a multiple of 90 degrees."""
        k = quarter_turns % 4
        if k == 0:
            return self
        ang = k * np.pi / 2.0
        cs, sn = np.cos(ang), np.sin(ang)
        segs = []
        for s in self.trajectory.segments:
            st = s.states.copy()
            x, y = st[:, X3].copy(), st[:, Y3].copy()
            st[:, X3] = cs * x - sn * y
            st[:, Y3] = sn * x + cs * y
            st[:, TH3] = st[:, TH3] + ang
            segs.append(Segment(s.t0, s.t1, s.u, s.times, st))
        dx, dy = rot90_xy(self.to_dx, self.to_dy, k)
        return MotionPrimitive(
            from_ih=rotate_heading_index(self.from_ih, k),
            from_iv=self.from_iv,
            to_dx=dx, to_dy=dy,
            to_ih=rotate_heading_index(self.to_ih, k),
            to_iv=self.to_iv,
            kind=self.kind,
            trajectory=Trajectory(segs, self.trajectory.geom),
            cost=self.cost,
            duration=self.duration,
        )


# ---------------------------------------------------------------------------
# primitive generation
# ---------------------------------------------------------------------------

def default_primitive_spec():
    """The maneuver inventory used across the bundled experiments.

    min_turn_radius is the trailer-axle radius used to size heading-change
    and parallel displacements; it must respect the joint-angle envelope
    (beta3 = atan(L3/R) well inside its bound) with room for the entry and
    exit transients from straight configurations.
    """
    return {
        "format": "trailerplan-primitive-spec/1",
        "min_turn_radius": 13.0,
        "straights": [
            {"v_from": 1, "v_to": 1}, {"v_from": 1, "v_to": 0},
            {"v_from": 0, "v_to": 1}, {"v_from": -1, "v_to": -1},
            {"v_from": -1, "v_to": 0}, {"v_from": 0, "v_to": -1},
        ],
        "heading_changes": {"neighbors": 4, "velocities": [-1, 1]},
        "parallels": {"max_offset": 10, "velocities": [-1, 1]},
    }


def _iv(v):
    return int(round(v)) + 1


def _min_straight(ih):
    return HEADING_VECTORS[ih]


def _to_nodes(points, headings, v_profile):
    X = np.zeros((N_SHOOT + 1, vehicle.STATE_DIM))
    X[:, X3] = points[:, 0]
    X[:, Y3] = points[:, 1]
    X[:, TH3] = headings
    X[:, V1] = v_profile
    return X


def _chain_fill(X, T, geom):
    """Fill joint angles, steering and rates by quasi-static inverse
    kinematics of the trailer chain along the sketched motion.  Endpoint
    rows stay at the exact lattice states."""
    n = len(X)
    t = np.linspace(0.0, T, n)
    th3 = X[:, TH3]
    v3 = X[:, V1].copy()
    v3safe = np.where(np.abs(v3) < 0.2, np.sign(v3 + 1e-12) * 0.2, v3)
    th3dot = np.gradient(th3, t)
    b3 = np.arctan(geom.L3 * th3dot / v3safe)
    v2 = v3safe / np.cos(b3)
    th2 = th3 + b3
    th2dot = np.gradient(th2, t)
    b2 = np.arctan(geom.L2 * th2dot / v2)
    for _ in range(3):
        num = th2dot * (geom.L2 + geom.M1 * np.cos(b2))
        den = v2 - geom.M1 * th2dot * np.sin(b2)
        b2 = np.arctan2(num, np.where(np.abs(den) < 0.05, np.sign(den + 1e-12) * 0.05, den))
        b2 = np.clip(b2, -0.95 * vehicle.BETA2_MAX, 0.95 * vehicle.BETA2_MAX)
    v1 = (v2 - geom.M1 * th2dot * np.sin(b2)) / np.maximum(np.cos(b2), 0.3)
    th1 = th2 + b2
    th1dot = np.gradient(th1, t)
    al = np.arctan(geom.L1 * th1dot / np.where(np.abs(v1) < 0.2, np.sign(v1 + 1e-12) * 0.2, v1))
    al = np.clip(al, -0.95 * vehicle.ALPHA_MAX, 0.95 * vehicle.ALPHA_MAX)
    om = np.clip(np.gradient(al, t), -0.9 * vehicle.OMEGA_MAX, 0.9 * vehicle.OMEGA_MAX)
    a1 = np.clip(np.gradient(np.clip(v1, -0.98, 0.98), t), -0.9, 0.9)
    X[:, vehicle.B3] = np.clip(b3, -0.95 * vehicle.BETA3_MAX, 0.95 * vehicle.BETA3_MAX)
    X[:, vehicle.B2] = b2
    X[:, vehicle.AL] = al
    X[:, vehicle.OM] = om
    X[:, vehicle.A1] = a1
    X[:, V1] = np.clip(v1, -0.98, 0.98)
    return X


def _straight_guess(ih, dx, dy, v_from, v_to):
    # node positions consistent with the velocity profile so the initial
    # shooting defects stay small
    d = np.hypot(dx, dy)
    tgrid = np.linspace(0.0, 1.0, N_SHOOT + 1)
    vp = v_from + (v_to - v_from) * tgrid
    if v_from == v_to:
        T = d / max(abs(v_from), 0.5)
        frac = tgrid
    else:
        vbar = 0.5 * abs(v_from + v_to) or 0.5
        T = d / vbar
        s = np.cumsum(np.abs(vp[:-1]) + np.abs(vp[1:]))
        frac = np.concatenate([[0.0], s / s[-1]])
    pts = np.stack([dx * frac, dy * frac], axis=1)
    hd = np.full(N_SHOOT + 1, HEADINGS[ih])
    T_min = max(0.4, 0.95 * d)
    T = max(T, T_min + 0.05)
    T_max = max(3.0 * T, T_min + 4.0)
    return _to_nodes(pts, hd, vp), T, T_min, T_max


def _arc_guess(ih, dth, R, direction):
    phi = abs(dth)
    tgrid = np.linspace(0.0, 1.0, N_SHOOT + 1)
    ang = phi * tgrid
    loc = np.stack([
        direction * R * np.sin(ang),
        direction * np.sign(dth) * R * (1.0 - np.cos(ang)),
    ], axis=1)
    th0 = HEADINGS[ih]
    cs, sn = np.cos(th0), np.sin(th0)
    pts = np.stack([cs * loc[:, 0] - sn * loc[:, 1], sn * loc[:, 0] + cs * loc[:, 1]], axis=1)
    hd = th0 + dth * tgrid
    # cruise below the velocity bound so the linearization keeps
    # longitudinal slack in both directions
    vp = np.full(N_SHOOT + 1, 0.85 * direction)
    arclen = R * phi
    T = arclen / 0.85
    T_min = max(1.0, 0.6 * arclen)
    return pts, hd, vp, max(T, T_min + 0.05), T_min, 3.0 * arclen + 8.0


def _parallel_guess(ih, w, L, direction):
    tgrid = np.linspace(0.0, 1.0, N_SHOOT + 1)
    xloc = direction * L * tgrid
    yloc = w * 0.5 * (1.0 - np.cos(np.pi * tgrid))
    slope = np.gradient(yloc, xloc, edge_order=1)
    th0 = HEADINGS[ih]
    cs, sn = np.cos(th0), np.sin(th0)
    pts = np.stack([cs * xloc - sn * yloc, sn * xloc + cs * yloc], axis=1)
    # trailer heading follows the path tangent regardless of travel direction
    hd = th0 + np.arctan(np.clip(np.nan_to_num(slope), -1.0, 1.0))
    hd[0] = hd[-1] = th0
    vp = np.full(N_SHOOT + 1, 0.85 * direction)
    seglen = np.hypot(np.diff(xloc), np.diff(yloc))
    pathlen = float(np.sum(seglen))
    T = pathlen / 0.85
    T_min = max(1.0, 0.6 * pathlen)
    return pts, hd, vp, max(T, T_min + 0.05), T_min, 3.0 * pathlen + 8.0


def _hc_displacement(ih, ih_to, direction, radius):
    """Grid displacement for a heading change: the (rounded) chord of a
    circular arc of the given trailer radius, reversed for backing."""
    th0, th1 = HEADINGS[ih], HEADINGS[ih_to]
    dth = _wrap(th1 - th0)
    mid = th0 + 0.5 * dth
    chord = 2.0 * radius * abs(np.sin(0.5 * dth))
    dx = int(round(direction * chord * np.cos(mid)))
    dy = int(round(direction * chord * np.sin(mid)))
    return dx, dy


def enumerate_base_jobs(spec):
    """Forward-motion jobs for one representative heading per symmetry
    class.  Reverse maneuvers are never solved directly: the kinematics are
    time-reversible (the flow is odd in v1), so each reverse primitive is
    constructed as the exact time-mirror of a forward one.

    Heading changes and parallels carry retry displacement scales: if the
    tightest variant is infeasible the next larger one is attempted.
    """
    jobs = []
    R = spec.get("min_turn_radius", 13.0)
    for ih in range(4):
        for st in spec.get("straights", []):
            v0, v1 = st["v_from"], st["v_to"]
            if v0 < 0 or v1 < 0:
                continue  # realized as a reversal of the mirror family
            ux, uy = _min_straight(ih)
            kind = "straight" if v0 == v1 else "velocity_change"
            jobs.append({
                "kind": kind, "ih_from": ih, "iv_from": _iv(v0),
                "dx": ux, "dy": uy, "ih_to": ih, "iv_to": _iv(v1),
            })
        hc = spec.get("heading_changes")
        if hc and any(v > 0 for v in hc.get("velocities", [])):
            for step in range(1, hc.get("neighbors", 4) + 1):
                for sgn in (1, -1):
                    ih_to = (ih + sgn * step) % N_HEADINGS
                    cands = []
                    for scale in (1.0, 1.2, 1.45):
                        d = _hc_displacement(ih, ih_to, 1, R * scale)
                        if d != (0, 0) and d not in cands:
                            cands.append(d)
                    jobs.append({
                        "kind": "heading_change", "ih_from": ih, "iv_from": 2,
                        "dx": cands[0][0], "dy": cands[0][1],
                        "ih_to": ih_to, "iv_to": 2,
                        "retries": cands[1:],
                    })
    par = spec.get("parallels")
    if par and any(v > 0 for v in par.get("velocities", [])):
        for w in range(-par.get("max_offset", 10), par.get("max_offset", 10) + 1):
            if w == 0:
                continue
            phi = np.arccos(max(-1.0, 1.0 - abs(w) / (2.0 * R)))
            L = int(np.ceil(2.0 * R * np.sin(phi))) + 2
            jobs.append({
                "kind": "parallel", "ih_from": 0, "iv_from": 2,
                "dx": L, "dy": w, "ih_to": 0, "iv_to": 2,
                "L": L,
                "retries": [(L + 3, w), (L + 6, w)],
            })
    return jobs


def spec_wants_reversals(spec):
    """True when the maneuver spec includes any reverse-motion family."""
    if any(st["v_from"] < 0 or st["v_to"] < 0 for st in spec.get("straights", [])):
        return True
    hc = spec.get("heading_changes") or {}
    if any(v < 0 for v in hc.get("velocities", [])):
        return True
    par = spec.get("parallels") or {}
    return any(v < 0 for v in par.get("velocities", []))


def _wrap(a):
    return (a + np.pi) % (2.0 * np.pi) - np.pi


def generate_primitive(job, geom: VehicleGeometry, weights: CostWeights,
                       endpoint_tol=1e-5):
    """Solve a maneuver job, walking its displacement variants until one is
    feasible; returns MotionPrimitive or None."""
    variants = [(job["dx"], job["dy"])]
    variants += [tuple(d) for d in job.get("retries", []) if tuple(d) not in variants]
    for dx, dy in variants:
        j = {k: v for k, v in job.items() if k != "retries"}
        j["dx"], j["dy"] = dx, dy
        if job["kind"] == "parallel":
            j["L"] = abs(dx)
        prim = _generate_single(j, geom, weights, endpoint_tol)
        if prim is not None:
            return prim
    return None


def _generate_single(job, geom: VehicleGeometry, weights: CostWeights,
                     endpoint_tol=1e-5):
    """Solve one fixed-endpoint OCP; returns MotionPrimitive or None."""
    ih, iv = job["ih_from"], job["iv_from"]
    from_ls = LatticeState(0, 0, ih, iv)
    to_ls = LatticeState(job["dx"], job["dy"], job["ih_to"], job["iv_to"])
    x0 = from_ls.vehicle_state()
    xf = to_ls.vehicle_state()
    # heading stored continuously: pick the branch nearest the start heading
    xf[TH3] = x0[TH3] + _wrap(xf[TH3] - x0[TH3])

    kind = job["kind"]
    if kind in ("straight", "velocity_change"):
        X, T, Tmin, Tmax = _straight_guess(ih, job["dx"], job["dy"],
                                           from_ls.velocity, to_ls.velocity)
    elif kind == "heading_change":
        dth = xf[TH3] - x0[TH3]
        direction = int(np.sign(from_ls.velocity))
        R = np.hypot(job["dx"], job["dy"]) / max(2.0 * abs(np.sin(dth / 2.0)), 1e-9)
        pts, hd, vp, T, Tmin, Tmax = _arc_guess(ih, dth, R, direction)
        scale = np.hypot(job["dx"], job["dy"]) / max(np.hypot(*pts[-1]), 1e-9)
        pts = pts * scale
        pts[-1] = (job["dx"], job["dy"])
        X = _chain_fill(_to_nodes(pts, hd, vp), T, geom)
    else:  # parallel
        direction = int(np.sign(from_ls.velocity))
        pts, hd, vp, T, Tmin, Tmax = _parallel_guess(ih, job["dy"], job["L"], direction)
        pts[-1] = (job["dx"], job["dy"])
        X = _chain_fill(_to_nodes(pts, hd, vp), T, geom)

    X[0], X[-1] = x0, xf
    p = RhpSubproblem(
        x_cur=x0, x_term=xf, N=N_SHOOT, T_init=T, scenario=None,
        weights=weights, geom=geom, T_min=Tmin, T_max=Tmax, margin=0.0,
    )
    sol = solve_subproblem(p, X, np.zeros((N_SHOOT, 2)), T,
                           SqpOptions(max_iter=150))
    if sol.status != "optimal":
        return None
    knots = [(sol.T_star / N_SHOOT, sol.controls[i]) for i in range(N_SHOOT)]
    traj = Trajectory.from_controls(x0, 0.0, knots, geom)
    err = float(np.max(np.abs(traj.final_state - xf)))
    if err > endpoint_tol:
        log.warning("primitive %s endpoint error %.2e rejected", job, err)
        return None
    _, states, controls = traj.all_samples()
    if vehicle.envelope_violation(states, controls, tol=1e-6) > 0.0:
        log.warning("primitive %s violates the envelope; rejected", job)
        return None
    return MotionPrimitive(
        from_ih=ih, from_iv=iv, to_dx=job["dx"], to_dy=job["dy"],
        to_ih=job["ih_to"], to_iv=job["iv_to"], kind=kind,
        trajectory=traj, cost=traj.integral_cost(weights),
        duration=float(sol.T_star),
    )


def reversed_primitive(prim: MotionPrimitive, geom, weights, endpoint_tol=1e-4):
    """Exact time-mirror of a forward primitive: the same geometric motion
    driven in the opposite direction (v1 and om flip sign, u_a negates,
    knots run backwards).  Returns None if the rebuilt trajectory fails
    verification (it should not)."""
    knots = [
        (s.duration, np.array([s.u[0], -s.u[1]]))
        for s in reversed(prim.trajectory.segments)
    ]
    x0 = prim.end_state()
    x0[X3] -= prim.to_dx * GRID_RES
    x0[Y3] -= prim.to_dy * GRID_RES
    x0[V1] = -x0[V1]
    # keep the heading branch continuous with the forward trajectory
    x0[TH3] = prim.trajectory.final_state[TH3]
    traj = Trajectory.from_controls(x0, 0.0, knots, geom)
    to_iv = 2 - prim.from_iv
    xf = LatticeState(-prim.to_dx, -prim.to_dy, prim.from_ih, to_iv).vehicle_state()
    xf[TH3] = x0[TH3] + _wrap(xf[TH3] - x0[TH3])
    err = float(np.max(np.abs(traj.final_state - xf)))
    if err > endpoint_tol:
        log.warning("reversal of %s endpoint error %.2e rejected", prim.key, err)
        return None
    _, states, controls = traj.all_samples()
    if vehicle.envelope_violation(states, controls, tol=1e-6) > 0.0:
        log.warning("reversal of %s violates the envelope; rejected", prim.key)
        return None
    return MotionPrimitive(
        from_ih=prim.to_ih, from_iv=2 - prim.to_iv,
        to_dx=-prim.to_dx, to_dy=-prim.to_dy,
        to_ih=prim.from_ih, to_iv=to_iv,
        kind=prim.kind, trajectory=traj,
        cost=traj.integral_cost(weights), duration=prim.duration,
    )


class PrimitiveLibrary:
    def __init__(self, primitives, geom, weights, report=None):
        self.primitives = sorted(primitives, key=lambda p: p.key)
        self.geom = geom
        self.weights = weights
        self.fingerprint = config_fingerprint(geom, weights)
        self.report = report or {}
        self._index = {}
        for p in self.primitives:
            self._index.setdefault((p.from_ih, p.from_iv), []).append(p)

    def __len__(self):
        return len(self.primitives)

    def outgoing(self, ih, iv):
        return self._index.get((ih, iv), [])


_WORKER_CTX = {}


def _worker_init(geom_dict, weights_dict):
    _WORKER_CTX["geom"] = VehicleGeometry(
        L1=geom_dict["L1"], M1=geom_dict["M1"], L2=geom_dict["L2"], L3=geom_dict["L3"],
        body_circle_specs=tuple(tuple(c) for c in geom_dict["circles"]),
    )
    q = np.array(weights_dict["Q"])
    r = np.array(weights_dict["R"])
    _WORKER_CTX["weights"] = CostWeights(time_weight=weights_dict["time_weight"], Q=q, R=r)


def _worker_solve(job):
    prim = generate_primitive(job, _WORKER_CTX["geom"], _WORKER_CTX["weights"])
    return job, prim


def build_primitive_set(spec, geom: VehicleGeometry, weights: CostWeights,
                        workers=0) -> PrimitiveLibrary:
    """Generate the full library from a maneuver spec.

    Infeasible maneuvers are dropped (counted in the report).  Base headings
    are solved, rotations are exact copies, output order is deterministic.
    """
    jobs = enumerate_base_jobs(spec)
    base = []
    dropped = []
    if workers and workers > 1:
        with mp.get_context("spawn").Pool(
            workers, initializer=_worker_init,
            initargs=(geom.fingerprint_dict(), weights.fingerprint_dict()),
        ) as pool:
            results = pool.map(_worker_solve, jobs)
    else:
        results = [(job, generate_primitive(job, geom, weights)) for job in jobs]
    for job, prim in results:
        if prim is None:
            dropped.append(job)
        else:
            base.append(prim)
    if spec_wants_reversals(spec):
        reversals = [reversed_primitive(p, geom, weights) for p in base]
        base = base + [p for p in reversals if p is not None]
    prims = []
    for p in base:
        for k in range(4):
            q = p.rotated(k)
            if q.kind == "parallel" and q.from_ih not in (0, 4, 8, 12):
                continue
            prims.append(q)
    # deduplicate identical keys (defensive; the job enumeration is distinct)
    seen = {}
    for p in prims:
        seen[p.key] = p
    report = {
        "jobs": len(jobs), "base_solved": len(base), "base_dropped": len(dropped),
        "dropped_jobs": [{k: v for k, v in j.items()} for j in dropped],
        "total": len(seen),
    }
    if dropped:
        log.warning("dropped %d/%d base maneuvers as infeasible", len(dropped), len(jobs))
    return PrimitiveLibrary(list(seen.values()), geom, weights, report)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

LIB_FORMAT = "trailerplan-primitive-library/1"


def save_library(lib: PrimitiveLibrary, path):
    P = len(lib.primitives)
    meta = {
        "format": LIB_FORMAT,
        "fingerprint": lib.fingerprint,
        "geometry": lib.geom.fingerprint_dict(),
        "weights": lib.weights.fingerprint_dict(),
        "headings": [list(v) for v in HEADING_VECTORS],
        "count": P,
        "report": lib.report,
    }
    end = np.zeros((P, 6), dtype=np.int64)
    kinds = np.zeros(P, dtype=np.int64)
    costs = np.zeros(P)
    durations = np.zeros(P)
    knots_u = np.zeros((P, N_SHOOT, 2))
    samples = []
    offsets = [0]
    for i, p in enumerate(lib.primitives):
        end[i] = (p.from_ih, p.from_iv, p.to_dx, p.to_dy, p.to_ih, p.to_iv)
        kinds[i] = PRIM_KINDS.index(p.kind)
        costs[i] = p.cost
        durations[i] = p.duration
        knots_u[i] = np.stack([s.u for s in p.trajectory.segments])
        _, st = p.trajectory.sample_states(0.1)
        samples.append(st)
        offsets.append(offsets[-1] + len(st))
    buf = io.BytesIO()
    np.savez(
        buf, meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
        endpoints=end, kinds=kinds, costs=costs, durations=durations,
        knots_u=knots_u, samples=np.vstack(samples) if samples else np.zeros((0, 9)),
        sample_offsets=np.array(offsets, dtype=np.int64),
    )
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_library(path, geom: VehicleGeometry, weights: CostWeights) -> PrimitiveLibrary:
    try:
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]).decode())
            if meta.get("format") != LIB_FORMAT:
                raise LibraryError(f"unrecognized library format in {path}")
            want = config_fingerprint(geom, weights)
            if meta["fingerprint"] != want:
                raise LibraryError(
                    "library fingerprint mismatch: file was built for different "
                    f"geometry/weights ({meta['fingerprint']} != {want})"
                )
            end = data["endpoints"]
            kinds = data["kinds"]
            costs = data["costs"]
            durations = data["durations"]
            knots_u = data["knots_u"]
    except (zipfile.BadZipFile, KeyError, OSError, ValueError) as exc:
        if isinstance(exc, LibraryError):
            raise
        raise LibraryError(f"cannot read primitive library {path}: {exc}") from exc
    prims = []
    for i in range(len(end)):
        ih, iv, dx, dy, ih2, iv2 = (int(v) for v in end[i])
        x0 = LatticeState(0, 0, ih, iv).vehicle_state()
        s = durations[i] / N_SHOOT
        knots = [(s, knots_u[i, j]) for j in range(N_SHOOT)]
        traj = Trajectory.from_controls(x0, 0.0, knots, geom)
        prims.append(MotionPrimitive(
            from_ih=ih, from_iv=iv, to_dx=dx, to_dy=dy, to_ih=ih2, to_iv=iv2,
            kind=PRIM_KINDS[int(kinds[i])], trajectory=traj,
            cost=float(costs[i]), duration=float(durations[i]),
        ))
    return PrimitiveLibrary(prims, geom, weights)
