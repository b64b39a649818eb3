"""Workspace model, circle-based collision checking and trajectory audits.

The free space is the axis-aligned workspace rectangle minus a set of
circular obstacles.  The vehicle occupies its body circles; a state is
collision-free iff every body circle lies inside the workspace and does not
overlap any obstacle.  Tangency counts as free (closed free set).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import vehicle
from .vehicle import VehicleGeometry

CLEAR_INF = 1e9  # clearance sentinel for unbounded directions


@dataclass(frozen=True)
class Scenario:
    """Planning problem: workspace, obstacles, start and goal states."""

    name: str
    bounds: tuple  # (xmin, xmax, ymin, ymax); None for an unbounded workspace
    obstacles: np.ndarray  # (n, 3) rows (x, y, r); may be empty
    x0: np.ndarray = field(default=None)
    xf: np.ndarray = field(default=None)

    def __post_init__(self):
        obs = np.asarray(self.obstacles, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "obstacles", obs)
        if len(obs) and np.any(obs[:, 2] <= 0.0):
            raise ValueError("obstacle radii must be positive")
        if self.bounds is not None:
            xmin, xmax, ymin, ymax = self.bounds
            if xmin >= xmax or ymin >= ymax:
                raise ValueError("degenerate workspace bounds")

    def translated(self, dx, dy):
        obs = self.obstacles.copy()
        if len(obs):
            obs[:, 0] += dx
            obs[:, 1] += dy
        bounds = None
        if self.bounds is not None:
            xmin, xmax, ymin, ymax = self.bounds
            bounds = (xmin + dx, xmax + dx, ymin + dy, ymax + dy)
        shift = np.zeros(vehicle.STATE_DIM)
        shift[vehicle.X3], shift[vehicle.Y3] = dx, dy
        return Scenario(
            self.name,
            bounds,
            obs,
            None if self.x0 is None else self.x0 + shift,
            None if self.xf is None else self.xf + shift,
        )


FREESPACE = Scenario("freespace", None, np.zeros((0, 3)))


def circles_clearance(centers, radii, scenario: Scenario, margin=0.0):
    """Min signed clearance of body circles vs obstacles and bounds.

    centers (..., nc, 2), radii (nc,).  Positive strictly inside the free
    set; CLEAR_INF when nothing constrains.
    """
    centers = np.asarray(centers, dtype=float)
    worst = np.full(centers.shape[:-2], CLEAR_INF)
    if len(scenario.obstacles):
        d = centers[..., :, None, :] - scenario.obstacles[None, :, :2]
        dist = np.sqrt(np.sum(d * d, axis=-1))
        clear = dist - radii[..., :, None] - scenario.obstacles[None, :, 2] - margin
        worst = np.minimum(worst, clear.min(axis=(-1, -2)))
    if scenario.bounds is not None:
        xmin, xmax, ymin, ymax = scenario.bounds
        cx, cy = centers[..., 0], centers[..., 1]
        r = radii + margin
        side = np.minimum.reduce(
            [cx - r - xmin, xmax - cx - r, cy - r - ymin, ymax - cy - r]
        )
        worst = np.minimum(worst, side.min(axis=-1))
    return worst


def signed_clearance(state, scenario: Scenario, geom: VehicleGeometry, margin=0.0):
    """Signed clearance of a single state (>= 0 iff collision-free)."""
    centers, radii = vehicle.body_circles(state, geom)
    return float(circles_clearance(centers, radii, scenario, margin))


def state_collision_free(state, scenario: Scenario, geom: VehicleGeometry, margin=0.0):
    """True iff the state is in the (closed) free set."""
    return signed_clearance(state, scenario, geom, margin) >= 0.0


def states_clearance(states, scenario: Scenario, geom: VehicleGeometry, margin=0.0):
    """Vectorized signed clearance over a batch of states (B,)."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    centers, radii = vehicle.body_circles(states, geom)
    return circles_clearance(centers, radii, scenario, margin)


def trajectory_collision_free(traj, scenario: Scenario, geom: VehicleGeometry,
                              dt_check=0.1, margin=0.0):
    """(ok, first_violation_time) with sampling at spacing <= dt_check.

    Sample times are nested under refinement of dt_check, so any violation
    detected at a coarse spacing is also detected at a finer one.
    """
    ts, states = traj.sample_states(dt_check)
    clear = states_clearance(states, scenario, geom, margin)
    bad = np.nonzero(clear < 0.0)[0]
    if len(bad):
        return False, float(ts[bad[0]])
    return True, None


@dataclass
class AuditReport:
    ok: bool
    reintegration_gap: float
    envelope_overshoot: float
    collision_ok: bool
    first_collision_time: float | None
    terminal_error: float | None = None

    def summary(self):
        return (
            f"audit(ok={self.ok}, reint={self.reintegration_gap:.2e}, "
            f"env={self.envelope_overshoot:.2e}, coll_ok={self.collision_ok})"
        )


def audit_trajectory(traj, scenario: Scenario, geom: VehicleGeometry,
                     tol_reint=1e-3, tol_env=1e-6, dt_check=0.1, margin=0.0,
                     xf=None, tol_term=1e-4):
    """Independent feasibility audit of a trajectory.

    Checks (i) dynamical consistency: end-to-end re-integration of the
    control knots reproduces the stored samples within tol_reint per
    component; (ii) the constraint envelope at every sample within tol_env;
    (iii) collision-freeness sampled at dt_check with the given margin;
    optionally (iv) terminal state against xf.
    """
    gap = traj.reintegration_gap()
    _, states, controls = traj.all_samples()
    env = vehicle.envelope_violation(states, controls, tol=0.0)
    coll_ok, t_bad = trajectory_collision_free(traj, scenario, geom, dt_check, margin)
    term_err = None
    ok = gap <= tol_reint and env <= tol_env and coll_ok
    if xf is not None:
        term_err = float(np.max(np.abs(traj.final_state - np.asarray(xf))))
        ok = ok and term_err <= tol_term
    return AuditReport(ok, gap, env, coll_ok, t_bad, term_err)
