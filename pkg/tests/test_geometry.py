import numpy as np
import pytest

from trailerplan.geometry import (
    CLEAR_INF, FREESPACE, Scenario, audit_trajectory, signed_clearance,
    state_collision_free, trajectory_collision_free,
)
from trailerplan.trajectory import Trajectory
from trailerplan.vehicle import V1, X3, Y3, VehicleGeometry

from conftest import random_interior_state

POINT_GEOM = VehicleGeometry(body_circle_specs=(("trailer", 0.0, 1.0),))


def make_scenario(obstacles, bounds=None):
    return Scenario("test", bounds, np.asarray(obstacles, dtype=float).reshape(-1, 3))


class TestStateCollision:
    def test_empty_workspace_free(self, geom):
        sc = make_scenario([], bounds=(-100, 100, -100, 100))
        assert state_collision_free(np.zeros(9), sc, geom)

    def test_concentric_obstacle_hits(self):
        sc = make_scenario([[0.0, 0.0, 2.0]])
        assert not state_collision_free(np.zeros(9), sc, POINT_GEOM)
        assert np.isclose(signed_clearance(np.zeros(9), sc, POINT_GEOM), -3.0)

    def test_offset_clearance(self):
        sc = make_scenario([[5.0, 0.0, 2.0]])
        assert np.isclose(signed_clearance(np.zeros(9), sc, POINT_GEOM), 2.0)

    def test_tangency_is_free(self):
        sc = make_scenario([[3.0, 0.0, 2.0]])
        # body circle r=1 at origin, obstacle r=2 at distance 3: tangent
        assert state_collision_free(np.zeros(9), sc, POINT_GEOM)
        assert np.isclose(signed_clearance(np.zeros(9), sc, POINT_GEOM), 0.0)

    def test_unconstrained_sentinel(self):
        assert signed_clearance(np.zeros(9), FREESPACE, POINT_GEOM) == CLEAR_INF

    def test_bounds_only_clearance(self):
        sc = make_scenario([], bounds=(-10, 10, -5, 5))
        assert np.isclose(signed_clearance(np.zeros(9), sc, POINT_GEOM), 4.0)

    def test_clearance_iff_collision_free(self, geom, rng):
        sc = make_scenario([[4.0, 2.0, 2.0], [-6.0, -1.0, 1.5]], bounds=(-30, 30, -30, 30))
        for _ in range(100):
            x = random_interior_state(rng, pos_scale=15.0)
            assert state_collision_free(x, sc, geom) == (signed_clearance(x, sc, geom) >= 0.0)

    def test_translation_invariance(self, geom, rng):
        sc = make_scenario([[4.0, 2.0, 2.0]], bounds=(-30, 30, -30, 30))
        for _ in range(30):
            x = random_interior_state(rng, pos_scale=10.0)
            d = rng.uniform(-50, 50, size=2)
            sc2 = sc.translated(*d)
            x2 = x.copy()
            x2[X3] += d[0]
            x2[Y3] += d[1]
            assert np.isclose(
                signed_clearance(x, sc, geom), signed_clearance(x2, sc2, geom), atol=1e-9
            )


class TestTrajectoryCollision:
    def _straight(self, duration=10.0):
        x0 = np.zeros(9)
        x0[V1] = 1.0
        return Trajectory.from_controls(x0, 0.0, [(duration, np.zeros(2))], POINT_GEOM)

    def test_empty_workspace(self):
        tr = self._straight()
        ok, t = trajectory_collision_free(tr, FREESPACE, POINT_GEOM)
        assert ok and t is None

    def test_midpoint_obstacle(self):
        # obstacle centered on the path at x=5; r_body+r_obst=2 so the
        # violation interval is x in (3, 7), entered at t=3
        sc = make_scenario([[5.0, 0.0, 1.0]])
        tr = self._straight()
        ok, t = trajectory_collision_free(tr, sc, POINT_GEOM, dt_check=0.05)
        assert not ok
        assert 3.0 <= t <= 3.1

    def test_grazing_with_margin(self):
        # obstacle offset 2.2 laterally: actual clearance 0.2, margin 0.3 kills it
        sc = make_scenario([[5.0, 2.2, 1.0]])
        tr = self._straight()
        ok, _ = trajectory_collision_free(tr, sc, POINT_GEOM, dt_check=0.05)
        assert ok
        ok, t = trajectory_collision_free(tr, sc, POINT_GEOM, dt_check=0.05, margin=0.3)
        assert not ok and abs(t - 5.0) <= 1.0

    def test_coarse_violation_found_at_finer_sampling(self):
        sc = make_scenario([[5.0, 0.0, 1.0]])
        tr = self._straight()
        for dt in (0.4, 0.2, 0.1, 0.05):
            ok, _ = trajectory_collision_free(tr, sc, POINT_GEOM, dt_check=dt)
            assert not ok


class TestAudit:
    def test_clean_trajectory_passes(self, geom, weights):
        x0 = np.zeros(9)
        x0[V1] = 1.0
        tr = Trajectory.from_controls(x0, 0.0, [(5.0, np.zeros(2))], geom)
        sc = make_scenario([], bounds=(-50, 50, -50, 50))
        rep = audit_trajectory(tr, sc, geom)
        assert rep.ok
        assert rep.reintegration_gap <= 1e-12

    def test_envelope_breach_detected(self, geom):
        x0 = np.zeros(9)
        x0[V1] = 1.0
        # u_om = 2 for 1s pushes omega beyond 0.8
        tr = Trajectory.from_controls(x0, 0.0, [(1.0, np.array([2.0, 0.0]))], geom)
        sc = make_scenario([], bounds=(-50, 50, -50, 50))
        rep = audit_trajectory(tr, sc, geom)
        assert not rep.ok and rep.envelope_overshoot > 0.1

    def test_terminal_error_checked(self, geom):
        x0 = np.zeros(9)
        x0[V1] = 1.0
        tr = Trajectory.from_controls(x0, 0.0, [(5.0, np.zeros(2))], geom)
        sc = make_scenario([], bounds=(-50, 50, -50, 50))
        xf = tr.final_state.copy()
        assert audit_trajectory(tr, sc, geom, xf=xf).ok
        xf2 = xf.copy()
        xf2[X3] += 1e-3
        assert not audit_trajectory(tr, sc, geom, xf=xf2).ok


def test_scenario_validation():
    with pytest.raises(ValueError):
        make_scenario([[0.0, 0.0, -1.0]])
    with pytest.raises(ValueError):
        Scenario("bad", (1.0, -1.0, 0.0, 1.0), np.zeros((0, 3)))
