"""Time-stamped trajectories with piecewise-constant controls.

A trajectory is a list of control segments.  Each segment holds one constant
control input and a uniform grid of state samples obtained by RK4 integration
from the segment's start state (spacing <= dt_store, even interval count so
composite Simpson applies exactly).  Segment boundaries are exact sample
points.  Controls are right-continuous: the knot active at time t is the one
of the segment with t0 <= t < t1.
"""

from __future__ import annotations

import bisect
import json
from dataclasses import dataclass

import numpy as np

from . import vehicle
from .vehicle import STATE_DIM, VehicleGeometry

DT_STORE = 0.05
# sub-step cap for point queries; finer than storage so that re-integration
# from a stored node stays below 1e-10 of a reference integration
H_QUERY = vehicle.DEFAULT_H_MAX / 4.0


def _n_intervals(duration, dt_store):
    return max(2, 2 * int(np.ceil(duration / (2.0 * dt_store) - 1e-12)))


@dataclass(frozen=True)
class Segment:
    t0: float
    t1: float
    u: np.ndarray        # (2,)
    times: np.ndarray    # (m+1,), uniform, times[0]=t0, times[-1]=t1
    states: np.ndarray   # (m+1, 9)

    @property
    def duration(self):
        return self.t1 - self.t0

    @property
    def h(self):
        return self.times[1] - self.times[0]


def _integrate_segment(x0, t0, duration, u, geom, dt_store):
    m = _n_intervals(duration, dt_store)
    h = duration / m
    states = np.empty((m + 1, STATE_DIM))
    states[0] = x0
    x = np.asarray(x0, dtype=float)
    for j in range(m):
        x = vehicle.rk4_step(x, u, h, geom)
        states[j + 1] = x
    times = t0 + h * np.arange(m + 1)
    times[-1] = t0 + duration
    return Segment(t0, t0 + duration, np.asarray(u, dtype=float), times, states)


class Trajectory:
    """Immutable-by-convention trajectory container."""

    def __init__(self, segments, geom: VehicleGeometry):
        if not segments:
            raise ValueError("trajectory needs at least one segment")
        self.segments = list(segments)
        self.geom = geom
        self._starts = [s.t0 for s in self.segments]
        for a, b in zip(self.segments, self.segments[1:]):
            if not np.isclose(a.t1, b.t0, rtol=0.0, atol=1e-9):
                raise ValueError("segments are not contiguous in time")
        if self.tf <= self.t0:
            raise ValueError("trajectory must have positive duration")
        self._quad_cache = None

    # -- construction -----------------------------------------------------

    @classmethod
    def from_controls(cls, x0, t0, knots, geom, dt_store=DT_STORE):
        """Integrate piecewise-constant knots [(duration, u), ...] from x0."""
        segs = []
        x = np.asarray(x0, dtype=float)
        t = float(t0)
        for duration, u in knots:
            if duration <= 0.0:
                raise ValueError("knot durations must be positive")
            seg = _integrate_segment(x, t, duration, u, geom, dt_store)
            segs.append(seg)
            x = seg.states[-1]
            t = seg.t1
        return cls(segs, geom)

    # -- basic queries ------------------------------------------------------

    @property
    def t0(self):
        return self.segments[0].t0

    @property
    def tf(self):
        return self.segments[-1].t1

    @property
    def duration(self):
        return self.tf - self.t0

    @property
    def initial_state(self):
        return self.segments[0].states[0]

    @property
    def final_state(self):
        return self.segments[-1].states[-1]

    def _locate(self, tau):
        if tau < self.t0 - 1e-9 or tau > self.tf + 1e-9:
            raise ValueError(f"time {tau} outside [{self.t0}, {self.tf}]")
        i = bisect.bisect_right(self._starts, tau) - 1
        i = min(max(i, 0), len(self.segments) - 1)
        if tau >= self.segments[i].t1 and i + 1 < len(self.segments):
            i += 1
        return i

    def control_at(self, tau):
        return self.segments[self._locate(min(tau, self.tf))].u

    def state_at(self, tau):
        """State at tau, re-integrated from the nearest stored node <= tau.

        Controls are indexed, never interpolated, so the result is
        dynamics-exact to integrator accuracy even across control knots.
        """
        seg = self.segments[self._locate(tau)]
        k = int(np.floor((tau - seg.t0) / seg.h + 1e-12))
        k = min(max(k, 0), len(seg.times) - 1)
        dt = tau - seg.times[k]
        if abs(dt) <= 1e-9:
            return seg.states[k].copy()
        return vehicle.integrate(seg.states[k], seg.u, dt, self.geom, h_max=H_QUERY)

    def knots(self):
        """Control knots as [(duration, u), ...]."""
        return [(s.duration, s.u.copy()) for s in self.segments]

    # -- slicing / shifting / joining ---------------------------------------

    def slice(self, a, b, dt_store=DT_STORE):
        """Sub-trajectory on [a, b]; partial segments re-integrated exactly."""
        if not (self.t0 - 1e-9 <= a < b <= self.tf + 1e-9):
            raise ValueError("invalid slice bounds")
        segs = []
        for seg in self.segments:
            lo, hi = max(seg.t0, a), min(seg.t1, b)
            if hi - lo <= 1e-12:
                continue
            if lo <= seg.t0 + 1e-12 and hi >= seg.t1 - 1e-12:
                segs.append(seg)
            else:
                x_lo = seg.states[0] if lo <= seg.t0 + 1e-12 else self.state_at(lo)
                segs.append(_integrate_segment(x_lo, lo, hi - lo, seg.u, self.geom, dt_store))
        return Trajectory(segs, self.geom)

    def shifted(self, dt):
        """Same motion with all timestamps moved by dt."""
        segs = [Segment(s.t0 + dt, s.t1 + dt, s.u, s.times + dt, s.states) for s in self.segments]
        return Trajectory(segs, self.geom)

    @staticmethod
    def join(pieces):
        """Concatenate contiguous trajectories (no state adjustment)."""
        segs = []
        geom = pieces[0].geom
        for p in pieces:
            segs.extend(p.segments)
        return Trajectory(segs, geom)

    # -- quadrature -----------------------------------------------------------

    def _quad(self):
        """Concatenated samples with composite-Simpson quadrature weights."""
        if self._quad_cache is None:
            st, ct, wq = [], [], []
            for seg in self.segments:
                m = len(seg.times) - 1
                w = np.ones(m + 1)
                w[1:-1:2] = 4.0
                w[2:-1:2] = 2.0
                w *= seg.h / 3.0
                st.append(seg.states)
                ct.append(np.broadcast_to(seg.u, (m + 1, 2)))
                wq.append(w)
            self._quad_cache = (np.vstack(st), np.vstack(ct), np.concatenate(wq))
        return self._quad_cache

    def integral_cost(self, weights):
        """Integral of the stage cost over the whole trajectory (Simpson)."""
        states, controls, wq = self._quad()
        return float(wq @ vehicle.stage_cost(states, controls, weights))

    # -- sampling -----------------------------------------------------------

    def sample_times(self, dt_check):
        """Sample times with spacing <= dt_check, nested under refinement.

        Strides are powers of two on each segment grid, so every sample used
        at a coarse dt_check is also used at any finer dt_check.
        """
        if dt_check <= 0.0:
            raise ValueError("dt_check must be positive")
        out = []
        for seg in self.segments:
            m = len(seg.times) - 1
            if seg.h <= dt_check:
                stride = 1
                while stride * 2 * seg.h <= dt_check:
                    stride *= 2
                idx = list(range(0, m, stride)) + [m]
                out.extend(seg.times[i] for i in idx)
            else:
                r = 1
                while seg.h / r > dt_check:
                    r *= 2
                fine = np.linspace(seg.t0, seg.t1, m * r + 1)
                out.extend(fine)
        ts = np.array(sorted(set(np.round(np.asarray(out), 12))))
        return ts

    def sample_states(self, dt_check):
        """(times, states) sampled with spacing <= dt_check."""
        ts = self.sample_times(dt_check)
        states = np.empty((len(ts), STATE_DIM))
        for i, t in enumerate(ts):
            states[i] = self.state_at(t)
        return ts, states

    def all_samples(self):
        """(times, states, controls) at every stored sample (joints deduped)."""
        ts, xs, us = [], [], []
        for i, seg in enumerate(self.segments):
            sl = slice(0, None) if i == 0 else slice(1, None)
            ts.append(seg.times[sl])
            xs.append(seg.states[sl])
            us.append(np.broadcast_to(seg.u, (len(seg.times), 2))[sl])
        return np.concatenate(ts), np.vstack(xs), np.vstack(us)

    # -- consistency --------------------------------------------------------

    def reintegration_gap(self):
        """Max abs per-component gap between stored samples and an
        end-to-end re-integration of the control knots from the initial
        state (the dynamical-consistency audit)."""
        x = self.initial_state.copy()
        worst = 0.0
        for seg in self.segments:
            worst = max(worst, float(np.max(np.abs(x - seg.states[0]))))
            h = seg.h
            for j in range(len(seg.times) - 1):
                x = vehicle.rk4_step(x, seg.u, h, self.geom)
                worst = max(worst, float(np.max(np.abs(x - seg.states[j + 1]))))
        return worst

    def max_joint_gap(self):
        """Largest state discontinuity across segment joints."""
        worst = 0.0
        for a, b in zip(self.segments, self.segments[1:]):
            worst = max(worst, float(np.max(np.abs(a.states[-1] - b.states[0]))))
        return worst

    # -- serialization --------------------------------------------------------

    def to_dict(self):
        return {
            "format": "trailerplan-trajectory/1",
            "t0": self.t0,
            "x0": [float(v) for v in self.initial_state],
            "knots": [
                {"duration": float(s.duration), "u": [float(v) for v in s.u]}
                for s in self.segments
            ],
            "xf": [float(v) for v in self.final_state],
            "joint_gap": self.max_joint_gap(),
        }

    @classmethod
    def from_dict(cls, d, geom, dt_store=DT_STORE, exact_joints=True):
        """Rebuild by integrating the stored knots (deterministic).

        With exact_joints the stored xf is NOT imposed; the rebuild is the
        pure integration of the knots, which reproduces the saved trajectory
        whenever it was integration-consistent.
        """
        if d.get("format") != "trailerplan-trajectory/1":
            raise ValueError("unrecognized trajectory format")
        knots = [(k["duration"], np.array(k["u"], dtype=float)) for k in d["knots"]]
        return cls.from_controls(np.array(d["x0"], dtype=float), d["t0"], knots, geom, dt_store)


def save_trajectory(traj: Trajectory, path):
    with open(path, "w") as f:
        json.dump(traj.to_dict(), f, indent=1, sort_keys=True)
        f.write("\n")


def load_trajectory(path, geom) -> Trajectory:
    with open(path) as f:
        return Trajectory.from_dict(json.load(f), geom)
