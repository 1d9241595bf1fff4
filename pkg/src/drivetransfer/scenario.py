"""Episodic driving tasks on a family of sinusoidal lanes.

Three tasks share one environment: lane keeping ("lk") tracks a fixed lane,
lane changing ("lc") retargets to the adjacent lane at a scheduled step, and
obstacle avoidance ("oa") adds a slower vehicle ahead whose presence drives a
rule-based retargeting of the intended lane.  Rewards and terminations are
always evaluated against the currently intended lane, so a policy applied
directly and a plan/track pipeline are scored on identical terms.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .accel import njit
from . import dynamics
from .dynamics import (IVX, IVY, IWZ, IX, IY, IPSI, ISTEER,
                       VehicleParams, VehicleState)
from .geometry import (PROJECTION_CUTOFF, ProjectionError, circumcircle_curvature,
                       polyline_advance, polyline_heading, polyline_point,
                       polyline_project, sine_advance, sine_heading, sine_project,
                       sine_curvature, sine_y, wrap_angle, _sine_arclen)

TASKS = ("lk", "lc", "oa")

# Termination causes.
CAUSE_NONE = ""
CAUSE_DEVIATION = "deviation"
CAUSE_COLLISION = "collision"
CAUSE_HORIZON = "horizon"


@dataclass(frozen=True)
class ScenarioConfig:
    """Geometry, task parameters and episode rules for one driving task."""

    task: str = "lk"
    lane_amplitude: float = 3.0      # m
    lane_wavenumber: float = 0.02    # rad per metre of x
    lane_width: float = 3.0          # m, also the lane spacing
    lane_count: int = 0              # 0 = task default (lk: 1, lc/oa: 2)
    lookahead: float = 15.0          # m, preview distance for the errors
    eta: float = 20.0                # lateral error weight in the reward
    horizon: int = 1000              # steps
    deviation_limit: float = 3.0     # m from the nearest lane centre
    r_deviation: float = -1000.0
    r_collision: float = -1000.0
    init_offset: float = 1.0         # m, initial |dy| bound
    init_heading: float = 0.1        # rad, initial |dpsi| bound
    init_speed: tuple = (15.0, 20.0)  # m/s range
    lane_change_step: int = 250      # lc: step at which the target lane flips
    srd_speed: float = 12.0          # oa: surrounding vehicle speed, m/s
    srd_gap: float = 50.0            # oa: initial arc distance ahead, m
    veh_length: float = 4.7          # m, collision box length
    veh_width: float = 1.8           # m, collision box width
    trigger_min: float = 20.0        # m, minimum avoidance trigger distance
    trigger_headway: float = 6.0     # s-ish scale on closing speed
    revert_margin: float = 10.0      # m past the obstacle before reverting

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}, expected one of {TASKS}")
        if self.eta <= 0.0:
            raise ValueError("eta must be positive")
        if self.lane_width <= 0.0:
            raise ValueError("lane_width must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.lookahead <= 0.0:
            raise ValueError("lookahead must be positive")
        if self.deviation_limit <= 0.0:
            raise ValueError("deviation_limit must be positive")
        if not (self.init_speed[0] > dynamics.VX_FLOOR
                and self.init_speed[1] >= self.init_speed[0]):
            raise ValueError("init_speed range invalid")

    @property
    def lanes(self) -> int:
        if self.lane_count:
            return self.lane_count
        return 1 if self.task == "lk" else 2

    def lane_offsets(self) -> np.ndarray:
        return np.arange(self.lanes, dtype=np.float64) * self.lane_width


class TrackingErrors(NamedTuple):
    """Lane/reference-relative errors of one vehicle state."""

    offset: float           # signed lateral offset at the CG, m
    heading: float          # velocity-heading error at the CG, rad
    offset_ahead: float     # signed lateral offset at the preview point, m
    heading_ahead: float    # velocity-heading error at the preview point, rad
    curvature_ahead: float  # reference curvature at the preview point, 1/m


class Observation(NamedTuple):
    ego: np.ndarray      # (4,) vx, vy, yaw_rate, steer
    lanes: np.ndarray    # (n_lanes, 4) offset, heading, offset_ahead, heading_ahead
    srd: np.ndarray      # (3,) speed, gap_long, gap_lat; zeros when absent
    i_star: int


class StepOutcome(NamedTuple):
    obs: Observation
    reward: float
    done: bool
    cause: str


@njit
def _lane_errors_single(s, amp, om, off, d_s, out):
    px = s[IX]
    py = s[IY]
    sx = sine_project(px, py, amp, om, off)
    ref_y = sine_y(sx, amp, om, off)
    dx = px - sx
    dy_ = py - ref_y
    if dx * dx + dy_ * dy_ > PROJECTION_CUTOFF * PROJECTION_CUTOFF:
        raise ProjectionError("state too far from lane for projection")
    ref_psi = sine_heading(sx, amp, om)
    offset = -math.sin(ref_psi) * dx + math.cos(ref_psi) * dy_

    beta = math.atan(s[IVY] / s[IVX])
    psi_v = s[IPSI] + beta
    heading = wrap_angle(psi_v - ref_psi)

    ax = sine_advance(sx, d_s, amp, om)
    ay = sine_y(ax, amp, om, off)
    apsi = sine_heading(ax, amp, om)
    lx = px + d_s * math.cos(psi_v)
    ly = py + d_s * math.sin(psi_v)
    offset_ahead = -math.sin(apsi) * (lx - ax) + math.cos(apsi) * (ly - ay)

    beta_s = math.atan((s[IVY] + d_s * s[IWZ]) / s[IVX])
    heading_ahead = wrap_angle(s[IPSI] + beta_s - apsi)

    out[0] = offset
    out[1] = heading
    out[2] = offset_ahead
    out[3] = heading_ahead
    out[4] = sine_curvature(ax, amp, om)
    return out


@njit
def _all_lane_errors(s, amp, om, offsets, d_s, out):
    for i in range(len(offsets)):
        _lane_errors_single(s, amp, om, offsets[i], d_s, out[i])
    return out


@njit
def _traj_errors(s, xs, ys, psis, d_s, out):
    px = s[IX]
    py = s[IY]
    i, u, d2 = polyline_project(px, py, xs, ys)
    if d2 > PROJECTION_CUTOFF * PROJECTION_CUTOFF:
        raise ProjectionError("state too far from reference for projection")
    rx, ry = polyline_point(xs, ys, i, u)
    ref_psi = polyline_heading(psis, i, u)
    offset = -math.sin(ref_psi) * (px - rx) + math.cos(ref_psi) * (py - ry)

    beta = math.atan(s[IVY] / s[IVX])
    psi_v = s[IPSI] + beta
    heading = wrap_angle(psi_v - ref_psi)

    ai, au = polyline_advance(xs, ys, i, u, d_s)
    ax, ay = polyline_point(xs, ys, ai, au)
    apsi = polyline_heading(psis, ai, au)
    lx = px + d_s * math.cos(psi_v)
    ly = py + d_s * math.sin(psi_v)
    offset_ahead = -math.sin(apsi) * (lx - ax) + math.cos(apsi) * (ly - ay)

    beta_s = math.atan((s[IVY] + d_s * s[IWZ]) / s[IVX])
    heading_ahead = wrap_angle(s[IPSI] + beta_s - apsi)

    # Curvature from the circle through three reference samples around the
    # preview point (falls back to the ends near the boundary).
    c = ai + 1
    if c < 1:
        c = 1
    if c > len(xs) - 2:
        c = len(xs) - 2
    kappa = circumcircle_curvature(xs[c - 1], ys[c - 1], xs[c], ys[c],
                                   xs[c + 1], ys[c + 1])

    out[0] = offset
    out[1] = heading
    out[2] = offset_ahead
    out[3] = heading_ahead
    out[4] = kappa
    return out


@njit
def _lateral_offset(px, py, amp, om, off):
    sx = sine_project(px, py, amp, om, off)
    ref_psi = sine_heading(sx, amp, om)
    return (-math.sin(ref_psi) * (px - sx)
            + math.cos(ref_psi) * (py - sine_y(sx, amp, om, off)))


@njit
def _tracking_reward(speed, heading_err, offset, eta):
    along = speed * math.cos(heading_err)
    across = speed * math.sin(heading_err)
    return along - abs(across) - eta * offset * offset


@njit
def _obstacle_rule(i_star, ego_vx, srd_lane, srd_speed, gap_long, n_lanes,
                   trigger_min, trigger_headway, revert_margin):
    """Rule-based lane retargeting around a slower same-lane vehicle."""
    if srd_lane == i_star:
        trigger = trigger_min
        closing = trigger_headway * (ego_vx - srd_speed)
        if closing > trigger:
            trigger = closing
        if 0.0 < gap_long < trigger:
            if i_star + 1 < n_lanes:
                return i_star + 1
            return i_star - 1
    elif gap_long < -revert_margin:
        return srd_lane
    return i_star


def obstacle_detection(i_star: int, ego_vx: float, srd_lane: int,
                       srd_speed: float, gap_long: float, lane_count: int,
                       cfg: ScenarioConfig) -> int:
    """Intended-lane update for the obstacle avoidance task.

    Switches to the adjacent lane when the obstacle shares the intended lane
    and sits inside the closing-speed-dependent trigger distance; reverts to
    the obstacle's lane only once it is revert_margin behind.
    """
    return int(_obstacle_rule(i_star, ego_vx, srd_lane, srd_speed, gap_long,
                              lane_count, cfg.trigger_min, cfg.trigger_headway,
                              cfg.revert_margin))


def lane_errors(state, lane_offset: float, cfg: ScenarioConfig) -> TrackingErrors:
    """TrackingErrors of a state against one sinusoidal lane centreline."""
    s = state.as_array() if isinstance(state, VehicleState) else np.asarray(state, dtype=np.float64)
    out = np.empty(5)
    _lane_errors_single(s, cfg.lane_amplitude, cfg.lane_wavenumber,
                        lane_offset, cfg.lookahead, out)
    return TrackingErrors(*out)


def trajectory_errors(state, xs, ys, psis, lookahead: float) -> TrackingErrors:
    """TrackingErrors of a state against a sampled reference polyline."""
    s = state.as_array() if isinstance(state, VehicleState) else np.asarray(state, dtype=np.float64)
    out = np.empty(5)
    _traj_errors(s, np.ascontiguousarray(xs, dtype=np.float64),
                 np.ascontiguousarray(ys, dtype=np.float64),
                 np.ascontiguousarray(psis, dtype=np.float64),
                 float(lookahead), out)
    return TrackingErrors(*out)


def step_reward(speed: float, errors: TrackingErrors, eta: float) -> float:
    """Progress-minus-error reward for one step against the intended lane."""
    return float(_tracking_reward(speed, errors.heading, errors.offset, eta))


def normalize_action(ax: float, ddelta: float, params: VehicleParams) -> np.ndarray:
    return np.array([ax / params.ax_max, ddelta / params.ddelta_max])


def denormalize_action(action, params: VehicleParams) -> tuple[float, float]:
    a = min(1.0, max(-1.0, float(action[0])))
    d = min(1.0, max(-1.0, float(action[1])))
    return a * params.ax_max, d * params.ddelta_max


class PlannerSnapshot(NamedTuple):
    """Everything a planner may know about the world: kinematic observables
    and task state, never the target vehicle's physical parameters."""

    anchor_x: float      # projection abscissa on the intended lane
    offset: float        # lane-relative dy at the CG
    heading: float       # lane-relative velocity-heading error
    vx: float
    vy: float
    yaw_rate: float
    steer: float
    i_star: int
    step_count: int
    srd_x: float         # obstacle abscissa (0 when absent)
    srd_speed: float
    srd_lane: int        # -1 when absent


class DrivingTask:
    """One episodic task instance bound to a (possibly perturbed) vehicle."""

    def __init__(self, cfg: ScenarioConfig, params: VehicleParams,
                 side_force: float = 0.0):
        self.cfg = cfg
        self.params = params
        self.side_force = float(side_force)
        self._p = params.as_array()
        self._offsets = cfg.lane_offsets()
        self._state = np.zeros(7)
        self._errs = np.zeros((cfg.lanes, 5))
        self.i_star = 0
        self.step_count = 0
        self._srd_x = 0.0
        self._srd_lane = 0 if cfg.task == "oa" else -1
        self._done = True

    # -- helpers ----------------------------------------------------------

    @property
    def state(self) -> VehicleState:
        return VehicleState.from_array(self._state)

    @property
    def has_srd(self) -> bool:
        return self._srd_lane >= 0

    def srd_pose(self) -> tuple[float, float, float]:
        """Obstacle (x, y, heading) in the ground frame."""
        cfg = self.cfg
        x = self._srd_x
        y = sine_y(x, cfg.lane_amplitude, cfg.lane_wavenumber,
                   self._offsets[self._srd_lane])
        psi = sine_heading(x, cfg.lane_amplitude, cfg.lane_wavenumber)
        return x, y, psi

    def _srd_gaps(self) -> tuple[float, float]:
        """Arc-length and lateral gap from ego to the obstacle."""
        cfg = self.cfg
        amp, om = cfg.lane_amplitude, cfg.lane_wavenumber
        ego_sx = sine_project(self._state[IX], self._state[IY], amp, om,
                              self._offsets[self.i_star])
        gap_long = _sine_arclen(ego_sx, self._srd_x, amp, om)
        lat_ego = self._errs[self.i_star, 0]
        lat_srd = _lateral_offset(*self.srd_pose()[:2], amp, om,
                                  self._offsets[self.i_star])
        return gap_long, lat_srd - lat_ego

    def errors(self, lane: int | None = None) -> TrackingErrors:
        idx = self.i_star if lane is None else lane
        return TrackingErrors(*self._errs[idx])

    def _refresh_errors(self):
        cfg = self.cfg
        _all_lane_errors(self._state, cfg.lane_amplitude, cfg.lane_wavenumber,
                         self._offsets, cfg.lookahead, self._errs)

    def observe(self) -> Observation:
        ego = np.array([self._state[IVX], self._state[IVY],
                        self._state[IWZ], self._state[ISTEER]])
        if self.has_srd:
            gap_long, gap_lat = self._srd_gaps()
            srd = np.array([self.cfg.srd_speed, gap_long, gap_lat])
        else:
            srd = np.zeros(3)
        return Observation(ego, self._errs[:, :4].copy(), srd, self.i_star)

    def planner_snapshot(self) -> PlannerSnapshot:
        cfg = self.cfg
        anchor = sine_project(self._state[IX], self._state[IY],
                              cfg.lane_amplitude, cfg.lane_wavenumber,
                              self._offsets[self.i_star])
        return PlannerSnapshot(
            anchor_x=float(anchor),
            offset=float(self._errs[self.i_star, 0]),
            heading=float(self._errs[self.i_star, 1]),
            vx=float(self._state[IVX]),
            vy=float(self._state[IVY]),
            yaw_rate=float(self._state[IWZ]),
            steer=float(self._state[ISTEER]),
            i_star=self.i_star,
            step_count=self.step_count,
            srd_x=float(self._srd_x),
            srd_speed=self.cfg.srd_speed if self.has_srd else 0.0,
            srd_lane=self._srd_lane,
        )

    # -- episode API -------------------------------------------------------

    def reset(self, rng: np.random.Generator | None = None,
              init: dict | None = None) -> Observation:
        cfg = self.cfg
        if rng is None:
            dy, dpsi = 0.0, 0.0
            vx = 0.5 * (cfg.init_speed[0] + cfg.init_speed[1])
        else:
            dy = rng.uniform(-cfg.init_offset, cfg.init_offset)
            dpsi = rng.uniform(-cfg.init_heading, cfg.init_heading)
            vx = rng.uniform(cfg.init_speed[0], cfg.init_speed[1])
        if init:
            dy = init.get("offset", dy)
            dpsi = init.get("heading", dpsi)
            vx = init.get("vx", vx)

        amp, om = cfg.lane_amplitude, cfg.lane_wavenumber
        ref_psi = sine_heading(0.0, amp, om)
        ref_y = sine_y(0.0, amp, om, self._offsets[0])
        self._state[:] = 0.0
        self._state[IVX] = vx
        self._state[IX] = -math.sin(ref_psi) * dy
        self._state[IY] = ref_y + math.cos(ref_psi) * dy
        self._state[IPSI] = ref_psi + dpsi  # vy = 0, so velocity heading = yaw

        self.i_star = 0
        self.step_count = 0
        self._done = False
        if cfg.task == "oa":
            self._srd_lane = 0
            ego_sx = sine_project(self._state[IX], self._state[IY], amp, om,
                                  self._offsets[0])
            self._srd_x = sine_advance(ego_sx, cfg.srd_gap, amp, om)
        self._refresh_errors()
        return self.observe()

    def _update_i_star(self):
        cfg = self.cfg
        if cfg.task == "lc":
            if cfg.lanes > 1 and self.step_count >= cfg.lane_change_step:
                self.i_star = 1
        elif cfg.task == "oa":
            gap_long, _ = self._srd_gaps()
            self.i_star = obstacle_detection(
                self.i_star, self._state[IVX], self._srd_lane, cfg.srd_speed,
                gap_long, cfg.lanes, cfg)

    def step(self, action) -> StepOutcome:
        if self._done:
            raise RuntimeError("step() after episode end; call reset()")
        cfg = self.cfg
        ax, dd = denormalize_action(action, self.params)
        out = np.empty(7)
        dynamics._step(self._state, ax, dd, self._p, self.side_force, out)
        self._state[:] = out

        if self.has_srd:
            self._srd_x = sine_advance(self._srd_x, cfg.srd_speed * self.params.dt,
                                       cfg.lane_amplitude, cfg.lane_wavenumber)
        self.step_count += 1
        self._refresh_errors()
        self._update_i_star()

        err = self.errors()
        speed = math.hypot(self._state[IVX], self._state[IVY])
        reward = step_reward(speed, err, cfg.eta)

        cause = CAUSE_NONE
        if self.has_srd:
            gap_long, gap_lat = self._srd_gaps()
            if abs(gap_long) < cfg.veh_length and abs(gap_lat) < cfg.veh_width:
                cause = CAUSE_COLLISION
                reward += cfg.r_collision
        if cause == CAUSE_NONE:
            if np.min(np.abs(self._errs[:, 0])) > cfg.deviation_limit:
                cause = CAUSE_DEVIATION
                reward += cfg.r_deviation
        if cause == CAUSE_NONE and self.step_count >= cfg.horizon:
            cause = CAUSE_HORIZON

        self._done = cause != CAUSE_NONE
        return StepOutcome(self.observe(), float(reward), self._done, cause)


def make_scenario(task: str, **overrides) -> ScenarioConfig:
    return ScenarioConfig(task=task, **overrides)
