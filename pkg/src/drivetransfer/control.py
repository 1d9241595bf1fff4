"""Discrete-time lateral tracking controller with a disturbance observer.

The stack: a constant-speed linear bicycle model, a look-ahead output map,
forward-Euler discretization to a steering-to-preview-heading transfer
function, proportional feedback on a mixed preview error, and an inverse-model
disturbance observer that cancels the offset left behind by plant mismatch.
The nonlinear plant takes a steering rate, so the commanded angle is tracked
through a rate-limited bridge; inside the sample-time limit that bridge acts
as a one-step delay, which is where the second delay of the nominal plant
chain comes from (the first is the strictly proper vehicle response).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import GRAVITY, VX_FLOOR, DegenerateSpeedError, VehicleParams
from .ztf import DiscreteTransferFunction, TfFilter, _polyadd

DESIGN_SPEED = 20.0
DEFAULT_LOOKAHEAD = 15.0
DEFAULT_GAIN_RATIO = 10.0
DEFAULT_Q_CUTOFF_HZ = 1.0
DEFAULT_SPEED_GAIN = 1.0

# Pinned by the feedback_gains sweep over vx in {10, 15, 20, 25} m/s with the
# default grid; largest gain keeping every pole radius below 1 - 1e-6.  The
# grid tops out at 0.04: gains of 0.05 and up, while stable on the nominal
# plant, lose the loop under 20% parameter mismatch at low speed (observer
# fixed at the design speed), which the transfer experiments exercise.
DEFAULT_K_OFFSET = 0.04
DEFAULT_K_HEADING = DEFAULT_GAIN_RATIO * DEFAULT_K_OFFSET

GAIN_SWEEP_SPEEDS = (10.0, 15.0, 20.0, 25.0)
STABILITY_MARGIN = 1e-6


class DesignError(ValueError):
    """A controller synthesis step produced an unusable result."""


def cornering_stiffness(params: VehicleParams, axle: str) -> float:
    """Small-slip tire slope divided by friction, per axle.

    The linear model multiplies the stiffness by friction again, so the
    nonlinear tire slope B*C*peak is recovered exactly and both models agree
    at zero slip.  The front/rear load arms follow the tire-curve convention
    used by the nonlinear model (front carries dist_front).
    """
    if axle == "front":
        arm = params.dist_front
    elif axle == "rear":
        arm = params.dist_rear
    else:
        raise ValueError(f"unknown axle {axle!r}")
    peak = params.mass * GRAVITY * arm / params.wheelbase
    return params.tire_stiffness * params.tire_shape * peak


@dataclass(frozen=True)
class LinearLateralModel:
    """Continuous lateral dynamics x=[vy, yaw, yaw_rate] with preview output."""

    a_mat: np.ndarray
    b_vec: np.ndarray
    c_vec: np.ndarray
    vx: float
    lookahead: float
    dt: float
    params: VehicleParams


def linear_model(params: VehicleParams | None = None, vx: float = DESIGN_SPEED,
                 lookahead: float = DEFAULT_LOOKAHEAD,
                 dt: float | None = None) -> LinearLateralModel:
    if params is None:
        params = VehicleParams()
    if vx < VX_FLOOR:
        raise DegenerateSpeedError(f"design speed {vx} below floor {VX_FLOOR}")
    cf = params.friction * cornering_stiffness(params, "front")
    cr = params.friction * cornering_stiffness(params, "rear")
    m, iz = params.mass, params.inertia_z
    a, b = params.dist_front, params.dist_rear
    a_mat = np.array([
        [-(cf + cr) / (m * vx), 0.0, -vx - (cf * a - cr * b) / (m * vx)],
        [0.0, 0.0, 1.0],
        [(-cf * a + cr * b) / (iz * vx), 0.0, -(cf * a**2 + cr * b**2) / (iz * vx)],
    ])
    b_vec = np.array([cf / m, 0.0, cf * a / iz])
    c_vec = np.array([1.0 / vx, 1.0, lookahead / vx])
    return LinearLateralModel(a_mat, b_vec, c_vec, float(vx), float(lookahead),
                              float(dt if dt is not None else params.dt), params)


def _resolvent_tf(a_mat: np.ndarray, b_vec: np.ndarray, c_vec: np.ndarray,
                  dt: float) -> DiscreteTransferFunction:
    """C (zI - A)^-1 B as delay-operator coefficients (Faddeev-LeVerrier)."""
    n = a_mat.shape[0]
    eye = np.eye(n)
    t = eye.copy()
    den = np.zeros(n + 1)
    den[0] = 1.0
    num = np.zeros(n)
    for k in range(n):
        num[k] = c_vec @ t @ b_vec
        m = a_mat @ t
        ck = -np.trace(m) / (k + 1)
        den[k + 1] = ck
        t = m + ck * eye
    scale = max(np.max(np.abs(a_mat)), 1.0) ** n
    if np.max(np.abs(t)) > 1e-9 * scale:
        raise DesignError("characteristic polynomial recursion failed")
    return DiscreteTransferFunction(np.concatenate([[0.0], num]), den, dt)


def discretize(model: LinearLateralModel) -> DiscreteTransferFunction:
    """Forward-Euler pulse transfer function from steering angle to preview heading."""
    ad = np.eye(len(model.a_mat)) + model.dt * model.a_mat
    bd = model.dt * model.b_vec
    return _resolvent_tf(ad, bd, model.c_vec, model.dt)


def vehicle_tf(params: VehicleParams | None = None, vx: float = DESIGN_SPEED,
               lookahead: float = DEFAULT_LOOKAHEAD,
               dt: float | None = None) -> DiscreteTransferFunction:
    """Plant seen by the controller: rate-bridge delay times the lateral response."""
    model = linear_model(params, vx, lookahead, dt)
    return DiscreteTransferFunction.delay(1, model.dt) * discretize(model)


def error_mix_tf(ratio: float, vx: float, dt: float) -> DiscreteTransferFunction:
    """Maps preview heading error to the composite error ratio*dpsi + dy.

    The offset accumulates from the heading error through a forward-Euler
    integrator at ground speed, so the composite is a single rational block.
    """
    return DiscreteTransferFunction([ratio, vx * dt - ratio], [1.0, -1.0], dt)


def butterworth_lowpass(cutoff_hz: float, dt: float) -> DiscreteTransferFunction:
    """Second-order Butterworth low-pass, bilinear transform, unit DC gain."""
    nyquist = 0.5 / dt
    if not 0.0 < cutoff_hz < nyquist:
        raise DesignError(f"cutoff {cutoff_hz} Hz outside (0, {nyquist}) Hz")
    wa = 2.0 * math.pi * cutoff_hz
    k = 2.0 / dt
    num = wa * wa * np.array([1.0, 2.0, 1.0])
    den = np.array([k * k + math.sqrt(2.0) * wa * k + wa * wa,
                    2.0 * (wa * wa - k * k),
                    k * k - math.sqrt(2.0) * wa * k + wa * wa])
    q = DiscreteTransferFunction(num, den, dt)
    # Nudge one numerator tap so the coefficient sums match exactly in
    # floating point; downstream DC-rejection identities divide by values
    # this small, so "close to one" is not good enough.
    for _ in range(8):
        diff = q.den.sum() - q.num.sum()
        if diff == 0.0:
            break
        q.num[1] += diff
    else:
        raise DesignError("could not pin the low-pass DC gain to one")
    return q


def _closed_loop_matrix(model: LinearLateralModel, ratio: float,
                        k_offset: float) -> np.ndarray:
    """State matrix of the proportional loop: plant, rate-bridge delay, offset
    accumulator.  Independent of the polynomial route used for pole radii."""
    ad = np.eye(3) + model.dt * model.a_mat
    bd = model.dt * model.b_vec
    c = model.c_vec
    k = model.vx * model.dt
    a_cl = np.zeros((5, 5))
    a_cl[:3, :3] = ad
    a_cl[:3, 3] = bd
    a_cl[3, :3] = -k_offset * ratio * c
    a_cl[3, 4] = -k_offset
    a_cl[4, :3] = k * c
    a_cl[4, 4] = 1.0
    return a_cl


def proportional_loop_radius(params: VehicleParams, vx: float, ratio: float,
                             k_offset: float, lookahead: float,
                             dt: float) -> float:
    """Worst pole radius of the proportional closed loop, checked two ways."""
    model = linear_model(params, vx, lookahead, dt)
    gnv = DiscreteTransferFunction.delay(1, model.dt) * discretize(model)
    mix = error_mix_tf(ratio, vx, model.dt)
    closed = (k_offset * mix * gnv).feedback()
    radius_poly = closed.max_pole_radius()
    radius_eig = float(np.max(np.abs(
        np.linalg.eigvals(_closed_loop_matrix(model, ratio, k_offset)))))
    if abs(radius_poly - radius_eig) > 1e-6:
        raise DesignError(
            f"pole radius disagreement: roots {radius_poly} vs eig {radius_eig}")
    return max(radius_poly, radius_eig)


@dataclass(frozen=True)
class GainSweep:
    k_heading: float
    k_offset: float
    ratio: float
    rows: tuple  # (k_offset, vx, pole_radius) per grid point


def feedback_gains(params: VehicleParams | None = None,
                   ratio: float = DEFAULT_GAIN_RATIO,
                   k_offset_grid=None,
                   vx_grid=GAIN_SWEEP_SPEEDS,
                   lookahead: float = DEFAULT_LOOKAHEAD,
                   dt: float | None = None,
                   margin: float = STABILITY_MARGIN) -> GainSweep:
    """Pick the largest offset gain stable across the speed range.

    Larger gain means faster error rejection, so the sweep walks the grid and
    keeps the biggest entry whose closed-loop poles stay strictly inside the
    unit circle (radius < 1 - margin) at every speed.
    """
    if params is None:
        params = VehicleParams()
    if dt is None:
        dt = params.dt
    if k_offset_grid is None:
        k_offset_grid = np.round(np.arange(0.005, 0.0401, 0.005), 6)
    k_offset_grid = np.sort(np.asarray(k_offset_grid, dtype=np.float64))
    if len(k_offset_grid) == 0 or len(vx_grid) == 0:
        raise DesignError("empty sweep grid")
    rows = []
    best = None
    for k2 in k_offset_grid:
        worst = 0.0
        for vx in vx_grid:
            radius = proportional_loop_radius(params, vx, ratio, float(k2),
                                              lookahead, dt)
            rows.append((float(k2), float(vx), radius))
            worst = max(worst, radius)
        if worst < 1.0 - margin:
            best = float(k2)
    if best is None:
        raise DesignError("no gain on the grid stabilizes every speed")
    return GainSweep(ratio * best, best, ratio, tuple(rows))


@dataclass(frozen=True)
class ControllerDesign:
    """Frozen synthesis output consumed by the runtime controller."""

    params: VehicleParams
    vx: float
    lookahead: float
    dt: float
    k_heading: float
    k_offset: float
    ratio: float
    q_cutoff_hz: float
    use_dob: bool
    lateral: DiscreteTransferFunction        # steering angle -> preview heading
    vehicle: DiscreteTransferFunction        # with the rate-bridge delay
    mix: DiscreteTransferFunction            # preview heading -> composite error
    plant_chain: DiscreteTransferFunction    # vehicle * mix, two-step delay
    plant_chain_advanced: DiscreteTransferFunction
    q: DiscreteTransferFunction
    inverse_filter: DiscreteTransferFunction  # q / plant_chain_advanced
    delta_limit: float


def design_controller(params: VehicleParams | None = None,
                      vx: float = DESIGN_SPEED,
                      k_heading: float = DEFAULT_K_HEADING,
                      k_offset: float = DEFAULT_K_OFFSET,
                      lookahead: float = DEFAULT_LOOKAHEAD,
                      q_cutoff_hz: float = DEFAULT_Q_CUTOFF_HZ,
                      dob: bool = True,
                      dt: float | None = None) -> ControllerDesign:
    if params is None:
        params = VehicleParams()
    if dt is None:
        dt = params.dt
    if k_offset <= 0.0:
        raise DesignError("offset gain must be positive")
    ratio = k_heading / k_offset
    model = linear_model(params, vx, lookahead, dt)
    lateral = discretize(model)
    vehicle = DiscreteTransferFunction.delay(1, dt) * lateral
    mix = error_mix_tf(ratio, vx, dt)
    chain = vehicle * mix
    delay = chain.delay_steps(rtol=1e-12)
    if delay != 2:
        raise DesignError(
            f"plant chain carries {delay} delay steps, expected exactly 2")
    chain_advanced = chain.shifted(-2)
    q = butterworth_lowpass(q_cutoff_hz, dt)
    inverse_filter = q / chain_advanced
    if not inverse_filter.is_stable():
        raise DesignError(
            "inverse plant filter is unstable: the advanced plant chain has a "
            f"zero of radius {chain_advanced.max_pole_radius():.6f} outside "
            "the unit circle")
    radius = proportional_loop_radius(params, vx, ratio, k_offset, lookahead, dt)
    if radius >= 1.0:
        raise DesignError(f"feedback loop unstable at design speed "
                          f"(pole radius {radius:.6f})")
    return ControllerDesign(params=params, vx=float(vx), lookahead=float(lookahead),
                            dt=float(dt), k_heading=float(k_heading),
                            k_offset=float(k_offset), ratio=float(ratio),
                            q_cutoff_hz=float(q_cutoff_hz), use_dob=bool(dob),
                            lateral=lateral, vehicle=vehicle, mix=mix,
                            plant_chain=chain, plant_chain_advanced=chain_advanced,
                            q=q, inverse_filter=inverse_filter,
                            delta_limit=params.delta_max)


class SteeringController:
    """Stateful tracking law: proportional composite-error feedback plus an
    optional disturbance observer.

    The observer estimate is q/plant_chain_advanced applied to the composite
    error minus q applied to the two-step-delayed issued command; feeding back
    the saturated command keeps the filters honest when the actuator limits.
    """

    def __init__(self, design: ControllerDesign):
        self.design = design
        self.delta_limit = design.delta_limit
        self._f1 = TfFilter(design.inverse_filter)
        self._fq = TfFilter(design.q)
        self._queue = [0.0, 0.0]

    def reset(self):
        self._f1.reset()
        self._fq.reset()
        self._queue = [0.0, 0.0]

    def step(self, offset_ahead: float, heading_ahead: float) -> float:
        d = self.design
        error = d.ratio * heading_ahead + offset_ahead
        command = -d.k_offset * error
        if d.use_dob:
            disturbance = self._f1.step(error) - self._fq.step(self._queue[0])
            command -= disturbance
        command = min(max(command, -self.delta_limit), self.delta_limit)
        if d.use_dob:
            self._queue[0] = self._queue[1]
            self._queue[1] = command
        return command


def steering_rate(delta_cmd: float, steer: float,
                  params: VehicleParams) -> float:
    """Rate-loop input tracking the commanded angle within actuator limits."""
    rate = (delta_cmd - steer) / params.dt
    return min(max(rate, -params.ddelta_max), params.ddelta_max)


def speed_tracking_accel(vx: float, vx_ref: float, vx_ref_next: float,
                         dt: float, gain: float = DEFAULT_SPEED_GAIN) -> float:
    """Feedforward profile slope plus proportional speed correction."""
    return (vx_ref_next - vx_ref) / dt + gain * (vx_ref - vx)


def _scrub_dc_zero(num: np.ndarray) -> None:
    """Zero out the floating-point residue of a structural zero at z=1.

    The adjustment replays the same reverse-order summation evaluate() uses,
    so the scrub targets the value that analysis code will actually see.  The
    tweak is bounded by accumulated rounding (~1e-14 of the coefficient
    scale), far below any behavioral tolerance.
    """
    for _ in range(8):
        acc = 0.0
        for c in num[::-1]:
            acc += c
        if acc == 0.0:
            return
        num[0] -= acc


def sensitivity_tf(design: ControllerDesign,
                   target: DiscreteTransferFunction | None = None,
                   dob: bool = True) -> DiscreteTransferFunction:
    """Closed-loop sensitivity from the reference-induced disturbance to the
    composite error, for a true plant that may differ from the nominal one.

    The mismatched case is assembled as a single polynomial expression over
    the common denominator; naive rational sums would leave the true plant's
    own poles (including its marginal heading integrator) uncancelled in the
    result and misreport them as closed-loop poles.
    """
    gv = design.vehicle if target is None else target
    one = DiscreteTransferFunction.constant(1.0, design.dt)
    loop = design.k_offset * (gv * design.mix)
    if not dob:
        return one / (one + loop)
    delay2 = DiscreteTransferFunction.delay(2, design.dt)
    matched = (len(gv.num) == len(design.vehicle.num)
               and len(gv.den) == len(design.vehicle.den)
               and np.array_equal(gv.num, design.vehicle.num)
               and np.array_equal(gv.den, design.vehicle.den))
    if matched:
        s = (one - delay2 * design.q) / (one + loop)
        _scrub_dc_zero(s.num)
        return s
    nv, dv = gv.num, gv.den
    nn, dn = design.vehicle.num, design.vehicle.den
    nc, dc = design.mix.num, design.mix.den
    nq, dq = design.q.num, design.q.den
    z2 = np.array([0.0, 0.0, 1.0])
    conv = np.convolve
    mismatch_num = _polyadd(conv(nv, dn), -conv(dv, nn))
    den = _polyadd(
        _polyadd(conv(conv(dv, dc), conv(dq, nn)),
                 design.k_offset * conv(conv(nv, nc), conv(dq, nn))),
        conv(conv(z2, nq), conv(mismatch_num, dc)))
    num = conv(_polyadd(dq, -conv(z2, nq)), conv(conv(dv, dc), nn))
    lead = 0
    scale = max(np.max(np.abs(num)), np.max(np.abs(den)))
    while (lead < min(len(num), len(den))
           and abs(num[lead]) < 1e-12 * scale
           and abs(den[lead]) < 1e-12 * scale):
        lead += 1
    s = DiscreteTransferFunction(num[lead:], den[lead:], design.dt)
    _scrub_dc_zero(s.num)
    return s


def linear_loop_response(params: VehicleParams | None = None,
                         vx: float = DESIGN_SPEED,
                         lookahead: float = DEFAULT_LOOKAHEAD,
                         k_heading: float = DEFAULT_K_HEADING,
                         k_offset: float = DEFAULT_K_OFFSET,
                         q_cutoff_hz: float = DEFAULT_Q_CUTOFF_HZ,
                         dob: bool = True,
                         curvature: float = 1e-3,
                         initial_offset: float = 0.0,
                         n_steps: int = 500,
                         dt: float | None = None) -> dict:
    """Simulate the linear preview-tracking loop under a curvature step.

    The reference heading ramps at vx*curvature per second, the preview offset
    integrates the heading error at ground speed, and the plant responds to
    the previous step's command through the rate-bridge delay.
    """
    design = design_controller(params, vx=vx, k_heading=k_heading,
                               k_offset=k_offset, lookahead=lookahead,
                               q_cutoff_hz=q_cutoff_hz, dob=dob, dt=dt)
    controller = SteeringController(design)
    plant = TfFilter(design.lateral)
    dt = design.dt
    offset = float(initial_offset)
    psi_ref = 0.0
    prev_cmd = 0.0
    t = np.arange(n_steps) * dt
    offsets = np.empty(n_steps)
    headings = np.empty(n_steps)
    commands = np.empty(n_steps)
    for k in range(n_steps):
        psi_vs = plant.step(prev_cmd)
        dpsi = psi_vs - psi_ref
        offsets[k] = offset
        headings[k] = dpsi
        command = controller.step(offset, dpsi)
        commands[k] = command
        offset += dt * vx * dpsi
        psi_ref += dt * vx * curvature
        prev_cmd = command
    return {"t": t, "offset": offsets, "heading": headings,
            "command": commands, "design": design}
