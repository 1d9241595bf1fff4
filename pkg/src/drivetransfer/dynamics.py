"""Nonlinear single-track (bicycle) vehicle model with Magic Formula tires.

State is (vx, vy, yaw_rate, x, y, yaw, steer); inputs are longitudinal
acceleration and steering rate.  Integration is explicit Euler at the fixed
model timestep, which is also the control rate of everything built on top.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .accel import njit

GRAVITY = 9.81

# Below this longitudinal speed the slip-angle geometry degenerates
# (atan(vy/vx) blows up); the model refuses to step rather than guess.
VX_FLOOR = 0.5

# State vector layout shared by every kernel in the package.
IVX, IVY, IWZ, IX, IY, IPSI, ISTEER = range(7)

# Parameter vector layout for kernels (see VehicleParams.as_array).
(P_IZ, P_M, P_A, P_B, P_TB, P_TC, P_TE, P_MU,
 P_DELTA_MAX, P_DDELTA_MAX, P_AX_MAX, P_DT) = range(12)


class DegenerateSpeedError(ValueError):
    """Raised when asked to evaluate the model at or below VX_FLOOR."""


@dataclass(frozen=True)
class VehicleParams:
    """Physical parameters of one vehicle.

    Defaults describe the nominal plant every policy is trained on and every
    controller is designed for.  Perturbed instances stand in for the real
    target vehicle.
    """

    inertia_z: float = 3270.0    # yaw inertia, kg m^2
    mass: float = 1800.0         # kg
    dist_front: float = 1.2      # CG to front axle, m
    dist_rear: float = 1.65      # CG to rear axle, m
    tire_stiffness: float = 10.0  # Magic Formula B
    tire_shape: float = 1.9       # Magic Formula C
    tire_curvature: float = 0.97  # Magic Formula E
    friction: float = 1.0         # road friction coefficient
    delta_max: float = 0.573     # steering angle limit, rad
    ddelta_max: float = 0.927    # steering rate limit, rad/s
    ax_max: float = 5.0          # longitudinal acceleration limit, m/s^2
    dt: float = 0.02             # integration/control step, s

    def __post_init__(self):
        for name in ("inertia_z", "mass", "dist_front", "dist_rear",
                     "tire_stiffness", "tire_shape", "friction",
                     "delta_max", "ddelta_max", "ax_max", "dt"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"VehicleParams.{name} must be positive")

    @property
    def wheelbase(self) -> float:
        return self.dist_front + self.dist_rear

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.inertia_z, self.mass, self.dist_front, self.dist_rear,
             self.tire_stiffness, self.tire_shape, self.tire_curvature,
             self.friction, self.delta_max, self.ddelta_max, self.ax_max,
             self.dt],
            dtype=np.float64,
        )

    def scaled(self, **factors: float) -> "VehicleParams":
        """Return a copy with the named fields multiplied by given factors."""
        changes = {}
        for name, factor in factors.items():
            changes[name] = getattr(self, name) * factor
        return replace(self, **changes)


class VehicleState(NamedTuple):
    """Immutable state record (vx, vy, yaw_rate, x, y, yaw, steer)."""

    vx: float = 0.0
    vy: float = 0.0
    yaw_rate: float = 0.0
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0
    steer: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=np.float64)

    @staticmethod
    def from_array(arr) -> "VehicleState":
        return VehicleState(*(float(v) for v in arr))


@njit
def _magic_formula(alpha, peak, b_fac, c_fac, e_fac):
    ba = b_fac * alpha
    return peak * math.sin(c_fac * math.atan(ba - e_fac * (ba - math.atan(ba))))


@njit
def _axle_peaks(p):
    # Load coefficients mu*m*g*L/(a+b).  The front term carries dist_front
    # (not the static weight split); that is the convention of this model
    # family and the linear controller model is derived from the same choice.
    total = p[P_MU] * p[P_M] * GRAVITY / (p[P_A] + p[P_B])
    return total * p[P_A], total * p[P_B]


@njit
def _slip_angles(vx, vy, wz, steer, dist_f, dist_r):
    front = steer - math.atan((vy + dist_f * wz) / vx)
    rear = -math.atan((vy - dist_r * wz) / vx)
    return front, rear


@njit
def _derivs(s, ax, ddelta, p, fy_side, out):
    vx = s[IVX]
    if vx <= VX_FLOOR:
        raise DegenerateSpeedError("longitudinal speed at or below VX_FLOOR")
    vy = s[IVY]
    wz = s[IWZ]
    psi = s[IPSI]
    steer = s[ISTEER]

    alpha_f, alpha_r = _slip_angles(vx, vy, wz, steer, p[P_A], p[P_B])
    peak_f, peak_r = _axle_peaks(p)
    f_front = _magic_formula(alpha_f, peak_f, p[P_TB], p[P_TC], p[P_TE])
    f_rear = _magic_formula(alpha_r, peak_r, p[P_TB], p[P_TC], p[P_TE])

    # External side force acts at the CG in the ground frame: no yaw moment,
    # resolved into body axes.
    fx_body = -math.sin(psi) * fy_side
    fy_body = math.cos(psi) * fy_side

    out[IVX] = ax + fx_body / p[P_M]
    out[IVY] = -vx * wz + (f_front * math.cos(steer) + f_rear + fy_body) / p[P_M]
    out[IWZ] = (p[P_A] * f_front * math.cos(steer) - p[P_B] * f_rear) / p[P_IZ]
    out[IX] = vx * math.cos(psi) - vy * math.sin(psi)
    out[IY] = vx * math.sin(psi) + vy * math.cos(psi)
    out[IPSI] = wz
    out[ISTEER] = ddelta
    return out


@njit
def _clamp(value, limit):
    if value > limit:
        return limit
    if value < -limit:
        return -limit
    return value


@njit
def _step(s, ax, ddelta, p, fy_side, out):
    ax = _clamp(ax, p[P_AX_MAX])
    ddelta = _clamp(ddelta, p[P_DDELTA_MAX])
    deriv = np.empty(7)
    _derivs(s, ax, ddelta, p, fy_side, deriv)
    dt = p[P_DT]
    for i in range(7):
        out[i] = s[i] + dt * deriv[i]
    out[ISTEER] = _clamp(out[ISTEER], p[P_DELTA_MAX])
    return out


def tire_force(alpha: float, params: VehicleParams, axle: str = "front") -> float:
    """Lateral Magic Formula force for one axle at slip angle alpha (rad)."""
    p = params.as_array()
    peak_f, peak_r = _axle_peaks(p)
    if axle == "front":
        peak = peak_f
    elif axle == "rear":
        peak = peak_r
    else:
        raise ValueError("axle must be 'front' or 'rear'")
    return _magic_formula(float(alpha), peak, params.tire_stiffness,
                          params.tire_shape, params.tire_curvature)


def slip_angles(state: VehicleState, params: VehicleParams) -> tuple[float, float]:
    """Front and rear slip angles; raises DegenerateSpeedError near rest."""
    if state.vx <= VX_FLOOR:
        raise DegenerateSpeedError(
            f"slip angles undefined at vx={state.vx:.3f} <= {VX_FLOOR}")
    return _slip_angles(state.vx, state.vy, state.yaw_rate, state.steer,
                        params.dist_front, params.dist_rear)


def derivatives(state: VehicleState, action, params: VehicleParams,
                side_force: float = 0.0) -> np.ndarray:
    """Raw state derivative (no input clamping), mostly for analysis."""
    out = np.empty(7)
    return _derivs(state.as_array(), float(action[0]), float(action[1]),
                   params.as_array(), float(side_force), out)


def step(state: VehicleState, action, params: VehicleParams,
         side_force: float = 0.0) -> VehicleState:
    """One Euler step.  Clamps the action, integrates, clamps the steer angle."""
    out = np.empty(7)
    _step(state.as_array(), float(action[0]), float(action[1]),
          params.as_array(), float(side_force), out)
    return VehicleState.from_array(out)
