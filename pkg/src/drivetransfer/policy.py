"""Driving policies and the imaginary-rollout trajectory planner.

The learned part is a single lane-tracking module: a small tanh network
mapping eight observables (four ego states plus four tracking errors of the
intended lane) to a normalized two-channel action.  Task-level policies are
assemblies of that module with rule modules: lane keeping feeds the single
lane straight through, lane changing routes the scheduled target lane through
lane selection, and obstacle avoidance additionally maintains the intended
lane itself from the surrounding-vehicle observation.

The planner turns any such policy into a trajectory source: it reconstructs
the vehicle's pose from lane-relative observables, copies the velocities onto
an imaginary vehicle with the nominal parameters, and rolls the deterministic
policy forward.  The recorded (t, X, Y, psi_v, vx) series is the reference a
downstream tracking controller follows on the real (possibly different)
vehicle.  The planner never sees that vehicle's parameters; everything it
knows arrives through the kinematic snapshot.
"""
from __future__ import annotations

import math
import operator
import os
import struct
from typing import NamedTuple

import numpy as np

from .accel import njit
from . import dynamics
from .dynamics import (ISTEER, IVX, IVY, IWZ, IX, IY, IPSI,
                       P_AX_MAX, P_DDELTA_MAX, P_DT, VX_FLOOR, VehicleParams)
from .geometry import sine_advance, sine_heading, sine_project, sine_y, _sine_arclen
from .scenario import (TASKS, Observation, PlannerSnapshot, ScenarioConfig,
                       _lane_errors_single, _obstacle_rule, obstacle_detection)

# Rough magnitudes of the eight network inputs (vx, vy, yaw rate, steer,
# offset, heading, previewed offset, previewed heading).  Dividing by these
# keeps every feature O(1) so one learning rate suits all weights.
DEFAULT_OBS_SCALE = np.array([30.0, 5.0, 1.0, 0.6, 3.0, 0.5, 5.0, 0.5])

OBS_DIM = 8
ACT_DIM = 2

# The output layer starts two orders smaller than Xavier so the initial
# action mean sits near zero and exploration begins from gentle inputs.
FINAL_LAYER_SCALE = 0.01


class Mlp:
    """Fully connected network with tanh hidden layers and a linear output."""

    def __init__(self, sizes, rng=None, final_scale: float = 1.0):
        sizes = tuple(int(n) for n in sizes)
        if len(sizes) < 2 or any(n < 1 for n in sizes):
            raise ValueError("sizes must name an input and at least one layer")
        if rng is None:
            rng = np.random.default_rng()
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        last = len(sizes) - 2
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            limit = math.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-limit, limit, size=(n_out, n_in))
            if i == last:
                w *= final_scale
            self.weights.append(np.ascontiguousarray(w))
            self.biases.append(np.zeros(n_out))

    @classmethod
    def from_layers(cls, weights, biases) -> "Mlp":
        """Wrap existing (n_out, n_in) weight and (n_out,) bias arrays."""
        if len(weights) != len(biases) or not weights:
            raise ValueError("need one bias per weight matrix")
        net = cls.__new__(cls)
        net.weights = [np.ascontiguousarray(w, dtype=np.float64) for w in weights]
        net.biases = [np.ascontiguousarray(b, dtype=np.float64) for b in biases]
        for w, b in zip(net.weights, net.biases):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ValueError("layer shapes inconsistent")
        for prev, nxt in zip(net.weights[:-1], net.weights[1:]):
            if nxt.shape[1] != prev.shape[0]:
                raise ValueError("layer shapes inconsistent")
        return net

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def forward(self, x) -> np.ndarray:
        """Evaluate on one input vector or a (batch, dim) stack of them."""
        h = np.asarray(x, dtype=np.float64)
        if h.shape[-1] != self.sizes[0]:
            raise ValueError(
                f"input dimension {h.shape[-1]}, network expects {self.sizes[0]}")
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            if i != last:
                h = np.tanh(h)
        return h

    def get_flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def set_flat(self, vec) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {vec.shape}")
        k = 0
        for w, b in zip(self.weights, self.biases):
            w[...] = vec[k:k + w.size].reshape(w.shape)
            k += w.size
            b[...] = vec[k:k + b.size]
            k += b.size


def _check_obs_scale(obs_scale, obs_dim: int) -> np.ndarray:
    if obs_scale is None:
        scale = np.ones(obs_dim)
    else:
        scale = np.ascontiguousarray(obs_scale, dtype=np.float64).copy()
    if scale.shape != (obs_dim,):
        raise ValueError(f"obs_scale must have shape ({obs_dim},)")
    if np.any(scale <= 0.0):
        raise ValueError("obs_scale entries must be positive")
    return scale


class GaussianPolicy:
    """Tanh-squashed Gaussian action head over an Mlp trunk.

    The mean is tanh of the network output; the log standard deviation is a
    learned state-independent vector.  Stochastic draws are clipped back into
    [-1, 1] and log-densities are evaluated at the clipped point, matching
    how stored rollout actions are scored during updates.
    """

    def __init__(self, obs_dim: int = OBS_DIM, act_dim: int = ACT_DIM,
                 hidden: int = 64, init_std: float = 0.5,
                 obs_scale=None, rng=None):
        if init_std <= 0.0:
            raise ValueError("init_std must be positive")
        self.net = Mlp((obs_dim, hidden, hidden, act_dim), rng=rng,
                       final_scale=FINAL_LAYER_SCALE)
        self.log_std = np.full(act_dim, math.log(init_std))
        self.obs_scale = _check_obs_scale(obs_scale, obs_dim)

    @property
    def obs_dim(self) -> int:
        return self.net.sizes[0]

    @property
    def act_dim(self) -> int:
        return self.net.sizes[-1]

    def scaled_obs(self, obs) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        if obs.shape[-1] != self.obs_dim:
            raise ValueError(
                f"observation dimension {obs.shape[-1]}, expected {self.obs_dim}")
        return obs / self.obs_scale

    def mean(self, obs) -> np.ndarray:
        return np.tanh(self.net.forward(self.scaled_obs(obs)))

    def act(self, obs, stochastic: bool = False, rng=None) -> np.ndarray:
        m = self.mean(obs)
        if not stochastic:
            return np.clip(m, -1.0, 1.0)
        if rng is None:
            raise ValueError("stochastic sampling requires an rng")
        draw = m + np.exp(self.log_std) * rng.standard_normal(m.shape)
        return np.clip(draw, -1.0, 1.0)

    def log_prob(self, obs, action) -> np.ndarray:
        action = np.asarray(action, dtype=np.float64)
        m = self.mean(obs)
        z = (action - m) / np.exp(self.log_std)
        return (-0.5 * np.sum(z * z, axis=-1) - np.sum(self.log_std)
                - 0.5 * self.act_dim * math.log(2.0 * math.pi))

    @property
    def n_params(self) -> int:
        return self.net.n_params + self.log_std.size

    def get_flat(self) -> np.ndarray:
        return np.concatenate([self.net.get_flat(), self.log_std])

    def set_flat(self, vec) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {vec.shape}")
        self.net.set_flat(vec[:self.net.n_params])
        self.log_std[...] = vec[self.net.n_params:]


class ValueNet:
    """State-value regressor sharing the policy's input convention.

    Returns in this environment run to the thousands, so the net predicts
    value / output_scale and multiplies back on the way out; regression on
    the scaled target keeps gradients near unit size.
    """

    def __init__(self, obs_dim: int = OBS_DIM, hidden: int = 64,
                 obs_scale=None, rng=None, output_scale: float = 1.0):
        if output_scale <= 0.0:
            raise ValueError("output_scale must be positive")
        self.net = Mlp((obs_dim, hidden, hidden, 1), rng=rng)
        self.obs_scale = _check_obs_scale(obs_scale, obs_dim)
        self.output_scale = float(output_scale)

    @property
    def obs_dim(self) -> int:
        return self.net.sizes[0]

    def scaled_obs(self, obs) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        if obs.shape[-1] != self.obs_dim:
            raise ValueError(
                f"observation dimension {obs.shape[-1]}, expected {self.obs_dim}")
        return obs / self.obs_scale

    def value(self, obs) -> np.ndarray:
        return self.net.forward(self.scaled_obs(obs))[..., 0] * self.output_scale

    @property
    def n_params(self) -> int:
        return self.net.n_params

    def get_flat(self) -> np.ndarray:
        return self.net.get_flat()

    def set_flat(self, vec) -> None:
        self.net.set_flat(vec)


# -- checkpoint file format --------------------------------------------------
#
# Little-endian binary, readable from any language:
#
#   magic    4 bytes  b"DTCK"
#   version  u32      currently 1
#   n_arrays u32
#   then per array:
#     name_len u32
#     name     name_len bytes, utf-8
#     ndim     u32
#     dims     u32 * ndim
#     data     float64 * prod(dims), C order
#
# Array names: policy.w0/b0/w1/b1/w2/b2, policy.log_std, policy.obs_scale,
# value.w0/..., value.obs_scale, value.output_scale, act_scale (physical
# action limits [ax_max, ddelta_max] that denormalize the policy output).

CHECKPOINT_MAGIC = b"DTCK"
CHECKPOINT_VERSION = 1


def write_arrays(path, arrays: dict) -> None:
    """Serialize named float64 arrays to `path`, atomically (temp + rename)."""
    path = os.fspath(path)
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    blob += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype=np.float64)
        encoded = name.encode("utf-8")
        blob += struct.pack("<I", len(encoded))
        blob += encoded
        blob += struct.pack("<I", data.ndim)
        for dim in data.shape:
            blob += struct.pack("<I", dim)
        blob += data.astype("<f8").tobytes(order="C")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def read_arrays(path) -> dict:
    """Parse a checkpoint file back into {name: float64 array}."""
    with open(os.fspath(path), "rb") as fh:
        data = fh.read()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise ValueError("truncated checkpoint file")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    def take_u32() -> int:
        return struct.unpack("<I", take(4))[0]

    if take(4) != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    version = take_u32()
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    arrays = {}
    for _ in range(take_u32()):
        name = take(take_u32()).decode("utf-8")
        shape = tuple(take_u32() for _ in range(take_u32()))
        count = 1
        for dim in shape:
            count *= dim
        arr = np.frombuffer(take(8 * count), dtype="<f8")
        arrays[name] = arr.astype(np.float64).reshape(shape)
    return arrays


def _collect_layers(arrays: dict, prefix: str) -> Mlp:
    weights, biases = [], []
    for i in range(len(arrays)):
        wkey, bkey = f"{prefix}.w{i}", f"{prefix}.b{i}"
        if wkey not in arrays:
            break
        if bkey not in arrays:
            raise ValueError(f"checkpoint missing {bkey}")
        weights.append(arrays[wkey])
        biases.append(arrays[bkey])
    if not weights:
        raise ValueError(f"checkpoint carries no {prefix} layers")
    return Mlp.from_layers(weights, biases)


def save_policy(path, policy: GaussianPolicy, value: ValueNet | None = None,
                act_scale=None) -> None:
    """Write policy (and optionally value net) weights plus the observation
    and action normalization constants."""
    arrays: dict = {}
    for i, (w, b) in enumerate(zip(policy.net.weights, policy.net.biases)):
        arrays[f"policy.w{i}"] = w
        arrays[f"policy.b{i}"] = b
    arrays["policy.log_std"] = policy.log_std
    arrays["policy.obs_scale"] = policy.obs_scale
    if value is not None:
        for i, (w, b) in enumerate(zip(value.net.weights, value.net.biases)):
            arrays[f"value.w{i}"] = w
            arrays[f"value.b{i}"] = b
        arrays["value.obs_scale"] = value.obs_scale
        arrays["value.output_scale"] = np.array([value.output_scale])
    if act_scale is None:
        nominal = VehicleParams()
        act_scale = [nominal.ax_max, nominal.ddelta_max]
    arrays["act_scale"] = np.asarray(act_scale, dtype=np.float64)
    write_arrays(path, arrays)


def load_policy(path) -> tuple[GaussianPolicy, ValueNet | None]:
    arrays = read_arrays(path)
    net = _collect_layers(arrays, "policy")
    policy = GaussianPolicy.__new__(GaussianPolicy)
    policy.net = net
    policy.log_std = np.ascontiguousarray(arrays["policy.log_std"],
                                          dtype=np.float64)
    policy.obs_scale = _check_obs_scale(arrays.get("policy.obs_scale"),
                                        net.sizes[0])
    value = None
    if "value.w0" in arrays:
        value = ValueNet.__new__(ValueNet)
        value.net = _collect_layers(arrays, "value")
        value.obs_scale = _check_obs_scale(arrays.get("value.obs_scale"),
                                           value.net.sizes[0])
        value.output_scale = float(arrays.get("value.output_scale",
                                              np.ones(1))[0])
    return policy, value


# -- hierarchical assembly ----------------------------------------------------


def lane_selection(lanes, i_star) -> np.ndarray:
    """Pick the intended lane's tracking observation from the per-lane stack."""
    lanes = np.asarray(lanes)
    idx = operator.index(i_star)
    if not 0 <= idx < lanes.shape[0]:
        raise IndexError(
            f"lane index {idx} out of range for {lanes.shape[0]} lanes")
    return lanes[idx]


class HierarchicalAssembly:
    """Composes the learned lane-tracking module with the rule modules.

    lk: the single lane's errors feed the network directly.
    lc: lane selection routes the scheduled target lane (the schedule arrives
        with the observation) to the network.
    oa: obstacle detection maintains the intended lane from the
        surrounding-vehicle observation, then lane selection routes it.
    """

    def __init__(self, policy: GaussianPolicy, cfg: ScenarioConfig):
        self.policy = policy
        self.cfg = cfg
        self.i_star = 0

    def reset(self) -> None:
        self.i_star = 0

    def features(self, obs: Observation) -> np.ndarray:
        task = self.cfg.task
        if task == "lk":
            lane = obs.lanes[0]
        elif task == "lc":
            self.i_star = obs.i_star
            lane = lane_selection(obs.lanes, self.i_star)
        else:
            # The surrounding vehicle holds lane 0 in this environment.
            self.i_star = obstacle_detection(
                self.i_star, float(obs.ego[0]), 0, float(obs.srd[0]),
                float(obs.srd[1]), self.cfg.lanes, self.cfg)
            lane = lane_selection(obs.lanes, self.i_star)
        return np.concatenate((obs.ego, lane))

    def act(self, obs: Observation, stochastic: bool = False, rng=None) -> np.ndarray:
        return self.policy.act(self.features(obs), stochastic, rng)


# -- trajectory planner --------------------------------------------------------


class ReferenceTrajectory(NamedTuple):
    """Planned kinematic reference, sampled every dt seconds."""

    t: np.ndarray    # seconds from the planning instant
    x: np.ndarray    # ground-frame X, m
    y: np.ndarray    # ground-frame Y, m
    psi: np.ndarray  # velocity heading, rad
    vx: np.ndarray   # longitudinal speed, m/s
    dt: float

    @property
    def horizon(self) -> int:
        return len(self.t)


@njit
def _mlp_mean(feats, w0, b0, w1, b1, w2, b2, out):
    h0 = np.tanh(np.dot(w0, feats) + b0)
    h1 = np.tanh(np.dot(w1, h0) + b1)
    z = np.dot(w2, h1) + b2
    for i in range(z.shape[0]):
        out[i] = math.tanh(z[i])
    return out


@njit
def _plan_rollout(s0, i_star, step_count, srd_x, srd_speed, srd_lane,
                  task_code, amp, om, offsets, d_s, lane_change_step,
                  trigger_min, trigger_headway, revert_margin,
                  p, obs_scale, w0, b0, w1, b1, w2, b2,
                  out_t, out_x, out_y, out_psi, out_vx):
    """Deterministic policy rollout on the imaginary nominal vehicle.

    Mirrors the environment's stepping order exactly (integrate, advance the
    surrounding vehicle, bump the step count, update the intended lane) so a
    plan on the nominal plant reproduces the closed-loop path the policy
    itself would drive.  Pose k is recorded before step k: sample 0 is the
    planning instant.  A rollout that brakes to the model's validity floor
    freezes at its last pose: the reference then simply ends in a stop
    instead of crashing the planner.
    """
    horizon = out_t.shape[0]
    s = s0.copy()
    nxt = np.empty(7)
    err = np.empty(5)
    feats = np.empty(8)
    act = np.empty(2)
    dt = p[P_DT]
    for k in range(horizon):
        beta = math.atan(s[IVY] / s[IVX])
        out_t[k] = k * dt
        out_x[k] = s[IX]
        out_y[k] = s[IY]
        out_psi[k] = s[IPSI] + beta
        out_vx[k] = s[IVX]
        if k == horizon - 1:
            break
        if s[IVX] <= VX_FLOOR:
            for j in range(k + 1, horizon):
                out_t[j] = j * dt
                out_x[j] = out_x[k]
                out_y[j] = out_y[k]
                out_psi[j] = out_psi[k]
                out_vx[j] = out_vx[k]
            break
        _lane_errors_single(s, amp, om, offsets[i_star], d_s, err)
        feats[0] = s[IVX]
        feats[1] = s[IVY]
        feats[2] = s[IWZ]
        feats[3] = s[ISTEER]
        feats[4] = err[0]
        feats[5] = err[1]
        feats[6] = err[2]
        feats[7] = err[3]
        for i in range(8):
            feats[i] = feats[i] / obs_scale[i]
        _mlp_mean(feats, w0, b0, w1, b1, w2, b2, act)
        ax = act[0] * p[P_AX_MAX]
        ddelta = act[1] * p[P_DDELTA_MAX]
        dynamics._step(s, ax, ddelta, p, 0.0, nxt)
        for i in range(7):
            s[i] = nxt[i]
        if srd_lane >= 0:
            srd_x = sine_advance(srd_x, srd_speed * dt, amp, om)
        step_count += 1
        if task_code == 1:
            if offsets.shape[0] > 1 and step_count >= lane_change_step:
                i_star = 1
        elif task_code == 2:
            ego_sx = sine_project(s[IX], s[IY], amp, om, offsets[i_star])
            gap = _sine_arclen(ego_sx, srd_x, amp, om)
            i_star = _obstacle_rule(i_star, s[IVX], srd_lane, srd_speed, gap,
                                    offsets.shape[0], trigger_min,
                                    trigger_headway, revert_margin)


class TrajectoryPlanner:
    """Reference generator: an imaginary copy of the nominal vehicle, driven
    by the deterministic policy from the observed kinematic state.

    Construction takes nominal parameters only; plans depend on the target
    vehicle exclusively through the kinematic snapshot, so the same planner
    serves any target plant unchanged.
    """

    def __init__(self, policy: GaussianPolicy, cfg: ScenarioConfig,
                 params: VehicleParams | None = None, horizon: int = 50):
        if horizon < 1:
            raise ValueError("horizon must be at least 1")
        if len(policy.net.weights) != 3:
            raise ValueError("planner rollout expects a two-hidden-layer policy")
        if policy.obs_dim != OBS_DIM:
            raise ValueError(f"planner expects {OBS_DIM}-dimensional observations")
        self.policy = policy
        self.cfg = cfg
        self.params = VehicleParams() if params is None else params
        self.horizon = int(horizon)
        self._p = self.params.as_array()
        self._offsets = cfg.lane_offsets()
        self._task_code = TASKS.index(cfg.task)

    def plan(self, snap: PlannerSnapshot) -> ReferenceTrajectory:
        cfg = self.cfg
        amp, om = cfg.lane_amplitude, cfg.lane_wavenumber
        off = float(self._offsets[snap.i_star])
        ref_psi = sine_heading(snap.anchor_x, amp, om)
        ref_y = sine_y(snap.anchor_x, amp, om, off)
        # Invert the lane-relative error definitions: the offset is measured
        # along the lane normal at the anchor, the heading error against the
        # velocity direction (yaw plus sideslip).
        s0 = np.empty(7)
        s0[IVX] = snap.vx
        s0[IVY] = snap.vy
        s0[IWZ] = snap.yaw_rate
        s0[IX] = snap.anchor_x - math.sin(ref_psi) * snap.offset
        s0[IY] = ref_y + math.cos(ref_psi) * snap.offset
        s0[IPSI] = ref_psi + snap.heading - math.atan(snap.vy / snap.vx)
        s0[ISTEER] = snap.steer

        n = self.horizon
        out = [np.empty(n) for _ in range(5)]
        net = self.policy.net
        _plan_rollout(s0, snap.i_star, snap.step_count, snap.srd_x,
                      snap.srd_speed, snap.srd_lane, self._task_code,
                      amp, om, self._offsets, cfg.lookahead,
                      cfg.lane_change_step, cfg.trigger_min,
                      cfg.trigger_headway, cfg.revert_margin,
                      self._p, self.policy.obs_scale,
                      net.weights[0], net.biases[0],
                      net.weights[1], net.biases[1],
                      net.weights[2], net.biases[2],
                      out[0], out[1], out[2], out[3], out[4])
        return ReferenceTrajectory(out[0], out[1], out[2], out[3], out[4],
                                   self.params.dt)
