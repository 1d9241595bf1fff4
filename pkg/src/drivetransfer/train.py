"""Clipped-surrogate policy optimization for the lane-tracking module.

Training runs only on the nominal vehicle and only on the lane-keeping task:
the learned module is the tracking policy that lane changing and obstacle
avoidance later reuse through the rule modules.  Everything here is plain
numpy with hand-written backpropagation; the rollout loop is fused into one
compiled kernel that steps the vehicle, the lane errors, the policy and the
value net together, consuming pregenerated exploration noise so a seed pins
the whole run bit for bit.

Returns in this environment are large (roughly speed times the effective
horizon), so the value net regresses returns divided by a fixed scale; its
outputs are multiplied back when advantages are estimated.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .accel import njit
from . import dynamics
from .dynamics import (ISTEER, IVX, IVY, IWZ, IX, IY, IPSI,
                       P_AX_MAX, P_DDELTA_MAX, P_DT, VX_FLOOR, VehicleParams)
from .geometry import sine_heading, sine_y
from .policy import (DEFAULT_OBS_SCALE, GaussianPolicy, ValueNet, _mlp_mean,
                     save_policy)
from .scenario import (ScenarioConfig, _lane_errors_single, _tracking_reward,
                       make_scenario)

LOG_COLUMNS = ("iteration", "mean_discounted_return", "mean_episode_length",
               "policy_loss", "value_loss", "clip_fraction")


@dataclass(frozen=True)
class PpoConfig:
    """Training hyperparameters; defaults are the documented baseline."""

    batch_size: int = 100
    clip_epsilon: float = 0.2
    learning_rate: float = 1e-3
    eta: float = 20.0            # lateral error weight in the reward
    gamma: float = 0.99
    gae_lambda: float = 0.95
    epochs_per_iter: int = 10
    max_iterations: int = 20000
    seed: int = 0
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    normalize_obs: bool = True   # divide features by DEFAULT_OBS_SCALE
    hidden_width: int = 64
    init_std: float = 0.5
    value_scale: float = 100.0   # value net predicts returns / value_scale
    eval_episodes: int = 3
    log_every: int = 100

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.clip_epsilon < 0.0:
            raise ValueError("clip_epsilon must be nonnegative")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if self.eta <= 0.0:
            raise ValueError("eta must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must be in [0, 1]")
        if self.epochs_per_iter < 1:
            raise ValueError("epochs_per_iter must be at least 1")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be nonnegative")
        if self.value_coef < 0.0 or self.entropy_coef < 0.0:
            raise ValueError("loss coefficients must be nonnegative")
        if self.hidden_width < 1:
            raise ValueError("hidden_width must be at least 1")
        if self.init_std <= 0.0:
            raise ValueError("init_std must be positive")
        if self.value_scale <= 0.0:
            raise ValueError("value_scale must be positive")
        if self.eval_episodes < 1:
            raise ValueError("eval_episodes must be at least 1")
        if self.log_every < 1:
            raise ValueError("log_every must be at least 1")


class Adam:
    """Adaptive-moment descent on a flat parameter vector."""

    def __init__(self, n_params: int, lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class RolloutBuffer:
    """Fixed-length batch of transitions, possibly spanning episodes."""

    obs: np.ndarray        # (n, 8) raw observations (unscaled)
    actions: np.ndarray    # (n, 2) clipped normalized actions
    log_probs: np.ndarray  # (n,) log-density of the stored action
    rewards: np.ndarray    # (n,)
    values: np.ndarray     # (n,) value estimates in reward units
    dones: np.ndarray      # (n,) 1.0 where the episode ended at this step
    bootstrap_value: float  # value of the state after the last transition
    returns: np.ndarray | None = None
    advantages: np.ndarray | None = None

    def __len__(self) -> int:
        return self.obs.shape[0]


def compute_gae(buffer: RolloutBuffer, gamma: float, lam: float) -> RolloutBuffer:
    """Generalized advantage estimates with bootstrap at the batch boundary."""
    n = len(buffer)
    adv = np.empty(n)
    carry = 0.0
    for k in range(n - 1, -1, -1):
        v_next = buffer.values[k + 1] if k + 1 < n else buffer.bootstrap_value
        mask = 1.0 - buffer.dones[k]
        delta = buffer.rewards[k] + gamma * v_next * mask - buffer.values[k]
        carry = delta + gamma * lam * mask * carry
        adv[k] = carry
    buffer.advantages = adv
    buffer.returns = adv + buffer.values
    return buffer


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    """Zero-mean, exactly unit-variance copy; all-equal input maps to zeros."""
    centered = adv - adv.mean()
    std = centered.std()
    if std == 0.0:
        return np.zeros_like(adv)
    return centered / std


# -- backpropagation ----------------------------------------------------------


def _forward_cache(net, x: np.ndarray) -> list:
    """Activations per layer; hidden entries are post-tanh, final is linear."""
    acts = [x]
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w.T + b
        h = z if i == last else np.tanh(z)
        acts.append(h)
    return acts


def _backward(net, acts: list, dout: np.ndarray) -> np.ndarray:
    """Flat parameter gradient given d(loss)/d(final output)."""
    last = len(net.weights) - 1
    grads = [None] * (last + 1)
    dh = dout
    for i in range(last, -1, -1):
        dz = dh if i == last else dh * (1.0 - acts[i + 1] ** 2)
        dw = dz.T @ acts[i]
        db = dz.sum(axis=0)
        grads[i] = (dw, db)
        if i:
            dh = dz @ net.weights[i]
    parts = []
    for dw, db in grads:
        parts.append(dw.ravel())
        parts.append(db)
    return np.concatenate(parts)


def policy_loss_and_grad(policy: GaussianPolicy, obs, actions, logp_old,
                         advantages, clip_epsilon: float,
                         entropy_coef: float = 0.0):
    """Clipped-surrogate loss, its flat gradient, and diagnostics.

    The gradient flows through the importance ratio only where the unclipped
    branch attains the minimum; elsewhere the surrogate is locally constant
    in the parameters.
    """
    feats = policy.scaled_obs(obs)
    acts = _forward_cache(policy.net, feats)
    mean = np.tanh(acts[-1])
    std = np.exp(policy.log_std)
    zscore = (actions - mean) / std
    logp = (-0.5 * np.sum(zscore * zscore, axis=-1) - np.sum(policy.log_std)
            - 0.5 * policy.act_dim * math.log(2.0 * math.pi))
    ratio = np.exp(logp - logp_old)
    surr1 = ratio * advantages
    clipped = np.clip(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon)
    surr2 = clipped * advantages
    entropy = float(np.sum(policy.log_std)
                    + 0.5 * policy.act_dim * math.log(2.0 * math.pi * math.e))
    loss = -float(np.mean(np.minimum(surr1, surr2))) - entropy_coef * entropy

    n = obs.shape[0]
    active = surr1 <= surr2  # unclipped branch attains the min (ties included)
    dlogp = np.where(active, -surr1 / n, 0.0)
    dmean = dlogp[:, None] * zscore / std
    dz = dmean * (1.0 - mean ** 2)
    dlog_std = np.sum(dlogp[:, None] * (zscore * zscore - 1.0), axis=0)
    dlog_std -= entropy_coef
    grad = np.concatenate([_backward(policy.net, acts, dz), dlog_std])

    diags = {
        "clip_fraction": float(np.mean(surr2 < surr1)),
        "approx_kl": float(np.mean(logp_old - logp)),
        "entropy": entropy,
    }
    return loss, grad, diags


def value_loss_and_grad(value: ValueNet, obs, returns, value_coef: float = 0.5):
    """Scaled-return regression loss and its flat gradient."""
    feats = value.scaled_obs(obs)
    acts = _forward_cache(value.net, feats)
    raw = acts[-1][:, 0]
    err = raw - np.asarray(returns, dtype=np.float64) / value.output_scale
    n = obs.shape[0]
    loss = value_coef * 0.5 * float(np.mean(err * err))
    dout = (value_coef / n) * err[:, None]
    return loss, _backward(value.net, acts, dout)


def ppo_update(policy: GaussianPolicy, value: ValueNet, buffer: RolloutBuffer,
               config: PpoConfig, policy_opt: Adam | None = None,
               value_opt: Adam | None = None) -> dict:
    """Several full-batch gradient epochs on one rollout buffer.

    Advantages are normalized in place first.  Reported losses and the clip
    fraction are averaged over the epochs: on the very first epoch the ratio
    is identically one, so its surrogate loss and clip fraction are zero by
    construction and say nothing about the update.
    """
    if buffer.advantages is None or buffer.returns is None:
        raise ValueError("buffer advantages not computed; call compute_gae")
    if policy_opt is None:
        policy_opt = Adam(policy.n_params, config.learning_rate)
    if value_opt is None:
        value_opt = Adam(value.n_params, config.learning_rate)
    buffer.advantages = normalize_advantages(buffer.advantages)
    logp_old = buffer.log_probs
    totals = {"policy_loss": 0.0, "value_loss": 0.0, "clip_fraction": 0.0,
              "approx_kl": 0.0, "entropy": 0.0}
    for epoch in range(config.epochs_per_iter):
        p_loss, p_grad, diags = policy_loss_and_grad(
            policy, buffer.obs, buffer.actions, logp_old, buffer.advantages,
            config.clip_epsilon, config.entropy_coef)
        v_loss, v_grad = value_loss_and_grad(value, buffer.obs, buffer.returns,
                                             config.value_coef)
        if not (math.isfinite(p_loss) and math.isfinite(v_loss)
                and np.all(np.isfinite(p_grad)) and np.all(np.isfinite(v_grad))):
            raise FloatingPointError(
                f"non-finite update at epoch {epoch}: "
                f"policy_loss={p_loss!r} value_loss={v_loss!r}")
        totals["policy_loss"] += p_loss
        totals["value_loss"] += v_loss
        for key in ("clip_fraction", "approx_kl", "entropy"):
            totals[key] += diags[key]
        policy.set_flat(policy_opt.step(policy.get_flat(), p_grad))
        value.set_flat(value_opt.step(value.get_flat(), v_grad))
    return {key: val / config.epochs_per_iter for key, val in totals.items()}


# -- fused rollout collection --------------------------------------------------


@njit
def _mlp_scalar(feats, w0, b0, w1, b1, w2, b2):
    h0 = np.tanh(np.dot(w0, feats) + b0)
    h1 = np.tanh(np.dot(w1, h0) + b1)
    return (np.dot(w2, h1) + b2)[0]


@njit
def _reset_lk(s, ic, amp, om, lane_off):
    ref_psi = sine_heading(0.0, amp, om)
    s[IVX] = ic[2]
    s[IVY] = 0.0
    s[IWZ] = 0.0
    s[IX] = -math.sin(ref_psi) * ic[0]
    s[IY] = sine_y(0.0, amp, om, lane_off) + math.cos(ref_psi) * ic[0]
    s[IPSI] = ref_psi + ic[1]
    s[ISTEER] = 0.0


@njit
def _scaled_features(s, err, obs_scale, feats):
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
    return feats


@njit
def _collect_lk(s, counters, p, amp, om, lane_off, d_s, eta, dev_limit,
                r_dev, horizon, obs_scale,
                pw0, pb0, pw1, pb1, pw2, pb2, log_std,
                vw0, vb0, vw1, vb1, vw2, vb2,
                noise, ics,
                obs_out, act_out, logp_out, rew_out, val_out, done_out):
    """Roll the stochastic policy on the lane-keeping task for a fixed number
    of steps, resetting from the pregenerated pool whenever an episode ends.
    Mirrors the environment's step semantics: act on the current observation,
    integrate, then score against the post-step errors.  One addition: an
    episode whose post-step speed falls to the model's validity floor ends
    as a penalized failure here, where the interactive task would raise on
    the next step.  Early policies do brake that hard, and a batch collector
    cannot stop mid-buffer.  Returns the value estimate of the state left
    after the final transition."""
    n = obs_out.shape[0]
    err = np.empty(5)
    feats = np.empty(8)
    mean = np.empty(2)
    nxt = np.empty(7)
    log_2pi = math.log(2.0 * math.pi)
    for k in range(n):
        _lane_errors_single(s, amp, om, lane_off, d_s, err)
        obs_out[k, 0] = s[IVX]
        obs_out[k, 1] = s[IVY]
        obs_out[k, 2] = s[IWZ]
        obs_out[k, 3] = s[ISTEER]
        obs_out[k, 4] = err[0]
        obs_out[k, 5] = err[1]
        obs_out[k, 6] = err[2]
        obs_out[k, 7] = err[3]
        _scaled_features(s, err, obs_scale, feats)
        _mlp_mean(feats, pw0, pb0, pw1, pb1, pw2, pb2, mean)
        logp = 0.0
        for j in range(2):
            sigma = math.exp(log_std[j])
            a = mean[j] + sigma * noise[k, j]
            if a > 1.0:
                a = 1.0
            if a < -1.0:
                a = -1.0
            z = (a - mean[j]) / sigma
            logp += -0.5 * z * z - log_std[j] - 0.5 * log_2pi
            act_out[k, j] = a
        logp_out[k] = logp
        val_out[k] = _mlp_scalar(feats, vw0, vb0, vw1, vb1, vw2, vb2)

        ax = act_out[k, 0] * p[P_AX_MAX]
        ddelta = act_out[k, 1] * p[P_DDELTA_MAX]
        dynamics._step(s, ax, ddelta, p, 0.0, nxt)
        for i in range(7):
            s[i] = nxt[i]
        counters[0] += 1
        _lane_errors_single(s, amp, om, lane_off, d_s, err)
        speed = math.hypot(s[IVX], s[IVY])
        reward = _tracking_reward(speed, err[1], err[0], eta)
        done = 0.0
        if abs(err[0]) > dev_limit or s[IVX] <= VX_FLOOR:
            reward += r_dev
            done = 1.0
        elif counters[0] >= horizon:
            done = 1.0
        rew_out[k] = reward
        done_out[k] = done
        if done == 1.0:
            _reset_lk(s, ics[counters[1]], amp, om, lane_off)
            counters[1] += 1
            counters[0] = 0
    _lane_errors_single(s, amp, om, lane_off, d_s, err)
    _scaled_features(s, err, obs_scale, feats)
    return _mlp_scalar(feats, vw0, vb0, vw1, vb1, vw2, vb2)


def _kernel_nets(policy: GaussianPolicy, value: ValueNet):
    if len(policy.net.weights) != 3 or len(value.net.weights) != 3:
        raise ValueError("fused collection expects two-hidden-layer networks")
    if not np.array_equal(policy.obs_scale, value.obs_scale):
        raise ValueError("policy and value nets must share one obs_scale")
    return (policy.net.weights[0], policy.net.biases[0],
            policy.net.weights[1], policy.net.biases[1],
            policy.net.weights[2], policy.net.biases[2], policy.log_std,
            value.net.weights[0], value.net.biases[0],
            value.net.weights[1], value.net.biases[1],
            value.net.weights[2], value.net.biases[2])


class RolloutCollector:
    """Stateful lane-keeping rollout source.

    The environment state persists across collect() calls, so consecutive
    batches continue the same episode exactly like an on-line agent would.
    Exploration noise and reset initial conditions are pregenerated per call
    from the collector's rng (or passed in explicitly by tests), keeping the
    compiled kernel free of random number generation.
    """

    def __init__(self, cfg: ScenarioConfig | None = None,
                 params: VehicleParams | None = None, rng=None):
        self.cfg = make_scenario("lk") if cfg is None else cfg
        if self.cfg.task != "lk" or self.cfg.lanes != 1:
            raise ValueError("collector supports the single-lane lk task only")
        self.params = VehicleParams() if params is None else params
        self._p = self.params.as_array()
        self._rng = np.random.default_rng() if rng is None else rng
        self._s = np.empty(7)
        self._step_count = 0
        self._fresh = True

    def draw_initial_conditions(self, n: int) -> np.ndarray:
        cfg = self.cfg
        ics = np.empty((n, 3))
        ics[:, 0] = self._rng.uniform(-cfg.init_offset, cfg.init_offset, n)
        ics[:, 1] = self._rng.uniform(-cfg.init_heading, cfg.init_heading, n)
        ics[:, 2] = self._rng.uniform(cfg.init_speed[0], cfg.init_speed[1], n)
        return ics

    def collect(self, policy: GaussianPolicy, value: ValueNet, n_steps: int,
                noise=None, ics=None) -> RolloutBuffer:
        if n_steps < 1:
            raise ValueError("n_steps must be at least 1")
        cfg = self.cfg
        if noise is None:
            noise = self._rng.standard_normal((n_steps, 2))
        noise = np.ascontiguousarray(noise, dtype=np.float64)
        if ics is None:
            ics = self.draw_initial_conditions(n_steps + 1)
        ics = np.ascontiguousarray(ics, dtype=np.float64)
        if noise.shape != (n_steps, 2) or ics.shape[0] < n_steps + 1:
            raise ValueError("noise/ics pools undersized for n_steps")

        counters = np.zeros(2, dtype=np.int64)
        if self._fresh:
            _reset_lk(self._s, ics[0], cfg.lane_amplitude, cfg.lane_wavenumber,
                      0.0)
            counters[1] = 1
            self._fresh = False
        counters[0] = self._step_count

        obs = np.empty((n_steps, 8))
        actions = np.empty((n_steps, 2))
        log_probs = np.empty(n_steps)
        rewards = np.empty(n_steps)
        values = np.empty(n_steps)
        dones = np.empty(n_steps)
        boot = _collect_lk(
            self._s, counters, self._p, cfg.lane_amplitude,
            cfg.lane_wavenumber, 0.0, cfg.lookahead, cfg.eta,
            cfg.deviation_limit, cfg.r_deviation, cfg.horizon,
            policy.obs_scale, *_kernel_nets(policy, value), noise, ics,
            obs, actions, log_probs, rewards, values, dones)
        self._step_count = int(counters[0])
        values *= value.output_scale
        boot = float(boot) * value.output_scale
        return RolloutBuffer(obs, actions, log_probs, rewards, values, dones,
                             boot)


class EvalEpisode(NamedTuple):
    discounted_return: float
    undiscounted_return: float
    length: int
    cause: str


def evaluate_policy(policy: GaussianPolicy, value: ValueNet,
                    cfg: ScenarioConfig, params: VehicleParams,
                    ics, gamma: float) -> list[EvalEpisode]:
    """Deterministic-policy episodes from given initial conditions."""
    episodes = []
    p = params.as_array()
    for ic in np.atleast_2d(np.asarray(ics, dtype=np.float64)):
        n = cfg.horizon
        s = np.empty(7)
        _reset_lk(s, ic, cfg.lane_amplitude, cfg.lane_wavenumber, 0.0)
        counters = np.zeros(2, dtype=np.int64)
        pool = np.tile(ic, (n + 1, 1))
        obs = np.empty((n, 8))
        actions = np.empty((n, 2))
        log_probs = np.empty(n)
        rewards = np.empty(n)
        values = np.empty(n)
        dones = np.empty(n)
        _collect_lk(s, counters, p, cfg.lane_amplitude, cfg.lane_wavenumber,
                    0.0, cfg.lookahead, cfg.eta, cfg.deviation_limit,
                    cfg.r_deviation, cfg.horizon, policy.obs_scale,
                    *_kernel_nets(policy, value), np.zeros((n, 2)), pool,
                    obs, actions, log_probs, rewards, values, dones)
        end = int(np.argmax(dones))  # first done flag; horizon guarantees one
        length = end + 1
        # early end means lane departure or a stall at the speed floor
        cause = "horizon" if length >= cfg.horizon else "failure"
        disc = float(rewards[:length] @ (gamma ** np.arange(length)))
        episodes.append(EvalEpisode(disc, float(rewards[:length].sum()),
                                    length, cause))
    return episodes


# -- training loop -------------------------------------------------------------


@dataclass
class TrainResult:
    policy: GaussianPolicy
    value: ValueNet
    log_rows: list
    converged: bool
    iterations: int
    config: PpoConfig


def write_training_log(path, rows) -> None:
    with open(os.fspath(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v
                             for v in row])


def train_lane_tracking(config: PpoConfig | None = None,
                        checkpoint_path=None, log_path=None,
                        progress=None, initial_nets=None,
                        start_iteration: int = 0) -> TrainResult:
    """Optimize the lane-tracking policy on the nominal vehicle.

    Logs one row per log_every iterations: evaluation statistics from
    deterministic episodes plus the latest update diagnostics.  Training
    stops early once every evaluation episode reaches the horizon in two
    consecutive evaluations; exhausting max_iterations without that counts
    as non-convergence, reported in the result rather than raised.

    Passing initial_nets=(policy, value) with a start_iteration resumes a
    previous run: the iteration count (and hence the log) continues where
    it left off, while optimizer state and sampling streams start fresh.
    """
    config = PpoConfig() if config is None else config
    if start_iteration < 0:
        raise ValueError("start_iteration must be nonnegative")
    root = np.random.SeedSequence(config.seed)
    net_ss, env_ss, eval_ss = root.spawn(3)
    if initial_nets is not None:
        policy, value = initial_nets
    else:
        obs_scale = DEFAULT_OBS_SCALE if config.normalize_obs else np.ones(8)
        policy = GaussianPolicy(hidden=config.hidden_width,
                                init_std=config.init_std, obs_scale=obs_scale,
                                rng=np.random.default_rng(net_ss))
        value = ValueNet(hidden=config.hidden_width, obs_scale=obs_scale,
                         rng=np.random.default_rng(net_ss.spawn(1)[0]))
        value.output_scale = config.value_scale
    cfg = make_scenario("lk", eta=config.eta)
    collector = RolloutCollector(cfg, rng=np.random.default_rng(env_ss))
    eval_rng = np.random.default_rng(eval_ss)
    policy_opt = Adam(policy.n_params, config.learning_rate)
    value_opt = Adam(value.n_params, config.learning_rate)

    rows: list = []
    streak = 0
    converged = False
    iterations = start_iteration
    for it in range(start_iteration + 1, config.max_iterations + 1):
        iterations = it
        buffer = collector.collect(policy, value, config.batch_size)
        compute_gae(buffer, config.gamma, config.gae_lambda)
        diag = ppo_update(policy, value, buffer, config, policy_opt, value_opt)
        if it % config.log_every == 0:
            ics = np.column_stack([
                eval_rng.uniform(-cfg.init_offset, cfg.init_offset,
                                 config.eval_episodes),
                eval_rng.uniform(-cfg.init_heading, cfg.init_heading,
                                 config.eval_episodes),
                eval_rng.uniform(cfg.init_speed[0], cfg.init_speed[1],
                                 config.eval_episodes),
            ])
            episodes = evaluate_policy(policy, value, cfg, collector.params,
                                       ics, config.gamma)
            row = (it,
                   float(np.mean([e.discounted_return for e in episodes])),
                   float(np.mean([e.length for e in episodes])),
                   diag["policy_loss"], diag["value_loss"],
                   diag["clip_fraction"])
            rows.append(row)
            if progress is not None:
                progress(row)
            if all(e.length >= cfg.horizon for e in episodes):
                streak += 1
                if streak >= 2:
                    converged = True
                    break
            else:
                streak = 0

    if checkpoint_path is not None:
        save_policy(checkpoint_path, policy, value)
    if log_path is not None:
        write_training_log(log_path, rows)
    return TrainResult(policy, value, rows, converged, iterations, config)
