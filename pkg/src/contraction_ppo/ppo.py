"""PPO actor/critic behind a PD low-level controller.

The policy emits a bounded joint-target offset ``dq = a_max tanh(z / a_max)``;
the deployed torque is the saturated PD law around ``q_ref + dq`` with zero
target rate.  Rollouts run the PD loop ``decimation`` times per policy tick.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .dynamics import DEFAULT_DT, step_rk4
from .errors import ConfigError, ContractError, InputError
from .net import (LipschitzMlp, lipschitz_bound, mlp_backward, mlp_forward,
                  mlp_input_jacobian)

LOG_2PI = math.log(2.0 * math.pi)


def pd_torque(target, target_rate, q, qd, kp, kd, limit=np.inf):
    """Saturated PD law ``clip(kp (target - q) + kd (target_rate - qd))``."""
    q = np.asarray(q, dtype=float)
    if np.shape(target)[-1:] != q.shape[-1:] or np.shape(qd)[-1:] != q.shape[-1:]:
        raise ContractError("PD operands have mismatched joint dimensions")
    u = kp * (np.asarray(target) - q) + kd * (np.asarray(target_rate) - np.asarray(qd))
    return np.clip(u, -limit, limit)


class PolicyStack:
    """Policy network, value network and PD gains for one system."""

    def __init__(self, policy_net, value_net, log_std, kp, kd, q_ref, observation,
                 action_clip=1.0, torque_limit=np.inf, decimation=4):
        self.policy_net = policy_net
        self.value_net = value_net
        self.observation = observation
        m = policy_net.n_out
        self.m = m
        self.log_std = np.array(np.broadcast_to(log_std, (m,)), dtype=float)
        self.kp = np.array(np.broadcast_to(kp, (m,)), dtype=float)
        self.kd = np.array(np.broadcast_to(kd, (m,)), dtype=float)
        if np.any(self.kp < 0) or np.any(self.kd < 0):
            raise ConfigError("PD gains must be nonnegative")
        if action_clip <= 0:
            raise ConfigError("action clip must be positive")
        self.q_ref = np.array(np.broadcast_to(q_ref, (m,)), dtype=float)
        self.action_clip = float(action_clip)
        self.torque_limit = float(torque_limit)
        self.decimation = int(decimation)
        if self.decimation < 1:
            raise ConfigError("control decimation must be at least 1")
        if policy_net.n_in != observation.p or value_net.n_in != observation.p:
            raise ContractError("network input size does not match the observation")

    # -- deterministic deployed controller --------------------------------

    def offset(self, y):
        """Mean offset ``dq`` and the raw network output."""
        z = mlp_forward(self.policy_net, y)[0]
        return self.action_clip * np.tanh(z / self.action_clip), z

    def torque(self, y, dq=None):
        y = np.asarray(y, dtype=float)
        if dq is None:
            dq = self.offset(y)[0]
        q, qd = self.observation.joints(y)
        return pd_torque(self.q_ref + dq, 0.0, q, qd, self.kp, self.kd, self.torque_limit)

    def torque_jacobian(self, y):
        """Deployed torque and ``du/dy`` (zero rows where the torque saturates)."""
        y = np.asarray(y, dtype=float)
        z = mlp_forward(self.policy_net, y)[0]
        Jz = mlp_input_jacobian(self.policy_net, y)
        th = np.tanh(z / self.action_clip)
        dq = self.action_clip * th
        q, qd = self.observation.joints(y)
        raw = self.kp * (self.q_ref + dq - q) - self.kd * qd
        u = np.clip(raw, -self.torque_limit, self.torque_limit)
        Q, Qd = self.observation.joints_jacobian(y)
        s = 1.0 - th * th
        J = self.kp[:, None] * (s[..., None] * Jz - Q) - self.kd[:, None] * Qd
        mask = np.abs(raw) < self.torque_limit
        return u, J * mask[..., None]

    def value(self, y):
        return mlp_forward(self.value_net, y)[0][..., 0]

    def lipschitz(self):
        """Bound on ``||du/dy||`` through the PD composition."""
        kp = np.max(np.abs(self.kp))
        kd = np.max(np.abs(self.kd))
        return float(kp * lipschitz_bound(self.policy_net) + kp * self.observation.q_lipschitz
                + kd * self.observation.qd_lipschitz)

    def copy(self):
        return PolicyStack(self.policy_net.copy(), self.value_net.copy(), self.log_std.copy(),
                           self.kp, self.kd, self.q_ref, self.observation, self.action_clip,
                           self.torque_limit, self.decimation)


def make_policy_stack(system, hidden=(64, 64), value_hidden=(64, 64), budgets=None,
                      value_budgets=None, kp=30.0, kd=0.8, action_clip=1.0, init_std=0.3,
                      decimation=4, seed=0, activation="tanh", value_activation="tanh",
                      out_scale=0.1):
    obs = system.observation
    n_pol = len(hidden) + 1
    n_val = len(value_hidden) + 1
    budgets = [1.0] * n_pol if budgets is None else list(budgets)
    value_budgets = [10.0] * n_val if value_budgets is None else list(value_budgets)
    pol = LipschitzMlp([obs.p, *hidden, system.m], activation, budgets, seed=seed,
                       out_scale=out_scale)
    val = LipschitzMlp([obs.p, *value_hidden, 1], value_activation, value_budgets, seed=seed + 1)
    return PolicyStack(pol, val, np.full(system.m, math.log(init_std)), kp, kd,
                       system.reference[system.q_idx], obs, action_clip,
                       system.torque_limit, decimation)


def deployed_jacobian(stack, system, x):
    """``du/dy`` and the end-to-end ``du/dx = du/dy J_h``."""
    x = np.asarray(x, dtype=float)
    y = stack.observation(x)
    _, Jy = stack.torque_jacobian(y)
    return Jy, Jy @ stack.observation.jacobian(x)


def desired_state(system, stack, dq):
    """Reference equilibrium with joint positions moved to ``q_ref + dq`` and joint rates zeroed."""
    dq = np.asarray(dq, dtype=float)
    xd = np.array(np.broadcast_to(system.reference, dq.shape[:-1] + (system.n,)), dtype=float)
    xd[..., system.q_idx] = stack.q_ref + dq
    if system.qd_idx is not None:
        xd[..., system.qd_idx] = 0.0
    return xd


# ---------------------------------------------------------------------------
# stochastic policy


class PolicyAction(NamedTuple):
    offset: np.ndarray      # applied (clipped) dq
    target: np.ndarray      # q_ref + dq
    log_prob: np.ndarray    # of the pre-clip sample
    raw: np.ndarray         # pre-clip sample
    mean: np.ndarray        # Gaussian mean the sample was drawn around


def gaussian_log_prob(a, mu, log_std):
    zs = (a - mu) * np.exp(-log_std)
    return -0.5 * np.sum(zs * zs, axis=-1) - np.sum(log_std) - 0.5 * mu.shape[-1] * LOG_2PI


def _normal(rng, shape):
    if isinstance(rng, (list, tuple)):
        # one generator per row, so each environment owns its stream
        return np.stack([g.standard_normal(shape[-1]) for g in rng])
    return rng.standard_normal(shape)


def policy_action(stack, y, stochastic=False, rng=None):
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise InputError("observation contains non-finite entries")
    mu, _ = stack.offset(y)
    if stochastic:
        raw = mu + np.exp(stack.log_std) * _normal(rng, mu.shape)
    else:
        raw = mu
    dq = np.clip(raw, -stack.action_clip, stack.action_clip)
    return PolicyAction(dq, stack.q_ref + dq, gaussian_log_prob(raw, mu, stack.log_std), raw, mu)


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class TaskSpec:
    """Stay-near-reference task: reward and failure definition."""

    circle: float = 0.8
    control_cost: float = 0.001
    fail_reward: float = -10.0
    max_episode_ticks: int = 150
    reset_fraction: float = 0.5
    dt: float = DEFAULT_DT


class RolloutEnv:
    """Batch of independent episodes; env ``i`` draws from ``SeedSequence([seed, i])``."""

    def __init__(self, system, n_envs, seed, dist=None, task=None):
        self.system = system
        self.n_envs = int(n_envs)
        if self.n_envs < 1:
            raise ContractError("need at least one environment")
        self.dist = dist
        self.task = task or TaskSpec()
        self.rngs = [np.random.default_rng(np.random.SeedSequence([int(seed), i]))
                     for i in range(self.n_envs)]
        self.reset_box = system.sub_box(self.task.reset_fraction)
        self.p_ref = system.position(system.reference)
        self.x = np.zeros((self.n_envs, system.n))
        self.t = np.zeros(self.n_envs)
        self.steps = np.zeros(self.n_envs, dtype=int)
        self.inside = np.zeros(self.n_envs, dtype=bool)
        self.ep_return = np.zeros(self.n_envs)
        self.finished_returns = []
        self.finished_failures = []
        for i in range(self.n_envs):
            self._reset(i)

    def _reset(self, i):
        lo, hi = self.reset_box
        self.x[i] = self.rngs[i].uniform(lo, hi)
        self.t[i] = 0.0
        self.steps[i] = 0
        self.inside[i] = self.position_error(self.x[i]) <= self.task.circle
        self.ep_return[i] = 0.0

    def position_error(self, x):
        return np.linalg.norm(self.system.position(x) - self.p_ref, axis=-1)

    def observe(self, x):
        obs = self.system.observation
        y = obs(x)
        if obs.noise > 0:
            y = y + obs.noise * np.stack([g.uniform(-1.0, 1.0, obs.p) for g in self.rngs])
        return y


@dataclass
class RolloutBatch:
    y: np.ndarray
    x: np.ndarray
    x_d: np.ndarray
    raw: np.ndarray
    offset: np.ndarray
    mean: np.ndarray
    log_prob: np.ndarray
    reward: np.ndarray
    bootstrap: np.ndarray
    value: np.ndarray
    done: np.ndarray
    failed: np.ndarray
    t: np.ndarray
    u: np.ndarray
    last_value: np.ndarray
    log_std: np.ndarray = None
    advantages: np.ndarray = None
    returns: np.ndarray = None
    raw_advantages: np.ndarray = None
    episode_returns: list = field(default_factory=list)
    episode_failures: list = field(default_factory=list)
    env: RolloutEnv = None

    @property
    def horizon(self):
        return self.reward.shape[0]

    @property
    def n_envs(self):
        return self.reward.shape[1]

    def flat(self, name):
        a = getattr(self, name)
        return a.reshape((-1,) + a.shape[2:])


def collect_rollouts(stack, system, dist=None, horizon=24, n_envs=1, rng=0, env=None,
                     gamma=0.99, stochastic=True, task=None):
    """Roll the PD-wrapped policy forward ``horizon`` policy ticks in every env.

    Episodes persist across calls when ``env`` is passed back in.  Timeouts
    bootstrap with ``gamma V(y)``; exits from the circle and integration
    blow-ups end the episode with the failure reward.
    """
    if horizon < 1:
        raise ContractError("horizon must be at least 1")
    if env is None:
        env = RolloutEnv(system, n_envs, rng, dist, task)
    task = env.task
    E, n, m, p = env.n_envs, system.n, system.m, system.observation.p
    T = int(horizon)
    buf = {k: np.zeros((T, E) + s) for k, s in dict(
        y=(p,), x=(n,), x_d=(n,), raw=(m,), offset=(m,), mean=(m,), log_prob=(), reward=(), bootstrap=(),
        value=(),
        t=(), u=(m,)).items()}
    done = np.zeros((T, E), dtype=bool)
    failed = np.zeros((T, E), dtype=bool)
    n_ret0 = len(env.finished_returns)
    for k in range(T):
        y = env.observe(env.x)
        val = stack.value(y)
        act = policy_action(stack, y, stochastic, env.rngs)
        buf["y"][k], buf["x"][k], buf["t"][k] = y, env.x, env.t
        buf["x_d"][k] = desired_state(system, stack, act.offset)
        buf["raw"][k], buf["offset"][k], buf["log_prob"][k], buf["value"][k] = (
            act.raw, act.offset, act.log_prob, val)
        buf["mean"][k] = act.mean
        x = env.x.copy()
        u_sum = np.zeros((E, m))
        u_sq = np.zeros(E)
        blown = np.zeros(E, dtype=bool)
        exited = np.zeros(E, dtype=bool)
        for c in range(stack.decimation):
            yc = y if c == 0 else env.observe(x)
            q, qd = system.observation.joints(yc)
            u = pd_torque(act.target, 0.0, q, qd, stack.kp, stack.kd, stack.torque_limit)
            u_sum += u
            u_sq += np.sum(u * u, axis=-1)
            with np.errstate(all="ignore"):
                x_new = step_rk4(system, x, u, task.dt, env.dist, env.t, check=False)
            bad = ~np.all(np.isfinite(x_new), axis=-1)
            x_new[bad] = x[bad]
            blown |= bad
            x = x_new
            env.t = env.t + task.dt
            err = env.position_error(x)
            exited |= env.inside & (err > task.circle)
            env.inside |= err <= task.circle
        env.x = x
        err = env.position_error(x)
        r = 1.0 - err / task.circle - task.control_cost * u_sq / stack.decimation
        fail = blown | exited
        r = np.where(fail, task.fail_reward, r)
        env.steps += 1
        timeout = (env.steps >= task.max_episode_ticks) & ~fail
        env.ep_return += r
        if np.any(timeout):
            buf["bootstrap"][k] = np.where(timeout, gamma * stack.value(env.observe(env.x)), 0.0)
        buf["reward"][k] = r
        buf["u"][k] = u_sum / stack.decimation
        done[k] = fail | timeout
        failed[k] = fail
        for i in np.flatnonzero(done[k]):
            env.finished_returns.append(float(env.ep_return[i]))
            env.finished_failures.append(bool(fail[i]))
            env._reset(i)
    last_value = stack.value(env.observe(env.x))
    return RolloutBatch(**buf, done=done, failed=failed, last_value=last_value,
                        log_std=stack.log_std.copy(),
                        episode_returns=env.finished_returns[n_ret0:],
                        episode_failures=env.finished_failures[n_ret0:], env=env)


def compute_gae(batch, gamma=0.99, lam=0.95, normalize=True):
    """Generalised advantages over ``(T, E)`` arrays, reset at done flags.

    Timeout bootstraps (``gamma V`` of the final observation) are added to
    the reward of the last step of a truncated episode.
    """
    if batch.reward.size == 0:
        raise ContractError("cannot compute advantages of an empty batch")
    T = batch.reward.shape[0]
    adv = np.zeros_like(batch.reward)
    last = np.zeros_like(batch.last_value)
    next_value = batch.last_value
    for k in reversed(range(T)):
        live = 1.0 - batch.done[k]
        delta = batch.reward[k] + batch.bootstrap[k] + gamma * live * next_value - batch.value[k]
        last = delta + gamma * lam * live * last
        adv[k] = last
        next_value = batch.value[k]
    batch.raw_advantages = adv
    batch.returns = adv + batch.value
    if normalize:
        std = adv.std()
        adv = (adv - adv.mean()) / (std + 1e-8)
    batch.advantages = adv
    return batch


@dataclass
class PPOLoss:
    loss: float
    surrogate: float
    value_loss: float
    entropy: float
    clip_fraction: float
    approx_kl: float
    kl: float               # exact Gaussian KL(old || new), nan without old moments
    policy_grads: list
    log_std_grad: np.ndarray
    value_grads: list


def ppo_loss(stack, y, raw, old_log_prob, advantages, returns, clip_ratio=0.2,
             entropy_coef=0.0, value_coef=1.0, old_value=None, value_clip=None,
             old_mean=None, old_log_std=None):
    """Clipped surrogate + ``value_coef`` * value MSE - ``entropy_coef`` * entropy.

    Inputs are flat per-sample arrays; gradients are returned for the policy
    network, the log-std vector and the value network.  With ``old_value``
    and ``value_clip`` the value error is the larger of the plain and the
    clipped-update error.  ``old_mean``/``old_log_std`` enable the KL report.
    """
    y = np.asarray(y, dtype=float)
    N = y.shape[0]
    if N == 0:
        raise ContractError("empty minibatch")
    z, ptape = mlp_forward(stack.policy_net, y)
    a_max = stack.action_clip
    th = np.tanh(z / a_max)
    mu = a_max * th
    std = np.exp(stack.log_std)
    logp = gaussian_log_prob(raw, mu, stack.log_std)
    ratio = np.exp(logp - old_log_prob)
    clipped = np.clip(ratio, 1.0 - clip_ratio, 1.0 + clip_ratio)
    unc = ratio * advantages
    surr_terms = np.minimum(unc, clipped * advantages)
    surrogate = -np.mean(surr_terms)
    active = unc <= clipped * advantages
    ent = float(np.sum(stack.log_std) + 0.5 * stack.m * (1.0 + LOG_2PI))
    v, vtape = mlp_forward(stack.value_net, y)
    v = v[:, 0]
    verr = v - returns
    sq = verr * verr
    gv = 2.0 * verr
    if value_clip is not None and old_value is not None:
        step = v - old_value
        vc = old_value + np.clip(step, -value_clip, value_clip)
        cerr = vc - returns
        use_c = cerr * cerr > sq
        sq = np.where(use_c, cerr * cerr, sq)
        gv = np.where(use_c, 2.0 * cerr * (np.abs(step) < value_clip), gv)
    value_loss = float(np.mean(sq))
    loss = surrogate + value_coef * value_loss - entropy_coef * ent

    # d surrogate / d logp
    w = -(active * ratio * advantages) / N
    resid = (raw - mu) / std
    g_mu = w[:, None] * resid / std
    g_log_std = np.sum(w[:, None] * (resid * resid - 1.0), axis=0) - entropy_coef
    g_z = g_mu * (1.0 - th * th)
    pgrads, _ = mlp_backward(stack.policy_net, ptape, g_z)
    vgrads, _ = mlp_backward(stack.value_net, vtape, (value_coef * gv / N)[:, None])
    log_ratio = logp - old_log_prob
    kl = math.nan
    if old_mean is not None:
        ols = stack.log_std if old_log_std is None else np.asarray(old_log_std, float)
        var_o = np.exp(2.0 * ols)
        kl = float(np.mean(np.sum(stack.log_std - ols + (var_o + (old_mean - mu) ** 2)
                                  / (2.0 * std * std) - 0.5, axis=-1)))
    return PPOLoss(float(loss), float(surrogate), value_loss, ent,
                   float(np.mean(np.abs(ratio - 1.0) > clip_ratio)),
                   float(np.mean((ratio - 1.0) - log_ratio)), kl, pgrads, g_log_std, vgrads)


def write_rollout_csv(batch, path, env_index=0):
    """One row per policy tick of one environment: t, x..., y..., u..., r."""
    n = batch.x.shape[-1]
    p = batch.y.shape[-1]
    m = batch.u.shape[-1]
    header = (["t"] + [f"x{i}" for i in range(n)] + [f"y{i}" for i in range(p)]
              + [f"u{i}" for i in range(m)] + ["r"])
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for k in range(batch.horizon):
            row = [batch.t[k, env_index], *batch.x[k, env_index], *batch.y[k, env_index],
                   *batch.u[k, env_index], batch.reward[k, env_index]]
            wr.writerow([repr(float(v)) for v in row])
