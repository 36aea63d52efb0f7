"""Joint PPO + contraction-metric training.

Each iteration collects rollouts, then runs ``epochs x minibatches`` Adam
steps on ``L_ppo + w_contr L_contr + w_pd L_pd``.  The contraction hinge is
differentiated by hand through both the metric factor and the deployed
controller (policy Jacobian included), using forward tangents for the
Jacobian-dependent terms.
"""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import checkpoint as ckpt
from .dynamics import DisturbanceModel, make_system
from .errors import ConfigError, DivergenceError
from .metric import (MetricField, constant_metric_field, make_metric_field, matrix_to_tri,
                     metric_grad_frobenius, pd_penalty_theta, tri_to_matrix)
from .net import (add_grads, lipschitz_bound, mlp_backward, mlp_forward, mlp_jvp,
                  mlp_jvp_backward, spectral_normalize, zero_grads)
from .ppo import (PolicyStack, RolloutEnv, TaskSpec, collect_rollouts, compute_gae,
                  desired_state, make_policy_stack, ppo_loss)

METRICS_HEADER = ["iter", "mean_reward", "violation_rate", "l_ppo", "l_contr", "l_pd",
                  "L_pi", "L_M", "wallclock_s"]


@dataclass
class TrainConfig:
    system: str = "pendulum"
    system_params: dict = field(default_factory=dict)
    iterations: int = 2000
    seed: int = 0
    n_envs: int = 16
    horizon: int = 24
    epochs: int = 5
    minibatches: int = 4
    lr: float = 1e-3
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_ratio: float = 0.2
    entropy_coef: float = 0.005
    value_coef: float = 1.0
    max_grad_norm: Optional[float] = 1.0
    lr_schedule: str = "adaptive"    # or "fixed"; adaptive tracks desired_kl
    desired_kl: float = 0.01
    value_clip: Optional[float] = 0.2
    alpha: float = 0.5
    epsilon: float = 0.05
    w_contr: float = 0.01
    w_pd: float = 0.1
    m_min: float = 0.1
    m_max: float = 10.0
    policy_hidden: tuple = (64, 64)
    value_hidden: tuple = (64, 64)
    metric_hidden: tuple = (32, 32)
    policy_budgets: Optional[tuple] = None
    value_budgets: Optional[tuple] = None
    metric_budgets: tuple = (2.0, 2.0, 1.0)
    policy_activation: str = "tanh"
    kp: float = 30.0
    kd: float = 0.8
    action_clip: float = 1.0
    init_std: float = 0.3
    decimation: int = 4
    dt: float = 0.005
    contraction_stride: int = 4
    uniform_samples: int = 0
    contraction_trains_policy: bool = True
    metric: str = "learned"          # or "identity" (frozen M = I)
    circle: float = 0.8
    control_cost: float = 0.001
    fail_reward: float = -10.0
    max_episode_ticks: int = 150
    reset_fraction: float = 0.5
    disturbance: dict = field(default_factory=lambda: {"kind": "none"})
    log_wallclock: bool = False

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if self.w_contr < 0 or self.w_pd < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.iterations < 0:
            raise ConfigError("iterations must be nonnegative")
        if self.lr_schedule not in ("adaptive", "fixed"):
            raise ConfigError("lr_schedule must be 'adaptive' or 'fixed'")
        if self.desired_kl <= 0:
            raise ConfigError("desired_kl must be positive")
        if self.metric not in ("learned", "identity"):
            raise ConfigError("metric must be 'learned' or 'identity'")
        for name in ("n_envs", "horizon", "epochs", "minibatches", "decimation",
                     "contraction_stride", "max_episode_ticks"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.policy_activation not in ("tanh", "softplus", "elu"):
            raise ConfigError("policy activation must be tanh, softplus or elu")

    def task(self):
        return TaskSpec(self.circle, self.control_cost, self.fail_reward,
                        self.max_episode_ticks, self.reset_fraction, self.dt)


# ---------------------------------------------------------------------------
# model construction and persistence


def build_models(cfg, system=None):
    system = system or make_system(cfg.system, **cfg.system_params)
    stack = make_policy_stack(system, cfg.policy_hidden, cfg.value_hidden, cfg.policy_budgets,
                              cfg.value_budgets, cfg.kp, cfg.kd, cfg.action_clip, cfg.init_std,
                              cfg.decimation, seed=cfg.seed, activation=cfg.policy_activation)
    if cfg.metric == "identity":
        field_ = constant_metric_field(np.eye(system.n), cfg.m_min, cfg.m_max)
    else:
        field_ = make_metric_field(system.n, cfg.metric_hidden, cfg.metric_budgets,
                                   seed=cfg.seed + 2, m_min=cfg.m_min, m_max=cfg.m_max)
    return system, stack, field_


def checkpoint_meta(cfg, stack, field_, iteration):
    return {
        "system": cfg.system,
        "system_params": cfg.system_params,
        "observation": stack.observation.name,
        "kp": stack.kp.tolist(),
        "kd": stack.kd.tolist(),
        "q_ref": stack.q_ref.tolist(),
        "log_std": stack.log_std.tolist(),
        "action_clip": stack.action_clip,
        "torque_limit": ckpt.encode_float(stack.torque_limit),
        "decimation": stack.decimation,
        "m_min": field_.m_min,
        "m_max": field_.m_max,
        "metric_frozen": field_.frozen,
        "alpha": cfg.alpha,
        "epsilon": cfg.epsilon,
        "iteration": iteration,
    }


def save_models(path, cfg, stack, field_, iteration=0):
    nets = {"policy": stack.policy_net, "value": stack.value_net, "theta": field_.theta_net}
    return ckpt.save(path, nets, checkpoint_meta(cfg, stack, field_, iteration))


def restore_models(checkpoint, system):
    """Rebuild the policy stack and metric field of a loaded checkpoint."""
    meta = checkpoint.meta
    nets = checkpoint.networks
    try:
        obs = system.observations[meta["observation"]]
        stack = PolicyStack(nets["policy"], nets["value"], np.array(meta["log_std"]),
                            meta["kp"], meta["kd"], meta["q_ref"], obs, meta["action_clip"],
                            ckpt.decode_float(meta["torque_limit"]), meta["decimation"])
        field_ = MetricField(nets["theta"], system.n, meta["m_min"], meta["m_max"],
                             frozen=bool(meta.get("metric_frozen", False)))
    except KeyError as exc:
        raise ckpt.CheckpointError(f"checkpoint is missing {exc}") from None
    for net in (stack.policy_net, stack.value_net, field_.theta_net):
        spectral_normalize_readonly(net)
    return stack, field_


def spectral_normalize_readonly(net):
    """Refresh tracked spectral norms without rescaling weights."""
    saved = net.budgets
    net.budgets = [math.inf] * len(saved)
    try:
        spectral_normalize(net)
    finally:
        net.budgets = saved


# ---------------------------------------------------------------------------
# losses


def build_desired_state(system, stack, offset):
    """Equilibrium with joint positions at ``q_ref + offset`` and zero joint rates."""
    return desired_state(system, stack, offset)


@dataclass
class ContractionResult:
    loss: float
    violation_rate: float
    n_valid: int
    n_skipped: int
    per_sample: np.ndarray
    ratio: np.ndarray
    theta_grads: list = None
    policy_grads: list = None


def contraction_loss(field_, stack, system, x, x_d, alpha, epsilon, grads=False,
                     train_policy=True):
    """Mean hinge ``relu((Vdot + alpha V)/V + epsilon)`` over samples with ``V >= 1e-12``.

    With ``grads`` the gradient is returned for the theta network and (if
    ``train_policy``) for the policy network through the closed-loop Jacobian.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    e = x - np.atleast_2d(np.asarray(x_d, dtype=float))
    Bn, n = x.shape
    obs = stack.observation
    p = obs.p
    y = obs(x)
    J_h = obs.jacobian(x)

    # policy output and input Jacobian in one tangent pass (one copy per input axis)
    y_rep = np.repeat(y, p, axis=0)
    t_rep = np.tile(np.eye(p), (Bn, 1))
    z_rep, zt_rep, ptape = mlp_jvp(stack.policy_net, y_rep, t_rep)
    z = z_rep[::p]
    Jz = zt_rep.reshape(Bn, p, -1).transpose(0, 2, 1)
    a = stack.action_clip
    th = np.tanh(z / a)
    s = 1.0 - th * th
    q, qd = obs.joints(y)
    raw_u = stack.kp * (stack.q_ref + a * th - q) - stack.kd * qd
    sat = np.abs(raw_u) < stack.torque_limit
    u = np.clip(raw_u, -stack.torque_limit, stack.torque_limit)
    Q, Qd = obs.joints_jacobian(y)
    kp = stack.kp[:, None]
    Ju = (kp * (s[..., None] * Jz - Q) - stack.kd[:, None] * Qd) * sat[..., None]

    Df = system.drift_jacobian(x)
    dB = system.input_column_jacobians(x)
    Bm = system.input_matrix(x)
    A = (Df + np.einsum("bijk,bi->bjk", dB, u)) + Bm @ Ju @ J_h
    f_cl = system.drift(x) + np.einsum("bij,bj->bi", Bm, u)

    out, tan, ttape = mlp_jvp(field_.theta_net, x, f_cl)
    T = tri_to_matrix(out, n)
    dT = tri_to_matrix(tan, n)
    g = np.einsum("bij,bj->bi", T, e)
    Ae = np.einsum("bij,bj->bi", A, e)
    h = np.einsum("bij,bj->bi", T, Ae)
    k = np.einsum("bij,bj->bi", dT, e)
    V = np.sum(g * g, axis=1)
    N = 2.0 * np.sum(g * h, axis=1) + 2.0 * np.sum(g * k, axis=1) + alpha * V
    valid = V >= 1e-12
    Vs = np.where(valid, V, 1.0)
    ratio = np.where(valid, N / Vs, np.nan)
    per = np.where(valid, np.maximum(np.where(valid, ratio, 0.0) + epsilon, 0.0), 0.0)
    n_valid = int(valid.sum())
    loss = float(per.sum() / n_valid) if n_valid else 0.0
    active = valid & (per > 0)
    viol = float(active.sum() / n_valid) if n_valid else 0.0
    res = ContractionResult(loss, viol, n_valid, Bn - n_valid, per, ratio)
    if not grads:
        return res

    c = active / max(n_valid, 1)
    cV = (c / Vs)[:, None]
    g_bar = cV * (2.0 * h + 2.0 * k + 2.0 * alpha * g) - (c * N / (Vs * Vs))[:, None] * 2.0 * g
    h_bar = 2.0 * cV * g
    k_bar = h_bar
    T_bar = g_bar[:, :, None] * e[:, None, :] + h_bar[:, :, None] * Ae[:, None, :]
    dT_bar = k_bar[:, :, None] * e[:, None, :]
    A_bar = np.einsum("bji,bj->bi", T, h_bar)[:, :, None] * e[:, None, :]
    theta_grads, _, f_bar = mlp_jvp_backward(field_.theta_net, ttape, matrix_to_tri(T_bar),
                                             matrix_to_tri(dT_bar))
    res.theta_grads = theta_grads
    if train_policy:
        u_bar = np.einsum("bji,bj->bi", Bm, f_bar) + np.einsum("bijk,bjk->bi", dB, A_bar)
        Ju_bar = np.swapaxes(Bm, 1, 2) @ A_bar @ np.swapaxes(J_h, 1, 2)
        scaled = Ju_bar * (sat[..., None] * kp)
        Jz_bar = scaled * s[..., None]
        s_bar = np.sum(scaled * Jz, axis=-1)
        z_bar = u_bar * sat * stack.kp * s + s_bar * (-2.0 * th * s / a)
        g_out = np.zeros_like(z_rep)
        g_out[::p] = z_bar
        g_tan = Jz_bar.transpose(0, 2, 1).reshape(Bn * p, -1)
        res.policy_grads, _, _ = mlp_jvp_backward(stack.policy_net, ptape, g_out, g_tan)
    else:
        ptape.consumed = True
    return res


def pd_loss(field_, x, grads=False):
    """Mean eigen-band penalty over samples, with theta-net gradients."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    out, tape = mlp_forward(field_.theta_net, x)
    T = tri_to_matrix(out, field_.n)
    val, dT = pd_penalty_theta(T, field_.m_min, field_.m_max)
    loss = float(np.mean(val))
    if not grads:
        return loss, None
    g, _ = mlp_backward(field_.theta_net, tape, matrix_to_tri(dT) / x.shape[0])
    return loss, g


def total_loss(l_ppo, l_contr, l_pd, w_contr, w_pd, iteration=None):
    for name, v in (("l_ppo", l_ppo), ("l_contr", l_contr), ("l_pd", l_pd)):
        if not math.isfinite(v):
            raise DivergenceError(name, iteration)
    return l_ppo + w_contr * l_contr + w_pd * l_pd


# ---------------------------------------------------------------------------
# optimiser


class Adam:
    """Bias-corrected adaptive moments; updates the given arrays in place."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


LR_BOUNDS = (1e-5, 1e-2)


def adapt_lr(lr, kl, desired_kl, factor=1.5):
    """KL-tracking step size: shrink when the policy moved too far, grow when it barely moved."""
    if kl > 2.0 * desired_kl:
        return max(LR_BOUNDS[0], lr / factor)
    if 0.0 < kl < 0.5 * desired_kl:
        return min(LR_BOUNDS[1], lr * factor)
    return lr


def _flat(grads):
    out = []
    for gW, gb in grads:
        out += [gW, gb]
    return out


def _clip(arrays, max_norm):
    if max_norm is None:
        return arrays
    total = math.sqrt(sum(float(np.sum(a * a)) for a in arrays))
    if total > max_norm:
        return [a * (max_norm / total) for a in arrays]
    return arrays


# ---------------------------------------------------------------------------
# evaluation helpers


def sample_region(system, n, rng):
    return rng.uniform(system.lower, system.upper, size=(n, system.n))


def deterministic_targets(system, stack, x):
    dq, _ = stack.offset(stack.observation(x))
    return build_desired_state(system, stack, np.clip(dq, -stack.action_clip, stack.action_clip))


def evaluate_violation_rate(field_, stack, system, alpha, epsilon, n=2000, seed=12345):
    """Fraction of uniform region samples whose hinge is active (deterministic policy)."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7]))
    x = sample_region(system, n, rng)
    res = contraction_loss(field_, stack, system, x, deterministic_targets(system, stack, x),
                           alpha, epsilon)
    return res.violation_rate


def evaluate_episodes(stack, system, task, n_episodes=100, seed=4242, dist=None, ticks=None):
    """Deterministic-policy episodes; a failure is leaving the circle after
    entering it, never entering it, or a blow-up."""
    env = RolloutEnv(system, n_episodes, seed, dist, task)
    ticks = task.max_episode_ticks if ticks is None else ticks
    failed = np.zeros(n_episodes, dtype=bool)
    entered = env.inside.copy()
    x = env.x.copy()
    t = np.zeros(n_episodes)
    returns = np.zeros(n_episodes)
    from .dynamics import step_rk4
    from .ppo import pd_torque
    for _ in range(ticks):
        y = system.observation(x)
        dq = np.clip(stack.offset(y)[0], -stack.action_clip, stack.action_clip)
        target = stack.q_ref + dq
        u_sq = np.zeros(n_episodes)
        for c in range(stack.decimation):
            yc = system.observation(x)
            q, qd = system.observation.joints(yc)
            u = pd_torque(target, 0.0, q, qd, stack.kp, stack.kd, stack.torque_limit)
            u_sq += np.sum(u * u, axis=-1)
            with np.errstate(all="ignore"):
                xn = step_rk4(system, x, u, task.dt, dist, t, check=False)
            bad = ~np.all(np.isfinite(xn), axis=-1)
            xn[bad] = x[bad]
            failed |= bad
            x = xn
            t = t + task.dt
            err = env.position_error(x)
            failed |= entered & (err > task.circle)
            entered |= err <= task.circle
        err = env.position_error(x)
        returns += np.where(failed, 0.0, 1.0 - err / task.circle - task.control_cost * u_sq / stack.decimation)
    failed |= ~entered
    return float(failed.mean()), float(returns.mean() / ticks)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    stack: PolicyStack
    field: MetricField
    system: object
    rows: list
    skipped: int
    checkpoint_bytes: bytes
    config: TrainConfig


def metrics_csv(rows):
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(METRICS_HEADER)
    for r in rows:
        wr.writerow([r["iter"]] + [_fmt(r[k]) for k in METRICS_HEADER[1:]])
    return buf.getvalue()


def _fmt(v):
    if v is None or v == "":
        return ""
    return repr(float(v))


def _dist_from_config(system, spec):
    spec = dict(spec or {"kind": "none"})
    return DisturbanceModel.for_system(system, **spec)


def train(cfg, checkpoint_path=None, callback=None, system=None):
    """Run the joint training loop; returns models, metric rows and final checkpoint bytes.

    On a non-finite loss the last good checkpoint is written (if a path is
    given) and :class:`DivergenceError` is raised.
    """
    system, stack, field_ = build_models(cfg, system)
    dist = _dist_from_config(system, cfg.disturbance)
    env = RolloutEnv(system, cfg.n_envs, cfg.seed, dist, cfg.task())
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 1_000_003]))
    opt_pol = Adam(stack.policy_net.params() + [stack.log_std], cfg.lr)
    opt_val = Adam(stack.value_net.params(), cfg.lr)
    opt_theta = None if field_.frozen else Adam(field_.theta_net.params(), cfg.lr)
    rows = []
    skipped = 0
    last_good = save_bytes(cfg, stack, field_, 0)
    t0 = time.perf_counter()
    for it in range(cfg.iterations):
        batch = collect_rollouts(stack, system, dist, cfg.horizon, cfg.n_envs, env=env,
                                 gamma=cfg.gamma)
        compute_gae(batch, cfg.gamma, cfg.gae_lambda)
        y = batch.flat("y")
        raw = batch.flat("raw")
        old_lp = batch.flat("log_prob")
        adv = batch.flat("advantages")
        ret = batch.flat("returns")
        old_v = batch.flat("value")
        old_mu = batch.flat("mean")
        xc = batch.x[::cfg.contraction_stride].reshape(-1, system.n)
        xdc = batch.x_d[::cfg.contraction_stride].reshape(-1, system.n)
        if cfg.uniform_samples:
            xu = sample_region(system, cfg.uniform_samples, rng)
            xc = np.concatenate([xc, xu])
            xdc = np.concatenate([xdc, deterministic_targets(system, stack, xu)])
        N, Nc = y.shape[0], xc.shape[0]
        stats = {"l_ppo": [], "l_contr": [], "l_pd": [], "viol": []}
        for epoch in range(cfg.epochs):
            perm = rng.permutation(N)
            cperm = rng.permutation(Nc)
            for mb in range(cfg.minibatches):
                idx = perm[mb * N // cfg.minibatches:(mb + 1) * N // cfg.minibatches]
                cidx = cperm[mb * Nc // cfg.minibatches:(mb + 1) * Nc // cfg.minibatches]
                pl = ppo_loss(stack, y[idx], raw[idx], old_lp[idx], adv[idx], ret[idx],
                              cfg.clip_ratio, cfg.entropy_coef, cfg.value_coef,
                              old_v[idx], cfg.value_clip, old_mu[idx], batch.log_std)
                if cfg.lr_schedule == "adaptive" and math.isfinite(pl.kl):
                    opt_pol.lr = opt_val.lr = adapt_lr(opt_pol.lr, pl.kl, cfg.desired_kl)
                cr = contraction_loss(field_, stack, system, xc[cidx], xdc[cidx], cfg.alpha,
                                      cfg.epsilon, grads=True,
                                      train_policy=cfg.contraction_trains_policy)
                if field_.frozen:
                    lpd, pdg = pd_loss(field_, xc[cidx])
                else:
                    lpd, pdg = pd_loss(field_, xc[cidx], grads=True)
                try:
                    total_loss(pl.loss, cr.loss, lpd, cfg.w_contr, cfg.w_pd, it)
                except DivergenceError:
                    if checkpoint_path is not None:
                        with open(checkpoint_path, "wb") as fh:
                            fh.write(last_good)
                    raise
                if epoch == 0:
                    stats["l_ppo"].append(pl.loss)
                    stats["l_contr"].append(cr.loss)
                    stats["l_pd"].append(lpd)
                    stats["viol"].append(cr.violation_rate)
                    skipped += cr.n_skipped
                pg = pl.policy_grads
                if cr.policy_grads is not None:
                    pg = add_grads(pg, cr.policy_grads, cfg.w_contr)
                opt_pol.step(_clip(_flat(pg) + [pl.log_std_grad], cfg.max_grad_norm))
                opt_val.step(_clip(_flat(pl.value_grads), cfg.max_grad_norm))
                stack.policy_net.touch()
                stack.value_net.touch()
                spectral_normalize(stack.policy_net)
                spectral_normalize(stack.value_net)
                if opt_theta is not None:
                    tg = add_grads(zero_grads(field_.theta_net), cr.theta_grads, cfg.w_contr)
                    tg = add_grads(tg, pdg, cfg.w_pd)
                    opt_theta.step(_clip(_flat(tg), cfg.max_grad_norm))
                    field_.theta_net.touch()
                    spectral_normalize(field_.theta_net)
        row = {
            "iter": it,
            "mean_reward": float(np.mean(batch.reward)),
            "violation_rate": float(np.mean(stats["viol"])),
            "l_ppo": float(np.mean(stats["l_ppo"])),
            "l_contr": float(np.mean(stats["l_contr"])),
            "l_pd": float(np.mean(stats["l_pd"])),
            "L_pi": stack.lipschitz(),
            "L_M": float(np.max(metric_grad_frobenius(field_, xc))),
            "wallclock_s": (time.perf_counter() - t0) if cfg.log_wallclock else None,
        }
        rows.append(row)
        last_good = save_bytes(cfg, stack, field_, it + 1)
        if callback is not None:
            callback(it, row, stack, field_)
    if checkpoint_path is not None:
        with open(checkpoint_path, "wb") as fh:
            fh.write(last_good)
    return TrainResult(stack, field_, system, rows, skipped, last_good, cfg)


def save_bytes(cfg, stack, field_, iteration):
    nets = {"policy": stack.policy_net, "value": stack.value_net, "theta": field_.theta_net}
    return ckpt.dumps(nets, checkpoint_meta(cfg, stack, field_, iteration))


def config_dict(cfg):
    d = asdict(cfg)
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}
