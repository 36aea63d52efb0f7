import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from contraction_ppo.dynamics import DisturbanceModel, Pendulum, PointMass
from contraction_ppo.errors import ConfigError, ContractError, InputError
from contraction_ppo.ppo import (RolloutBatch, TaskSpec, collect_rollouts, compute_gae,
                                 deployed_jacobian, desired_state, gaussian_log_prob,
                                 make_policy_stack, pd_torque, policy_action, ppo_loss,
                                 write_rollout_csv)
from contraction_ppo.net import flatten_grads

from conftest import central_jacobian, rel_err


def zero_policy(stack):
    stack.policy_net.weights[-1][:] = 0.0
    stack.policy_net.biases[-1][:] = 0.0
    stack.policy_net.touch()
    return stack


def tiny_stack(system=None, seed=1, **kw):
    system = system or Pendulum()
    kw.setdefault("out_scale", 1.0)
    return make_policy_stack(system, hidden=(8, 8), value_hidden=(8, 8), seed=seed, **kw)


def test_pd_torque_examples():
    assert pd_torque([0.1], [0.0], [0.0], [0.0], 30.0, 0.8) == pytest.approx([3.0])
    assert pd_torque([0.0], [0.0], [0.0], [0.0], 30.0, 0.8) == pytest.approx([0.0])
    assert pd_torque([0.0], [-1.0], [0.0], [0.0], 30.0, 0.8) == pytest.approx([-0.8])
    assert pd_torque([1.0], [0.0], [0.0], [0.0], 30.0, 0.8, limit=5.0) == pytest.approx([5.0])
    with pytest.raises(ContractError):
        pd_torque([0.0, 1.0], [0.0], [0.0], [0.0], 1.0, 1.0)


def test_zero_policy_targets_reference():
    stack = zero_policy(tiny_stack())
    y = Pendulum().observation(np.array([[0.4, 1.0], [-2.0, 3.0]]))
    act = policy_action(stack, y)
    assert np.array_equal(act.target, np.zeros((2, 1)))


def test_deterministic_action_repeatable():
    stack = tiny_stack()
    y = Pendulum().observation(np.array([0.4, 1.0]))
    a, b = policy_action(stack, y), policy_action(stack, y)
    assert np.array_equal(a.offset, b.offset) and np.array_equal(a.log_prob, b.log_prob)


def test_stochastic_mean_monte_carlo():
    stack = tiny_stack()
    y = np.broadcast_to(Pendulum().observation(np.array([0.4, 1.0])), (100_000, 3))
    act = policy_action(stack, y, stochastic=True, rng=np.random.default_rng(5))
    mu = stack.offset(y[:1])[0][0, 0]
    se = math.exp(stack.log_std[0]) / math.sqrt(len(y))
    assert abs(act.raw[:, 0].mean() - mu) <= 3 * se
    assert np.all(np.abs(act.offset) <= stack.action_clip)


def test_nonfinite_observation_rejected():
    with pytest.raises(InputError):
        policy_action(tiny_stack(), np.array([np.nan, 0.0, 0.0]))


@given(st.floats(-3, 3), st.floats(-2, 2), st.floats(-3, 1))
def test_gaussian_log_prob_matches_closed_form(a, mu, log_std):
    expect = -0.5 * ((a - mu) / math.exp(log_std)) ** 2 - log_std - 0.5 * math.log(2 * math.pi)
    got = gaussian_log_prob(np.array([a]), np.array([mu]), np.array([log_std]))
    assert float(got) == pytest.approx(expect, rel=1e-12, abs=1e-12)


def test_rollout_single_step():
    b = collect_rollouts(tiny_stack(), Pendulum(), horizon=1, n_envs=1, rng=3)
    assert b.reward.shape == (1, 1) and b.x.shape == (1, 1, 2)


def test_rollouts_are_reproducible():
    a = collect_rollouts(tiny_stack(), Pendulum(), horizon=6, n_envs=3, rng=9)
    b = collect_rollouts(tiny_stack(), Pendulum(), horizon=6, n_envs=3, rng=9)
    for name in ("x", "y", "raw", "log_prob", "reward", "u"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_rollout_equilibrium_stays_put():
    system = Pendulum()
    stack = zero_policy(tiny_stack(system))
    task = TaskSpec(reset_fraction=1e-300)
    b = collect_rollouts(stack, system, horizon=10, n_envs=2, rng=0, stochastic=False,
                         task=task)
    assert np.max(np.abs(b.x)) < 1e-250
    assert b.reward == pytest.approx(np.ones((10, 2)))


def test_rollout_disturbance_moves_state():
    system = Pendulum()
    stack = zero_policy(tiny_stack(system))
    dist = DisturbanceModel.for_system(system, "constant_push", 1.0)
    b = collect_rollouts(stack, system, dist, horizon=5, n_envs=1, rng=0, stochastic=False,
                         task=TaskSpec(reset_fraction=1e-300))
    assert np.max(np.abs(b.x[-1])) > 1e-4


def test_rollout_failure_ends_episode():
    system = Pendulum()
    stack = tiny_stack(system, kp=0.0, kd=0.0)
    task = TaskSpec(circle=0.05, reset_fraction=0.01)
    b = collect_rollouts(stack, system, DisturbanceModel.for_system(system, "constant_push", 2.0),
                         horizon=40, n_envs=2, rng=0, task=task)
    assert b.failed.any()
    k, e = np.argwhere(b.failed)[0]
    assert b.reward[k, e] == task.fail_reward and b.done[k, e]


def _batch(rewards, values, done, last, bootstrap=None):
    r = np.asarray(rewards, float)[:, None]
    T = len(r)
    z = np.zeros((T, 1))
    boot = z if bootstrap is None else np.asarray(bootstrap, float)[:, None]
    return RolloutBatch(y=z, x=z, x_d=z, raw=z, offset=z, mean=z, log_prob=z, reward=r,
                        bootstrap=boot, value=np.asarray(values, float)[:, None],
                        done=np.asarray(done, bool)[:, None], failed=z.astype(bool), t=z, u=z,
                        last_value=np.array([last], float))


def test_gae_one_step():
    b = compute_gae(_batch([1.0], [0.0], [True], 0.0), 0.99, 0.95, normalize=False)
    assert b.advantages[0, 0] == pytest.approx(1.0)


def test_gae_all_zero():
    b = compute_gae(_batch([0, 0, 0], [0, 0, 0], [0, 0, 0], 0.0), 0.99, 0.95)
    assert not np.any(b.advantages)


def test_gae_two_step_brute_force():
    g, lam = 0.99, 0.95
    r, v, last = [0.5, -0.2], [0.3, 0.1], 0.7
    b = compute_gae(_batch(r, v, [False, False], last), g, lam, normalize=False)
    d1 = r[1] + g * last - v[1]
    d0 = r[0] + g * v[1] - v[0]
    assert b.advantages[:, 0] == pytest.approx([d0 + g * lam * d1, d1])
    assert b.returns[:, 0] == pytest.approx(b.advantages[:, 0] + v)


def test_gae_resets_at_done_and_uses_bootstrap():
    g, lam = 0.99, 0.95
    b = compute_gae(_batch([1.0, 2.0], [0.5, 0.25], [True, False], 4.0, bootstrap=[3.0, 0.0]),
                    g, lam, normalize=False)
    assert b.advantages[0, 0] == pytest.approx(1.0 + 3.0 - 0.5)
    assert b.advantages[1, 0] == pytest.approx(2.0 + g * 4.0 - 0.25)


def test_gae_normalized_moments():
    rng = np.random.default_rng(0)
    b = compute_gae(_batch(rng.normal(size=30), rng.normal(size=30), rng.random(30) < 0.1, 0.3))
    assert b.advantages.mean() == pytest.approx(0.0, abs=1e-12)
    assert b.advantages.std() == pytest.approx(1.0, abs=1e-6)


def _ppo_inputs(stack, n=6, seed=0):
    rng = np.random.default_rng(seed)
    y = Pendulum().observation(rng.uniform([-3, -7], [3, 7], size=(n, 2)))
    act = policy_action(stack, y, stochastic=True, rng=rng)
    return y, act, rng.normal(size=n), rng.normal(size=n)


def test_surrogate_at_unit_ratio():
    stack = tiny_stack()
    y, act, adv, ret = _ppo_inputs(stack)
    pl = ppo_loss(stack, y, act.raw, act.log_prob, adv, ret, 0.2, 0.0, 0.0)
    assert pl.surrogate == pytest.approx(-np.mean(adv))
    assert pl.clip_fraction == 0.0


def test_clipped_contribution():
    stack = tiny_stack()
    y, act, _, ret = _ppo_inputs(stack, n=1)
    pl = ppo_loss(stack, y, act.raw, act.log_prob - math.log(1.5), np.ones(1), ret, 0.2)
    assert pl.surrogate == pytest.approx(-1.2)


@pytest.mark.parametrize("value_clip", [None, 0.05])
def test_ppo_gradients_match_differences(value_clip):
    stack = tiny_stack(seed=3)
    y, act, adv, ret = _ppo_inputs(stack, n=5, seed=2)
    old_lp = act.log_prob + np.array([0.3, -0.1, 0.05, -0.4, 0.1])
    old_v = stack.value(y) + np.array([0.1, -0.2, 0.01, 0.3, -0.02])

    def loss():
        return ppo_loss(stack, y, act.raw, old_lp, adv, ret, 0.2, 0.01, 0.5, old_v,
                        value_clip).loss

    pl = ppo_loss(stack, y, act.raw, old_lp, adv, ret, 0.2, 0.01, 0.5, old_v, value_clip)
    analytic = np.concatenate([flatten_grads(pl.policy_grads), pl.log_std_grad,
                               flatten_grads(pl.value_grads)])
    params = stack.policy_net.params() + [stack.log_std] + stack.value_net.params()
    numeric = []
    for P in params:
        for k in range(P.size):
            old = P.flat[k]
            P.flat[k] = old + 1e-6
            up = loss()
            P.flat[k] = old - 1e-6
            dn = loss()
            P.flat[k] = old
            numeric.append((up - dn) / 2e-6)
    assert rel_err(analytic, numeric) <= 1e-4


def test_kl_zero_for_same_policy_and_positive_after_shift():
    stack = tiny_stack()
    y, act, adv, ret = _ppo_inputs(stack)
    pl = ppo_loss(stack, y, act.raw, act.log_prob, adv, ret, old_mean=act.mean,
                  old_log_std=stack.log_std.copy())
    assert pl.kl == pytest.approx(0.0, abs=1e-15)
    pl = ppo_loss(stack, y, act.raw, act.log_prob, adv, ret, old_mean=act.mean + 0.1,
                  old_log_std=stack.log_std.copy())
    var = math.exp(2 * stack.log_std[0])
    assert pl.kl == pytest.approx(0.01 / (2 * var))


def test_empty_minibatch_rejected():
    stack = tiny_stack()
    with pytest.raises(ContractError):
        ppo_loss(stack, np.zeros((0, 3)), np.zeros((0, 1)), np.zeros(0), np.zeros(0), np.zeros(0))


def test_zero_policy_deployed_jacobian():
    system = Pendulum(observation="full")
    stack = zero_policy(tiny_stack(system))
    _, Jx = deployed_jacobian(stack, system, np.array([0.3, -0.5]))
    assert Jx == pytest.approx(np.array([[-30.0, -0.8]]))


def test_zero_gains_zero_jacobian():
    system = Pendulum()
    stack = tiny_stack(system, kp=0.0, kd=0.0)
    Jy, Jx = deployed_jacobian(stack, system, np.array([0.3, -0.5]))
    assert not np.any(Jy) and not np.any(Jx)


def test_negative_gains_rejected():
    with pytest.raises(ConfigError):
        tiny_stack(kp=-1.0)


@pytest.mark.parametrize("system", [Pendulum(), Pendulum(observation="full"), PointMass()],
                         ids=["trig", "full", "pointmass"])
def test_deployed_jacobian_matches_differences(system, rng):
    stack = tiny_stack(system, seed=8)
    lo, hi = system.sub_box(0.9)
    for x in rng.uniform(lo, hi, size=(20, system.n)):
        _, Jx = deployed_jacobian(stack, system, x)
        fd = central_jacobian(lambda z: stack.torque(system.observation(z)), x)
        assert rel_err(Jx, fd) <= 1e-4


def test_saturated_torque_has_zero_jacobian():
    system = Pendulum(torque_limit=1.0, observation="full")
    stack = zero_policy(tiny_stack(system))
    _, Jx = deployed_jacobian(stack, system, np.array([2.0, 0.0]))
    assert not np.any(Jx)


def test_desired_state_layout():
    system = Pendulum()
    stack = tiny_stack(system)
    assert desired_state(system, stack, np.array([0.0])) == pytest.approx([0.0, 0.0])
    assert desired_state(system, stack, np.array([0.1])) == pytest.approx([0.1, 0.0])


def test_lipschitz_bound_dominates_torque_jacobian(rng):
    system = Pendulum()
    stack = tiny_stack(system)
    y = system.observation(rng.uniform(system.lower, system.upper, size=(500, 2)))
    _, J = stack.torque_jacobian(y)
    assert np.max(np.linalg.norm(J, 2, axis=(1, 2))) <= stack.lipschitz() + 1e-9


def test_rollout_csv(tmp_path):
    b = collect_rollouts(tiny_stack(), Pendulum(), horizon=3, n_envs=2, rng=1)
    path = tmp_path / "roll.csv"
    write_rollout_csv(b, path, env_index=1)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,x0,x1,y0,y1,y2,u0,r"
    assert len(lines) == 4
