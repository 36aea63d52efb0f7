"""Control-affine benchmark systems, observation maps, disturbances and RK4.

Every map is vectorised over leading batch axes: a state batch of shape
``(..., n)`` yields drift ``(..., n)``, input matrix ``(..., n, m)`` and so on.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, ContractError, InputError, IntegrationError

DEFAULT_DT = 0.005


def _check_state(x, n):
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (n,):
        raise ContractError(f"state has trailing dimension {x.shape[-1:]} but system expects {n}")
    if not np.all(np.isfinite(x)):
        raise InputError("state contains non-finite entries")
    return x


# ---------------------------------------------------------------------------
# observation maps


class Observation:
    """Smooth observation map ``y = h(x)`` plus the joint read-out used by PD.

    ``joints(y)`` recovers the actuated coordinates ``q`` and rates ``qdot``
    from an observation; the PD law only ever sees ``y``.
    """

    name = "observation"

    def __init__(self, n, m, p, noise=0.0):
        self.n, self.m, self.p = n, m, p
        self.noise = float(noise)
        if self.noise < 0:
            raise ConfigError("observation noise bound must be nonnegative")

    def __call__(self, x):
        raise NotImplementedError

    def jacobian(self, x):
        raise NotImplementedError

    def joints(self, y):
        raise NotImplementedError

    def joints_jacobian(self, y):
        raise NotImplementedError

    # Lipschitz constants of y -> q and y -> qdot on the image of h.
    q_lipschitz = 1.0
    qd_lipschitz = 1.0


class IdentityObservation(Observation):
    """Privileged full-state observation ``y = x``."""

    name = "full"

    def __init__(self, n, q_idx, qd_idx=None, noise=0.0):
        super().__init__(n, len(q_idx), n, noise)
        self.q_idx = list(q_idx)
        self.qd_idx = None if qd_idx is None else list(qd_idx)
        self._Q = np.zeros((self.m, n))
        self._Q[np.arange(self.m), self.q_idx] = 1.0
        self._Qd = np.zeros((self.m, n))
        if self.qd_idx is not None:
            self._Qd[np.arange(self.m), self.qd_idx] = 1.0
        else:
            self.qd_lipschitz = 0.0

    def __call__(self, x):
        return np.array(x, dtype=float, copy=True)

    def jacobian(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.eye(self.n), x.shape[:-1] + (self.n, self.n)).copy()

    def joints(self, y):
        q = y[..., self.q_idx]
        qd = y[..., self.qd_idx] if self.qd_idx is not None else np.zeros_like(q)
        return q, qd

    def joints_jacobian(self, y):
        shape = np.shape(y)[:-1]
        return (np.broadcast_to(self._Q, shape + self._Q.shape),
                np.broadcast_to(self._Qd, shape + self._Qd.shape))


class PendulumTrigObservation(Observation):
    """``y = (sin x1, cos x1, x2)``; the angle is read back with atan2."""

    name = "partial"

    def __init__(self, noise=0.0):
        super().__init__(2, 1, 3, noise)

    def __call__(self, x):
        th, om = x[..., 0], x[..., 1]
        return np.stack([np.sin(th), np.cos(th), om], axis=-1)

    def jacobian(self, x):
        th = np.asarray(x, dtype=float)[..., 0]
        J = np.zeros(th.shape + (3, 2))
        J[..., 0, 0] = np.cos(th)
        J[..., 1, 0] = -np.sin(th)
        J[..., 2, 1] = 1.0
        return J

    def joints(self, y):
        return np.arctan2(y[..., 0], y[..., 1])[..., None], y[..., 2:3]

    def joints_jacobian(self, y):
        s, c = y[..., 0], y[..., 1]
        r2 = s * s + c * c
        Q = np.zeros(s.shape + (1, 3))
        Q[..., 0, 0] = c / r2
        Q[..., 0, 1] = -s / r2
        Qd = np.zeros(s.shape + (1, 3))
        Qd[..., 0, 2] = 1.0
        return Q, Qd


class CartPoleTrigObservation(Observation):
    """``y = (p, sin th, cos th, pdot, thdot)``; the cart is the actuated joint."""

    name = "partial"

    def __init__(self, noise=0.0):
        super().__init__(4, 1, 5, noise)

    def __call__(self, x):
        p, th, pd, thd = (x[..., i] for i in range(4))
        return np.stack([p, np.sin(th), np.cos(th), pd, thd], axis=-1)

    def jacobian(self, x):
        th = np.asarray(x, dtype=float)[..., 1]
        J = np.zeros(th.shape + (5, 4))
        J[..., 0, 0] = 1.0
        J[..., 1, 1] = np.cos(th)
        J[..., 2, 1] = -np.sin(th)
        J[..., 3, 2] = 1.0
        J[..., 4, 3] = 1.0
        return J

    def joints(self, y):
        return y[..., 0:1], y[..., 3:4]

    def joints_jacobian(self, y):
        shape = np.shape(y)[:-1]
        Q = np.zeros(shape + (1, 5))
        Q[..., 0, 0] = 1.0
        Qd = np.zeros(shape + (1, 5))
        Qd[..., 0, 3] = 1.0
        return Q, Qd


# ---------------------------------------------------------------------------
# systems


class ControlAffineSystem:
    """Base class for ``xdot = f(x) + B(x) u + d(x, t)`` on a box region K."""

    name = "system"
    n = 0
    m = 0

    def __init__(self, lower, upper, disturbance_bound, torque_limit=np.inf,
                 q_idx=None, qd_idx=None, position_idx=None, reference=None,
                 observation="full", obs_noise=0.0):
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        if self.lower.shape != (self.n,) or self.upper.shape != (self.n,):
            raise ConfigError(f"{self.name}: region box must have {self.n} intervals")
        if np.any(self.lower >= self.upper):
            raise ConfigError(f"{self.name}: region box has an empty interval")
        self.d_bar = float(disturbance_bound)
        if self.d_bar < 0:
            raise ConfigError("disturbance bound must be nonnegative")
        self.torque_limit = float(torque_limit)
        self.q_idx = list(range(self.m)) if q_idx is None else list(q_idx)
        if qd_idx is None and 2 * self.m <= self.n:
            qd_idx = list(range(self.m, 2 * self.m))
        self.qd_idx = None if qd_idx is None else list(qd_idx)
        self.position_idx = self.q_idx if position_idx is None else list(position_idx)
        self.reference = np.zeros(self.n) if reference is None else np.asarray(reference, float)
        self.observations = self._build_observations(obs_noise)
        if observation not in self.observations:
            raise ConfigError(f"{self.name}: unknown observation {observation!r}, "
                              f"choose from {sorted(self.observations)}")
        self.observation = self.observations[observation]

    def _build_observations(self, noise):
        return {"full": IdentityObservation(self.n, self.q_idx, self.qd_idx, noise)}

    @property
    def p(self):
        return self.observation.p

    def drift(self, x):
        raise NotImplementedError

    def input_matrix(self, x):
        raise NotImplementedError

    def drift_jacobian(self, x):
        raise NotImplementedError

    def input_column_jacobians(self, x):
        """Stack of ``dB_i/dx`` with shape ``(..., m, n, n)``."""
        raise NotImplementedError

    def in_region(self, x):
        x = np.asarray(x)
        return np.all((x >= self.lower) & (x <= self.upper), axis=-1)

    def position(self, x):
        return np.asarray(x)[..., self.position_idx]

    def sub_box(self, fraction):
        """Central ``fraction`` of K per coordinate."""
        mid = 0.5 * (self.lower + self.upper)
        half = 0.5 * fraction * (self.upper - self.lower)
        return mid - half, mid + half

    def default_disturbance_direction(self):
        B = self.input_matrix(self.reference)
        d = B.sum(axis=-1)
        nrm = np.linalg.norm(d)
        if nrm == 0:
            d = np.zeros(self.n)
            d[-1] = 1.0
            return d
        return d / nrm


class Pendulum(ControlAffineSystem):
    """Damped pendulum, ``x = (angle, rate)``; angle 0 is the rest equilibrium.

    ``x1' = x2``, ``x2' = -(g/l) sin x1 - b/(m l^2) x2 + u/(m l^2)``.
    """

    name = "pendulum"
    n, m = 2, 1

    def __init__(self, g=9.81, length=1.0, mass=1.0, damping=0.1,
                 lower=(-math.pi, -8.0), upper=(math.pi, 8.0), disturbance_bound=2.0,
                 torque_limit=150.0, observation="partial", obs_noise=0.0):
        self.g, self.length, self.mass, self.damping = g, length, mass, damping
        self._inertia = mass * length ** 2
        super().__init__(lower, upper, disturbance_bound, torque_limit, [0], [1], [0],
                         observation=observation, obs_noise=obs_noise)

    def _build_observations(self, noise):
        obs = super()._build_observations(noise)
        obs["partial"] = PendulumTrigObservation(noise)
        return obs

    def drift(self, x):
        th, om = x[..., 0], x[..., 1]
        acc = -(self.g / self.length) * np.sin(th) - (self.damping / self._inertia) * om
        return np.stack([om, acc], axis=-1)

    def input_matrix(self, x):
        B = np.zeros(np.shape(x)[:-1] + (2, 1))
        B[..., 1, 0] = 1.0 / self._inertia
        return B

    def drift_jacobian(self, x):
        th = np.asarray(x)[..., 0]
        J = np.zeros(th.shape + (2, 2))
        J[..., 0, 1] = 1.0
        J[..., 1, 0] = -(self.g / self.length) * np.cos(th)
        J[..., 1, 1] = -self.damping / self._inertia
        return J

    def input_column_jacobians(self, x):
        return np.zeros(np.shape(x)[:-1] + (1, 2, 2))


class CartPole(ControlAffineSystem):
    """Cart-pole with the pole angle measured from upright.

    Generalised coordinates ``(p, th)`` with mass matrix
    ``[[mc+mp, mp l cos th], [mp l cos th, mp l^2]]``; force acts on the cart.
    """

    name = "cartpole"
    n, m = 4, 1

    def __init__(self, g=9.81, cart_mass=1.0, pole_mass=0.1, length=0.5, friction=0.1,
                 lower=(-2.4, -0.6, -3.0, -3.0), upper=(2.4, 0.6, 3.0, 3.0),
                 disturbance_bound=1.0, torque_limit=100.0, observation="partial",
                 obs_noise=0.0):
        self.g, self.mc, self.mp, self.length, self.friction = g, cart_mass, pole_mass, length, friction
        super().__init__(lower, upper, disturbance_bound, torque_limit, [0], [2], [0],
                         observation=observation, obs_noise=obs_noise)

    def _build_observations(self, noise):
        obs = super()._build_observations(noise)
        obs["partial"] = CartPoleTrigObservation(noise)
        return obs

    def _mass_inverse(self, th):
        mp, l = self.mp, self.length
        a = self.mc + mp
        b = mp * l * np.cos(th)
        d = mp * l * l
        det = a * d - b * b
        inv = np.empty(th.shape + (2, 2))
        inv[..., 0, 0] = d / det
        inv[..., 0, 1] = -b / det
        inv[..., 1, 0] = -b / det
        inv[..., 1, 1] = a / det
        return inv

    def _mass_dtheta(self, th):
        dM = np.zeros(th.shape + (2, 2))
        dM[..., 0, 1] = dM[..., 1, 0] = -self.mp * self.length * np.sin(th)
        return dM

    def _rhs(self, x):
        _, th, pd, thd = (x[..., i] for i in range(4))
        mp, l = self.mp, self.length
        return np.stack([mp * l * np.sin(th) * thd ** 2 - self.friction * pd,
                         mp * self.g * l * np.sin(th)], axis=-1)

    def drift(self, x):
        x = np.asarray(x, dtype=float)
        acc = np.einsum("...ij,...j->...i", self._mass_inverse(x[..., 1]), self._rhs(x))
        return np.concatenate([x[..., 2:4], acc], axis=-1)

    def input_matrix(self, x):
        x = np.asarray(x, dtype=float)
        Minv = self._mass_inverse(x[..., 1])
        B = np.zeros(x.shape[:-1] + (4, 1))
        B[..., 2:4, 0] = Minv[..., :, 0]
        return B

    def drift_jacobian(self, x):
        x = np.asarray(x, dtype=float)
        th, thd = x[..., 1], x[..., 3]
        mp, l = self.mp, self.length
        Minv = self._mass_inverse(th)
        acc = np.einsum("...ij,...j->...i", Minv, self._rhs(x))
        # d(M^-1 r)/dx_k = M^-1 (dr/dx_k - dM/dx_k acc)
        dr = np.zeros(x.shape[:-1] + (2, 4))
        dr[..., 0, 1] = mp * l * np.cos(th) * thd ** 2
        dr[..., 1, 1] = mp * self.g * l * np.cos(th)
        dr[..., 0, 2] = -self.friction
        dr[..., 0, 3] = 2.0 * mp * l * np.sin(th) * thd
        dr[..., :, 1] -= np.einsum("...ij,...j->...i", self._mass_dtheta(th), acc)
        J = np.zeros(x.shape[:-1] + (4, 4))
        J[..., 0, 2] = 1.0
        J[..., 1, 3] = 1.0
        J[..., 2:4, :] = np.einsum("...ij,...jk->...ik", Minv, dr)
        return J

    def input_column_jacobians(self, x):
        x = np.asarray(x, dtype=float)
        th = x[..., 1]
        Minv = self._mass_inverse(th)
        col = Minv[..., :, 0]
        dcol = -np.einsum("...ij,...jk,...k->...i", Minv, self._mass_dtheta(th), col)
        dB = np.zeros(x.shape[:-1] + (1, 4, 4))
        dB[..., 0, 2:4, 1] = dcol
        return dB


class PointMass(ControlAffineSystem):
    """Planar point mass with linear drag, ``x = (px, py, vx, vy)``, ``u`` = force."""

    name = "pointmass"
    n, m = 4, 2

    def __init__(self, mass=1.0, drag=0.2, lower=(-2.0, -2.0, -3.0, -3.0),
                 upper=(2.0, 2.0, 3.0, 3.0), disturbance_bound=1.0, torque_limit=100.0,
                 observation="partial", obs_noise=0.0):
        self.mass, self.drag = mass, drag
        super().__init__(lower, upper, disturbance_bound, torque_limit, [0, 1], [2, 3], [0, 1],
                         observation=observation, obs_noise=obs_noise)

    def _build_observations(self, noise):
        obs = super()._build_observations(0.0)
        # deployable sensor: same coordinates, but corrupted by bounded noise
        obs["partial"] = IdentityObservation(4, [0, 1], [2, 3], noise)
        obs["partial"].name = "partial"
        return obs

    def drift(self, x):
        v = x[..., 2:4]
        return np.concatenate([v, -(self.drag / self.mass) * v], axis=-1)

    def input_matrix(self, x):
        B = np.zeros(np.shape(x)[:-1] + (4, 2))
        B[..., 2, 0] = B[..., 3, 1] = 1.0 / self.mass
        return B

    def drift_jacobian(self, x):
        J = np.zeros(np.shape(x)[:-1] + (4, 4))
        J[..., 0, 2] = J[..., 1, 3] = 1.0
        J[..., 2, 2] = J[..., 3, 3] = -self.drag / self.mass
        return J

    def input_column_jacobians(self, x):
        return np.zeros(np.shape(x)[:-1] + (2, 4, 4))


class LinearSystem(ControlAffineSystem):
    """``xdot = A x + B u`` with constant matrices; used for oracle checks."""

    name = "linear"

    def __init__(self, A, B, lower=None, upper=None, disturbance_bound=0.0,
                 torque_limit=np.inf, q_idx=None, qd_idx=None, observation="full",
                 obs_noise=0.0):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.B = np.asarray(B, dtype=float).reshape(self.A.shape[0], -1)
        self.n, self.m = self.B.shape
        if self.A.shape != (self.n, self.n):
            raise ConfigError("A must be square and match the rows of B")
        lower = -np.ones(self.n) if lower is None else lower
        upper = np.ones(self.n) if upper is None else upper
        super().__init__(lower, upper, disturbance_bound, torque_limit, q_idx, qd_idx,
                         observation=observation, obs_noise=obs_noise)

    def drift(self, x):
        return np.einsum("ij,...j->...i", self.A, x)

    def input_matrix(self, x):
        return np.broadcast_to(self.B, np.shape(x)[:-1] + self.B.shape).copy()

    def drift_jacobian(self, x):
        return np.broadcast_to(self.A, np.shape(x)[:-1] + self.A.shape).copy()

    def input_column_jacobians(self, x):
        return np.zeros(np.shape(x)[:-1] + (self.m, self.n, self.n))


SYSTEMS = {
    "pendulum": Pendulum,
    "cartpole": CartPole,
    "pointmass": PointMass,
    "linear": LinearSystem,
}


def make_system(name, **params):
    try:
        cls = SYSTEMS[name]
    except KeyError:
        raise ConfigError(f"unknown system {name!r}; choose from {sorted(SYSTEMS)}") from None
    try:
        return cls(**params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for system {name!r}: {exc}") from None


# ---------------------------------------------------------------------------
# disturbances

DISTURBANCE_KINDS = ("none", "constant_push", "sinusoid", "piecewise_gust")
_GOLDEN = 0.6180339887498949


@dataclass(frozen=True)
class DisturbanceModel:
    """Bounded additive disturbance ``d(x, t)`` with ``||d|| <= magnitude <= bound``.

    ``constant_push`` is active on ``[onset, onset + duration)``; ``sinusoid``
    oscillates at ``frequency`` Hz inside the same window; ``piecewise_gust``
    holds a deterministic level in ``[0, 1]`` for segments of ``1/frequency`` s.
    """

    kind: str = "none"
    magnitude: float = 0.0
    direction: tuple = field(default=None)
    onset: float = 0.0
    duration: float = math.inf
    frequency: float = 1.0
    bound: float = math.inf

    def __post_init__(self):
        if self.kind not in DISTURBANCE_KINDS:
            raise ConfigError(f"unknown disturbance kind {self.kind!r}")
        if self.magnitude < 0:
            raise ConfigError("disturbance magnitude must be nonnegative")
        if self.magnitude > self.bound * (1 + 1e-12):
            raise ConfigError(f"disturbance magnitude {self.magnitude} exceeds bound {self.bound}")
        if self.kind != "none":
            if self.direction is None:
                raise ConfigError("disturbance direction is required")
            d = np.asarray(self.direction, dtype=float)
            nrm = np.linalg.norm(d)
            if not np.isfinite(nrm) or nrm == 0:
                raise ConfigError("disturbance direction must be a nonzero finite vector")
            object.__setattr__(self, "direction", tuple(float(v) for v in d / nrm))
        if self.frequency <= 0:
            raise ConfigError("disturbance frequency must be positive")

    @classmethod
    def for_system(cls, system, kind="none", magnitude=0.0, direction=None, **kw):
        if direction is None and kind != "none":
            direction = system.default_disturbance_direction()
        return cls(kind, magnitude, direction, bound=system.d_bar, **kw)

    def level(self, t):
        """Scalar amplitude in ``[-1, 1]`` at time ``t``."""
        if self.kind == "none":
            return 0.0
        s = t - self.onset
        if s < 0 or s >= self.duration:
            return 0.0
        if self.kind == "constant_push":
            return 1.0
        if self.kind == "sinusoid":
            return math.sin(2.0 * math.pi * self.frequency * s)
        k = math.floor(s * self.frequency)
        return (k * _GOLDEN + 0.25) % 1.0

    def __call__(self, x, t):
        return sample_disturbance(self, x, t)


NO_DISTURBANCE = DisturbanceModel()


def sample_disturbance(dist, x, t):
    x = np.asarray(x, dtype=float)
    if dist is None or dist.kind == "none":
        return np.zeros_like(x)
    d = np.asarray(dist.direction)
    if d.shape != x.shape[-1:]:
        raise ContractError("disturbance direction does not match the state dimension")
    if np.ndim(t):
        # per-environment clocks
        lev = np.array([dist.level(float(s)) for s in np.ravel(t)]).reshape(np.shape(t))
        return np.broadcast_to(dist.magnitude * lev[..., None] * d, x.shape).copy()
    return np.broadcast_to(dist.magnitude * dist.level(t) * d, x.shape).copy()


# ---------------------------------------------------------------------------
# evaluation and integration


def eval_dynamics(system, x, u, t=0.0, dist=None):
    x = _check_state(x, system.n)
    u = np.asarray(u, dtype=float)
    if u.shape[-1:] != (system.m,):
        raise ContractError(f"control has trailing dimension {u.shape[-1:]}, expected {system.m}")
    B = system.input_matrix(x)
    xdot = system.drift(x) + np.einsum("...ij,...j->...i", B, u)
    if dist is not None and dist.kind != "none":
        xdot = xdot + sample_disturbance(dist, x, t)
    return xdot


@dataclass
class Jacobians:
    drift: np.ndarray
    input_columns: np.ndarray
    input_matrix: np.ndarray
    outside_region: object = False


def eval_jacobians(system, x, u=None):
    """Analytic ``df/dx``, ``[dB_i/dx]`` and ``B(x)``.

    Points outside K are still evaluated; ``outside_region`` flags them.
    """
    x = _check_state(x, system.n)
    return Jacobians(system.drift_jacobian(x), system.input_column_jacobians(x),
                     system.input_matrix(x), ~system.in_region(x))


def observe(system, x, observation=None):
    x = _check_state(x, system.n)
    obs = system.observation if observation is None else observation
    if isinstance(obs, str):
        obs = system.observations[obs]
    return obs(x), obs.jacobian(x)


def rk4_step(vector_field: Callable, x, t, dt, check=True):
    """One classical Runge-Kutta step of ``xdot = vector_field(x, t)``."""
    k1 = vector_field(x, t)
    stages = [k1]
    k2 = vector_field(x + 0.5 * dt * k1, t + 0.5 * dt)
    stages.append(k2)
    k3 = vector_field(x + 0.5 * dt * k2, t + 0.5 * dt)
    stages.append(k3)
    k4 = vector_field(x + dt * k3, t + dt)
    stages.append(k4)
    if check:
        for i, k in enumerate(stages, start=1):
            if not np.all(np.isfinite(k)):
                raise IntegrationError(f"non-finite derivative in RK4 stage {i}", stage=i)
    x_next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if check and not np.all(np.isfinite(x_next)):
        raise IntegrationError("non-finite state after RK4 update", stage=5)
    return x_next


def step_rk4(system, x, u, dt=DEFAULT_DT, dist=None, t=0.0, check=True):
    """Advance one step with ``u`` held constant (zero-order hold)."""
    if dt <= 0:
        raise ContractError("dt must be positive")
    x = _check_state(x, system.n) if check else np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)

    def field_(xs, ts):
        B = system.input_matrix(xs)
        out = system.drift(xs) + np.einsum("...ij,...j->...i", B, u)
        if dist is not None and dist.kind != "none":
            out = out + sample_disturbance(dist, xs, ts)
        return out

    return rk4_step(field_, x, t, dt, check=check)
