"""Feed-forward networks with hand-written backprop and Lipschitz budgets.

Besides the usual forward/backward pair, networks support forward-mode
tangent propagation (``mlp_jvp``) and the reverse pass through it
(``mlp_jvp_backward``).  The contraction loss differentiates directional
derivatives of both the metric factor and the policy, so parameters need
gradients of Jacobian-vector products, not just of outputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, StaleTapeError

ACTIVATION_TAGS = {"identity": 0, "tanh": 1, "softplus": 2, "elu": 3}
TAG_ACTIVATIONS = {v: k for k, v in ACTIVATION_TAGS.items()}


def activate(name, z):
    """Return ``(sigma(z), sigma'(z), sigma''(z))``."""
    if name == "identity":
        return z, np.ones_like(z), np.zeros_like(z)
    if name == "tanh":
        a = np.tanh(z)
        d1 = 1.0 - a * a
        return a, d1, -2.0 * a * d1
    if name == "softplus":
        a = np.logaddexp(0.0, z)
        s = 0.5 * (1.0 + np.tanh(0.5 * z))  # logistic, overflow-free
        return a, s, s * (1.0 - s)
    if name == "elu":
        neg = z < 0
        ez = np.exp(np.minimum(z, 0.0))
        a = np.where(neg, ez - 1.0, z)
        return a, np.where(neg, ez, 1.0), np.where(neg, ez, 0.0)
    raise ValueError(f"unknown activation {name!r}")


class LipschitzMlp:
    """Affine layers with per-layer spectral budgets.

    Hidden layers share one activation; the output layer is linear.  A budget
    of ``inf`` leaves the layer unconstrained (its norm is still tracked).
    """

    def __init__(self, sizes, activation="tanh", budgets=None, seed=0, gain=2 ** -0.5,
                 out_scale=1.0, out_bias=None):
        if len(sizes) < 2:
            raise ContractError("an MLP needs at least input and output sizes")
        if activation not in ACTIVATION_TAGS:
            raise ValueError(f"unknown activation {activation!r}")
        n_layers = len(sizes) - 1
        self._rng = np.random.default_rng(seed)
        self.weights, self.biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            a = gain * math.sqrt(6.0 / (fan_in + fan_out))
            W = self._rng.uniform(-a, a, size=(fan_out, fan_in))
            if i == n_layers - 1:
                W *= out_scale
            self.weights.append(W)
            self.biases.append(np.zeros(fan_out))
        if out_bias is not None:
            self.biases[-1] = np.array(out_bias, dtype=float)
        self.activations = [activation] * (n_layers - 1) + ["identity"]
        if budgets is None:
            budgets = [math.inf] * n_layers
        if len(budgets) != n_layers:
            raise ContractError(f"need {n_layers} budgets, got {len(budgets)}")
        self.budgets = [math.inf if b is None else float(b) for b in budgets]
        if any(b <= 0 for b in self.budgets):
            raise ContractError("spectral budgets must be positive")
        self._u = [self._unit(W.shape[1]) for W in self.weights]
        self.sigmas = [None] * n_layers
        self.version = 0
        spectral_normalize(self)

    @classmethod
    def from_layers(cls, weights, biases, activations, budgets, seed=0):
        """Build a network from explicit parameters (no rescaling applied)."""
        net = cls.__new__(cls)
        net._rng = np.random.default_rng(seed)
        net.weights = [np.array(W, dtype=float) for W in weights]
        net.biases = [np.array(b, dtype=float) for b in biases]
        net.activations = list(activations)
        net.budgets = [math.inf if b is None else float(b) for b in budgets]
        for W, b in zip(net.weights, net.biases):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ContractError("layer weight/bias shapes are inconsistent")
        for Wa, Wb in zip(net.weights[:-1], net.weights[1:]):
            if Wb.shape[1] != Wa.shape[0]:
                raise ContractError("consecutive layers do not chain")
        net._u = [net._unit(W.shape[1]) for W in net.weights]
        net.sigmas = [None] * len(net.weights)
        net.version = 0
        return net

    def _unit(self, k):
        u = self._rng.standard_normal(k)
        return u / np.linalg.norm(u)

    @property
    def n_in(self):
        return self.weights[0].shape[1]

    @property
    def n_out(self):
        return self.weights[-1].shape[0]

    def params(self):
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def touch(self):
        """Mark parameters as modified; outstanding tapes become stale."""
        self.version += 1

    def __call__(self, x):
        return mlp_forward(self, x)[0]

    def copy(self):
        net = LipschitzMlp.from_layers(self.weights, self.biases, self.activations, self.budgets)
        net._u = [u.copy() for u in self._u]
        net.sigmas = list(self.sigmas)
        return net


@dataclass
class GradientTape:
    """Cached intermediate values of one forward pass; single use."""

    net_id: int
    version: int
    squeeze: bool
    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    tangents_in: list = field(default_factory=list)
    pre_tangents: list = field(default_factory=list)
    consumed: bool = False


def _prepare(net, x):
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    x2 = np.atleast_2d(x)
    if x2.ndim != 2 or x2.shape[1] != net.n_in:
        raise ContractError(f"input has shape {x.shape}, network expects {net.n_in} features")
    return x2, squeeze


def mlp_forward(net, x):
    """Evaluate the network on ``x`` of shape ``(k,)`` or ``(batch, k)``."""
    a, squeeze = _prepare(net, x)
    tape = GradientTape(id(net), net.version, squeeze)
    for W, b, act in zip(net.weights, net.biases, net.activations):
        z = a @ W.T + b
        tape.inputs.append(a)
        tape.pre.append(z)
        a = activate(act, z)[0]
    return (a[0] if squeeze else a), tape


def mlp_jvp(net, x, v):
    """Forward pass plus the directional derivative ``J(x) v``."""
    a, squeeze = _prepare(net, x)
    t = np.atleast_2d(np.asarray(v, dtype=float))
    if t.shape != a.shape:
        raise ContractError("tangent must have the same shape as the input")
    tape = GradientTape(id(net), net.version, squeeze)
    for W, b, act in zip(net.weights, net.biases, net.activations):
        z = a @ W.T + b
        zd = t @ W.T
        tape.inputs.append(a)
        tape.tangents_in.append(t)
        tape.pre.append(z)
        tape.pre_tangents.append(zd)
        a, d1, _ = activate(act, z)
        t = d1 * zd
    if squeeze:
        return a[0], t[0], tape
    return a, t, tape


def _consume(net, tape):
    if tape.consumed:
        raise StaleTapeError("gradient tape already consumed")
    if tape.net_id != id(net) or tape.version != net.version:
        raise StaleTapeError("gradient tape does not match the current network parameters")
    tape.consumed = True


def _run_backward(net, tape, g_out, g_tan):
    grads = [None] * len(net.weights)
    ga = np.atleast_2d(np.asarray(g_out, dtype=float))
    gt = None if g_tan is None else np.atleast_2d(np.asarray(g_tan, dtype=float))
    for i in reversed(range(len(net.weights))):
        W = net.weights[i]
        _, d1, d2 = activate(net.activations[i], tape.pre[i])
        gz = ga * d1
        if gt is not None:
            gz = gz + gt * d2 * tape.pre_tangents[i]
            gzd = gt * d1
            gW = gz.T @ tape.inputs[i] + gzd.T @ tape.tangents_in[i]
            gt = gzd @ W
        else:
            gW = gz.T @ tape.inputs[i]
        grads[i] = (gW, gz.sum(axis=0))
        ga = gz @ W
    return grads, ga, gt


def mlp_backward(net, tape, output_cotangent):
    """Reverse pass: parameter gradients and input gradient for a cotangent.

    Gradients are summed over the batch.  Returns ``(grads, input_grad)`` with
    ``grads`` a list of ``(dW, db)`` per layer.
    """
    _consume(net, tape)
    if tape.pre_tangents:
        raise StaleTapeError("tape was recorded by mlp_jvp; use mlp_jvp_backward")
    cot = np.asarray(output_cotangent, dtype=float)
    expected = tape.pre[-1].shape if not tape.squeeze else tape.pre[-1].shape[1:]
    if cot.shape != expected:
        raise ContractError(f"cotangent shape {cot.shape} does not match output {expected}")
    grads, gx, _ = _run_backward(net, tape, cot, None)
    return grads, (gx[0] if tape.squeeze else gx)


def mlp_jvp_backward(net, tape, g_out, g_tangent):
    """Reverse pass through ``(out, J v)``; returns ``(grads, dx, dv)``."""
    _consume(net, tape)
    if not tape.pre_tangents:
        raise StaleTapeError("tape was not recorded by mlp_jvp")
    grads, gx, gv = _run_backward(net, tape, g_out, g_tangent)
    if tape.squeeze:
        return grads, gx[0], gv[0]
    return grads, gx, gv


def mlp_input_jacobian(net, x):
    """Full input Jacobian, one reverse sweep per output row.

    ``x`` of shape ``(k,)`` gives ``(j, k)``; a batch ``(B, k)`` gives ``(B, j, k)``.
    """
    a, squeeze = _prepare(net, x)
    derivs = []
    for W, b, act in zip(net.weights, net.biases, net.activations):
        z = a @ W.T + b
        a, d1, _ = activate(act, z)
        derivs.append(d1)
    j = net.n_out
    G = np.broadcast_to(np.eye(j), (a.shape[0], j, j))
    for W, d1 in zip(reversed(net.weights), reversed(derivs)):
        G = (G * d1[:, None, :]) @ W
    return G[0] if squeeze else G


def zero_grads(net):
    return [(np.zeros_like(W), np.zeros_like(b)) for W, b in zip(net.weights, net.biases)]


def add_grads(acc, grads, scale=1.0):
    return [(aW + scale * gW, ab + scale * gb) for (aW, ab), (gW, gb) in zip(acc, grads)]


def flatten_grads(grads):
    return np.concatenate([np.concatenate([gW.ravel(), gb.ravel()]) for gW, gb in grads])


# ---------------------------------------------------------------------------
# spectral normalisation


def _power_iteration(W, u, min_rounds, tol, max_rounds):
    sigma_prev = -1.0
    sigma = 0.0
    for r in range(max_rounds):
        v = W @ u
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return 0.0, u, False
        v /= nv
        w = W.T @ v
        sigma = np.linalg.norm(w)
        u = w / sigma
        if r + 1 >= min_rounds and abs(sigma - sigma_prev) <= tol * sigma:
            break
        sigma_prev = sigma
    return float(sigma), u, True


def spectral_norm_estimate(net, layer, rounds=5, tol=1e-13, max_rounds=2000):
    W = net.weights[layer]
    if not np.any(W):
        return 0.0
    sigma, u, ok = _power_iteration(W, net._u[layer], rounds, tol, max_rounds)
    if not ok:
        # warm-start vector fell into the null space; restart from a fresh draw
        sigma, u, _ = _power_iteration(W, net._unit(W.shape[1]), rounds, tol, max_rounds)
    net._u[layer] = u
    return sigma


def spectral_normalize(net, rounds=5, tol=1e-13, max_rounds=2000):
    """Rescale every layer whose spectral norm exceeds its budget.

    Power iteration runs at least ``rounds`` rounds (warm-started from the
    previous call) and continues until the estimate settles to ``tol``.
    Returns the post-normalisation spectral norms.
    """
    changed = False
    for i, W in enumerate(net.weights):
        sigma = spectral_norm_estimate(net, i, rounds, tol, max_rounds)
        budget = net.budgets[i]
        if sigma > budget:
            W *= budget / sigma
            sigma = budget
            changed = True
        net.sigmas[i] = sigma
    if changed:
        net.touch()
    return list(net.sigmas)


ACTIVATION_LIPSCHITZ = {"identity": 1.0, "tanh": 1.0, "softplus": 1.0, "elu": 1.0}


def lipschitz_bound(net):
    """Product of per-layer spectral norms (capped at budgets) and activation constants."""
    bound = 1.0
    for i in range(len(net.weights)):
        sigma = net.sigmas[i]
        if sigma is None:
            sigma = spectral_norm_estimate(net, i)
            net.sigmas[i] = sigma
        bound *= min(sigma, net.budgets[i])
    for act in net.activations[:-1]:
        bound *= ACTIVATION_LIPSCHITZ[act]
    return bound
