"""Learned contraction metric ``M(x) = Theta(x)^T Theta(x)`` with lower-triangular ``Theta``."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .net import LipschitzMlp, mlp_forward, mlp_input_jacobian, mlp_jvp
from .variational import inv_sqrt, symmetric_eig


def n_tri(n):
    return n * (n + 1) // 2


def tri_to_matrix(v, n):
    """Fill a lower-triangular matrix row by row from ``n(n+1)/2`` entries."""
    v = np.asarray(v, dtype=float)
    T = np.zeros(v.shape[:-1] + (n, n))
    rows, cols = np.tril_indices(n)
    T[..., rows, cols] = v
    return T


def matrix_to_tri(T):
    n = T.shape[-1]
    rows, cols = np.tril_indices(n)
    return T[..., rows, cols]


@dataclass
class MetricField:
    theta_net: LipschitzMlp
    n: int
    m_min: float = 0.1
    m_max: float = 10.0
    frozen: bool = False

    def __post_init__(self):
        if not 0 < self.m_min < self.m_max:
            raise ConfigError("metric bounds need 0 < m_min < m_max")
        if self.theta_net.n_in != self.n or self.theta_net.n_out != n_tri(self.n):
            raise ContractError("theta network has the wrong input/output size")

    @property
    def condition_bound(self):
        return self.m_max / self.m_min


def make_metric_field(n, hidden=(32, 32), budgets=(2.0, 2.0, 1.0), seed=0, m_min=0.1,
                      m_max=10.0, activation="tanh", out_scale=0.5):
    """Theta network initialised near ``Theta = I`` (so ``M = I`` at start)."""
    eye = matrix_to_tri(np.eye(n))
    net = LipschitzMlp([n, *hidden, n_tri(n)], activation=activation, budgets=list(budgets),
                       seed=seed, out_scale=out_scale, out_bias=eye)
    return MetricField(net, n, m_min, m_max)


def constant_metric_field(M, m_min=None, m_max=None):
    """State-independent field with ``Theta^T Theta = M`` exactly up to rounding."""
    M = np.asarray(M, dtype=float)
    n = M.shape[0]
    # reversed Cholesky keeps Theta lower triangular
    P = np.eye(n)[::-1]
    L = np.linalg.cholesky(P @ M @ P)
    Theta = P @ L.T @ P
    net = LipschitzMlp.from_layers([np.zeros((n_tri(n), n))], [matrix_to_tri(Theta)],
                                   ["identity"], [np.inf])
    w = np.linalg.eigvalsh(M)
    lo = w[0] * (1 - 1e-9) if m_min is None else m_min
    hi = w[-1] * (1 + 1e-9) if m_max is None else m_max
    return MetricField(net, n, lo, hi, frozen=True)


def _check_x(field, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (field.n,):
        raise ContractError(f"state has trailing dimension {x.shape[-1:]}, metric expects {field.n}")
    return x


def theta(field, x):
    x = _check_x(field, x)
    out, _ = mlp_forward(field.theta_net, x.reshape(-1, field.n))
    return tri_to_matrix(out, field.n).reshape(x.shape[:-1] + (field.n, field.n))


def gram(T):
    M = np.swapaxes(T, -1, -2) @ T
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def metric_matrix(field, x):
    return gram(theta(field, x))


def metric_value(field, x, e):
    e = np.asarray(e, dtype=float)
    if e.shape[-1:] != (field.n,):
        raise ContractError("error vector dimension does not match the metric")
    g = np.einsum("...ij,...j->...i", theta(field, x), e)
    return np.einsum("...i,...i->...", g, g)


def theta_and_rate(field, x, v):
    """``Theta(x)`` and its directional derivative along ``v``."""
    x = _check_x(field, x)
    v = np.asarray(v, dtype=float)
    shape = x.shape[:-1]
    out, tan, _ = mlp_jvp(field.theta_net, x.reshape(-1, field.n), np.broadcast_to(v, x.shape).reshape(-1, field.n))
    T = tri_to_matrix(out, field.n).reshape(shape + (field.n, field.n))
    dT = tri_to_matrix(tan, field.n).reshape(shape + (field.n, field.n))
    return T, dT


def _product_rule(T, dT):
    P = np.swapaxes(dT, -1, -2) @ T
    return P + np.swapaxes(P, -1, -2)


def metric_and_derivative(field, x, f_cl):
    T, dT = theta_and_rate(field, x, f_cl)
    return gram(T), _product_rule(T, dT)


def metric_time_derivative(field, x, f_cl):
    """``Mdot = sum_k dM/dx_k (f_cl)_k`` via a tangent pass through the theta net."""
    return metric_and_derivative(field, x, f_cl)[1]


def metric_gradients(field, x):
    """Stack of ``dM/dx_k`` with shape ``(..., n, n, n)``, index ``k`` first."""
    x = _check_x(field, x)
    n = field.n
    flat = x.reshape(-1, n)
    out, _ = mlp_forward(field.theta_net, flat)
    J = mlp_input_jacobian(field.theta_net, flat)          # (B, n_tri, n)
    T = tri_to_matrix(out, n)
    dT = tri_to_matrix(np.swapaxes(J, -1, -2), n)          # (B, n, n, n), k leading
    dM = _product_rule(T[:, None], dT)
    return dM.reshape(x.shape[:-1] + (n, n, n)), gram(T).reshape(x.shape[:-1] + (n, n))


def metric_grad_frobenius(field, x, normalized=False):
    """``sqrt(sum_k ||dM/dx_k||_F^2)``; with ``normalized`` each slice is
    first sandwiched by ``M^(-1/2)`` (raises on a singular metric)."""
    dM, M = metric_gradients(field, x)
    if normalized:
        Mis = inv_sqrt(M)[..., None, :, :]
        dM = Mis @ dM @ Mis
    return np.sqrt(np.sum(dM * dM, axis=(-3, -2, -1)))


def pd_penalty_theta(T, m_min, m_max):
    """Eigen-band penalty and its gradient with respect to ``Theta``.

    The subgradient uses the extremal eigenvectors; ties go to the first
    eigenvector in ascending order.
    """
    M = gram(T)
    w, Q = symmetric_eig(M)
    lo = m_min - w[..., 0]
    hi = w[..., -1] - m_max
    value = np.maximum(lo, 0.0) + np.maximum(hi, 0.0)
    vmin = Q[..., :, 0]
    vmax = Q[..., :, -1]
    G = (-(lo > 0).astype(float)[..., None, None] * vmin[..., :, None] * vmin[..., None, :]
         + (hi > 0)[..., None, None] * vmax[..., :, None] * vmax[..., None, :])
    return value, 2.0 * T @ G


def pd_penalty(field, x):
    return pd_penalty_theta(theta(field, x), field.m_min, field.m_max)[0]


def eigen_range(field, x):
    w, _ = symmetric_eig(metric_matrix(field, x))
    return w[..., 0], w[..., -1]
