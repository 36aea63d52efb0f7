"""Variational (linearised) closed loop, contraction residuals and a Jacobi eigensolver.

All functions broadcast over leading batch axes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, InputError, SingularMetricError

SINGULAR_EIG = 1e-10


def sym(X):
    X = np.asarray(X, dtype=float)
    return 0.5 * (X + np.swapaxes(X, -1, -2))


def _rotate(A, V, p, q, c, s):
    c_ = c[..., None]
    s_ = s[..., None]
    ap, aq = A[..., :, p].copy(), A[..., :, q].copy()
    A[..., :, p] = c_ * ap - s_ * aq
    A[..., :, q] = s_ * ap + c_ * aq
    ap, aq = A[..., p, :].copy(), A[..., q, :].copy()
    A[..., p, :] = c_ * ap - s_ * aq
    A[..., q, :] = s_ * ap + c_ * aq
    vp, vq = V[..., :, p].copy(), V[..., :, q].copy()
    V[..., :, p] = c_ * vp - s_ * vq
    V[..., :, q] = s_ * vp + c_ * vq


def symmetric_eig(S, tol=1e-15, max_sweeps=100):
    """Cyclic Jacobi eigendecomposition; eigenvalues ascending.

    ``S`` of shape ``(..., n, n)`` is symmetrised first.  Returns ``(w, Q)``
    with ``S = Q diag(w) Q^T`` and the columns of ``Q`` orthonormal.
    """
    S = np.asarray(S, dtype=float)
    if S.ndim < 2 or S.shape[-1] != S.shape[-2]:
        raise ContractError(f"expected square matrices, got shape {S.shape}")
    if not np.all(np.isfinite(S)):
        raise InputError("matrix contains non-finite entries")
    A = sym(S).copy()
    n = A.shape[-1]
    V = np.broadcast_to(np.eye(n), A.shape).copy()
    scale = np.sqrt(np.sum(A * A, axis=(-2, -1)))
    iu = np.triu_indices(n, 1)
    for _ in range(max_sweeps):
        off = np.sqrt(2.0 * np.sum(A[..., iu[0], iu[1]] ** 2, axis=-1))
        if np.all(off <= tol * scale):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[..., p, q]
                active = np.abs(apq) > tol * 1e-3 * scale
                if not np.any(active):
                    continue
                safe = np.where(active, apq, 1.0)
                theta = (A[..., q, q] - A[..., p, p]) / (2.0 * safe)
                t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.hypot(theta, 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                c = np.where(active, c, 1.0)
                s = np.where(active, s, 0.0)
                _rotate(A, V, p, q, c, s)
    w = np.diagonal(A, axis1=-2, axis2=-1).copy()
    order = np.argsort(w, axis=-1, kind="stable")
    w = np.take_along_axis(w, order, axis=-1)
    V = np.take_along_axis(V, order[..., None, :], axis=-1)
    return w, V


def _spectral_fn(M, fn):
    w, Q = symmetric_eig(M)
    if np.any(w[..., 0] <= SINGULAR_EIG):
        raise SingularMetricError(f"metric is numerically singular (min eigenvalue {np.min(w[..., 0]):.3e})")
    return np.einsum("...ik,...k,...jk->...ij", Q, fn(w), Q)


def inv_sqrt(M):
    """``M^(-1/2)`` of a symmetric positive definite matrix."""
    return _spectral_fn(M, lambda w: 1.0 / np.sqrt(w))


def sqrtm_spd(M):
    return _spectral_fn(M, np.sqrt)


def spectral_norm(X):
    """Largest singular value via the eigenvalues of ``X^T X``."""
    X = np.asarray(X, dtype=float)
    G = np.swapaxes(X, -1, -2) @ X
    w, _ = symmetric_eig(G)
    return np.sqrt(np.maximum(w[..., -1], 0.0))


def sym_norm(S):
    """Spectral norm of a symmetric matrix: ``max |eigenvalue|``."""
    w, _ = symmetric_eig(S)
    return np.maximum(np.abs(w[..., 0]), np.abs(w[..., -1]))


# ---------------------------------------------------------------------------
# closed loop


class LinearFeedback:
    """Controller ``u = K y + u0`` with constant gain (oracle helper)."""

    def __init__(self, K, u0=None):
        self.K = np.atleast_2d(np.asarray(K, dtype=float))
        self.u0 = np.zeros(self.K.shape[0]) if u0 is None else np.asarray(u0, float)

    def torque(self, y):
        return np.einsum("ij,...j->...i", self.K, y) + self.u0

    def torque_jacobian(self, y):
        y = np.asarray(y, dtype=float)
        u = self.torque(y)
        return u, np.broadcast_to(self.K, y.shape[:-1] + self.K.shape).copy()


@dataclass
class ClosedLoop:
    """Pieces of the variational Jacobian at a batch of states."""

    drift: np.ndarray        # df/dx
    input_deriv: np.ndarray  # sum_i dB_i/dx u_i
    feedback: np.ndarray     # B J_pi J_h
    u: np.ndarray
    f_cl: np.ndarray
    B: np.ndarray
    J_pi: np.ndarray
    J_h: np.ndarray

    @property
    def total(self):
        return (self.drift + self.input_deriv) + self.feedback


def closed_loop_jacobian(system, controller, x, observation=None):
    """Closed-loop Jacobian split into drift, input-derivative and feedback parts.

    ``controller`` provides ``torque_jacobian(y) -> (u, du/dy)``.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (system.n,):
        raise ContractError(f"state dimension {x.shape[-1:]} does not match system ({system.n})")
    obs = system.observation if observation is None else observation
    y = obs(x)
    J_h = obs.jacobian(x)
    u, J_pi = controller.torque_jacobian(y)
    B = system.input_matrix(x)
    Df = system.drift_jacobian(x)
    dB = system.input_column_jacobians(x)
    input_deriv = np.einsum("...ijk,...i->...jk", dB, u)
    feedback = B @ J_pi @ J_h
    f_cl = system.drift(x) + np.einsum("...ij,...j->...i", B, u)
    return ClosedLoop(Df, input_deriv, feedback, u, f_cl, B, J_pi, J_h)


def closed_loop_field(system, controller, x, observation=None):
    obs = system.observation if observation is None else observation
    u = controller.torque(obs(np.asarray(x, dtype=float)))
    return system.drift(x) + np.einsum("...ij,...j->...i", system.input_matrix(x), u)


# ---------------------------------------------------------------------------
# residuals


@dataclass
class ResidualBundle:
    A_cl: np.ndarray
    M: np.ndarray
    R: np.ndarray
    R_hat_sym: np.ndarray
    lambda_max: np.ndarray
    components: dict
    M_inv_sqrt: np.ndarray


def _lyap_term(A, M):
    MA = M @ A
    return np.swapaxes(MA, -1, -2) + MA


def contraction_residual(M, M_dot, A_cl, alpha):
    """``R = A^T M + M A + Mdot + alpha M`` and its normalised symmetric part.

    ``A_cl`` may be a plain array or a :class:`ClosedLoop`; in the latter case
    the drift, input-derivative and feedback contributions are kept apart.
    Components are summed in the fixed order f, dB, BJ, Mdot, alphaM.
    """
    M = np.asarray(M, dtype=float)
    M_dot = np.asarray(M_dot, dtype=float)
    if isinstance(A_cl, ClosedLoop):
        parts = (A_cl.drift, A_cl.input_deriv, A_cl.feedback)
        A = A_cl.total
    else:
        A = np.asarray(A_cl, dtype=float)
        parts = (A, np.zeros_like(A), np.zeros_like(A))
    if A.shape[-2:] != M.shape[-2:] or M_dot.shape[-2:] != M.shape[-2:]:
        raise ContractError("residual operands have mismatched shapes")
    comps = {
        "f": _lyap_term(parts[0], M),
        "dB": _lyap_term(parts[1], M),
        "BJ": _lyap_term(parts[2], M),
        "Mdot": np.broadcast_to(M_dot, np.broadcast_shapes(M_dot.shape, M.shape)).copy(),
        "alphaM": alpha * M,
    }
    R = (((comps["f"] + comps["dB"]) + comps["BJ"]) + comps["Mdot"]) + comps["alphaM"]
    Mis = inv_sqrt(M)
    R_hat_sym = sym(Mis @ R @ Mis)
    w, _ = symmetric_eig(R_hat_sym)
    return ResidualBundle(A, M, R, R_hat_sym, w[..., -1], comps, Mis)


def component_norms(bundle):
    """Spectral norms of each normalised symmetric component."""
    Mis = bundle.M_inv_sqrt
    return {k: sym_norm(sym(Mis @ v @ Mis)) for k, v in bundle.components.items()}


@dataclass
class LyapunovRate:
    V: np.ndarray
    V_dot: np.ndarray
    ratio: np.ndarray   # nan where undefined
    defined: np.ndarray


V_FLOOR = 1e-12


def rate_from_matrices(M, M_dot, A_cl, e, alpha):
    """``V = e^T M e``, ``Vdot = e^T (A^T M + M A + Mdot) e`` and ``(Vdot + alpha V)/V``."""
    e = np.asarray(e, dtype=float)
    Me = np.einsum("...ij,...j->...i", M, e)
    V = np.einsum("...i,...i->...", e, Me)
    Ae = np.einsum("...ij,...j->...i", A_cl, e)
    V_dot = 2.0 * np.einsum("...i,...i->...", Me, Ae) + np.einsum("...i,...ij,...j->...", e, M_dot, e)
    defined = V >= V_FLOOR
    ratio = np.where(defined, (V_dot + alpha * V) / np.where(defined, V, 1.0), np.nan)
    return LyapunovRate(V, V_dot, ratio, defined)


def lyapunov_rate(field, system, controller, x, x_d, alpha):
    """Lyapunov value, its derivative and the normalised ratio at ``e = x - x_d``."""
    from .metric import metric_and_derivative

    x = np.asarray(x, dtype=float)
    cl = closed_loop_jacobian(system, controller, x)
    M, M_dot = metric_and_derivative(field, x, cl.f_cl)
    return rate_from_matrices(M, M_dot, cl.total, x - np.asarray(x_d, dtype=float), alpha)
