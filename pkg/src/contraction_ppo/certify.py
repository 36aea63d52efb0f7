"""Post-training certification of the learned closed loop.

Constants are sampled suprema over the region box, inflated by a safety
factor.  The analytic margin sums unsigned norms, so it is conservative;
the pointwise residual check is reported next to it.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .dynamics import DEFAULT_DT, rk4_step, sample_disturbance
from .errors import SingularMetricError
from .metric import (gram, metric_and_derivative, metric_grad_frobenius, metric_value, theta)
from .variational import (SINGULAR_EIG, closed_loop_jacobian, contraction_residual, inv_sqrt,
                          spectral_norm, sqrtm_spd, sym, sym_norm, symmetric_eig)

SAFETY = 1.1
REPORT_SCHEMA = "contraction-certificate/1"


# ---------------------------------------------------------------------------
# sampling


def region_samples(system, n, seed=0, boundary_fraction=0.2):
    """Halton points in K plus boundary-biased points (box corners and faces)."""
    d = system.n
    lo, hi = system.lower, system.upper
    corners = np.array(np.meshgrid(*[[0.0, 1.0]] * d, indexing="ij")).reshape(d, -1).T
    n_face = int(boundary_fraction * n)
    n_face = min(n_face, max(n - len(corners), 0))
    n_int = max(n - n_face - len(corners), 0)
    parts = [corners[:n]]
    if n_int:
        parts.append(qmc.Halton(d, scramble=False).random(n_int + 1)[1:])
    if n_face:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 31]))
        pts = rng.uniform(size=(n_face, d))
        axis = rng.integers(0, d, size=n_face)
        side = rng.integers(0, 2, size=n_face).astype(float)
        pts[np.arange(n_face), axis] = side
        parts.append(pts)
    unit = np.concatenate(parts)[:n]
    return lo + unit * (hi - lo)


# ---------------------------------------------------------------------------
# envelopes and constants


@dataclass
class Envelopes:
    f_bar: float
    B_bar: float
    u_bar: float
    J_h_bar: float


def estimate_envelopes(system, stack, x, safety=SAFETY):
    x = np.asarray(x, dtype=float)
    y = system.observation(x)
    f = system.drift(x)
    B = system.input_matrix(x)
    u = stack.torque(y)
    Jh = system.observation.jacobian(x)
    return Envelopes(safety * float(np.max(np.linalg.norm(f, axis=-1))),
                     safety * float(np.max(spectral_norm(B))),
                     safety * float(np.max(np.linalg.norm(u, axis=-1))),
                     safety * float(np.max(spectral_norm(Jh))))


@dataclass
class Constants:
    C_f: float
    C_BdB: float
    C_BJ: float


@dataclass
class SampleAnalysis:
    """Per-sample quantities shared by the constants and the residual check."""

    x: np.ndarray
    keep: np.ndarray
    lam_min: np.ndarray
    lam_max: np.ndarray
    residual: np.ndarray
    norms: dict
    bj_factor: np.ndarray
    grad_M: np.ndarray
    grad_M_hat: np.ndarray
    J_pi_norm: np.ndarray

    @property
    def excluded(self):
        return int((~self.keep).sum())


def analyse_samples(system, stack, field_, x, alpha):
    """Residual bundles and normalised component norms at every non-singular sample."""
    x = np.asarray(x, dtype=float)
    w, _ = symmetric_eig(gram(theta(field_, x)))
    keep = w[:, 0] > SINGULAR_EIG
    xk = x[keep]
    cl = closed_loop_jacobian(system, stack, xk)
    M, M_dot = metric_and_derivative(field_, xk, cl.f_cl)
    bundle = contraction_residual(M, M_dot, cl, alpha)
    Mis = bundle.M_inv_sqrt
    norms = {k: sym_norm(sym(Mis @ v @ Mis)) for k, v in bundle.components.items()}
    Ms = sqrtm_spd(M)
    # the input matrix is rectangular: bound ||M^1/2 B K M^-1/2|| by ||M^1/2 B|| ||K|| ||M^-1/2||
    bj = 2.0 * spectral_norm(Ms @ cl.B) * spectral_norm(Mis)
    return SampleAnalysis(x, keep, w[keep, 0], w[keep, -1], bundle.lambda_max, norms, bj,
                          metric_grad_frobenius(field_, xk),
                          metric_grad_frobenius(field_, xk, normalized=True),
                          spectral_norm(cl.J_pi))


def compute_constants(analysis, safety=SAFETY):
    return Constants(safety * float(np.max(analysis.norms["f"])),
                     safety * float(np.max(analysis.norms["dB"])),
                     safety * float(np.max(analysis.bj_factor)))


def theorem1_margin(constants, L_pi, L_M, m_min, envelopes, alpha, variant="sqrt"):
    """Right-hand side of the Lipschitz residual bound; negative means certified.

    ``variant`` selects the metric-gradient term: ``sqrt`` uses
    ``L_M / sqrt(m_min)``, ``linear`` uses ``L_M / m_min`` and ``normalized``
    treats ``L_M`` as the normalised budget (no division).
    """
    scale = {"sqrt": 1.0 / math.sqrt(m_min), "linear": 1.0 / m_min, "normalized": 1.0}[variant]
    e = envelopes
    return (constants.C_f + constants.C_BdB + constants.C_BJ * L_pi * e.J_h_bar
            + L_M * scale * (e.f_bar + e.B_bar * e.u_bar) - alpha)


def alpha_floor(constants, L_pi, L_M, m_min, envelopes, variant="sqrt"):
    return theorem1_margin(constants, L_pi, L_M, m_min, envelopes, 0.0, variant)


def epsilon_budget(xi, alpha):
    """Admissible margins: ``(0, -(xi + alpha)]`` and the literal ``(0, alpha - xi]``."""
    upper = -(xi + alpha)
    literal = alpha - xi
    return {"lower": 0.0, "upper": upper, "empty": not upper > 0,
            "literal_upper": literal, "literal_empty": not literal > 0}


def sample_residuals(system, stack, field_, alpha, x, epsilon=0.0):
    """Worst normalised residual, violation fraction and per-sample CSV rows."""
    a = analyse_samples(system, stack, field_, x, alpha)
    res = a.residual
    rows = []
    xk = a.x[a.keep]
    for i in range(len(res)):
        rows.append([*xk[i], res[i], a.lam_min[i], a.lam_max[i]])
    worst = float(np.max(res)) if len(res) else math.nan
    return worst, float(np.mean(res > -epsilon)) if len(res) else math.nan, rows, a


# ---------------------------------------------------------------------------
# ISS verification


def iss_bound(t, V0, alpha, d_bar, m_min, m_max, form="consistent"):
    """Tracking-error bound under a disturbance of size ``d_bar``.

    ``consistent`` follows from ``Vdot <= -alpha V + 2 sqrt(V m_max) d``:
    ``sqrt(V0/m_min) e^{-alpha t/2} + (2 d/alpha) sqrt(chi) (1 - e^{-alpha t/2})``.
    ``literal`` is ``(V0/sqrt(m_min)) e^{-alpha t} + (d/alpha) sqrt(chi) (1 - e^{-alpha t})``.
    """
    t = np.asarray(t, dtype=float)
    chi = m_max / m_min
    if form == "consistent":
        decay = np.exp(-0.5 * alpha * t)
        return np.sqrt(V0 / m_min) * decay + (2.0 * d_bar / alpha) * math.sqrt(chi) * (1.0 - decay)
    if form == "literal":
        decay = np.exp(-alpha * t)
        return (V0 / math.sqrt(m_min)) * decay + (d_bar / alpha) * math.sqrt(chi) * (1.0 - decay)
    raise ValueError(f"unknown bound form {form!r}")


@dataclass
class ISSResult:
    magnitude: float
    times: np.ndarray
    errors: np.ndarray            # (steps+1, n_traj)
    bounds: np.ndarray
    literal_bounds: np.ndarray
    clean: np.ndarray             # per trajectory
    max_ratio: np.ndarray         # per trajectory, observed / bound
    literal_max_ratio: np.ndarray
    x: np.ndarray = None          # disturbed states (steps+1, n_traj, n)

    @property
    def passed(self):
        return self.max_ratio <= 1.05


def _residual_ok(system, stack, field_, pts, alpha, m_lo, m_hi):
    shape = pts.shape[:-1]
    flat = pts.reshape(-1, pts.shape[-1])
    inside = system.in_region(flat)
    w, _ = symmetric_eig(gram(theta(field_, flat)))
    ok = inside & (w[:, 0] >= m_lo) & (w[:, -1] <= m_hi)
    if np.any(ok):
        cl = closed_loop_jacobian(system, stack, flat[ok])
        M, M_dot = metric_and_derivative(field_, flat[ok], cl.f_cl)
        lam = contraction_residual(M, M_dot, cl, alpha).lambda_max
        ok[ok] = lam <= 0.0
    return ok.reshape(shape)


def verify_iss(system, stack, field_, dist, alpha, m_min, m_max, n_trajectories=25,
               horizon=4.0, dt=DEFAULT_DT, seed=0, reset_fraction=0.5, segment_points=3,
               check_every=1, keep_states=False):
    """Disturbed closed loop against the undisturbed one started at the reference.

    A trajectory is *clean* when the residual check (plus region membership
    and the eigen band) passes at both states and at interior points of the
    segment joining them, at every checked step.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 97]))
    lo, hi = system.sub_box(reset_fraction)
    K = int(n_trajectories)
    x0 = rng.uniform(lo, hi, size=(K, system.n))
    xd0 = np.broadcast_to(system.reference, (K, system.n)).copy()
    X = np.concatenate([x0, xd0])
    disturbed = np.concatenate([np.ones(K), np.zeros(K)])[:, None]
    mag = 0.0 if dist is None else dist.magnitude

    def vf(xs, t):
        u = stack.torque(system.observation(xs))
        out = system.drift(xs) + np.einsum("...ij,...j->...i", system.input_matrix(xs), u)
        if dist is not None and dist.kind != "none":
            out = out + disturbed * sample_disturbance(dist, xs, t)
        return out

    steps = int(round(horizon / dt))
    V0 = metric_value(field_, x0, x0 - xd0)
    times = np.arange(steps + 1) * dt
    errs = np.zeros((steps + 1, K))
    clean = np.ones(K, dtype=bool)
    mus = np.linspace(0.0, 1.0, segment_points + 2)
    states = [] if keep_states else None
    t = 0.0
    for k in range(steps + 1):
        xa, xb = X[:K], X[K:]
        errs[k] = np.linalg.norm(xa - xb, axis=-1)
        if keep_states:
            states.append(xa.copy())
        if k % check_every == 0:
            pts = xb[None] + mus[:, None, None] * (xa - xb)[None]
            clean &= np.all(_residual_ok(system, stack, field_, pts, alpha, m_min, m_max), axis=0)
        if k == steps:
            break
        with np.errstate(all="ignore"):
            X = rk4_step(vf, X, t, dt, check=False)
        blown = ~np.all(np.isfinite(X), axis=-1)
        if np.any(blown):
            clean &= ~(blown[:K] | blown[K:])
            X[blown] = 0.0
        t += dt
    bounds = np.stack([iss_bound(times, v, alpha, mag, m_min, m_max) for v in V0], axis=1)
    lit = np.stack([iss_bound(times, v, alpha, mag, m_min, m_max, "literal") for v in V0], axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.nanmax(np.where(bounds > 0, errs / bounds, np.where(errs > 0, np.inf, 0.0)), axis=0)
        lratio = np.nanmax(np.where(lit > 0, errs / lit, np.where(errs > 0, np.inf, 0.0)), axis=0)
    return ISSResult(mag, times, errs, bounds, lit, clean, ratio, lratio,
                     None if states is None else np.array(states))


def envelope_decay_rate(times, errors, floor=1e-9):
    """Least-squares decay rate of the running-max envelope ``max_{s>=t} ||e(s)||``."""
    env = np.maximum.accumulate(errors[::-1])[::-1]
    ok = env > floor * max(env[0], floor)
    if ok.sum() < 2:
        return math.inf
    slope = np.polyfit(times[ok], np.log(env[ok]), 1)[0]
    return float(-slope)


def default_magnitudes(d_bar, count=4, top=0.8):
    return [top * d_bar * (i + 1) / count for i in range(count)]


# ---------------------------------------------------------------------------
# report


@dataclass
class CertificationReport:
    data: dict
    residual_rows: list = field(default_factory=list)

    @property
    def verdict(self):
        return self.data["verdict"]

    def to_json(self):
        return json.dumps(self.data, indent=2, sort_keys=True, allow_nan=False, default=_jsonable) + "\n"

    def residual_csv(self, n):
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow([f"x{i}" for i in range(n)] + ["lambda_max", "metric_eig_min", "metric_eig_max"])
        for r in self.residual_rows:
            wr.writerow([repr(float(v)) for v in r])
        return buf.getvalue()


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"cannot serialise {type(v)}")


def _num(v):
    v = float(v)
    return v if math.isfinite(v) else None


def certify(system, stack, field_, alpha, epsilon, n_samples=10000, seed=0, safety=SAFETY,
            iss=None):
    """Assemble the full certification report.  ``iss`` is an optional list of
    :class:`ISSResult` to summarise."""
    if n_samples < 1:
        raise ValueError("need at least one sample")
    x = region_samples(system, n_samples, seed)
    worst, viol, rows, a = sample_residuals(system, stack, field_, alpha, x, epsilon)
    if not a.keep.any():
        raise SingularMetricError(f"metric is singular at all {len(x)} samples")
    env = estimate_envelopes(system, stack, x, safety)
    const = compute_constants(a, safety)
    L_pi = stack.lipschitz()
    L_M = safety * float(np.max(a.grad_M))
    L_M_hat = safety * float(np.max(a.grad_M_hat))
    m_min = min(field_.m_min, float(np.min(a.lam_min)))
    m_max = max(field_.m_max, float(np.max(a.lam_max)))
    margin = theorem1_margin(const, L_pi, L_M, m_min, env, alpha)
    variants = {
        "sqrt_m_min": margin,
        "m_min": theorem1_margin(const, L_pi, L_M, m_min, env, alpha, "linear"),
        "normalized": theorem1_margin(const, L_pi, L_M_hat, m_min, env, alpha, "normalized"),
    }
    floor = alpha_floor(const, L_pi, L_M, m_min, env)
    xi = worst - alpha
    budget = epsilon_budget(xi, alpha)
    budget["training_epsilon_admissible"] = bool(0 < epsilon <= budget["upper"])
    if margin < 0:
        verdict = "certified"
    elif worst <= 0:
        verdict = "sampled-only"
    else:
        verdict = "failed"
    from .net import lipschitz_bound
    data = {
        "schema": REPORT_SCHEMA,
        "system": system.name,
        "region": {"lower": system.lower.tolist(), "upper": system.upper.tolist()},
        "samples": int(len(x)),
        "excluded_singular": a.excluded,
        "safety_factor": safety,
        "alpha": alpha,
        "epsilon": epsilon,
        "envelopes": {"f_bar": env.f_bar, "B_bar": env.B_bar, "u_bar": env.u_bar,
                      "J_h_bar": env.J_h_bar},
        "lipschitz": {"L_pi": L_pi, "L_delta_q": lipschitz_bound(stack.policy_net),
                      "L_M": L_M, "L_M_hat": L_M_hat,
                      "sampled_J_pi_max": float(np.max(a.J_pi_norm))},
        "constants": {"C_f": const.C_f, "C_BdB": const.C_BdB, "C_BJ": const.C_BJ},
        "metric": {"m_min": m_min, "m_max": m_max, "chi": m_max / m_min,
                   "sampled_eig_min": float(np.min(a.lam_min)),
                   "sampled_eig_max": float(np.max(a.lam_max))},
        "theorem1_margin": margin,
        "theorem1_margin_variants": variants,
        "alpha_floor": floor,
        "xi": xi,
        "epsilon_budget": budget,
        "sampled_worst_residual": worst,
        "violation_fraction": viol,
        "conservative": bool(worst <= margin + 1e-6),
        "verdict": verdict,
        "iss": None if iss is None else summarise_iss(iss),
    }
    return CertificationReport(data, rows)


def summarise_iss(results):
    out = []
    for r in results:
        clean = r.clean
        out.append({
            "magnitude": r.magnitude,
            "trajectories": int(len(clean)),
            "clean": int(clean.sum()),
            "clean_pass": int((r.passed & clean).sum()),
            "max_ratio_clean": _num(np.max(r.max_ratio[clean])) if clean.any() else None,
            "literal_pass_clean": int(((r.literal_max_ratio <= 1.05) & clean).sum()),
            "max_error": float(np.max(r.errors)),
            "late_max_error": float(np.max(r.errors[len(r.times) // 2:])),
        })
    return out
