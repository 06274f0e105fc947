"""Lyapunov functionals, decay constants and the second-moment oracle."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import ContractViolation, ModelParams, ParticleState, alignment_pairwise

DECAY = "Decay"
GROWTH = "Growth"
INDETERMINATE = "Indeterminate"


@dataclass(frozen=True)
class LyapunovParams:
    beta: float
    alpha: float = 1.0


@dataclass(frozen=True)
class FlockingReport:
    condition_holds: bool
    beta_max: Optional[float] = None
    beta_used: Optional[float] = None
    rate_a: Optional[float] = None
    as_decay_rate: Optional[float] = None
    kernel_certified: bool = True


@dataclass(frozen=True)
class KineticRegimeReport:
    regime: str
    mass: float
    dim: int
    c_m: Optional[float]
    c_big: Optional[float]
    c_big_statement: Optional[float]
    epsilon: Optional[float]
    forms_agree: bool = True


def lyapunov_v(state: ParticleState, lp: LyapunovParams) -> float:
    """alpha sum|x|^2 + beta sum x.v + sum|v|^2 over a centered state."""
    x, v = state.positions, state.velocities
    return float(lp.alpha * np.sum(x * x) + lp.beta * np.sum(x * v) + np.sum(v * v))


def lyapunov_v_arrays(x, v, beta: float, alpha: float = 1.0):
    return alpha * (x * x).sum((-2, -1)) + beta * (x * v).sum((-2, -1)) + (v * v).sum((-2, -1))


def generator_lv(state: ParticleState, params: ModelParams, lp: LyapunovParams) -> float:
    """Exact Ito generator of V along the centered system (not its upper bound)."""
    x, v = state.positions, state.velocities
    n = state.n
    # alignment_pairwise returns (1/N) sum_j psi (v^j - v^i) per particle
    align = alignment_pairwise(x, v, params.kernel) * n
    k = params.kappa / n
    return float(
        2.0 * k * np.sum(align * v)
        + k * lp.beta * np.sum(align * x)
        + (2.0 * lp.alpha - 2.0) * np.sum(x * v)
        + (lp.beta + 2.0 * params.sigma) * np.sum(v * v)
        - lp.beta * np.sum(x * x)
    )


def flocking_check(params: ModelParams, beta: Optional[float] = None) -> FlockingReport:
    """Sufficient condition kappa psi_m > sigma and the resulting decay rate.

    ``beta`` defaults to half the admissible maximum.
    """
    psi_m, psi_M = params.kernel.psi_min, params.kernel.psi_max
    certified = params.kernel.certified
    kappa, sigma = params.kappa, params.sigma
    if not (certified and kappa * psi_m > sigma):
        return FlockingReport(False, kernel_certified=certified)
    beta_max = min(1.0, (2 * kappa * psi_m - 2 * sigma) / (1 + kappa**2 * psi_M**2))
    b = beta_max / 2 if beta is None else float(beta)
    if not 0 < b < beta_max:
        raise ContractViolation(f"beta={b} outside the admissible range (0, {beta_max})")
    a = min(2 * kappa * psi_m - 2 * sigma - (1 + kappa**2 * psi_M**2) * b, b / 2)
    return FlockingReport(True, beta_max, b, a, a / 3, certified)


def _sample_arrays(x, v, w, mass):
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    if x.ndim == 1:
        x, v = x[:, None], v[:, None]
    if x.shape[0] == 0:
        raise ContractViolation("empty sample")
    if w is None:
        w = np.full(x.shape[0], (1.0 if mass is None else mass) / x.shape[0])
    w = np.asarray(w, dtype=float)
    return x, v, w


def variance_functionals(x, v, weights=None, epsilon: float = 0.0, mass: Optional[float] = None):
    """Standard variance functional L and its cross-term variant L~.

    ``L = int (|x-x_c|^2 + |v-v_c|^2) f`` and
    ``L~ = int (|x-x_c|^2/2 + |v-v_c|^2/2 + eps (x-x_c).(v-v_c)) f`` for a
    weighted point sample of f.  Equal weights summing to ``mass`` (default
    1) are used when ``weights`` is omitted.
    """
    x, v, w = _sample_arrays(x, v, weights, mass)
    total = w.sum()
    xc = (w[:, None] * x).sum(0) / total
    vc = (w[:, None] * v).sum(0) / total
    dx, dv = x - xc, v - vc
    l_std = float(np.sum(w * ((dx * dx).sum(1) + (dv * dv).sum(1))))
    l_tilde = float(np.sum(w * (0.5 * (dx * dx).sum(1) + 0.5 * (dv * dv).sum(1) + epsilon * (dx * dv).sum(1))))
    return l_std, l_tilde


def variance_series(xs, vs):
    """L of the equal-weight unit-mass empirical measure along ``(..., N, d)`` snapshots."""
    dx = xs - xs.mean(-2, keepdims=True)
    dv = vs - vs.mean(-2, keepdims=True)
    return ((dx * dx).sum((-2, -1)) + (dv * dv).sum((-2, -1))) / xs.shape[-2]


def kinetic_regime(params: ModelParams, mass: float = 1.0, dim: Optional[int] = None) -> KineticRegimeReport:
    """Regime classification and constants C_m / C_M of the kinetic moment bounds.

    Decay constants use the closed forms.  The growth constant is computed
    from the cross-term weight eps = max{-1/2, kappa psi_M mass - d sigma};
    the shorter closed form is reported alongside and ``forms_agree``
    records whether the two coincide.
    """
    if not mass > 0:
        raise ContractViolation(f"mass must be > 0, got {mass}")
    d = params.dim if dim is None else dim
    k, s = params.kappa, params.sigma
    psi_m, psi_M = params.kernel.psi_min, params.kernel.psi_max
    grow = 1 + 2 * (k * psi_M) ** 2
    if psi_m > 0 and k * psi_m * mass > d * s:
        excess = k * psi_m * mass - d * s
        eps = min(0.5, excess / (2 * grow))
        c_m = min(0.25, excess / (4 * grow))
        return KineticRegimeReport(DECAY, mass, d, c_m, None, None, eps)
    if k * psi_M * mass < d * s:
        eps = max(-0.5, k * psi_M * mass - d * s)
        c_big = min(-grow * eps, (d * s - k * psi_M * mass) / 2)
        stated = min(grow / 2, (d * s - k * psi_M * mass) / 2)
        return KineticRegimeReport(GROWTH, mass, d, None, c_big, stated, eps, math.isclose(c_big, stated, rel_tol=1e-12))
    return KineticRegimeReport(INDETERMINATE, mass, d, None, None, None, None)


def moment_matrix(kappa: float, sigma: float) -> np.ndarray:
    """Linear generator of (E[x^2], E[xv], E[v^2]) per coordinate, constant kernel."""
    return np.array(
        [
            [0.0, 2.0, 0.0],
            [-1.0, -kappa, 1.0],
            [0.0, -2.0, -2.0 * (kappa - sigma)],
        ]
    )


def moment_ode_oracle(params: ModelParams, initial_moments, t: float, dt_ode: float = 1e-4) -> np.ndarray:
    """Classical RK4 on the closed second-moment system of one centered particle.

    The kernel must be constant with value c; the alignment rate is then
    kappa * c.  Returns ``(E[x^2], E[xv], E[v^2])`` at time ``t``.
    """
    if not params.kernel.is_constant:
        raise NotImplementedError("moment oracle requires a constant kernel")
    A = moment_matrix(params.kappa * params.kernel.value, params.sigma)
    y = np.array(initial_moments, dtype=float)
    if t == 0:
        return y
    steps = max(1, math.ceil(t / dt_ode - 1e-9))
    h = t / steps
    for _ in range(steps):
        k1 = A @ y
        k2 = A @ (y + 0.5 * h * k1)
        k3 = A @ (y + 0.5 * h * k2)
        k4 = A @ (y + h * k3)
        y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return y


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r2: float


def rate_fit(t, y, window: Optional[tuple[float, float]] = None) -> RateFit:
    """Least-squares fit of ln y against t on ``window`` (default: last half)."""
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if window is None:
        window = (t[0] + 0.5 * (t[-1] - t[0]), t[-1])
    sel = np.flatnonzero((t >= window[0]) & (t <= window[1]))
    if len(sel) < 10:
        raise ValueError(f"rate fit needs >= 10 points in the window, got {len(sel)}")
    bad = sel[~(y[sel] > 0)]
    if len(bad):
        raise ValueError(f"rate fit needs y > 0; first offending index {int(bad[0])}")
    tt, ly = t[sel], np.log(y[sel])
    slope, intercept = np.polyfit(tt, ly, 1)
    resid = ly - (slope * tt + intercept)
    ss_tot = float(((ly - ly.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0 else 1.0 - float((resid**2).sum()) / ss_tot
    return RateFit(float(slope), float(intercept), r2)


def spread_s(xs, vs):
    """S = sum_i |x^i| + sum_i |v^i| along ``(..., N, d)`` snapshots."""
    return np.linalg.norm(xs, axis=-1).sum(-1) + np.linalg.norm(vs, axis=-1).sum(-1)
