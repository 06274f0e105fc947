"""McKean process, empirical law fields and synchronous couplings.

The McKean copy of a particle evolves as

    dx = v dt
    dv = -kappa (a(x,t) v - b(x,t)) dt - x dt + sqrt(2 sigma) v dW

where ``a = int psi(|x-y|) f`` and ``b = int v* psi(|x-y|) f`` are integrals
against the law f of the copy.  Here f is represented by an ensemble of M
copies (an empirical measure).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .diagnostics import kinetic_regime
from .engine import OVERFLOW_LIMIT, SimulationFault, StepConfig, em_step_arrays
from .model import ContractViolation, KernelSpec, ModelParams
from .rng import INIT_STREAM, LAW_STREAM, NOISE_STREAM, derive_seed, generator

COMMON = "common"
INDEPENDENT = "independent"


@dataclass(frozen=True, eq=False)
class FieldEstimate:
    a_val: np.ndarray
    b_val: np.ndarray


@dataclass(eq=False)
class McKeanEnsemble:
    positions: np.ndarray  # (M, d)
    velocities: np.ndarray
    time: float = 0.0

    @property
    def m(self) -> int:
        return self.positions.shape[0]


@dataclass(eq=False)
class McKeanTrajectory:
    times: np.ndarray
    positions: np.ndarray  # (K, M, d)
    velocities: np.ndarray
    seed: int
    halted: bool = False

    def ensembles(self) -> list[McKeanEnsemble]:
        return [McKeanEnsemble(x, v, float(t)) for t, x, v in zip(self.times, self.positions, self.velocities)]


@dataclass(eq=False)
class CouplingRecord:
    times: np.ndarray
    err_x: np.ndarray
    err_v: np.ndarray
    se_x: np.ndarray
    se_v: np.ndarray
    se_total: np.ndarray
    n: int
    m_realizations: int
    seed: int
    law_size: int
    law_noise: str
    radius_exceeded: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def err(self) -> np.ndarray:
        return self.err_x + self.err_v


@dataclass(frozen=True)
class McKeanConstants:
    hypotheses_hold: bool
    epsilon: float
    epsilon_statement: float
    eta: float
    delta: float
    lam: float
    c_m: Optional[float]
    c_star: Optional[float]


def fields_arrays(xq, ys, vs, kernel: KernelSpec, weights=None):
    """Fields at query points ``xq (..., Q, d)`` from a sample ``ys, vs (..., M, d)``.

    Weights default to ``1/M`` (unit mass).  Returns ``a (..., Q)`` and
    ``b (..., Q, d)``.
    """
    m = ys.shape[-2]
    if m == 0:
        raise ContractViolation("empty law sample")
    if kernel.is_constant and weights is None:
        a = np.full(xq.shape[:-1], kernel.value)
        b = np.broadcast_to(kernel.value * vs.mean(-2, keepdims=True), xq.shape).copy()
        return a, b
    diff = ys[..., None, :, :] - xq[..., :, None, :]
    w = kernel.weights_sq((diff * diff).sum(-1))  # (..., Q, M)
    if weights is None:
        w = w / m
    else:
        w = w * np.asarray(weights, dtype=float)
    return w.sum(-1), (w[..., None] * vs[..., None, :, :]).sum(-2)


def self_fields_arrays(ys, vs, kernel: KernelSpec):
    """Leave-one-out fields of each member of an ensemble ``(..., M, d)``.

    Member i sees the other M-1 members with weight ``1/(M-1)`` each.
    """
    m = ys.shape[-2]
    if m < 2:
        raise ContractViolation("leave-one-out fields need at least 2 copies")
    psi0 = float(kernel.weights_sq(np.zeros(())))
    if kernel.is_constant:
        a = np.full(ys.shape[:-1], kernel.value)
        b = kernel.value * (vs.sum(-2, keepdims=True) - vs) / (m - 1)
        return a, b
    diff = ys[..., None, :, :] - ys[..., :, None, :]
    w = kernel.weights_sq((diff * diff).sum(-1))
    a = (w.sum(-1) - psi0) / (m - 1)
    b = ((w[..., None] * vs[..., None, :, :]).sum(-2) - psi0 * vs) / (m - 1)
    return a, b


def empirical_fields(x, law_positions, law_velocities, kernel: KernelSpec, weights=None) -> FieldEstimate:
    """Fields a, b at a single point ``x`` from a weighted point sample."""
    ys = np.atleast_2d(np.asarray(law_positions, dtype=float))
    vs = np.atleast_2d(np.asarray(law_velocities, dtype=float))
    if ys.shape[0] == 0 or ys.size == 0:
        raise ContractViolation("empty law sample")
    xq = np.asarray(x, dtype=float).reshape(1, -1)
    a, b = fields_arrays(xq, ys, vs, kernel, weights)
    return FieldEstimate(a[0], b[0])


def mckean_step_arrays(x, v, a, b, params: ModelParams, dt: float, dW):
    dW = np.asarray(dW, dtype=float)
    dW = dW.reshape(dW.shape + (1,) * (v.ndim - dW.ndim))
    dv = -params.kappa * (a[..., None] * v - b) - x
    return x + v * dt, v + dv * dt + math.sqrt(2.0 * params.sigma) * v * dW


def mckean_step(x, v, fields: FieldEstimate, params: ModelParams, dt: float, dW: float):
    """Euler-Maruyama step of one McKean copy given its fields."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    a = np.asarray(fields.a_val, dtype=float)
    b = np.asarray(fields.b_val, dtype=float)
    dv = -params.kappa * (a * v - b) - x
    x1 = x + v * dt
    v1 = v + dv * dt + math.sqrt(2.0 * params.sigma) * v * dW
    if not (np.all(np.isfinite(x1)) and np.all(np.isfinite(v1))):
        raise SimulationFault("non-finite McKean state", 0, float("nan"))
    return x1, v1


def uniform_law_sample(m: int, dim: int, box_half_width: float, rng: np.random.Generator, center: bool = True):
    x = rng.uniform(-box_half_width, box_half_width, (m, dim))
    v = rng.uniform(-box_half_width, box_half_width, (m, dim))
    if center:
        x = x - x.mean(0)
        v = v - v.mean(0)
    return x, v


def self_consistent_mckean(
    initial: McKeanEnsemble,
    params: ModelParams,
    cfg: StepConfig,
    field_stride: int = 1,
) -> McKeanTrajectory:
    """Law-estimation run: M copies, independent noise paths, leave-one-out fields."""
    y, w = np.array(initial.positions, dtype=float), np.array(initial.velocities, dtype=float)
    m = y.shape[0]
    if m < 2:
        raise ContractViolation(f"self-consistent ensemble needs M >= 2, got {m}")
    # copy k draws its own path from the k-th derived seed
    inc = np.stack(
        [generator(derive_seed(cfg.seed, k), LAW_STREAM).standard_normal(cfg.steps) for k in range(m)], 1
    ) * math.sqrt(cfg.dt)
    keep = set(cfg.record_steps().tolist())
    xs, vs, times = [y.copy()], [w.copy()], [initial.time]
    halted = False
    a = b = None
    for k in range(cfg.steps):
        if k % field_stride == 0:
            a, b = self_fields_arrays(y, w, params.kernel)
        y, w = mckean_step_arrays(y, w, a, b, params, cfg.dt, inc[k][:, None])
        t = initial.time + (k + 1) * cfg.dt
        if not (np.isfinite(y).all() and np.isfinite(w).all()):
            raise SimulationFault("non-finite McKean state", k + 1, t)
        over = np.abs(w).max() > OVERFLOW_LIMIT
        if k + 1 in keep or over:
            xs.append(y.copy())
            vs.append(w.copy())
            times.append(t)
        if over:
            halted = True
            break
    return McKeanTrajectory(np.array(times), np.stack(xs), np.stack(vs), cfg.seed, halted)


def coupled_runs(
    n_list: Sequence[int],
    params: ModelParams,
    cfg: StepConfig,
    law_size: int = 1024,
    m_realizations: int = 100,
    box_half_width: float = 1.0,
    law_noise: str = COMMON,
    exact_fields: bool = False,
    field_stride: int = 1,
    initial=None,
) -> list[CouplingRecord]:
    """Synchronous couplings of the centered particle system with McKean copies.

    For every outer realization r (seed ``derive_seed(cfg.seed, r)``) and every
    N in ``n_list``: N particles start from the projected uniform law (or
    from ``initial`` when given), their N McKean copies start at the same
    points, and both are driven by the same scalar Brownian path.  The copies'
    fields come from an auxiliary self-consistent ensemble of ``law_size``
    copies drawn from the same initial law; it is shared by all N of one
    realization.  With ``law_noise="common"`` the ensemble is driven by the
    realization's path as well, with ``"independent"`` every member has its own.
    ``exact_fields`` (constant kernel only) replaces the estimate by the exact
    centered-law fields ``a = c``, ``b = 0``.
    """
    if law_noise not in (COMMON, INDEPENDENT):
        raise ContractViolation(f"law_noise must be {COMMON!r} or {INDEPENDENT!r}")
    if exact_fields and not params.kernel.is_constant:
        raise ContractViolation("exact fields are only available for the constant kernel")
    if m_realizations < 1:
        raise ContractViolation("need at least one outer realization")
    d, m, M, steps, dt = params.dim, m_realizations, law_size, cfg.steps, cfg.dt
    seeds = [derive_seed(cfg.seed, r) for r in range(m)]
    dW = np.stack([generator(s, NOISE_STREAM).standard_normal(steps) for s in seeds]) * math.sqrt(dt)

    systems = []
    for n in n_list:
        if initial is not None:
            x0 = np.broadcast_to(initial.positions, (m, n, d)).copy()
            v0 = np.broadcast_to(initial.velocities, (m, n, d)).copy()
        else:
            x0, v0 = np.empty((m, n, d)), np.empty((m, n, d))
            for r, s in enumerate(seeds):
                x0[r], v0[r] = uniform_law_sample(n, d, box_half_width, generator(derive_seed(s, n), INIT_STREAM))
        systems.append([params.with_(n=n), x0, v0, x0.copy(), v0.copy()])

    if not exact_fields:
        ya, va = np.empty((m, M, d)), np.empty((m, M, d))
        for r, s in enumerate(seeds):
            ya[r], va[r] = uniform_law_sample(M, d, box_half_width, generator(s, LAW_STREAM))
        if law_noise == INDEPENDENT:
            dWa = np.stack([generator(s, LAW_STREAM + 1).standard_normal((steps, M)) for s in seeds], 1)
            dWa *= math.sqrt(dt)

    rec = set(cfg.record_steps().tolist())
    times = [0.0]
    series = [[[np.zeros(m)], [np.zeros(m)]] for _ in n_list]
    radius_exceeded = False
    R2 = params.kernel.radius**2
    cached: list = [None] * len(systems)
    sa = sb = None
    for k in range(steps):
        t = (k + 1) * dt
        refresh = k % field_stride == 0
        if not exact_fields and refresh:
            sa, sb = self_fields_arrays(ya, va, params.kernel)
        for idx, (p, x, v, xb, vb) in enumerate(systems):
            if exact_fields:
                a, b = np.full(xb.shape[:-1], params.kernel.value), np.zeros_like(vb)
            else:
                if refresh:
                    cached[idx] = fields_arrays(xb, ya, va, params.kernel)
                a, b = cached[idx]
            x, v = em_step_arrays(x, v, p, dt, dW[:, k], centered=True)
            xb, vb = mckean_step_arrays(xb, vb, a, b, params, dt, dW[:, k])
            if not (np.isfinite(x).all() and np.isfinite(v).all() and np.isfinite(xb).all() and np.isfinite(vb).all()):
                raise SimulationFault("non-finite coupled state", k + 1, t)
            systems[idx][1:] = [x, v, xb, vb]
        if not exact_fields:
            noise = dW[:, k][:, None, None] if law_noise == COMMON else dWa[k][..., None]
            ya, va = mckean_step_arrays(ya, va, sa, sb, params, dt, noise)
        if k + 1 in rec:
            times.append(t)
            for idx, (p, x, v, xb, vb) in enumerate(systems):
                series[idx][0].append(((x - xb) ** 2).sum(-1).mean(-1))
                series[idx][1].append(((v - vb) ** 2).sum(-1).mean(-1))
                if math.isfinite(R2):
                    diff = x[..., None, :, :] - x[..., :, None, :]
                    radius_exceeded |= bool(((diff * diff).sum(-1) > R2).any())

    out = []
    def se(arr):
        return arr.std(axis=1, ddof=1) / math.sqrt(m) if m > 1 else np.zeros(arr.shape[0])

    for n, (sx, sv) in zip(n_list, series):
        sx, sv = np.stack(sx), np.stack(sv)
        out.append(
            CouplingRecord(
                times=np.array(times),
                err_x=sx.mean(1),
                err_v=sv.mean(1),
                se_x=se(sx),
                se_v=se(sv),
                se_total=se(sx + sv),
                n=int(n),
                m_realizations=m,
                seed=cfg.seed,
                law_size=0 if exact_fields else M,
                law_noise="exact" if exact_fields else law_noise,
                radius_exceeded=radius_exceeded,
            )
        )
    return out


def coupled_run(initial, params: ModelParams, cfg: StepConfig, law_size: int = 1024, **kwargs) -> CouplingRecord:
    """Single-N coupling.  ``initial`` may be ``None`` to sample per realization."""
    n = params.n if initial is None else initial.n
    return coupled_runs([n], params, cfg, law_size, initial=initial, **kwargs)[0]


def mckean_constants(params: ModelParams, mass: float = 1.0, f0_second_moment: float = 1.0) -> McKeanConstants:
    """Constants of the McKean moment inequality and the decay rate C_* = min{C_m, eta}.

    ``epsilon`` is the cross-term weight that closes the estimate,
    ``min{1/2, (kappa psi_m mass - sigma) / (4 ((kappa psi_M mass)^2 + 1))}``;
    ``epsilon_statement`` is the simpler closed form often quoted for it.
    """
    k, s, d = params.kappa, params.sigma, params.dim
    psi_m, psi_M = params.kernel.psi_min, params.kernel.psi_max
    excess = k * psi_m * mass - s
    holds = psi_m > 0 and k * psi_m * mass > d * s
    eps = min(0.5, 0.25 * excess / ((k * psi_M * mass) ** 2 + 1))
    eps_stmt = min(0.5, excess / (2 * (1 + 2 * (k * psi_M) ** 2)))
    eta = min(0.5 * eps, 0.25 * excess)
    delta = excess / k
    lam = (2 / delta + 4 * eps * k) * k * psi_M**2 * mass * f0_second_moment if delta > 0 else math.inf
    c_m = kinetic_regime(params, mass).c_m if holds else None
    c_star = min(c_m, eta) if c_m is not None else None
    return McKeanConstants(holds, eps, eps_stmt, eta, delta, lam, c_m, c_star)
