"""Euler-Maruyama integration of the particle system."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import (
    ContractViolation,
    ModelParams,
    ParticleState,
    diffusion_arrays,
    drift_arrays,
)
from .rng import INIT_STREAM, NoisePath, derive_seed, generator, noise_matrix

OVERFLOW_LIMIT = 1e12


class SimulationFault(RuntimeError):
    """A step produced non-finite values."""

    def __init__(self, message: str, step: int, time: float):
        super().__init__(f"{message} at step {step} (t={time:.6g})")
        self.step = step
        self.time = time


@dataclass(frozen=True)
class StepConfig:
    dt: float = 1e-3
    t_final: float = 2.0
    record_every: int = 1
    seed: int = 42
    scheme: str = "euler-maruyama"

    def __post_init__(self) -> None:
        if not (self.dt > 0 and self.t_final > 0):
            raise ContractViolation(f"dt and t_final must be > 0, got dt={self.dt}, t_final={self.t_final}")
        if self.dt > self.t_final:
            raise ContractViolation(f"dt={self.dt} exceeds t_final={self.t_final}")
        if self.record_every < 1:
            raise ContractViolation(f"record_every must be >= 1, got {self.record_every}")
        if not 0 <= self.seed < 2**64:
            raise ContractViolation(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.scheme != "euler-maruyama":
            raise ContractViolation(f"only euler-maruyama is supported, got {self.scheme!r}")

    @property
    def steps(self) -> int:
        # guard against t_final/dt landing a hair above an integer
        return max(1, math.ceil(self.t_final / self.dt - 1e-9))

    def record_steps(self) -> np.ndarray:
        """Step indices that are recorded; always includes 0 and the last step."""
        idx = list(range(0, self.steps + 1, self.record_every))
        if idx[-1] != self.steps:
            idx.append(self.steps)
        return np.array(idx)


@dataclass(eq=False)
class TrajectoryRecord:
    times: np.ndarray
    positions: np.ndarray  # (K, N, d)
    velocities: np.ndarray  # (K, N, d)
    noise_seed: int
    params: ModelParams
    centered: bool = False
    halted: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def states(self) -> list[ParticleState]:
        return [ParticleState(float(t), x, v) for t, x, v in zip(self.times, self.positions, self.velocities)]

    def __len__(self) -> int:
        return len(self.times)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TrajectoryRecord):
            return NotImplemented
        return (
            np.array_equal(self.times, other.times)
            and np.array_equal(self.positions, other.positions)
            and np.array_equal(self.velocities, other.velocities)
            and self.noise_seed == other.noise_seed
            and self.params == other.params
            and self.halted == other.halted
        )


def em_step_arrays(x, v, params: ModelParams, dt: float, dW, centered: bool):
    """One Euler-Maruyama step on ``(..., N, d)`` arrays.

    ``dW`` broadcasts against the leading batch axes (one scalar per
    realization).  The diffusion reference is the ensemble mean of the
    input state, or zero in the centered frame.
    """
    dx, dv = drift_arrays(x, v, params, centered)
    v_ref = 0.0 if centered else v.mean(axis=-2, keepdims=True)
    g = diffusion_arrays(v, params.sigma, v_ref)
    dW = np.asarray(dW, dtype=float)
    dW = dW.reshape(dW.shape + (1, 1))
    return x + dx * dt, v + dv * dt + g * dW


def euler_maruyama(drift_fn, diffusion_fn, y0, increments, dt: float):
    """Generic scalar-noise Euler-Maruyama: ``y += f(y) dt + g(y) dW``.

    ``increments`` has the step axis last; leading axes broadcast against
    ``y0`` (one path per leading index).  Returns the endpoint.
    """
    y = np.array(y0, dtype=float)
    increments = np.asarray(increments, dtype=float)
    for k in range(increments.shape[-1]):
        y = y + drift_fn(y) * dt + diffusion_fn(y) * increments[..., k]
    return y


def em_step(
    state: ParticleState, params: ModelParams, dt: float, dW: float, centered: bool = False, step: int = 0
) -> ParticleState:
    if not dt > 0:
        raise ContractViolation(f"dt must be > 0, got {dt}")
    if state.positions.shape != (params.n, params.dim):
        raise ContractViolation(f"state shape {state.positions.shape} does not match params")
    x, v = em_step_arrays(state.positions, state.velocities, params, dt, dW, centered)
    t = state.time + dt
    if not (np.isfinite(x).all() and np.isfinite(v).all()):
        raise SimulationFault("non-finite state", step, t)
    return ParticleState(t, x, v)


def integrate_batch(x0, v0, params: ModelParams, cfg: StepConfig, increments, centered: bool, t0: float = 0.0):
    """Integrate a stack of realizations sharing ``params`` and ``cfg``.

    ``x0``/``v0`` have shape ``(m, N, d)`` and ``increments`` ``(m, steps)``.
    Returns ``(times, xs, vs, halted)`` with snapshots on ``cfg.record_steps()``;
    ``xs`` has shape ``(K, m, N, d)``.  Integration stops early (``halted``)
    once any speed exceeds the overflow limit.
    """
    x = np.array(x0, dtype=float)
    v = np.array(v0, dtype=float)
    rec = cfg.record_steps()
    keep = set(rec.tolist())
    xs, vs, times = [x.copy()], [v.copy()], [t0]
    halted = False
    for k in range(cfg.steps):
        x, v = em_step_arrays(x, v, params, cfg.dt, increments[:, k], centered)
        t = t0 + (k + 1) * cfg.dt
        if not (np.isfinite(x).all() and np.isfinite(v).all()):
            raise SimulationFault("non-finite state", k + 1, t)
        over = np.abs(v).max() > OVERFLOW_LIMIT
        if k + 1 in keep or over:
            xs.append(x.copy())
            vs.append(v.copy())
            times.append(t)
        if over:
            halted = True
            break
    return np.array(times), np.stack(xs), np.stack(vs), halted


def simulate(initial: ParticleState, params: ModelParams, cfg: StepConfig, centered: bool = False) -> TrajectoryRecord:
    """Run one realization driven by the noise path of ``cfg.seed``."""
    noise = NoisePath.generate(cfg.seed, cfg.dt, cfg.steps)
    return _simulate_seeds(initial, params, cfg, centered, [cfg.seed], noise.increments[None, :])[0]


def _simulate_seeds(initial, params, cfg, centered, seeds, increments) -> list[TrajectoryRecord]:
    if initial.positions.shape != (params.n, params.dim):
        raise ContractViolation(f"initial shape {initial.positions.shape} does not match params")
    m = len(seeds)
    x0 = np.broadcast_to(initial.positions, (m,) + initial.positions.shape)
    v0 = np.broadcast_to(initial.velocities, (m,) + initial.velocities.shape)
    times, xs, vs, halted = integrate_batch(x0, v0, params, cfg, increments, centered, initial.time)
    return [
        TrajectoryRecord(times, xs[:, k], vs[:, k], int(s), params, centered, halted)
        for k, s in enumerate(seeds)
    ]


def realization_seeds(seed: int, m: int) -> list[int]:
    return [derive_seed(seed, k) for k in range(m)]


def fan_out(
    initial: ParticleState,
    params: ModelParams,
    cfg: StepConfig,
    m_realizations: int,
    centered: bool = False,
    batch_size: int = 256,
    workers: int = 1,
) -> list[TrajectoryRecord]:
    """Independent realizations ``k = 0..m-1`` with seeds ``derive_seed(cfg.seed, k)``.

    Realizations are integrated in vectorized batches; with ``workers > 1``
    batches run on a thread pool.  Output order is the realization index.
    """
    if m_realizations < 1:
        raise ContractViolation(f"m_realizations must be >= 1, got {m_realizations}")
    seeds = realization_seeds(cfg.seed, m_realizations)
    chunks = [seeds[i : i + batch_size] for i in range(0, len(seeds), batch_size)]

    def run(chunk):
        inc = noise_matrix(chunk, cfg.dt, cfg.steps)
        return _simulate_seeds(initial, params, cfg, centered, chunk, inc)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return [rec for part in parts for rec in part]


def ensemble_arrays(records: list[TrajectoryRecord]):
    """Stack records into ``(times, xs, vs)`` with ``xs`` of shape ``(K, m, N, d)``."""
    return records[0].times, np.stack([r.positions for r in records], 1), np.stack([r.velocities for r in records], 1)


def init_uniform(n: int, dim: int, box_half_width: float, seed: int, project: bool = True, time: float = 0.0) -> ParticleState:
    """I.i.d. uniform positions and velocities on ``[-w, w]^d``.

    With ``project`` the ensemble means are subtracted so the state lies on
    the zero-sum subspace of the centered system.
    """
    if not box_half_width > 0:
        raise ContractViolation(f"box_half_width must be > 0, got {box_half_width}")
    rng = generator(seed, INIT_STREAM)
    x = rng.uniform(-box_half_width, box_half_width, (n, dim))
    v = rng.uniform(-box_half_width, box_half_width, (n, dim))
    if project:
        x = x - x.mean(axis=0)
        v = v - v.mean(axis=0)
    return ParticleState(time, x, v)


def zero_sum_drift(record: TrajectoryRecord) -> float:
    """Max over snapshots of |column sums| / (N * running max magnitude)."""
    n = record.positions.shape[1]
    scale = np.maximum.accumulate(
        np.maximum(np.abs(record.positions).max(axis=(1, 2)), np.abs(record.velocities).max(axis=(1, 2)))
    )
    scale = np.maximum(scale, 1e-300)
    sums = np.maximum(np.abs(record.positions.sum(1)).max(-1), np.abs(record.velocities.sum(1)).max(-1))
    return float((sums / (n * scale)).max())
