"""State types, communication kernels and the drift/diffusion fields.

The particle system evolves N agents in R^d:

    dx^i = v^i dt
    dv^i = (kappa/N) sum_j psi(|x^j - x^i|) (v^j - v^i) dt - x^i dt
           + sqrt(2 sigma) (v^i - v_c) dW

with a single scalar Brownian motion W shared by every particle and every
coordinate.  All array helpers accept arbitrary leading batch axes, so a
stack of independent realizations of shape ``(m, N, d)`` is stepped with
the same code as a single ``(N, d)`` configuration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

CONSTANT = "constant"
ALGEBRAIC_QUARTER = "algebraic-quarter"
CUSTOM = "custom"


class ContractViolation(ValueError):
    """Inputs with inconsistent shapes or out-of-range parameters."""


@dataclass(frozen=True)
class KernelSpec:
    """Communication weight psi with certified bounds.

    ``psi_min`` is the lower bound the decay estimates need.  It is only a true
    lower bound on pairwise distances up to ``radius``; for the constant
    kernel the radius is infinite.
    """

    variant: str
    value: float = 1.0
    radius: float = math.inf
    table: tuple[tuple[float, float], ...] = ()
    psi_min: float = field(init=False)
    psi_max: float = field(init=False)

    def __post_init__(self) -> None:
        if self.variant == CONSTANT:
            if not self.value > 0:
                raise ContractViolation(f"constant kernel value must be > 0, got {self.value}")
            lo = hi = float(self.value)
        elif self.variant == ALGEBRAIC_QUARTER:
            if not self.radius > 0:
                raise ContractViolation(f"certification radius must be > 0, got {self.radius}")
            hi = 1.0
            lo = 0.0 if math.isinf(self.radius) else (1.0 + self.radius**2) ** -0.25
        elif self.variant == CUSTOM:
            rs = [r for r, _ in self.table]
            ys = [y for _, y in self.table]
            if len(rs) < 2 or rs[0] != 0.0 or any(b <= a for a, b in zip(rs, rs[1:])):
                raise ContractViolation("custom table needs >= 2 rows with radii strictly increasing from 0")
            if min(ys) <= 0:
                raise ContractViolation("custom table values must be positive")
            hi = max(ys)
            # piecewise-linear table, held constant past the last node
            lo = min(ys) if math.isinf(self.radius) else min(
                y for r, y in self.table if r <= self.radius
            )
            lo = min(lo, float(np.interp(min(self.radius, rs[-1]), rs, ys)))
        else:
            raise ContractViolation(f"unknown kernel variant {self.variant!r}")
        object.__setattr__(self, "psi_min", float(lo))
        object.__setattr__(self, "psi_max", float(hi))

    @classmethod
    def constant(cls, c: float = 1.0) -> "KernelSpec":
        return cls(CONSTANT, value=c)

    @classmethod
    def algebraic_quarter(cls, radius: float = math.inf) -> "KernelSpec":
        return cls(ALGEBRAIC_QUARTER, radius=radius)

    @classmethod
    def custom(cls, table, radius: float = math.inf) -> "KernelSpec":
        return cls(CUSTOM, table=tuple((float(r), float(y)) for r, y in table), radius=radius)

    @property
    def is_constant(self) -> bool:
        return self.variant == CONSTANT

    @property
    def certified(self) -> bool:
        return self.psi_min > 0

    def label(self) -> str:
        """CLI/config syntax, inverse of :func:`parse_kernel`."""
        if self.variant == CONSTANT:
            return f"constant:{self.value!r}"
        if self.variant == ALGEBRAIC_QUARTER:
            return ALGEBRAIC_QUARTER if math.isinf(self.radius) else f"{ALGEBRAIC_QUARTER}:{self.radius!r}"
        rows = ";".join(f"{r!r}/{y!r}" for r, y in self.table)
        return f"custom:{rows}" if math.isinf(self.radius) else f"custom:{rows}@{self.radius!r}"

    def weights_sq(self, r2: np.ndarray) -> np.ndarray:
        """psi evaluated from squared distances (avoids a sqrt on the hot path)."""
        if self.variant == CONSTANT:
            return np.full(np.shape(r2), self.value)
        if self.variant == ALGEBRAIC_QUARTER:
            return 1.0 / np.sqrt(np.sqrt(1.0 + r2))
        rs, ys = zip(*self.table)
        return np.interp(np.sqrt(r2), rs, ys)


def parse_kernel(text: str) -> KernelSpec:
    """Parse ``constant:<c>``, ``algebraic-quarter[:R]`` or ``custom:r/y;r/y[@R]``."""
    head, _, arg = text.strip().partition(":")
    try:
        if head == CONSTANT:
            return KernelSpec.constant(float(arg) if arg else 1.0)
        if head == ALGEBRAIC_QUARTER:
            return KernelSpec.algebraic_quarter(float(arg) if arg else math.inf)
        if head == CUSTOM:
            rows, _, radius = arg.partition("@")
            table = [tuple(float(p) for p in row.split("/")) for row in rows.split(";") if row]
            return KernelSpec.custom(table, float(radius) if radius else math.inf)
    except (TypeError, ValueError) as exc:
        raise ContractViolation(f"bad kernel specification {text!r}: {exc}") from exc
    raise ContractViolation(f"unknown kernel {text!r}")


def kernel_eval(spec: KernelSpec, r: float) -> float:
    """Return psi(r) for a single distance ``r >= 0``."""
    if not r >= 0:
        raise ValueError(f"kernel distance must be >= 0, got {r}")
    return float(spec.weights_sq(np.asarray(float(r) ** 2)))


@dataclass(frozen=True)
class ModelParams:
    kappa: float
    sigma: float
    kernel: KernelSpec = field(default_factory=KernelSpec.constant)
    n: int = 16
    dim: int = 2
    compensated: bool = False

    def __post_init__(self) -> None:
        if not self.kappa > 0:
            raise ContractViolation(f"kappa must be > 0, got {self.kappa}")
        # sigma = 0 is the noiseless special case used by a few checks
        if not self.sigma >= 0:
            raise ContractViolation(f"sigma must be >= 0, got {self.sigma}")
        if self.n < 1 or self.dim < 1:
            raise ContractViolation(f"need n >= 1 and dim >= 1, got n={self.n}, dim={self.dim}")

    def with_(self, **changes) -> "ModelParams":
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class ParticleState:
    """Positions and velocities of N agents in d dimensions at one time."""

    time: float
    positions: np.ndarray
    velocities: np.ndarray

    def __post_init__(self) -> None:
        x = np.asarray(self.positions, dtype=float)
        v = np.asarray(self.velocities, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if v.ndim == 1:
            v = v[:, None]
        if x.shape != v.shape or x.ndim != 2:
            raise ContractViolation(f"positions {x.shape} and velocities {v.shape} must both be N x d")
        object.__setattr__(self, "positions", x)
        object.__setattr__(self, "velocities", v)

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.positions).all() and np.isfinite(self.velocities).all())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParticleState):
            return NotImplemented
        return (
            self.time == other.time
            and np.array_equal(self.positions, other.positions)
            and np.array_equal(self.velocities, other.velocities)
        )


class CenteredState(ParticleState):
    """Fluctuations about the ensemble mean; columns sum to zero."""

    def zero_sum_residual(self) -> float:
        scale = max(1.0, float(np.abs(self.positions).max(initial=0.0)), float(np.abs(self.velocities).max(initial=0.0)))
        res = max(float(np.abs(self.positions.sum(0)).max()), float(np.abs(self.velocities.sum(0)).max()))
        return res / scale


@dataclass(frozen=True, eq=False)
class MacroState:
    x_c: np.ndarray
    v_c: np.ndarray
    time: float = 0.0

    def energy(self) -> float:
        return float(np.dot(self.x_c, self.x_c) + np.dot(self.v_c, self.v_c))


def _check(state: ParticleState, params: ModelParams) -> None:
    if state.positions.shape != (params.n, params.dim):
        raise ContractViolation(
            f"state shape {state.positions.shape} does not match params (n={params.n}, dim={params.dim})"
        )


def _kahan_sum_j(terms_fn, n: int, like: np.ndarray) -> np.ndarray:
    total = np.zeros_like(like)
    comp = np.zeros_like(like)
    for j in range(n):
        y = terms_fn(j) - comp
        t = total + y
        comp = (t - total) - y
        total = t
    return total


def alignment_pairwise(x: np.ndarray, v: np.ndarray, kernel: KernelSpec, compensated: bool = False) -> np.ndarray:
    """(1/N) sum_j psi(|x^j - x^i|) (v^j - v^i), evaluated over all pairs.

    Arrays have shape ``(..., N, d)``.  Summation runs over j in index order.
    """
    n = x.shape[-2]
    if not compensated:
        diff = x[..., None, :, :] - x[..., :, None, :]
        w = kernel.weights_sq(np.einsum("...k,...k->...", diff, diff))
        dv = v[..., None, :, :] - v[..., :, None, :]
        return (w[..., None] * dv).sum(axis=-2) / n

    def term(j):
        dxj = x[..., j : j + 1, :] - x
        wj = kernel.weights_sq((dxj * dxj).sum(-1))
        return wj[..., None] * (v[..., j : j + 1, :] - v)

    return _kahan_sum_j(term, n, v) / n


def alignment(x: np.ndarray, v: np.ndarray, kernel: KernelSpec, compensated: bool = False) -> np.ndarray:
    """Alignment term; O(N) for the constant kernel, O(N^2) otherwise."""
    if kernel.is_constant and not compensated:
        return kernel.value * (v.mean(axis=-2, keepdims=True) - v)
    return alignment_pairwise(x, v, kernel, compensated)


def drift_arrays(x: np.ndarray, v: np.ndarray, params: ModelParams, centered: bool = False):
    """Drift of the particle system on raw ``(..., N, d)`` arrays.

    In the centered frame a lone particle (N = 1) stands for a tagged agent
    of a zero-mean population, so its alignment reduces to
    ``-kappa psi(0) v``.
    """
    if centered and x.shape[-2] == 1:
        align = -params.kernel.weights_sq(np.zeros(())) * v
    else:
        align = alignment(x, v, params.kernel, params.compensated)
    return v, params.kappa * align - x


def drift(state: ParticleState, params: ModelParams, centered: bool = False):
    """Return ``(dx, dv)`` drift arrays for ``state``."""
    _check(state, params)
    dx, dv = drift_arrays(state.positions, state.velocities, params, centered)
    return dx.copy(), dv


def diffusion_arrays(v: np.ndarray, sigma: float, v_ref) -> np.ndarray:
    return math.sqrt(2.0 * sigma) * (v - v_ref)


def diffusion(state: ParticleState, v_ref, sigma: float) -> np.ndarray:
    """Noise coefficient sqrt(2 sigma)(v^i - v_ref); multiplies one scalar dW."""
    v_ref = np.asarray(v_ref, dtype=float)
    if v_ref.shape not in ((), (state.dim,)):
        raise ContractViolation(f"v_ref shape {v_ref.shape} incompatible with dim {state.dim}")
    return diffusion_arrays(state.velocities, sigma, v_ref)


def macro_decompose(state: ParticleState) -> tuple[MacroState, CenteredState]:
    x_c = state.positions.mean(axis=0)
    v_c = state.velocities.mean(axis=0)
    centered = CenteredState(state.time, state.positions - x_c, state.velocities - v_c)
    macro = MacroState(x_c, v_c, state.time)
    # x_hat + x_c need not round back to x; keep the source so an untouched
    # decomposition recomposes exactly
    for arr in (centered.positions, centered.velocities, x_c, v_c):
        arr.flags.writeable = False
    object.__setattr__(centered, "_source", (macro, state))
    return macro, centered


def recompose(macro: MacroState, centered: ParticleState) -> ParticleState:
    source = getattr(centered, "_source", None)
    if source is not None and source[0] is macro and centered.time == source[1].time:
        orig = source[1]
        return ParticleState(orig.time, orig.positions.copy(), orig.velocities.copy())
    return ParticleState(centered.time, centered.positions + macro.x_c, centered.velocities + macro.v_c)


def macro_closed_form(x0, v0, t: float) -> MacroState:
    """Exact harmonic-oscillator flow of the ensemble means."""
    x0 = np.asarray(x0, dtype=float)
    v0 = np.asarray(v0, dtype=float)
    c, s = math.cos(t), math.sin(t)
    return MacroState(x0 * c + v0 * s, v0 * c - x0 * s, t)
