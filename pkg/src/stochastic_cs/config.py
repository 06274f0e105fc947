"""Line-oriented run configuration.

The format is ``[section]`` headers followed by ``key = value`` lines;
``#`` starts a comment.  Key names are unique across sections, so keys may
also appear before any header.  Sections and keys:

    [model]       kappa, sigma, kernel, n, dim, compensated
    [run]         dt, t_final, record_every, seed, realizations, box
    [experiment]  kind, sweep, beta, mass, source, law_size, law_noise,
                  exact_fields, field_stride, preset
    [tolerances]  any tolerance name of the selected experiment kind

Unknown keys are errors.  Missing keys take the defaults in ``KEYS``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Optional

from .engine import StepConfig
from .experiments import DEFAULT_TOLERANCES, KINDS, MCKEAN, PARTICLES, ExperimentSpec
from .mckean import COMMON, INDEPENDENT
from .model import ContractViolation, KernelSpec, ModelParams, parse_kernel


class ConfigError(ValueError):
    """Malformed or out-of-range configuration."""


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"expected true/false, got {text!r}")


def _int_list(text: str) -> tuple:
    return tuple(int(p) for p in text.replace(" ", "").split(",") if p)


def _opt_float(text: str) -> Optional[float]:
    return None if text.lower() in ("", "none") else float(text)


def _opt_str(text: str) -> Optional[str]:
    return None if text.lower() in ("", "none") else text


def _u64(text: str) -> int:
    return int(text, 0)


def _kernel(text: str) -> KernelSpec:
    try:
        return parse_kernel(text)
    except ContractViolation as exc:
        raise ValueError(str(exc)) from exc


# key -> (section, parser, default)
KEYS = {
    "kappa": ("model", float, 1.0),
    "sigma": ("model", float, 0.1),
    "kernel": ("model", _kernel, KernelSpec.constant(1.0)),
    "n": ("model", int, 16),
    "dim": ("model", int, 2),
    "compensated": ("model", _bool, False),
    "dt": ("run", float, 1e-3),
    "t_final": ("run", float, 2.0),
    "record_every": ("run", int, 1),
    "seed": ("run", _u64, 42),
    "realizations": ("run", int, 1),
    "box": ("run", float, 1.0),
    "kind": ("experiment", _opt_str, None),
    "sweep": ("experiment", _int_list, ()),
    "beta": ("experiment", _opt_float, None),
    "mass": ("experiment", float, 1.0),
    "source": ("experiment", str, PARTICLES),
    "law_size": ("experiment", int, 128),
    "law_noise": ("experiment", str, COMMON),
    "exact_fields": ("experiment", _bool, False),
    "field_stride": ("experiment", int, 1),
    "preset": ("experiment", _opt_str, None),
}
SECTIONS = ("model", "run", "experiment", "tolerances")
TOLERANCE_NAMES = sorted({k for tol in DEFAULT_TOLERANCES.values() for k in tol})

# (key, predicate, bound description)
RANGES = [
    ("kappa", lambda x: x > 0 and math.isfinite(x), "> 0"),
    ("sigma", lambda x: x >= 0 and math.isfinite(x), ">= 0"),
    ("n", lambda x: x >= 1, ">= 1"),
    ("dim", lambda x: x >= 1, ">= 1"),
    ("dt", lambda x: x > 0, "> 0"),
    ("t_final", lambda x: x > 0 and math.isfinite(x), "> 0"),
    ("record_every", lambda x: x >= 1, ">= 1"),
    ("seed", lambda x: 0 <= x < 2**64, "in [0, 2^64)"),
    ("realizations", lambda x: x >= 1, ">= 1"),
    ("box", lambda x: x >= 0 and math.isfinite(x), ">= 0"),
    ("kind", lambda x: x is None or x in KINDS, f"one of {', '.join(KINDS)}"),
    ("sweep", lambda x: all(b > a for a, b in zip(x, x[1:])) and all(v >= 1 for v in x), "positive and strictly increasing"),
    ("mass", lambda x: x > 0 and math.isfinite(x), "> 0"),
    ("source", lambda x: x in (PARTICLES, MCKEAN), f"{PARTICLES} or {MCKEAN}"),
    ("law_size", lambda x: x >= 2, ">= 2"),
    ("law_noise", lambda x: x in (COMMON, INDEPENDENT), f"{COMMON} or {INDEPENDENT}"),
    ("field_stride", lambda x: x >= 1, ">= 1"),
    ("preset", lambda x: x is None or x in ("fig1", "fig2"), "fig1 or fig2"),
]


@dataclass(frozen=True)
class RunConfig:
    kappa: float = 1.0
    sigma: float = 0.1
    kernel: KernelSpec = field(default_factory=lambda: KernelSpec.constant(1.0))
    n: int = 16
    dim: int = 2
    compensated: bool = False
    dt: float = 1e-3
    t_final: float = 2.0
    record_every: int = 1
    seed: int = 42
    realizations: int = 1
    box: float = 1.0
    kind: Optional[str] = None
    sweep: tuple = ()
    beta: Optional[float] = None
    mass: float = 1.0
    source: str = PARTICLES
    law_size: int = 128
    law_noise: str = COMMON
    exact_fields: bool = False
    field_stride: int = 1
    preset: Optional[str] = None
    tolerances: tuple = ()  # sorted (name, value) pairs
    # keys given explicitly by the file or an override; not part of equality
    explicit: frozenset = field(default=frozenset(), compare=False)

    def __post_init__(self) -> None:
        for key, ok, bound in RANGES:
            value = getattr(self, key)
            if not ok(value):
                raise ConfigError(f"{key} = {value!r} out of range: must be {bound}")
        if self.dt > self.t_final:
            raise ConfigError(f"dt = {self.dt!r} out of range: must be <= t_final = {self.t_final!r}")
        for name, _ in self.tolerances:
            if name not in TOLERANCE_NAMES:
                raise ConfigError(f"unknown tolerance {name!r}; known: {', '.join(TOLERANCE_NAMES)}")

    def model_params(self) -> ModelParams:
        return ModelParams(self.kappa, self.sigma, self.kernel, self.n, self.dim, self.compensated)

    def step_config(self) -> StepConfig:
        return StepConfig(self.dt, self.t_final, self.record_every, self.seed)

    def experiment_spec(self, kind: Optional[str] = None) -> ExperimentSpec:
        kind = kind or self.kind
        if kind is None:
            raise ConfigError("no experiment kind given")
        known = DEFAULT_TOLERANCES[kind]
        tol = {k: v for k, v in self.tolerances if k in known}
        try:
            return ExperimentSpec(
                kind,
                self.model_params(),
                self.step_config(),
                sweep=self.sweep if kind == "MeanFieldSweep" else (),
                m_realizations=self.realizations,
                tolerances=tol,
                box_half_width=self.box,
                beta=self.beta,
                mass=self.mass,
                source=self.source,
                law_size=self.law_size,
                law_noise=self.law_noise,
                exact_fields=self.exact_fields,
                field_stride=self.field_stride,
                preset=self.preset,
            )
        except ContractViolation as exc:
            raise ConfigError(str(exc)) from exc

    def with_overrides(self, **values) -> "RunConfig":
        """Apply already-typed overrides (``None`` values are skipped)."""
        given = {k: v for k, v in values.items() if v is not None}
        unknown = set(given) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}")
        return replace(self, **given, explicit=self.explicit | frozenset(given))

    def given(self, key: str) -> bool:
        return key in self.explicit


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, KernelSpec):
        return value.label()
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def parse_config(text: str) -> RunConfig:
    """Parse and validate a configuration text."""
    values: dict = {}
    tolerances: dict = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"line {lineno}: malformed section header {raw.strip()!r}")
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        key, eq, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not eq or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        if section == "tolerances":
            if key not in TOLERANCE_NAMES:
                raise ConfigError(f"line {lineno}: unknown tolerance {key!r}")
            try:
                tolerances[key] = float(value)
            except ValueError:
                raise ConfigError(f"line {lineno}: {key} expects a number, got {value!r}") from None
            continue
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        home, parser, _ = KEYS[key]
        if section is not None and section != home:
            raise ConfigError(f"line {lineno}: key {key!r} belongs to section [{home}], not [{section}]")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    return RunConfig(**values, tolerances=tuple(sorted(tolerances.items())), explicit=frozenset(values))


def serialize(cfg: RunConfig) -> str:
    """Canonical text: every key, fixed order, shortest round-trip floats."""
    lines = []
    for section in SECTIONS[:3]:
        lines.append(f"[{section}]")
        for key, (home, _, _) in KEYS.items():
            if home == section:
                lines.append(f"{key} = {_format(getattr(cfg, key))}")
        lines.append("")
    lines.append("[tolerances]")
    lines.extend(f"{k} = {v!r}" for k, v in cfg.tolerances)
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except UnicodeDecodeError as exc:
        raise ConfigError(f"config {path} is not UTF-8: {exc}") from exc
    return parse_config(text)
