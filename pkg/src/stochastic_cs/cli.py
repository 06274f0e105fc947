"""Command-line entry point.

Exit codes: 0 success or passing verdict, 1 failing verdict or simulation
fault, 2 configuration error, refused experiment or bad usage.
"""

from __future__ import annotations

import argparse
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import io
from .config import ConfigError, RunConfig, _int_list, load_config, serialize
from .diagnostics import (
    DECAY,
    LyapunovParams,
    flocking_check,
    generator_lv,
    kinetic_regime,
    lyapunov_v_arrays,
    spread_s,
    variance_functionals,
)
from .engine import SimulationFault, fan_out, init_uniform
from .experiments import (
    FLOCKING,
    KINETIC,
    MCKEAN_DECAY,
    SWEEP,
    UNIFORM,
    ExperimentRefused,
    emit,
    figure_preset,
    run_experiment,
)
from .model import ContractViolation, ParticleState, parse_kernel

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
SUBCOMMANDS = ("simulate", "check-flocking", "flocking", "moments", "mckean", "meanfield", "uniform", "preset")

# horizons used when neither the config file nor a flag sets t_final
DEFAULT_HORIZON = {"meanfield": 1.0, "uniform": 10.0}
DEFAULT_SWEEP = (8, 16, 32, 64)
KIND_OF = {"flocking": FLOCKING, "moments": KINETIC, "mckean": MCKEAN_DECAY, "meanfield": SWEEP, "uniform": UNIFORM}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="configuration file")
    common.add_argument("--seed", type=lambda s: int(s, 0))
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--n", type=int)
    common.add_argument("--kappa", type=float)
    common.add_argument("--sigma", type=float)
    common.add_argument("--kernel", help="constant:<c> | algebraic-quarter[:R] | custom:r/y;...[@R]")
    common.add_argument("--dt", type=float)
    common.add_argument("--t-final", type=float)
    common.add_argument("--realizations", type=int)
    common.add_argument("--n-list", help="comma separated N values for the sweep")
    common.add_argument("--preset", choices=("fig1", "fig2"))
    common.add_argument("--beta", type=float)
    common.add_argument("--source", choices=("particles", "mckean"))
    parser = _Parser(prog="stochastic-cs", description="Stochastic Cucker-Smale experiments")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    help_text = {
        "simulate": "run the particle system and write trajectories and diagnostics",
        "check-flocking": "evaluate the flocking condition and decay rate",
        "flocking": "flocking decay experiment over realizations",
        "moments": "kinetic variance bounds",
        "mckean": "second-moment decay of the self-consistent McKean ensemble",
        "meanfield": "coupling error against N",
        "uniform": "coupling error on a long horizon",
        "preset": "figure presets fig1 / fig2",
    }
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[common], help=help_text[name])
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    try:
        kernel = parse_kernel(args.kernel) if args.kernel else None
        sweep = _int_list(args.n_list) if args.n_list else None
    except (ContractViolation, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    cfg = cfg.with_overrides(
        seed=args.seed,
        n=args.n,
        kappa=args.kappa,
        sigma=args.sigma,
        kernel=kernel,
        dt=args.dt,
        t_final=args.t_final,
        realizations=args.realizations,
        sweep=sweep,
        preset=args.preset,
        beta=args.beta,
        source=args.source,
    )
    horizon = DEFAULT_HORIZON.get(args.command)
    if horizon is not None and not cfg.given("t_final"):
        cfg = cfg.with_overrides(t_final=horizon)
    if args.command == "meanfield" and not cfg.sweep:
        cfg = cfg.with_overrides(sweep=DEFAULT_SWEEP)
    return cfg


def _finish(out: Optional[Path], paths: list, cfg: RunConfig, command: str) -> None:
    if out is None:
        return
    paths = list(paths) + [io.write_text(serialize(cfg), out / "config.txt")]
    io.write_manifest(
        out,
        paths,
        extra={"command": command, "seed": cfg.seed},
        timestamp=datetime.now(timezone.utc).isoformat(timespec="seconds"),
    )


def _check_flocking(cfg: RunConfig) -> tuple[int, dict]:
    rep = flocking_check(cfg.model_params(), cfg.beta)
    fields = {
        "condition_holds": rep.condition_holds,
        "kernel_certified": rep.kernel_certified,
        "beta_max": rep.beta_max,
        "beta_used": rep.beta_used,
        "rate_a": rep.rate_a,
        "as_decay_rate": rep.as_decay_rate,
    }
    for k, v in fields.items():
        text = "true" if v is True else "false" if v is False else "none" if v is None else repr(v)
        print(f"{k}={text}")
    return (EXIT_OK if rep.condition_holds else EXIT_FAIL), fields


def _simulate(cfg: RunConfig, out: Optional[Path]) -> list:
    params, step = cfg.model_params(), cfg.step_config()
    if cfg.box > 0:
        initial = init_uniform(params.n, params.dim, cfg.box, step.seed, project=False)
    else:
        initial = ParticleState(0.0, np.zeros((params.n, params.dim)), np.zeros((params.n, params.dim)))
    records = fan_out(initial, params, step, cfg.realizations)
    rep = flocking_check(params)
    beta = cfg.beta if cfg.beta is not None else (rep.beta_used if rep.condition_holds else 0.5)
    regime = kinetic_regime(params, cfg.mass)
    eps = regime.epsilon if regime.regime == DECAY else 0.0
    lp = LyapunovParams(beta)
    paths = []
    for k, rec in enumerate(records):
        xs = rec.positions - rec.positions.mean(1, keepdims=True)
        vs = rec.velocities - rec.velocities.mean(1, keepdims=True)
        rows = []
        for t, x, v in zip(rec.times, xs, vs):
            l_std, l_tilde = variance_functionals(x, v, epsilon=eps)
            lv = generator_lv(ParticleState(float(t), x, v), params, lp)
            rows.append([t, spread_s(x, v), lyapunov_v_arrays(x, v, beta), lv, l_std, l_tilde])
        diag = io.diagnostics_table(rows)
        final = dict(zip(io.DIAGNOSTIC_COLUMNS, diag.rows[-1].tolist()))
        final.update(beta=beta, epsilon=eps)
        print(f"realization {k}: seed={rec.noise_seed} t={float(rec.times[-1])!r} S={float(final['S'])!r} halted={rec.halted}")
        if out is not None:
            paths += io.write_trajectory(rec, out / f"trajectory_r{k:03d}.csv", final)
            paths.append(io.write_table(diag, out / f"diagnostics_r{k:03d}.csv"))
    return paths


def _experiment(cfg: RunConfig, command: str, out: Optional[Path]) -> tuple[int, list]:
    if command == "preset":
        if cfg.preset is None:
            raise ConfigError("preset requires --preset fig1|fig2 (or preset = ... in the config)")
        spec = figure_preset(
            cfg.preset,
            seed=cfg.seed,
            m_realizations=cfg.realizations if cfg.given("realizations") else 10,
            dt=cfg.dt,
            t_final=cfg.t_final,
        )
    else:
        spec = cfg.experiment_spec(KIND_OF[command])
    verdict = run_experiment(spec)
    paths = emit(verdict, out) if out is not None else []
    status = "PASS" if verdict.passed else "FAIL"
    measured = " ".join(f"{k}={v!r}" for k, v in sorted(verdict.measured.items()))
    print(f"{verdict.kind} {status} {measured}")
    if verdict.flags:
        print("flags: " + ",".join(verdict.flags))
    return (EXIT_OK if verdict.passed else EXIT_FAIL), paths


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        out = args.out
        if args.command == "check-flocking":
            code, fields = _check_flocking(cfg)
            paths = [io.write_json(fields, out / "flocking.json")] if out is not None else []
        elif args.command == "simulate":
            code, paths = EXIT_OK, _simulate(cfg, out)
        else:
            code, paths = _experiment(cfg, args.command, out)
        _finish(out, paths, cfg, args.command)
        return code
    except (ConfigError, ExperimentRefused, ContractViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationFault as exc:
        print(f"simulation fault: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except io.OutputError as exc:
        print(f"output error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except SystemExit as exc:  # --help
        return int(exc.code or 0)


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
