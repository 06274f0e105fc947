import json

import numpy as np
import pytest

from stochastic_cs import io
from stochastic_cs.engine import StepConfig
from stochastic_cs.experiments import (
    FLOCKING,
    KINETIC,
    MCKEAN,
    MCKEAN_DECAY,
    PAPER_FIGURE,
    SWEEP,
    UNIFORM,
    ExperimentRefused,
    ExperimentSpec,
    emit,
    evaluate,
    figure_preset,
    rederive,
    run_experiment,
    run_flocking_decay,
    run_kinetic_moments,
    run_meanfield_sweep,
    with_seed,
)
from stochastic_cs.model import ContractViolation, KernelSpec, ModelParams, kernel_eval

CFG = StepConfig(dt=1e-2, t_final=1.0, record_every=10, seed=3)
AQ8 = KernelSpec.algebraic_quarter(8.0)


def flock_spec(**kw):
    base = dict(params=ModelParams(2.0, 0.5, n=6, dim=2), cfg=CFG, m_realizations=4, beta=0.5)
    base.update(kw)
    return ExperimentSpec(FLOCKING, **base)


def sweep_spec(**kw):
    base = dict(params=ModelParams(2.0, 0.5, AQ8, n=8, dim=1), cfg=CFG, sweep=(2, 4, 8, 16), m_realizations=8, law_size=16)
    base.update(kw)
    return ExperimentSpec(SWEEP, **base)


# ---- spec validation


@pytest.mark.parametrize("sweep", [(), (4, 8, 16), (4, 8, 8, 16), (16, 8, 4, 2), (0, 1, 2, 3)])
def test_sweep_validation(sweep):
    with pytest.raises(ContractViolation):
        ExperimentSpec(SWEEP, ModelParams(1.0, 0.1), CFG, sweep=sweep)


def test_sweep_only_for_sweep_kind():
    with pytest.raises(ContractViolation):
        ExperimentSpec(FLOCKING, ModelParams(1.0, 0.1), CFG, sweep=(1, 2, 3, 4))


@pytest.mark.parametrize(
    "kw",
    [
        dict(kind="Nope"),
        dict(m_realizations=0),
        dict(box_half_width=-1.0),
        dict(mass=0.0),
        dict(source="soup"),
        dict(law_noise="loud"),
        dict(law_size=1),
        dict(tolerances={"nope": 1.0}),
    ],
)
def test_spec_rejects(kw):
    base = dict(kind=FLOCKING, params=ModelParams(1.0, 0.1), cfg=CFG)
    base.update(kw)
    with pytest.raises(ContractViolation):
        ExperimentSpec(**base)


def test_tolerances_merge_defaults():
    spec = flock_spec(tolerances={"slope": 0.1})
    assert spec.tol() == {"slope": 0.1, "fraction": 0.95}


# ---- refusals


def test_uncertified_flocking_refused():
    spec = ExperimentSpec(FLOCKING, ModelParams(0.5, 1.0, n=4, dim=1), CFG)
    with pytest.raises(ExperimentRefused, match="PaperFigure"):
        run_flocking_decay(spec)


def test_indeterminate_kinetic_refused():
    # kappa*psi_m < d*sigma < kappa*psi_M
    spec = ExperimentSpec(KINETIC, ModelParams(1.0, 0.5, AQ8, n=8, dim=1), CFG)
    with pytest.raises(ExperimentRefused, match="Indeterminate"):
        run_kinetic_moments(spec)


def test_uniform_hypothesis_refused():
    spec = ExperimentSpec(UNIFORM, ModelParams(2.0, 1.5, AQ8, n=4, dim=2), CFG)
    with pytest.raises(ExperimentRefused):
        run_experiment(spec)


def test_mckean_hypothesis_refused():
    spec = ExperimentSpec(MCKEAN_DECAY, ModelParams(0.5, 0.5, n=16, dim=1), CFG)
    with pytest.raises(ExperimentRefused):
        run_experiment(spec)


def test_uncertified_figure_run_flagged():
    spec = ExperimentSpec(PAPER_FIGURE, ModelParams(0.5, 1.0, n=4, dim=1), CFG, m_realizations=2)
    v = run_experiment(spec)
    assert "flocking-condition-not-certified" in v.flags


# ---- degenerate inputs


def test_point_mass_flocking_vacuous():
    v = run_experiment(flock_spec(box_half_width=0.0))
    assert v.passed
    assert "vacuous-zero-initial-data" in v.flags


def test_point_mass_kinetic():
    spec = ExperimentSpec(KINETIC, ModelParams(1.0, 0.01, n=8, dim=1), CFG, box_half_width=0.0)
    v = run_experiment(spec)
    assert v.passed and "point-mass-initial-data" in v.flags


def test_point_mass_mckean_decay():
    spec = ExperimentSpec(MCKEAN_DECAY, ModelParams(2.0, 0.5, n=16, dim=1), CFG, box_half_width=0.0)
    v = run_experiment(spec)
    assert v.passed and "point-mass-initial-data" in v.flags


def test_exact_fields_sweep_degenerate():
    spec = sweep_spec(params=ModelParams(2.0, 0.5, KernelSpec.constant(), n=8, dim=1), exact_fields=True)
    v = run_meanfield_sweep(spec)
    assert v.passed
    assert {"degenerate-exact-fields", "exact-fields"} <= set(v.flags)


# ---- passing runs


def test_flocking_decay_passes():
    v = run_experiment(flock_spec(m_realizations=8, cfg=StepConfig(1e-2, 10.0, record_every=10, seed=1)))
    assert v.passed
    assert v.expected["rate_a"] == pytest.approx(0.25)
    assert v.provenance["beta"] == "chosen"


def test_mckean_decay_passes():
    spec = ExperimentSpec(MCKEAN_DECAY, ModelParams(2.0, 0.5, n=256, dim=1), StepConfig(1e-2, 3.0, record_every=10))
    v = run_experiment(spec)
    assert v.passed, v.measured
    assert v.expected["c_star"] > 0


def test_kinetic_growth_mckean_source():
    spec = ExperimentSpec(KINETIC, ModelParams(0.1, 1.0, n=512, dim=2), StepConfig(1e-2, 1.0, record_every=10), source=MCKEAN)
    v = run_experiment(spec)
    assert v.expected["regime_sign"] == 1.0
    assert v.passed, v.measured


def test_sweep_table_layout_and_flags():
    v = run_meanfield_sweep(sweep_spec())
    tab = v.tables["sweep"]
    assert tab.columns == ("n", "err", "se")
    assert tab.col("n").tolist() == [2, 4, 8, 16]
    assert "outside-uniform-regime" not in v.flags
    small = run_meanfield_sweep(sweep_spec(params=ModelParams(2.0, 0.5, KernelSpec.algebraic_quarter(0.01), n=8, dim=1)))
    assert "kernel-radius-exceeded" in small.flags


# ---- evaluation is pure


def test_evaluate_flocking_slopes():
    t = np.linspace(0, 5, 20)
    rows = np.column_stack([t, np.zeros_like(t), np.exp(-t)])
    tables = {"spread": io.Table(("t", "realization", "S"), rows)}
    ok, measured, _ = evaluate(FLOCKING, tables, {"slope_threshold": -0.5}, {"slope": 0.0, "fraction": 1.0})
    assert ok and measured["slope_median"] == pytest.approx(-1.0)
    ok, _, _ = evaluate(FLOCKING, tables, {"slope_threshold": -2.0}, {"slope": 0.0, "fraction": 1.0})
    assert not ok


def test_evaluate_sweep_increase_fails():
    tab = io.Table(("n", "err", "se"), [[2, 1.0, 0.01], [4, 0.5, 0.01], [8, 0.8, 0.01], [16, 0.1, 0.01]])
    ok, measured, _ = evaluate(SWEEP, {"sweep": tab}, {}, {"se_slack": 1.0})
    assert not ok and measured["max_increase_in_se"] > 1


def test_evaluate_uniform_late_peak_fails():
    t = np.linspace(0, 10, 11)
    tab = io.Table(("t", "err", "se"), np.column_stack([t, t, np.zeros_like(t)]))
    ok, measured, _ = evaluate(UNIFORM, {"coupling": tab}, {}, {"slope": 0.0})
    assert not ok and measured["t_sup"] == 10.0


# ---- emission, rederivation and reproducibility


@pytest.mark.parametrize("make", [flock_spec, sweep_spec])
def test_rederive_matches(make, tmp_path):
    v = run_experiment(make())
    emit(v, tmp_path)
    ok, measured, flags = rederive(tmp_path)
    assert ok == v.passed
    assert measured == pytest.approx(v.measured)
    summary = json.loads((tmp_path / "verdict.json").read_text())
    assert summary["pass"] == v.passed
    assert set(summary["artifacts"]) >= {f"{n}.csv" for n in v.tables}


def test_rederive_detects_tampering(tmp_path):
    v = run_experiment(flock_spec())
    emit(v, tmp_path)
    tab = io.read_table(tmp_path / "spread.csv")
    rows = tab.rows.copy()
    rows[:, 2] = np.exp(rows[:, 0])  # growing spread
    io.write_table(io.Table(tab.columns, rows), tmp_path / "spread.csv")
    assert rederive(tmp_path)[0] is False


def test_bitwise_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    emit(run_experiment(sweep_spec()), a)
    emit(run_experiment(sweep_spec()), b)
    for f in sorted(p.name for p in a.iterdir()):
        assert (a / f).read_bytes() == (b / f).read_bytes(), f


def test_seed_changes_outcome():
    a = run_experiment(flock_spec())
    b = run_experiment(with_seed(flock_spec(), 4))
    assert not np.array_equal(a.tables["spread"].rows, b.tables["spread"].rows)


# ---- presets


def test_preset_kernels():
    fig1, fig2 = figure_preset("fig1"), figure_preset("fig2")
    assert fig1.params.kappa == 100.0 and fig1.params.sigma == 200.0
    assert fig1.params.n == 100 and fig1.params.dim == 2 and fig1.box_half_width == 50.0
    assert kernel_eval(fig2.params.kernel, 0.0) == 1.0
    with pytest.raises(ContractViolation):
        figure_preset("fig3")


def test_preset_records_trajectory(tmp_path):
    spec = figure_preset("fig1", m_realizations=2, dt=1e-3, t_final=0.02)
    v = run_experiment(spec)
    paths = emit(v, tmp_path)
    assert (tmp_path / "trajectory_r000.csv").exists()
    assert (tmp_path / "trajectory_r000.json").exists()
    assert len(paths) == 4


# ---- horizon doubling does not inflate the uniform-in-time supremum


@pytest.mark.slow
def test_uniform_horizon_doubling():
    p = ModelParams(3.0, 0.5, AQ8, n=8, dim=1)
    sups = []
    for t_final in (5.0, 10.0):
        spec = ExperimentSpec(UNIFORM, p, StepConfig(1e-2, t_final, record_every=10, seed=7), m_realizations=40, law_size=64)
        v = run_experiment(spec)
        tab = v.tables["coupling"]
        k = int(np.argmax(tab.col("err")))
        sups.append((tab.col("err")[k], tab.col("se")[k]))
    (e1, s1), (e2, s2) = sups
    assert e2 <= e1 + 2 * np.hypot(s1, s2)
