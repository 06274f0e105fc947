import math

import numpy as np
import pytest

from stochastic_cs.engine import (
    SimulationFault,
    StepConfig,
    em_step,
    em_step_arrays,
    ensemble_arrays,
    euler_maruyama,
    fan_out,
    init_uniform,
    integrate_batch,
    simulate,
    zero_sum_drift,
)
from stochastic_cs.model import ContractViolation, KernelSpec, ModelParams, ParticleState
from stochastic_cs.rng import NoisePath, derive_seed, generator


def one(x, v, t=0.0):
    return ParticleState(t, [[x]], [[v]])


# ---- em_step examples


def test_zero_state_unchanged():
    p = ModelParams(1.0, 0.5, n=3, dim=2)
    s = ParticleState(0.0, np.zeros((3, 2)), np.zeros((3, 2)))
    out = em_step(s, p, 0.01, 0.0)
    assert out.time == 0.01
    assert not out.positions.any() and not out.velocities.any()


@pytest.mark.parametrize("kappa", [0.3, 1.0, 7.0])
def test_single_centered_particle_no_noise(kappa):
    out = em_step(one(1.0, 0.0), ModelParams(kappa, 0.5, n=1, dim=1), 0.1, 0.0, centered=True)
    assert out.positions[0, 0] == 1.0
    assert out.velocities[0, 0] == pytest.approx(-0.1, abs=1e-15)


def test_single_centered_particle_with_noise():
    out = em_step(one(0.0, 2.0), ModelParams(1.0, 0.5, n=1, dim=1), 0.01, 0.05, centered=True)
    assert out.positions[0, 0] == pytest.approx(0.02, abs=1e-15)
    assert out.velocities[0, 0] == pytest.approx(2.08, abs=1e-14)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_step_faults():
    p = ModelParams(1.0, 0.5, n=1, dim=1)
    with pytest.raises(SimulationFault) as exc:
        em_step(one(0.0, 1e308), p, 1.0, 1e10, centered=True, step=17)
    assert exc.value.step == 17


def test_em_step_rejects_bad_dt():
    with pytest.raises(ContractViolation):
        em_step(one(0.0, 0.0), ModelParams(1.0, 0.5, n=1, dim=1), 0.0, 0.0)


def test_em_step_matches_generic_scheme():
    rng = np.random.default_rng(3)
    p = ModelParams(1.3, 0.4, KernelSpec.algebraic_quarter(), n=5, dim=2)
    x, v = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    from stochastic_cs.model import diffusion_arrays, drift_arrays

    dt, dW = 0.01, 0.037
    xs, vs = em_step_arrays(x, v, p, dt, dW, centered=False)
    dx, dv = drift_arrays(x, v, p)
    g = diffusion_arrays(v, p.sigma, v.mean(0))
    np.testing.assert_array_equal(xs, x + dx * dt)
    np.testing.assert_array_equal(vs, v + dv * dt + g * dW)


# ---- StepConfig


def test_step_count():
    assert StepConfig(dt=0.1, t_final=1.0).steps == 10
    assert StepConfig(dt=0.3, t_final=1.0).steps == 4


@pytest.mark.parametrize(
    "kw", [dict(dt=0.0), dict(t_final=-1.0), dict(dt=3.0, t_final=2.0), dict(record_every=0), dict(seed=-1), dict(scheme="milstein")]
)
def test_step_config_validation(kw):
    with pytest.raises(ContractViolation):
        StepConfig(**kw)


def test_record_steps_include_last():
    assert StepConfig(dt=0.1, t_final=1.0, record_every=3).record_steps().tolist() == [0, 3, 6, 9, 10]


# ---- simulate


def test_single_step_record():
    p = ModelParams(1.0, 0.5, n=2, dim=1)
    rec = simulate(init_uniform(2, 1, 1.0, 0), p, StepConfig(dt=0.01, t_final=0.01))
    assert len(rec) == 2


def test_simulate_deterministic():
    p = ModelParams(1.0, 0.5, KernelSpec.algebraic_quarter(), n=6, dim=2)
    init = init_uniform(6, 2, 1.0, 9)
    cfg = StepConfig(dt=0.01, t_final=0.5, seed=99, record_every=7)
    assert simulate(init, p, cfg) == simulate(init, p, cfg)


def test_record_times_consistent():
    p = ModelParams(1.0, 0.5, n=3, dim=2)
    cfg = StepConfig(dt=0.01, t_final=0.25, record_every=4)
    rec = simulate(init_uniform(3, 2, 1.0, 1), p, cfg)
    assert np.all(np.diff(rec.times) > 0)
    assert all(s.time == t for s, t in zip(rec.states, rec.times))
    assert abs(rec.times[-1] - cfg.t_final) <= cfg.dt


def test_simulate_uses_seed_path():
    p = ModelParams(1.0, 0.5, n=1, dim=1)
    cfg = StepConfig(dt=0.1, t_final=0.3, seed=5)
    rec = simulate(one(0.0, 1.0), p, cfg, centered=True)
    inc = NoisePath.generate(5, 0.1, 3).increments
    s = one(0.0, 1.0)
    for k in range(3):
        s = em_step(s, p, 0.1, inc[k], centered=True)
    np.testing.assert_array_equal(rec.velocities[-1], s.velocities)


def test_centered_run_preserves_zero_sum():
    p = ModelParams(2.0, 0.5, KernelSpec.algebraic_quarter(), n=12, dim=2)
    rec = simulate(init_uniform(12, 2, 5.0, 4), p, StepConfig(dt=1e-3, t_final=2.0, seed=8), centered=True)
    assert zero_sum_drift(rec) <= 1e-9


def test_macro_follows_euler_oscillator():
    p = ModelParams(1.5, 0.8, KernelSpec.algebraic_quarter(), n=7, dim=2)
    init = init_uniform(7, 2, 2.0, 11, project=False)
    dt = 1e-2
    rec = simulate(init, p, StepConfig(dt=dt, t_final=1.0, seed=3))
    xc, vc = rec.positions.mean(1), rec.velocities.mean(1)
    pred_x = xc[:-1] + vc[:-1] * dt
    pred_v = vc[:-1] - xc[:-1] * dt
    scale = max(np.abs(xc).max(), np.abs(vc).max())
    assert np.abs(pred_x - xc[1:]).max() <= 1e-12 * scale
    assert np.abs(pred_v - vc[1:]).max() <= 1e-12 * scale


def test_overflow_halts_cleanly():
    p = ModelParams(1.0, 0.5, n=2, dim=1)
    cfg = StepConfig(dt=0.1, t_final=10.0)
    x0 = np.zeros((1, 2, 1))
    v0 = np.array([[[1.0], [-1.0]]])
    inc = np.full((1, cfg.steps), 1e3)
    times, xs, vs, halted = integrate_batch(x0, v0, p, cfg, inc, centered=True)
    assert halted
    assert len(times) < cfg.steps + 1
    assert np.abs(vs[-1]).max() > 1e12


# ---- init_uniform


def test_init_projected_sums_vanish():
    s = init_uniform(100, 2, 50.0, 42)
    assert np.abs(s.positions.sum(0)).max() <= 1e-10 * 50
    assert np.abs(s.velocities.sum(0)).max() <= 1e-10 * 50
    assert np.abs(s.positions).max() <= 100


def test_init_single_projected_at_origin():
    s = init_uniform(1, 3, 5.0, 1)
    assert not s.positions.any() and not s.velocities.any()


def test_init_deterministic():
    assert init_uniform(5, 2, 1.0, 3) == init_uniform(5, 2, 1.0, 3)


def test_init_rejects_empty_box():
    with pytest.raises(ContractViolation):
        init_uniform(3, 2, 0.0, 1)


# ---- fan_out


def test_fan_out_single_equals_simulate():
    p = ModelParams(1.0, 0.5, KernelSpec.algebraic_quarter(), n=4, dim=2)
    init = init_uniform(4, 2, 1.0, 2)
    cfg = StepConfig(dt=0.01, t_final=0.2, seed=77)
    assert fan_out(init, p, cfg, 1)[0] == simulate(init, p, cfg)


def test_fan_out_realizations_replayable():
    p = ModelParams(1.0, 0.5, n=3, dim=1)
    init = init_uniform(3, 1, 1.0, 2)
    cfg = StepConfig(dt=0.01, t_final=0.2, seed=77)
    recs = fan_out(init, p, cfg, 5, batch_size=2, workers=2)
    for k, rec in enumerate(recs):
        solo = simulate(init, p, StepConfig(dt=0.01, t_final=0.2, seed=derive_seed(77, k)))
        assert rec == solo
    assert not np.array_equal(recs[1].velocities, recs[2].velocities)


def test_fan_out_requires_one_realization():
    with pytest.raises(ContractViolation):
        fan_out(one(0.0, 0.0), ModelParams(1.0, 0.5, n=1, dim=1), StepConfig(), 0)


def test_fan_out_mean_velocity_matches_oracle():
    # the mean obeys the noiseless linear ODE, solved here by a matrix exponential
    p = ModelParams(2.0, 0.5, n=1, dim=1)
    cfg = StepConfig(dt=1e-3, t_final=1.0, seed=21, record_every=1000)
    recs = fan_out(one(1.0, 0.0), p, cfg, 10_000, centered=True)
    _, xs, vs = ensemble_arrays(recs)
    A = np.array([[0.0, 1.0], [-1.0, -2.0]])
    from scipy.linalg import expm

    mean = expm(A * 1.0) @ np.array([1.0, 0.0])
    v = vs[-1, :, 0, 0]
    se = v.std(ddof=1) / math.sqrt(len(v))
    assert abs(v.mean() - mean[1]) <= 3 * se


# ---- strong order on the scalar oracle SDE


def test_strong_order_half():
    kappa, sigma, v0, T = 1.0, 0.5, 1.0, 1.0
    paths, fine = 2000, 2**9
    dW = generator(2024).standard_normal((paths, fine)) * math.sqrt(T / fine)
    W = dW.sum(1)
    exact = v0 * np.exp(-(kappa + sigma) * T + math.sqrt(2 * sigma) * W)
    dts, errs = [], []
    for level in range(4, 9):
        steps = 2**level
        coarse = dW.reshape(paths, steps, fine // steps).sum(-1)
        end = euler_maruyama(lambda v: -kappa * v, lambda v: math.sqrt(2 * sigma) * v, np.full(paths, v0), coarse, T / steps)
        dts.append(T / steps)
        errs.append(math.sqrt(np.mean((end - exact) ** 2)))
    order = np.polyfit(np.log(dts), np.log(errs), 1)[0]
    assert 0.4 <= order <= 0.6


def test_em_step_converges_on_particle_system():
    # em_step with coarser dt approaches a fine-grid reference on the same path
    p = ModelParams(2.0, 0.5, n=1, dim=1)
    paths, fine, T = 500, 2**9, 1.0
    dW = generator(99).standard_normal((paths, fine)) * math.sqrt(T / fine)

    def run(steps):
        inc = dW.reshape(paths, steps, fine // steps).sum(-1)
        x, v = np.ones((paths, 1, 1)), np.zeros((paths, 1, 1))
        for k in range(steps):
            x, v = em_step_arrays(x, v, p, T / steps, inc[:, k], centered=True)
        return v[:, 0, 0]

    ref = run(fine)
    errs = [math.sqrt(np.mean((run(s) - ref) ** 2)) for s in (16, 32, 64)]
    assert errs[0] > errs[1] > errs[2]
