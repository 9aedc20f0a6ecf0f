import numpy as np
import pytest

from rirflow.core import InvalidInputError, NoiseSpec, SignalBuffer, rms, rt_to_lambda, schroeder_edc, synth_rir
from rirflow.filterbank import single_band_plan
from rirflow.flow import FlowConfig, FlowError, MeasurementTask, cosine_times, nu_of_t, run, sample_prior
from rirflow.forward_ops import ConvOperator
from rirflow.refine import SolverTolerances

FS = 8000


def test_cosine_times():
    t = cosine_times(4)
    np.testing.assert_allclose(t, [0.0, 0.146447, 0.5, 0.853553], atol=1e-6)
    assert t[0] == 0.0 and t[2] == 0.5
    t = cosine_times(1000)
    assert np.all(np.diff(t) > 0) and t[-1] < 1
    with pytest.raises(InvalidInputError):
        cosine_times(1)


def test_nu():
    assert nu_of_t(0.0) == 1.0 and nu_of_t(1.0) == 0.0
    assert nu_of_t(0.5) == pytest.approx(0.707107, abs=1e-6)
    np.testing.assert_allclose(nu_of_t(np.array([0.0, 0.5])), [1.0, np.sqrt(0.5)])
    with pytest.raises(InvalidInputError):
        nu_of_t(1.5)


def test_config_validation():
    with pytest.raises(InvalidInputError):
        FlowConfig(steps_T=1)
    with pytest.raises(InvalidInputError):
        FlowConfig(gamma=1.5)
    with pytest.raises(InvalidInputError):
        FlowConfig(schedule="linear")
    with pytest.raises(InvalidInputError):
        FlowConfig(sample_rate=16000, band_plan=single_band_plan(8000))
    d = FlowConfig().to_dict()
    assert d["steps_T"] == 1000 and d["gamma"] == 0.9 and d["band_plan"]["centers"][0] == 125.0


def test_task_validation():
    with pytest.raises(InvalidInputError):
        MeasurementTask("deconv", 10, NoiseSpec(0.1))
    with pytest.raises(InvalidInputError):
        MeasurementTask("deconv_robust", 10, NoiseSpec(0.1), kernel=np.ones(3))
    with pytest.raises(InvalidInputError):
        MeasurementTask("inpaint", 10, NoiseSpec(0.1), keep=np.ones(9, bool))
    with pytest.raises(InvalidInputError):
        MeasurementTask("declip", 10, NoiseSpec(0.1), kernel=np.ones(3))
    with pytest.raises(InvalidInputError):
        MeasurementTask("unmix", 10, NoiseSpec(0.1))
    assert MeasurementTask("deconv", 10, NoiseSpec(0.1), kernel=np.ones(3)).output_len == 12


@pytest.fixture(scope="module")
def noisy_rir():
    x = synth_rir([0.8, 0.6, 0.5, 0.4, 0.3], 0.25, 3000, FS, seed=1)
    rng = np.random.default_rng(2)
    return x, x.samples + 0.003 * rng.standard_normal(3000)


def test_precise_measurement_limit(noisy_rir):
    _, y = noisy_rir
    sigma = 1e-6 * rms(y)
    out, trace = run(MeasurementTask("denoise", y.size, NoiseSpec(sigma)), SignalBuffer(y, FS),
                     FlowConfig(steps_T=30, gamma=0.0))
    assert 10 * np.log10(np.sum((out.samples - y) ** 2) / np.sum(y ** 2)) < -60
    assert len(trace.t) == 30 and np.all(np.diff(trace.t) > 0)
    assert "kappa_iters" not in trace.diagnostics[0]


def test_deterministic_and_seeded(noisy_rir):
    _, y = noisy_rir
    task = MeasurementTask("denoise", y.size, NoiseSpec(0.003))
    a, _ = run(task, y, FlowConfig(steps_T=20, seed=4))
    b, _ = run(task, y, FlowConfig(steps_T=20, seed=4))
    c, _ = run(task, y, FlowConfig(steps_T=20, seed=5))
    assert np.array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, c.samples)


def test_snapshots_and_summary(noisy_rir):
    _, y = noisy_rir
    h = np.array([1.0, 0.5, 0.25])
    yc = ConvOperator(h, y.size).apply(y)
    out, trace = run(MeasurementTask("deconv", y.size, NoiseSpec(0.003), kernel=h), yc,
                     FlowConfig(steps_T=6, snapshot_steps=(0, 5)))
    assert sorted(trace.snapshots) == [0, 5]
    np.testing.assert_array_equal(trace.snapshots[5], out.samples)
    s = trace.summary()
    assert s["steps"] == 6 and s["mu_iters_max"] >= 1


def test_input_errors(noisy_rir):
    _, y = noisy_rir
    task = MeasurementTask("denoise", y.size, NoiseSpec(0.003))
    with pytest.raises(InvalidInputError):
        run(task, y[:-1], FlowConfig(steps_T=3))
    with pytest.raises(InvalidInputError):
        run(task, SignalBuffer(y, 16000), FlowConfig(steps_T=3))
    with pytest.raises(InvalidInputError):
        run(MeasurementTask("denoise", y.size, NoiseSpec(0.0)), y, FlowConfig(steps_T=3))


def test_solver_failure_carries_step(noisy_rir):
    _, y = noisy_rir
    h = np.random.default_rng(0).standard_normal(50)
    yc = ConvOperator(h, y.size).apply(y)
    cfg = FlowConfig(steps_T=4, tolerances=SolverTolerances(cg_max_iter=1, cg_rel_tol=1e-15))
    with pytest.raises(FlowError) as err:
        run(MeasurementTask("deconv", y.size, NoiseSpec(1e-4), kernel=h), yc, cfg)
    assert err.value.step == 0


def test_prior_samples_follow_the_model():
    rt, a2, n = 0.3, 0.5, 1024
    lam = float(rt_to_lambda(rt, FS))
    cfg = FlowConfig(steps_T=200, band_plan=single_band_plan(FS), rt_min=rt, rt_max=rt * 1.0000001, rt_count=1,
                     alpha_sq=a2)
    grid = cfg.make_grid()
    draws = np.stack([sample_prior(cfg, n, seed=s, grid=grid).samples for s in range(200)])
    assert np.all(np.isfinite(draws)) and np.any(draws)
    win = 64
    emp = draws.var(axis=0).reshape(-1, win).mean(axis=1)
    model = (a2 * np.exp(-2 * lam * np.arange(n))).reshape(-1, win).mean(axis=1)
    np.testing.assert_allclose(emp, model, rtol=0.20)


def test_prior_sample_edc_monotone():
    cfg = FlowConfig(steps_T=50)
    x = sample_prior(cfg, 4000, seed=0).samples
    assert np.all(np.isfinite(x)) and np.any(x)
    edc = schroeder_edc(x)
    assert np.all(np.diff(edc) <= 0)
