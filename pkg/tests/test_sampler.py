import numpy as np
import pytest

from tscps.constraints import AvailableConstraints, ConstraintSet, compile_affine
from tscps.denoiser import Denoiser, GaussianDenoiser
from tscps.errors import ConfigError, ConstraintError, NumericalFailureError
from tscps.projection import closed_form_affine_eq
from tscps.sampler import (SamplerConfig, cop_project_baseline, cps_sample, ddim_sample, ddim_update,
                           guided_sample, reports_frame, reports_to_dataset, sample_batch,
                           select_guidance_weight)
from tscps.schedule import PenaltySchedule, harness_schedule, linear_schedule, stochastic_sigma
from tscps.series import Dataset


def make(kind, **kwargs):
    return AvailableConstraints.get(kind)(**kwargs)


@pytest.fixture
def denoiser():
    return GaussianDenoiser(np.linspace(-0.5, 0.5, 8), linear_schedule(20))


@pytest.fixture
def level():
    return ConstraintSet.from_list([make('mean', target=1.0)])


class ExplodingDenoiser(Denoiser):
    def _predict(self, z, t):
        return np.full_like(z, np.inf)


def test_ddim_update_needs_noise_when_stochastic():
    schedule = stochastic_sigma(linear_schedule(5), 1.0)
    z0 = np.ones((1, 2))
    with pytest.raises(ConfigError):
        ddim_update(schedule, 3, z0, np.zeros((1, 2)))
    # the last step returns the clean estimate
    assert np.array_equal(ddim_update(schedule, 1, z0, np.zeros((1, 2))), z0)


def test_ddim_sample_is_reproducible(denoiser):
    cfg = SamplerConfig(seed=3, eta=0.5)
    first = ddim_sample(denoiser, cfg, sample_index=2)
    second = ddim_sample(denoiser, cfg, sample_index=2)
    other = ddim_sample(denoiser, cfg, sample_index=3)
    assert np.array_equal(first.sample.values, second.sample.values)
    assert not np.array_equal(first.sample.values, other.sample.values)
    assert first.steps == 20
    assert first.method == 'ddim'
    assert first.violation_total == 0.0


def test_cps_without_penalty_matches_ddim(denoiser, level):
    cfg = SamplerConfig(seed=5, eta=0.7)
    plain = ddim_sample(denoiser, cfg, sample_index=1)
    off = cps_sample(denoiser, level, cfg.replace(penalty=PenaltySchedule('none')), sample_index=1)
    assert np.array_equal(plain.sample.values, off.sample.values)
    assert off.projection_iterations == 0


def test_zero_guidance_matches_ddim(denoiser, level):
    cfg = SamplerConfig(seed=6, eta=0.3)
    plain = ddim_sample(denoiser, cfg, sample_index=4)
    guided = guided_sample(denoiser, level, cfg.replace(guidance_weight=0.0), sample_index=4)
    assert np.array_equal(plain.sample.values, guided.sample.values)


def test_cps_satisfies_mean_constraint(denoiser, level):
    report = cps_sample(denoiser, level, SamplerConfig(seed=1))
    assert report.violation_total < 1e-6
    assert report.feasible
    assert report.converged
    assert report.projection_iterations > 0
    assert report.label == 'CPS'


def test_cps_needs_constraints(denoiser):
    with pytest.raises(ConstraintError):
        cps_sample(denoiser, ConstraintSet())
    with pytest.raises(ConstraintError):
        sample_batch('cps', 2, denoiser=denoiser)


def test_guided_sampling_keeps_pinned_values(denoiser):
    pins = ConstraintSet.from_list([
        make('value_at_timestamp', index=2, value=0.7),
        make('mean', target=0.0),
    ])
    report = guided_sample(denoiser, pins, SamplerConfig(seed=2, eta=0.5, guidance_weight=0.1))
    assert report.sample.values[0, 2] == 0.7
    assert report.method == 'guided'


def test_batch_matches_single_samples(denoiser, level):
    cfg = SamplerConfig(seed=7, eta=0.5, chunk_size=2, threads=2)
    reports = sample_batch('cps', 5, cfg, denoiser, level, first_index=10)
    assert [r.sample_index for r in reports] == [10, 11, 12, 13, 14]
    for report in reports:
        single = cps_sample(denoiser, level, cfg, sample_index=report.sample_index)
        assert np.array_equal(report.sample.values, single.sample.values)


def test_gaussian_samples_have_the_data_mean():
    mu = np.array([[1.0, -1.0, 0.5, 0.0]])
    d = GaussianDenoiser(mu, harness_schedule(20))
    count = 2000
    reports = sample_batch('ddim', count, SamplerConfig(seed=11, chunk_size=250), d)
    samples = reports_to_dataset(reports).to_array()
    assert samples.shape == (count, 1, 4)
    # sample std is at most 1 per entry
    assert np.all(np.abs(samples.mean(axis=0) - mu) <= 3.0 / np.sqrt(count))


def test_trace_rows(denoiser, level):
    cfg = SamplerConfig(seed=8, trace=True)
    report = cps_sample(denoiser, level, cfg)
    trace = report.trace
    assert trace['step'].tolist() == list(range(20, 0, -1))
    expected = [cfg.penalty(t, denoiser.schedule) for t in range(20, 0, -1)]
    assert np.allclose(trace['gamma'], expected)
    assert np.all(trace['penalty_pr'] <= trace['penalty_hat'] + 1e-9)
    assert trace['z0_pr'].iloc[-1].shape == (1, 8)
    assert np.array_equal(trace['z0_pr'].iloc[-1], report.sample.values)


def test_cop_projects_a_dataset_sample():
    rng = np.random.default_rng(0)
    dataset = Dataset(rng.standard_normal((6, 1, 5)))
    zero_sum = ConstraintSet.from_list([make('affine_equality', A=np.ones((1, 5)), y=[0.0])])
    cfg = SamplerConfig(seed=1, cop_gamma=1e8)
    report = cop_project_baseline('dataset', zero_sum, cfg, dataset=dataset, sample_index=3)
    assert report.method == 'cop'
    assert report.steps == 0
    assert abs(report.sample.values.sum()) < 1e-6
    system = compile_affine(zero_sum, 1, 5)
    candidates = [closed_form_affine_eq(x, system, 1e8) for x in dataset.to_array()]
    assert any(np.allclose(report.sample.values, c) for c in candidates)
    again = cop_project_baseline('dataset', zero_sum, cfg, dataset=dataset, sample_index=3)
    assert np.array_equal(report.sample.values, again.sample.values)


def test_cop_ft_projects_a_ddim_sample(denoiser, level):
    cfg = SamplerConfig(seed=4)
    report = cop_project_baseline('generated', level, cfg, denoiser=denoiser)
    assert report.method == 'cop_ft'
    assert report.steps == 20
    assert report.feasible


def test_cop_needs_its_source(level):
    with pytest.raises(ConfigError):
        cop_project_baseline('dataset', level)
    with pytest.raises(ConfigError):
        cop_project_baseline('generated', level)
    with pytest.raises(ConfigError):
        cop_project_baseline('random', level)


def test_sample_batch_validation(denoiser):
    with pytest.raises(ConfigError):
        sample_batch('ddpm', 1, denoiser=denoiser)
    with pytest.raises(ConfigError):
        sample_batch('ddim', 0, denoiser=denoiser)
    with pytest.raises(ConfigError):
        sample_batch('ddim', 1)


def test_non_finite_trajectory_is_reported():
    d = ExplodingDenoiser(1, 4, linear_schedule(5))
    with pytest.raises(NumericalFailureError) as excinfo:
        ddim_sample(d)
    assert excinfo.value.step == 5


def test_reports_frame(denoiser, level):
    reports = sample_batch('cps', 3, SamplerConfig(seed=2), denoiser, level)
    frame = reports_frame(reports)
    assert len(frame) == 3
    assert {'sample_index', 'method', 'violation_total', 'feasible', 'converged'} <= set(frame.columns)


def test_select_guidance_weight(denoiser, level):
    weight, table = select_guidance_weight(denoiser, level, SamplerConfig(seed=3), count=3,
                                           weights=(1e-1, 1e-3))
    assert weight in (1e-3, 1e-1)
    assert table['weight'].tolist() == [1e-3, 1e-1]
    assert table['violation_rate'].between(0.0, 1.0).all()


@pytest.mark.parametrize("settings", [
    {'eta': 1.5},
    {'guidance_weight': -1.0},
    {'cop_gamma': 0.0},
    {'chunk_size': 0},
    {'steps': 10},
])
def test_sampler_config_validation(settings):
    with pytest.raises(ConfigError):
        SamplerConfig.from_dict(settings)


def test_sampler_config_from_dict():
    cfg = SamplerConfig.from_dict({'eta': 0.2, 'penalty': {'rule': 'constant', 'value': 3.0},
                                   'projection': {'max_iterations': 50}})
    assert cfg.penalty.rule == 'constant'
    assert cfg.projection.max_iterations == 50
