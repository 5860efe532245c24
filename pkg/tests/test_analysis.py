import numpy as np
import pandas as pd
import pytest

from tscps.analysis import (SWEEP_COLUMNS, GaussianLinearInstance, median_error_non_increasing,
                            norm_checks, random_instance, recursion_step, solve_x_star, step_matrices,
                            sweep, theorem2_bound, verify_theorem2)
from tscps.constraints import compile_affine
from tscps.denoiser import GaussianDenoiser
from tscps.errors import ConstraintError, ScheduleError
from tscps.projection import closed_form_affine_eq
from tscps.sampler import ddim_update
from tscps.schedule import PenaltySchedule, harness_schedule


@pytest.fixture
def instance():
    return random_instance(3, 5, np.random.default_rng(12))


def test_x_star_examples():
    A = np.array([[1.0], [2.0]])
    assert np.allclose(solve_x_star(GaussianLinearInstance(A, [3.0, 6.0], [0.0])), [3.0])
    inst = GaussianLinearInstance(np.eye(2), [1.0, -1.0], [0.0, 0.0])
    assert np.allclose(inst.x_star, [1.0, -1.0])
    assert inst.lambda_min == pytest.approx(1.0)


def test_random_instance_recovers_target(instance):
    assert np.allclose(instance.x_star, instance.x_target)
    assert instance.lambda_min > 0.0
    assert instance.constraint_set().budget == 0.0


@pytest.mark.parametrize("A, y", [
    (np.array([[1.0, 2.0], [2.0, 4.0]]), [1.0, 2.0]),
    (np.array([[1.0, 0.0, 0.0]]), [1.0]),
    (np.array([[1.0], [1.0]]), [1.0, 2.0]),
])
def test_instance_rejects_bad_systems(A, y):
    with pytest.raises(ConstraintError):
        GaussianLinearInstance(A, y, np.zeros(A.shape[1]))


def test_recursion_matches_sampler_step(instance):
    schedule = harness_schedule(10)
    d = GaussianDenoiser(instance.mu.reshape(1, -1), schedule)
    system = compile_affine(instance.constraint_set(), 1, instance.n)
    rng = np.random.default_rng(13)
    for t in (10, 6, 1):
        gamma = 3.7 * t
        z_t = rng.standard_normal((1, instance.n))
        eps_hat, z0_hat = d.estimate(z_t, t)
        z0_pr = closed_form_affine_eq(z0_hat, system, gamma)
        expected = ddim_update(schedule, t, z0_pr, eps_hat)
        assert np.allclose(recursion_step(instance, schedule, gamma, t, z_t), expected.reshape(-1))


def test_first_step_has_no_noise_term(instance):
    matrices = step_matrices(instance, harness_schedule(8), 5.0, 1)
    assert np.all(matrices['F'] == 0.0)


def test_norm_checks_pass_on_harness_schedule(instance):
    schedule = harness_schedule(40)
    penalty = PenaltySchedule('theorem2', k=2.0, lambda_min=instance.lambda_min)
    report = norm_checks(instance, schedule, penalty, method='eigen')
    assert report.failures == []
    assert len(report.norms) == 40
    assert report.norms.loc[0, 'F'] == 0.0
    assert report.lambda_k < 1.0


def test_norm_methods_agree(instance):
    schedule = harness_schedule(12)
    penalty = PenaltySchedule('theorem2', k=10.0, lambda_min=instance.lambda_min)
    power = norm_checks(instance, schedule, penalty, method='power', check=False).norms
    eigen = norm_checks(instance, schedule, penalty, method='eigen', check=False).norms
    for name in ('K', 'E', 'F', 'D'):
        assert np.allclose(power[name], eigen[name], rtol=1e-5, atol=1e-9)
    with pytest.raises(ScheduleError):
        norm_checks(instance, schedule, penalty, method='svd')


@pytest.mark.parametrize("k", [2.0, 10.0, 100.0])
def test_bound_holds_on_random_instances(k):
    rng = np.random.default_rng(int(k))
    for _ in range(3):
        inst = random_instance(int(rng.integers(2, 5)), 6, rng)
        report = verify_theorem2(inst, 100, k)
        assert report.passed
        assert report.measured <= report.bound
        assert report.bound == pytest.approx(theorem2_bound(inst, harness_schedule(100), k))


def test_verify_rejects_bad_arguments(instance):
    with pytest.raises(ScheduleError):
        verify_theorem2(instance, 50, 2.0, schedule_kind='linear')
    with pytest.raises(ScheduleError):
        verify_theorem2(instance, 50, 1.0)


def test_sweep_table():
    table = sweep(n_instances=2, ks=(2.0, 10.0), T=50, n_range=(2, 3), m_max=4, seed=3)
    assert list(table.columns) == SWEEP_COLUMNS
    assert len(table) == 4
    assert table['passed'].all()
    assert (table['margin'] >= 0.0).all()


def test_median_error_trend():
    falling = pd.DataFrame({'k': [2.0, 2.0, 10.0, 10.0], 'measured': [0.4, 0.2, 0.1, 0.05]})
    rising = pd.DataFrame({'k': [2.0, 10.0], 'measured': [0.1, 0.3]})
    assert median_error_non_increasing(falling)
    assert not median_error_non_increasing(rising)
