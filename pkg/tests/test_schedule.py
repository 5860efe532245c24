import math

import numpy as np
import pytest

from tscps.errors import ScheduleError
from tscps.schedule import (PenaltySchedule, Schedule, describe, harness_schedule, lemma_inequality_holds,
                            linear_schedule, penalty_coefficient, stochastic_sigma, theorem2_penalty)


@pytest.fixture
def schedule():
    return linear_schedule(200)


def test_linear_schedule_example():
    s = linear_schedule(2, 0.1, 0.2)
    assert np.allclose(s.alpha_bar, [1.0, 0.9, 0.72])
    assert np.allclose(s.beta[1:], [0.1, 0.2])
    assert np.all(s.sigma == 0.0)


@pytest.mark.parametrize("T, beta_min, beta_max", [
    (0, 1e-4, 0.02),
    (10, 0.0, 0.02),
    (10, 0.05, 0.01),
    (10, 1e-4, 1.0),
])
def test_linear_schedule_rejects_invalid_arguments(T, beta_min, beta_max):
    with pytest.raises(ScheduleError):
        linear_schedule(T, beta_min, beta_max)


def test_schedule_rejects_non_decreasing_alpha_bar():
    with pytest.raises(ScheduleError) as excinfo:
        Schedule.from_alpha_bar([1.0, 0.5, 0.5])
    assert "strictly decreasing" in str(excinfo.value)


def test_harness_schedule_reaches_zero():
    s = harness_schedule(4)
    assert np.allclose(s.alpha_bar, [1.0, 0.75, 0.5, 0.25, 0.0])
    assert s.beta[4] == 1.0


def test_check_step_bounds(schedule):
    assert schedule.check_step(1) == 1
    assert schedule.check_step(200) == 200
    for t in (0, 201):
        with pytest.raises(ScheduleError):
            schedule.check_step(t)


def test_penalty_coefficient_examples():
    s = Schedule.from_alpha_bar([1.0, 0.99, 0.5, 0.2])
    assert penalty_coefficient(1, s) == s.gamma_clip
    # alpha_bar[1] = 0.99 gives exp(100), above the clip
    assert penalty_coefficient(2, s) == 100_000.0
    assert math.isclose(penalty_coefficient(3, s), math.exp(2.0))


def test_penalty_coefficient_non_increasing(schedule):
    values = [penalty_coefficient(t, schedule) for t in range(1, schedule.T + 1)]
    assert all(later <= earlier for earlier, later in zip(values, values[1:]))
    assert values[0] == schedule.gamma_clip
    assert values[-1] < values[0]


def test_theorem2_penalty():
    assert theorem2_penalty(1, 10, 2.0, 0.5) == 80.0
    assert theorem2_penalty(10, 10, 2.0, 0.5) == 8.0
    with pytest.raises(ScheduleError):
        theorem2_penalty(1, 10, 1.0, 0.5)
    with pytest.raises(ScheduleError):
        theorem2_penalty(1, 10, 2.0, 0.0)


def test_stochastic_sigma(schedule):
    assert np.all(stochastic_sigma(schedule, 0.0).sigma == 0.0)
    noisy = stochastic_sigma(schedule, 1.0)
    assert noisy.sigma[1] == 0.0
    assert np.all(noisy.sigma[2:] > 0.0)
    assert np.all(1.0 - schedule.alpha_bar[:-1] - noisy.sigma[1:] ** 2 >= -1e-12)
    with pytest.raises(ScheduleError):
        stochastic_sigma(schedule, 1.5)


def test_schedule_dict_round_trip(schedule):
    assert Schedule.from_dict(schedule.to_dict()) == schedule
    noisy = stochastic_sigma(schedule, 0.5)
    assert Schedule.from_dict(noisy.to_dict()) == noisy
    explicit = Schedule.from_alpha_bar([1.0, 0.6, 0.1])
    assert Schedule.from_dict(explicit.to_dict()) == explicit


def test_schedule_from_dict_unknown_kind():
    with pytest.raises(ScheduleError):
        Schedule.from_dict({'kind': 'cosine', 'steps': 10})


def test_lemma_inequality_holds(schedule):
    assert lemma_inequality_holds(schedule).all()
    assert lemma_inequality_holds(harness_schedule(50)).all()


@pytest.mark.parametrize("rule, expected", [
    ('exponential', None),
    ('constant', 3.0),
    ('none', 0.0),
])
def test_penalty_schedule_rules(schedule, rule, expected):
    penalty = PenaltySchedule(rule, value=3.0 if rule == 'constant' else None)
    value = penalty(100, schedule)
    if expected is None:
        assert value == penalty_coefficient(100, schedule)
    else:
        assert value == expected
    assert penalty.enabled == (rule != 'none')
    assert PenaltySchedule.from_dict(penalty.to_dict()).to_dict() == penalty.to_dict()


def test_penalty_schedule_validation():
    with pytest.raises(ScheduleError):
        PenaltySchedule('quadratic')
    with pytest.raises(ScheduleError):
        PenaltySchedule('theorem2', k=2.0)
    with pytest.raises(ScheduleError):
        PenaltySchedule('theorem2', k=1.0, lambda_min=1.0)
    with pytest.raises(ScheduleError):
        PenaltySchedule('constant')


def test_describe_reports_last_clipped_step(caplog):
    schedule = Schedule.from_alpha_bar([1.0, 0.99, 0.5, 0.0])
    with caplog.at_level('INFO', logger='tscps'):
        assert describe(schedule) == 2
    assert "clipped for t <= 2" in caplog.text
    assert describe(schedule, PenaltySchedule('none')) is None
