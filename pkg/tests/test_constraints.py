import json

import numpy as np
import pytest

from tscps.constraints import (EQUALITY, INEQUALITY, SQUARED, AvailableConstraints, ConstraintSet,
                               compile_affine, constraint_from_dict, default_timestamps,
                               extract_constraints, per_constraint_violation, violation,
                               violation_gradient)
from tscps.errors import ConstraintError, ShapeMismatchError, UnsupportedCompilationError
from tscps.series import generate_waveforms


def make(kind, **kwargs):
    return AvailableConstraints.get(kind)(**kwargs)


@pytest.fixture
def reference():
    return generate_waveforms(1, L=32, seed=11).to_array()[0]


@pytest.fixture
def mixed_set():
    return ConstraintSet.from_list([
        make('mean', target=0.1),
        make('value_at_timestamp', index=3, value=0.5),
        make('argmax_location', location=5),
        make('value_at_argmin', value=-0.4, location=9),
        make('mean_consecutive_change', target=0.02),
        make('peak', location=5, value=0.8),
        make('valley', location=9, value=-0.4),
        make('trend_segment', start=5, end=9, direction='down'),
    ])


def test_registry_lists_every_kind():
    assert set(AvailableConstraints.kinds()) == {
        'mean', 'mean_consecutive_change', 'value_at_timestamp', 'value_at_argmax', 'value_at_argmin',
        'argmax_location', 'argmin_location', 'ohlc', 'peak', 'valley', 'trend_segment',
        'affine_inequality', 'affine_equality'}
    with pytest.raises(ConstraintError):
        AvailableConstraints.get('median')


def test_default_thresholds():
    assert make('mean', target=0.0).threshold == 0.005
    assert make('argmax_location', location=0).threshold == 0.0
    assert make('affine_equality', A=[[1.0]], y=[0.0]).threshold == 0.0
    with pytest.raises(ConstraintError):
        make('affine_equality', A=[[1.0]], y=[0.0], threshold=0.1)
    with pytest.raises(ConstraintError):
        make('mean', target=0.0, threshold=-1.0)


def test_violation_examples():
    mean_one = ConstraintSet.from_list([make('mean', target=1.0)])
    assert violation(np.ones((1, 4)), mean_one) == 0.0
    assert np.isclose(violation(np.full((1, 4), 2.0), mean_one), 0.995)


def test_ohlc_boundary_contributes_nothing():
    z = np.array([[1.0, 2.0], [1.0, 2.0], [0.5, 1.0], [0.8, 1.5]])  # open equals high
    assert violation(z, ConstraintSet.from_list([make('ohlc')])) == 0.0
    z[0, 1] = 2.5
    assert np.isclose(violation(z, ConstraintSet.from_list([make('ohlc')])), 0.5)


def test_per_constraint_violation_examples(mixed_set):
    satisfied = ConstraintSet.from_list([make('mean', target=1.0)])
    assert np.array_equal(per_constraint_violation(np.ones((1, 4)), satisfied), [0.0])
    violated = per_constraint_violation(np.full((1, 4), 1.51), satisfied)
    assert violated.shape == (1,)
    assert np.isclose(violated[0], 0.5)

    z = np.random.default_rng(0).standard_normal((1, 32))
    expected = [max(0.0, c.raw_violation(z) - mixed_set.budget) for c in mixed_set]
    assert np.allclose(per_constraint_violation(z, mixed_set), expected)
    assert np.all(per_constraint_violation(z, mixed_set, budget=100.0) == 0.0)


def test_compile_mean_row():
    system = compile_affine(ConstraintSet.from_list([make('mean', target=0.3)]), 1, 96)
    assert system.m == 1
    assert np.allclose(system.to_dense(), 1.0 / 96)
    assert system.row_kind.tolist() == [EQUALITY]
    assert system.b.tolist() == [0.3]


def test_compile_ohlc_rows():
    system = compile_affine(ConstraintSet.from_list([make('ohlc')]), 4, 96)
    assert system.m == 384
    assert np.all(system.row_kind == INEQUALITY)


def test_argmax_location_rows_match_direct_argmax():
    rng = np.random.default_rng(1)
    L = 12
    for _ in range(50):
        x = rng.standard_normal((1, L))
        j = int(np.argmax(x))
        system = compile_affine(ConstraintSet.from_list([make('argmax_location', location=j)]), 1, L)
        assert system.m == L - 1
        assert system.penalty(x) == 0.0
        other = (j + 1) % L
        wrong = ConstraintSet.from_list([make('argmax_location', location=other)])
        assert violation(x, wrong) > 0.0


def test_compiled_system_matches_violation(mixed_set):
    rng = np.random.default_rng(2)
    system = compile_affine(mixed_set, 1, 32)
    for _ in range(1000):
        z = rng.standard_normal((1, 32))
        assert abs(system.penalty(z) - violation(z, mixed_set)) <= 1e-9


def test_affine_equality_rows_are_squared():
    A = np.array([[1.0, -1.0, 0.0]])
    constraint_set = ConstraintSet.from_list([make('affine_equality', A=A, y=[1.0])])
    system = compile_affine(constraint_set, 1, 3)
    assert system.squared_only
    assert system.row_kind.tolist() == [SQUARED]
    assert np.isclose(violation(np.array([[3.0, 0.0, 5.0]]), constraint_set), 4.0)


def test_non_affine_constraint_is_named():
    constraint_set = ConstraintSet.from_list([make('mean', target=0.0), make('value_at_argmax', value=1.0)])
    assert not constraint_set.is_affine
    with pytest.raises(UnsupportedCompilationError) as excinfo:
        compile_affine(constraint_set, 1, 8)
    assert excinfo.value.constraint_name == 'value_at_argmax_2'


def test_violation_is_convex_on_affine_sets(mixed_set):
    rng = np.random.default_rng(3)
    for _ in range(200):
        u, v = rng.standard_normal((2, 1, 32))
        assert violation((u + v) / 2, mixed_set) <= (violation(u, mixed_set) + violation(v, mixed_set)) / 2 + 1e-12


def test_violation_zero_iff_rows_within_threshold(mixed_set):
    rng = np.random.default_rng(4)
    for _ in range(200):
        z = rng.standard_normal((1, 32)) * rng.choice([1e-4, 1.0])
        within = all(
            np.all(np.where(rows.kinds == INEQUALITY, rows.values, np.abs(rows.values)) <= rows.thresholds)
            for rows in (c.residuals(z) for c in mixed_set))
        assert (violation(z, mixed_set) == 0.0) == within


def test_violation_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    A = rng.standard_normal((2, 6))
    constraint_set = ConstraintSet.from_list([make('affine_equality', A=A, y=[0.5, -0.5])])
    z = rng.standard_normal((1, 6))
    gradient = violation_gradient(z, constraint_set)
    h = 1e-6
    for i in range(6):
        step = np.zeros((1, 6))
        step[0, i] = h
        numeric = (violation(z + step, constraint_set) - violation(z - step, constraint_set)) / (2 * h)
        assert np.isclose(gradient[0, i], numeric, atol=1e-6)


def test_shape_checks():
    constraint_set = ConstraintSet.from_list([make('mean', channel=2, target=0.0)])
    with pytest.raises(ConstraintError):
        violation(np.zeros((1, 4)), constraint_set)
    with pytest.raises(ShapeMismatchError):
        violation(np.zeros(4), constraint_set)
    with pytest.raises(ConstraintError):
        violation(np.zeros((1, 4)), ConstraintSet.from_list([make('value_at_timestamp', index=4, value=0.0)]))


def test_constraint_set_file_round_trip(tmp_path, mixed_set):
    path = str(tmp_path / "constraints.json")
    mixed_set.save_as_json(path)
    with open(path) as file:
        stored = json.load(file)
    assert stored['value_at_timestamp_2']['params']['index'] == 4
    loaded = ConstraintSet(settings_file=path)
    assert loaded == mixed_set
    assert loaded.items['value_at_timestamp_2'].params['index'] == 3


def test_constraint_file_rejects_zero_timestamp():
    with pytest.raises(ConstraintError):
        constraint_from_dict({'kind': 'value_at_timestamp', 'params': {'index': 0, 'value': 1.0}})
    with pytest.raises(ConstraintError):
        constraint_from_dict({'kind': 'mean', 'params': {'target': 0.0}, 'weight': 2})


def test_constraint_set_requires_items_and_order():
    with pytest.raises(ConstraintError):
        ConstraintSet(items={'a': make('mean', target=0.0)})
    with pytest.raises(ConstraintError):
        ConstraintSet(items={}, order=['a'])
    with pytest.raises(ConstraintError):
        ConstraintSet(budget=-0.1)


def test_add_constraint_keeps_order():
    constraint_set = ConstraintSet.from_list([make('mean', target=0.0)])
    constraint_set.add_constraint('fixed_start', make('value_at_timestamp', index=0, value=1.0))
    assert constraint_set.order == ['mean_1', 'fixed_start']
    with pytest.raises(ConstraintError):
        constraint_set.add_constraint('mean_1', make('mean', target=1.0))
    constraint_set.add_constraint('mean_1', make('mean', target=1.0), rewrite=True)
    assert len(constraint_set) == 2
    assert violation(np.ones((1, 4)), constraint_set) == 0.0


def test_default_timestamps():
    assert [u + 1 for u in default_timestamps(96)] == [1, 24, 48, 72, 96]


def test_extracted_constraints_hold_for_reference(reference):
    constraint_set = extract_constraints(reference)
    kinds = [c.kind for c in constraint_set]
    assert kinds[:6] == ['mean'] + ['value_at_timestamp'] * 5
    assert constraint_set.is_affine
    assert violation(reference, constraint_set) == 0.0
    assert np.all(per_constraint_violation(reference, constraint_set) == 0.0)
    compile_affine(constraint_set, 1, 32)


def test_extracted_head(reference):
    constraint_set = extract_constraints(reference, budget=0.02)
    first = constraint_set.head(1)
    assert len(first) == 1
    assert first.budget == 0.02
    assert first.constraints[0].kind == 'mean'
    with pytest.raises(ConstraintError):
        extract_constraints(reference, kinds=('median',))
