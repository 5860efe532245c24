import numpy as np
import pytest

from tscps.constraints import (AffineSystem, AvailableConstraints, ConstraintSet, compile_affine,
                               extract_constraints, violation)
from tscps.errors import (ConfigError, ConstraintError, NumericalFailureError, ShapeMismatchError,
                          UnsupportedCompilationError)
from tscps.projection import ProjectionConfig, Projector, closed_form_affine_eq, project
from tscps.series import generate_waveforms


def make(kind, **kwargs):
    return AvailableConstraints.get(kind)(**kwargs)


@pytest.fixture
def mixed_set():
    return ConstraintSet.from_list([
        make('mean', target=0.2),
        make('value_at_timestamp', index=0, value=-0.5),
        make('argmax_location', location=6),
        make('trend_segment', start=8, end=12, direction='down'),
    ])


@pytest.fixture
def squared_system():
    rng = np.random.default_rng(7)
    return AffineSystem.equality(rng.standard_normal((3, 8)), rng.standard_normal(3))


def test_closed_form_examples():
    system = AffineSystem.equality(np.eye(3), np.zeros(3))
    z = np.array([1.0, -2.0, 4.0])
    assert np.allclose(closed_form_affine_eq(z, system, 1.0), z / 2)
    assert np.array_equal(closed_form_affine_eq(z, system, 0.0), z)
    target = AffineSystem.equality(np.eye(3), [0.5, 0.5, 0.5])
    assert np.allclose(closed_form_affine_eq(z, target, 1e12), 0.5, atol=1e-6)


def test_closed_form_rejects_bad_input():
    with pytest.raises(ConstraintError):
        closed_form_affine_eq(np.zeros(2), AffineSystem.inequality(np.eye(2), np.zeros(2)), 1.0)
    with pytest.raises(ConfigError):
        closed_form_affine_eq(np.zeros(2), AffineSystem.equality(np.eye(2), np.zeros(2)), -1.0)
    with pytest.raises(ShapeMismatchError):
        closed_form_affine_eq(np.zeros(3), AffineSystem.equality(np.eye(2), np.zeros(2)), 1.0)


def test_closed_form_is_non_expansive(squared_system):
    rng = np.random.default_rng(8)
    for gamma in (0.1, 1.0, 100.0):
        for _ in range(20):
            u, v = rng.standard_normal((2, 8))
            pu = closed_form_affine_eq(u, squared_system, gamma)
            pv = closed_form_affine_eq(v, squared_system, gamma)
            assert np.linalg.norm(pu - pv) <= np.linalg.norm(u - v) + 1e-12


def test_zero_gamma_returns_input(mixed_set):
    z_hat = np.random.default_rng(0).standard_normal((1, 16))
    result = project(z_hat, mixed_set, 0.0)
    assert np.array_equal(result.z_pr, z_hat)
    assert result.solver == 'identity'
    assert result.iterations == 0


def test_feasible_input_is_unchanged():
    level = ConstraintSet.from_list([make('mean', target=1.0)])
    z_hat = np.ones((1, 4))
    result = project(z_hat, level, 100.0)
    assert np.array_equal(result.z_pr, z_hat)
    assert result.residual_violation == 0.0


def test_large_gamma_reaches_the_constraint():
    level = ConstraintSet.from_list([make('mean', target=0.0, threshold=0.0)])
    result = project(np.array([[2.0, 2.0]]), level, 1e6)
    assert result.solver == 'dual'
    assert np.allclose(result.z_pr, 0.0, atol=1e-4)


def test_squared_rows_use_closed_form():
    A = np.array([[1.0, 1.0]])
    constraint_set = ConstraintSet.from_list([make('affine_equality', A=A, y=[0.0])])
    z_hat = np.array([[1.0, 3.0]])
    result = project(z_hat, constraint_set, 1.0)
    assert result.solver == 'closed_form'
    expected = closed_form_affine_eq(z_hat, AffineSystem.equality(A, [0.0]), 1.0)
    assert np.allclose(result.z_pr, expected)


@pytest.mark.parametrize("seed", range(12))
def test_dual_solver_matches_closed_form(seed):
    rng = np.random.default_rng(100 + seed)
    m = int(rng.integers(1, 6))
    system = AffineSystem.equality(rng.standard_normal((m, 8)), rng.standard_normal(m))
    constraint_set = ConstraintSet.from_list([make('affine_equality', A=system.to_dense(), y=system.b)])
    cfg = ProjectionConfig(use_closed_form=False, max_iterations=20000, grad_tolerance=1e-10)
    gamma = float(10.0 ** rng.uniform(-1.0, 2.0))
    z_hat = rng.standard_normal((1, 8))
    expected = closed_form_affine_eq(z_hat, system, gamma)
    result = project(z_hat, constraint_set, gamma, cfg=cfg)
    assert result.solver == 'dual'
    assert np.linalg.norm(result.z_pr - expected) <= 1e-6 * (1.0 + np.linalg.norm(expected))


def feasible_fraction(residuals, limit=1e-4):
    return float(np.mean(np.asarray(residuals) <= limit))


@pytest.mark.parametrize("count", [None, 10])
def test_large_gamma_reaches_extracted_waveform_constraints(count):
    references = generate_waveforms(50, L=64, seed=21).to_array()
    rng = np.random.default_rng(22)
    residuals = []
    for reference in references:
        constraint_set = extract_constraints(reference)
        if count is not None:
            constraint_set = constraint_set.head(count)
        z_hat = reference + rng.standard_normal(reference.shape)
        result = project(z_hat, constraint_set, 1e5)
        assert result.solver == 'dual'
        residuals.append(result.residual_violation)
    assert feasible_fraction(residuals) >= 0.99


@pytest.mark.parametrize("gamma", [1e5, 1e7])
def test_large_gamma_reaches_random_affine_sets(gamma):
    rng = np.random.default_rng(int(np.log10(gamma)))
    residuals = []
    for _ in range(100):
        m, n = int(rng.integers(1, 20)), int(rng.integers(2, 24))
        A = rng.standard_normal((m, n))
        b = A @ rng.standard_normal(n) + rng.uniform(0.0, 0.5, m)
        constraint_set = ConstraintSet.from_list([make('affine_inequality', A=A, b=b)])
        z_hat = 3.0 * rng.standard_normal((1, n))
        residuals.append(project(z_hat, constraint_set, gamma).residual_violation)
    assert feasible_fraction(residuals) >= 0.99


def test_short_dual_run_is_finished_by_active_set_solve(mixed_set):
    cfg = ProjectionConfig(max_iterations=25)
    rng = np.random.default_rng(23)
    for _ in range(10):
        z_hat = 2.0 * rng.standard_normal((1, 16))
        result = project(z_hat, mixed_set, 1e5, cfg=cfg)
        assert result.solver == 'dual'
        assert result.iterations <= 25
        assert result.residual_violation <= 1e-4
        assert np.all(np.diff(result.history) <= 0.0)


@pytest.mark.parametrize("solver", ['dual', 'primal'])
@pytest.mark.parametrize("gamma", [0.5, 10.0, 1e4])
def test_projection_descends(mixed_set, solver, gamma):
    rng = np.random.default_rng(int(gamma))
    cfg = ProjectionConfig(solver=solver, max_iterations=300)
    projector = Projector(mixed_set, 1, 16, cfg=cfg)
    for _ in range(5):
        z_hat = rng.standard_normal((1, 16))
        result = projector(z_hat, gamma)
        start = 0.5 * gamma * violation(z_hat, mixed_set)
        assert result.history[0] == pytest.approx(start)
        assert np.all(np.diff(result.history) <= 0.0)
        assert result.objective <= start
        recomputed = 0.5 * np.sum((result.z_pr - z_hat) ** 2) + 0.5 * gamma * violation(result.z_pr, mixed_set)
        assert result.objective == pytest.approx(recomputed)
        assert result.residual_violation == pytest.approx(violation(result.z_pr, mixed_set))


def test_fixed_step_rule_descends(mixed_set):
    cfg = ProjectionConfig(solver='primal', step_rule='fixed_lipschitz', max_iterations=100)
    z_hat = np.random.default_rng(3).standard_normal((1, 16))
    result = project(z_hat, mixed_set, 5.0, cfg=cfg)
    assert result.solver == 'primal'
    assert np.all(np.diff(result.history) <= 0.0)


def test_non_affine_sets_use_primal_solver():
    constraint_set = ConstraintSet.from_list([make('value_at_argmax', value=0.0)])
    z_hat = np.array([[0.3, 1.0, -0.2, 0.4]])
    result = project(z_hat, constraint_set, 4.0)
    assert result.solver == 'primal'
    assert result.objective < 0.5 * 4.0 * violation(z_hat, constraint_set)
    with pytest.raises(UnsupportedCompilationError):
        Projector(constraint_set, 1, 4, cfg=ProjectionConfig(solver='dual'))


def test_warm_start_reuses_multipliers(squared_system):
    constraint_set = ConstraintSet.from_list([
        make('affine_equality', A=squared_system.to_dense(), y=squared_system.b)])
    cfg = ProjectionConfig(use_closed_form=False, max_iterations=20000, grad_tolerance=1e-10)
    projector = Projector(constraint_set, 1, 8, cfg=cfg)
    z_hat = np.random.default_rng(4).standard_normal((1, 8))
    cold = projector(z_hat, 2.0)
    warm = projector(z_hat, 2.0, warm_start=cold.multipliers)
    assert cold.converged
    assert warm.iterations <= cold.iterations
    assert np.allclose(warm.z_pr, cold.z_pr, atol=1e-6)


def test_projector_checks_input(mixed_set):
    projector = Projector(mixed_set, 1, 16)
    with pytest.raises(ShapeMismatchError):
        projector(np.zeros((1, 8)), 1.0)
    with pytest.raises(ConfigError):
        projector(np.zeros((1, 16)), -1.0)
    bad = np.zeros((1, 16))
    bad[0, 3] = np.nan
    with pytest.raises(NumericalFailureError):
        projector(bad, 1.0)


def test_projector_compiles_once(mixed_set):
    projector = Projector(mixed_set, 1, 16)
    assert projector.system.m == compile_affine(mixed_set, 1, 16).m
    assert not projector.uses_closed_form


@pytest.mark.parametrize("settings", [
    {'step_rule': 'newton'},
    {'solver': 'exact'},
    {'max_iterations': 0},
    {'grad_tolerance': 0.0},
    {'sufficient_decrease': 1.0},
    {'tolerance': 1e-3},
])
def test_projection_config_validation(settings):
    with pytest.raises(ConfigError):
        ProjectionConfig.from_dict(settings)
