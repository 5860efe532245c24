"""
The projection step: minimize ``F(z) = 1/2 ||z - z_hat||^2 + gamma/2 * Pi(z)``.

Three solvers are available:

* ``closed_form_affine_eq`` for systems made only of quadratic equality rows, solving ``(I + gamma A^T A) z = z_hat + gamma A^T y`` by Cholesky factorization;
* an accelerated proximal gradient method on the dual of ``F`` for any compiled affine system (box-constrained multipliers, ``z = z_hat - A^T lambda``), finished by an active-set KKT solve when it stops short of the tolerance;
* primal subgradient descent with backtracking (or fixed steps) for constraint sets that do not compile.

Every solver keeps the best point found so far, so the recorded objective history never increases and the returned objective is at most ``F(z_hat)``.
"""
from __future__ import annotations

import dataclasses
import math
from typing import Any

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg
from typing_extensions import Self

from .constraints import (EQUALITY, INEQUALITY, SQUARED, AffineSystem, ConstraintSet,
                          compile_affine, violation, violation_gradient)
from .errors import (ConfigError, ConstraintError, NumericalFailureError,
                     ShapeMismatchError, UnsupportedCompilationError)
from .linalg import power_iteration
from .logging_config import logger

STEP_RULES = ('backtracking', 'fixed_lipschitz')
SOLVERS = ('auto', 'dual', 'primal')
POLISH_ROUNDS = 8
POLISH_TOLERANCE = 1e-10


@dataclasses.dataclass
class ProjectionConfig:
    """
    Solver settings of the projection step.

    :ivar max_iterations: Iteration cap of the iterative solvers.
    :ivar grad_tolerance: Stopping tolerance on the (sub)gradient or gradient-mapping norm.
    :ivar step_rule: ``'backtracking'`` (halving, Armijo constant ``sufficient_decrease``) or ``'fixed_lipschitz'`` (``0.99 * 2 / (2 + gamma L)``) for the primal solver.
    :ivar lipschitz_estimate: ``L`` for fixed steps; estimated from the compiled system when ``None``.
    :ivar solver: ``'auto'`` (dual when the set compiles, primal otherwise), ``'dual'`` or ``'primal'``.
    :ivar use_closed_form: Delegate quadratic equality systems to :func:`closed_form_affine_eq`.
    :ivar warm_start: Let callers seed the solver with the previous step's solution.
    :ivar sufficient_decrease: Armijo constant.
    """
    max_iterations: int = 500
    grad_tolerance: float = 1e-8
    step_rule: str = 'backtracking'
    lipschitz_estimate: float | None = None
    solver: str = 'auto'
    use_closed_form: bool = True
    warm_start: bool = True
    sufficient_decrease: float = 1e-4

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ConfigError(f"max_iterations must be at least 1, got {self.max_iterations}")
        if not self.grad_tolerance > 0.0:
            raise ConfigError(f"grad_tolerance must be positive, got {self.grad_tolerance}")
        if self.step_rule not in STEP_RULES:
            raise ConfigError(f"step_rule must be one of {', '.join(STEP_RULES)}, got '{self.step_rule}'")
        if self.solver not in SOLVERS:
            raise ConfigError(f"solver must be one of {', '.join(SOLVERS)}, got '{self.solver}'")
        if self.lipschitz_estimate is not None and not self.lipschitz_estimate > 0.0:
            raise ConfigError("lipschitz_estimate must be positive")
        if not 0.0 < self.sufficient_decrease < 1.0:
            raise ConfigError("sufficient_decrease must lie in (0, 1)")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, settings: dict[str, Any]) -> Self:
        known = {field.name for field in dataclasses.fields(cls)}
        if unknown := set(settings) - known:
            raise ConfigError(f"Unknown projection keys: {', '.join(sorted(unknown))}")
        return cls(**settings)


@dataclasses.dataclass
class ProjectionResult:
    """
    Outcome of one projection.

    :ivar z_pr: The projected estimate, same shape as the input.
    :ivar objective: ``F(z_pr)``.
    :ivar iterations: Iterations used (0 when the input was returned unchanged).
    :ivar residual_violation: ``Pi(z_pr)``.
    :ivar converged: Whether the stopping tolerance was met.
    :ivar history: Best objective after each iteration, starting with ``F(z_hat)``.
    :ivar solver: ``'identity'``, ``'closed_form'``, ``'dual'`` or ``'primal'``.
    :ivar multipliers: Final dual multipliers (dual solver), reusable as a warm start.
    """
    z_pr: np.ndarray
    objective: float
    iterations: int
    residual_violation: float
    converged: bool
    history: np.ndarray
    solver: str
    multipliers: np.ndarray | None = None


def closed_form_affine_eq(z_hat: Any, system: AffineSystem, gamma: float) -> np.ndarray:
    """
    Minimizer of ``1/2 ||z - z_hat||^2 + gamma/2 ||A z - y||^2``: ``[I + gamma A^T A]^{-1} (z_hat + gamma A^T y)``, solved by Cholesky factorization.

    Every row is treated as the quadratic penalty, whatever its threshold.

    :param z_hat: Estimate to project, any shape with ``A.shape[1]`` entries.
    :param system: Equality rows ``A z = y``.
    :param gamma: Penalty coefficient, ``>= 0``.
    :return: The projected estimate, shaped like ``z_hat``.
    :rtype: numpy.ndarray
    :raises ConstraintError: If the system has inequality rows.
    :raises ConfigError: If ``gamma`` is negative.

    **Examples**

    .. code-block:: python

        system = AffineSystem.equality(np.eye(3), np.zeros(3))
        closed_form_affine_eq(np.ones(3), system, 1.0)  # [0.5, 0.5, 0.5]
    """
    if not system.equality_only:
        raise ConstraintError("The closed form only applies to equality rows")
    if not gamma >= 0.0:
        raise ConfigError(f"gamma must be nonnegative, got {gamma}")
    z_hat = np.asarray(z_hat, dtype=float)
    if z_hat.size != system.n:
        raise ShapeMismatchError(f"Sample has {z_hat.size} entries, system has {system.n} columns")
    if gamma == 0.0:
        return z_hat.copy()
    A = system.to_dense()
    matrix = np.eye(system.n) + gamma * (A.T @ A)
    rhs = z_hat.reshape(-1) + gamma * (A.T @ system.b)
    factor = scipy.linalg.cho_factor(matrix)
    return scipy.linalg.cho_solve(factor, rhs).reshape(z_hat.shape)


class Projector:
    """
    Projection onto one constraint set for samples of one shape; compiles the set once and reuses the factorizations and constants across calls.

    :param constraint_set: The constraints.
    :type constraint_set: ConstraintSet
    :param K: Number of channels.
    :type K: int
    :param L: Horizon.
    :type L: int
    :param cfg: Solver settings.
    :type cfg: ProjectionConfig | None, optional
    :raises UnsupportedCompilationError: If ``cfg.solver == 'dual'`` and the set does not compile.
    """

    def __init__(self, constraint_set: ConstraintSet, K: int, L: int,
                 cfg: ProjectionConfig | None = None) -> None:
        self.constraint_set: ConstraintSet = constraint_set
        self.shape: tuple[int, int] = (int(K), int(L))
        self.cfg: ProjectionConfig = cfg or ProjectionConfig()
        constraint_set.validate_shape(K, L)
        self.system: AffineSystem | None = None
        if self.cfg.solver != 'primal' and len(constraint_set) > 0:
            try:
                self.system = compile_affine(constraint_set, K, L)
            except UnsupportedCompilationError as error:
                if self.cfg.solver == 'dual':
                    raise
                logger.debug(f"Falling back to the primal solver: {error}")
        self._factor_cache: tuple[float, Any, np.ndarray] | None = None
        if self.system is not None:
            self._prepare_dual()

    def _prepare_dual(self) -> None:
        A = self.system.A
        norms = np.sqrt(np.asarray(A.multiply(A).sum(axis=1)).reshape(-1))
        norms[norms == 0.0] = 1.0
        scale = scipy.sparse.diags(1.0 / norms)
        self._A = (scale @ A).tocsr()
        self._AT = self._A.T.tocsr()
        self._b = self.system.b / norms
        self._thresholds = self.system.thresholds / norms
        self._kinds = self.system.row_kind
        self._weights = np.where(self._kinds == SQUARED, norms ** 2, norms)
        gram = scipy.sparse.linalg.LinearOperator(
            (self.system.m, self.system.m), matvec=lambda v: self._A @ (self._AT @ v), dtype=float)
        self._lambda_max = max(power_iteration(gram, max_iter=2000, tol=1e-6)[0], 1e-12)

    @property
    def uses_closed_form(self) -> bool:
        return self.system is not None and self.cfg.use_closed_form and self.system.squared_only

    def penalty(self, z: np.ndarray) -> float:
        if self.system is not None:
            return self.system.penalty(z)
        return violation(z, self.constraint_set)

    def objective(self, z: np.ndarray, z_hat: np.ndarray, gamma: float) -> float:
        value = 0.5 * float(np.sum((z - z_hat) ** 2)) + 0.5 * gamma * self.penalty(z)
        if not math.isfinite(value):
            raise NumericalFailureError("Projection objective is not finite")
        return value

    def __call__(self, z_hat: Any, gamma: float, warm_start: Any = None) -> ProjectionResult:
        """
        Project ``z_hat`` with penalty coefficient ``gamma``.

        :param z_hat: The estimate, shape ``(K, L)``.
        :param gamma: Penalty coefficient, ``>= 0``.
        :param warm_start: Multipliers of a previous dual solve, or a previous projected estimate for the primal solver. Used only when it does not start from a higher objective than ``z_hat``.
        :rtype: ProjectionResult
        :raises NumericalFailureError: If the objective becomes NaN or infinite.
        """
        z_hat = np.asarray(z_hat, dtype=float)
        if z_hat.shape != self.shape:
            raise ShapeMismatchError(f"Projector expects shape {self.shape}, got {z_hat.shape}")
        if not gamma >= 0.0:
            raise ConfigError(f"gamma must be nonnegative, got {gamma}")
        start = self.objective(z_hat, z_hat, gamma)
        if gamma == 0.0 or len(self.constraint_set) == 0 or self.penalty(z_hat) == 0.0:
            return ProjectionResult(z_hat.copy(), start, 0, self.penalty(z_hat), True,
                                    np.array([start]), 'identity')
        if not self.cfg.warm_start:
            warm_start = None
        if self.uses_closed_form:
            result = self._closed_form(z_hat, gamma, start)
        elif self.system is not None:
            result = self._dual(z_hat, gamma, start, warm_start)
        else:
            result = self._primal(z_hat, gamma, start, warm_start)
        result.residual_violation = violation(result.z_pr, self.constraint_set)
        if not result.converged:
            logger.warning(f"Projection did not converge in {result.iterations} iterations "
                           f"(gamma={gamma:.4g}, residual violation {result.residual_violation:.3g})")
        return result

    def _closed_form(self, z_hat: np.ndarray, gamma: float, start: float) -> ProjectionResult:
        cache = self._factor_cache
        if cache is None or cache[0] != gamma:
            A = self.system.to_dense()
            matrix = np.eye(self.system.n) + gamma * (A.T @ A)
            cache = (gamma, scipy.linalg.cho_factor(matrix), A.T @ self.system.b)
            self._factor_cache = cache
        _, factor, aty = cache
        z = scipy.linalg.cho_solve(factor, z_hat.reshape(-1) + gamma * aty).reshape(z_hat.shape)
        value = self.objective(z, z_hat, gamma)
        if value > start:
            z, value = z_hat.copy(), start
        return ProjectionResult(z, value, 1, 0.0, True, np.array([start, value]), 'closed_form')

    def _dual(self, z_hat: np.ndarray, gamma: float, start: float,
              warm_start: Any) -> ProjectionResult:
        A, AT, b, kinds = self._A, self._AT, self._b, self._kinds
        flat_hat = z_hat.reshape(-1)
        half_width = 0.5 * gamma * self._weights
        squared = kinds == SQUARED
        curvature = np.where(squared, 1.0 / (gamma * self._weights), 0.0)
        step = 1.0 / (self._lambda_max + curvature.max())
        lower = np.where(kinds == INEQUALITY, 0.0, np.where(kinds == EQUALITY, -half_width, -np.inf))
        upper = np.where(squared, np.inf, half_width)
        shrink = step * np.where(squared, 0.0, self._thresholds)
        ineq = kinds == INEQUALITY

        def prox(v: np.ndarray) -> np.ndarray:
            out = np.where(ineq, v - shrink, np.sign(v) * np.maximum(np.abs(v) - shrink, 0.0))
            return np.clip(out, lower, upper)

        def gradient(lam: np.ndarray) -> np.ndarray:
            return -(A @ (flat_hat - AT @ lam) - b) + curvature * lam

        tolerance = self.cfg.grad_tolerance * (1.0 + np.linalg.norm(A @ flat_hat - b))
        lam = np.zeros(self.system.m)
        if warm_start is not None and np.shape(warm_start) == lam.shape:
            lam = np.clip(np.asarray(warm_start, dtype=float), lower, upper)
        y, t = lam.copy(), 1.0
        best_z, best = z_hat.copy(), start
        history = [start]
        converged = False
        iteration = 0
        for iteration in range(1, self.cfg.max_iterations + 1):
            lam_next = prox(y - step * gradient(y))
            mapping = np.linalg.norm(y - lam_next) / step
            if np.dot(y - lam_next, lam_next - lam) > 0.0:
                t = 1.0  # restart momentum
            t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
            y = lam_next + ((t - 1.0) / t_next) * (lam_next - lam)
            lam, t = lam_next, t_next

            z = (flat_hat - AT @ lam).reshape(z_hat.shape)
            value = self.objective(z, z_hat, gamma)
            if value < best:
                best_z, best = z, value
            history.append(best)
            if mapping <= tolerance:
                converged = True
                break
        if not converged:
            best_z, best, converged = self._polish(z_hat, gamma, lam, best_z, best)
            history.append(best)
        return ProjectionResult(best_z, best, iteration, 0.0, converged, np.array(history), 'dual',
                                multipliers=lam)

    def _polish(self, z_hat: np.ndarray, gamma: float, lam: np.ndarray,
                best_z: np.ndarray, best: float) -> tuple[np.ndarray, float, bool]:
        """
        Active-set refinement of an unconverged dual solve.

        Rows with nonzero multipliers are held at the boundary they press against while the squared rows stay in the objective, which leaves one symmetric KKT system per round. Rows the solution violates join the active set; once nothing is violated, rows whose multiplier has the wrong sign leave it.

        :return: The best point, its objective, and whether it satisfies the optimality conditions of ``F``.
        """
        A, b, kinds, thresholds = self._A, self._b, self._kinds, self._thresholds
        flat_hat = z_hat.reshape(-1)
        n = flat_hat.size
        squared = kinds == SQUARED
        ineq = kinds == INEQUALITY
        half_width = 0.5 * gamma * self._weights
        A_sq = A[np.flatnonzero(squared)].toarray()
        coupling = gamma * self._weights[squared]
        M = np.eye(n) + A_sq.T @ (coupling[:, None] * A_sq)
        rhs = flat_hat + A_sq.T @ (coupling * b[squared])

        side = np.where(ineq, 1.0, np.sign(lam))
        active = (lam != 0.0) & ~squared
        for _ in range(POLISH_ROUNDS):
            rows = np.flatnonzero(active)
            if rows.size == 0:
                z, mu = scipy.linalg.solve(M, rhs, assume_a='pos'), np.zeros(0)
            else:
                A_act = A[rows].toarray()
                block = np.block([[M, A_act.T], [A_act, np.zeros((rows.size, rows.size))]])
                target = b[rows] + side[rows] * thresholds[rows]
                solution = scipy.linalg.lstsq(block, np.concatenate([rhs, target]),
                                              lapack_driver='gelsy')[0]
                z, mu = solution[:n], solution[n:]

            candidate = z.reshape(z_hat.shape)
            value = self.objective(candidate, z_hat, gamma)
            if value < best:
                best_z, best = candidate, value

            r = A @ z - b
            excess = np.where(ineq, r, np.abs(r)) - thresholds
            violated = (excess > POLISH_TOLERANCE) & ~active & ~squared
            wrong = mu * side[rows] < -POLISH_TOLERANCE * (1.0 + np.abs(mu).max(initial=0.0))
            if not violated.any() and not wrong.any():
                off_target = np.abs(r[rows] - side[rows] * thresholds[rows]).max(initial=0.0)
                optimal = (value <= best and off_target <= 1e-8
                           and bool(np.all(np.abs(mu) <= half_width[rows])))
                return best_z, best, optimal
            if violated.any():
                added = np.flatnonzero(violated)
                side[added] = np.where(ineq[added], 1.0, np.sign(r[added]))
                active[added] = True
            else:
                active[rows[wrong]] = False
        return best_z, best, False

    def _lipschitz(self) -> float:
        if self.cfg.lipschitz_estimate is not None:
            return self.cfg.lipschitz_estimate
        if self.system is not None:
            return 2.0 * self._lambda_max
        return 2.0

    def _primal(self, z_hat: np.ndarray, gamma: float, start: float,
                warm_start: Any) -> ProjectionResult:
        def subgradient(z: np.ndarray) -> np.ndarray:
            if self.system is not None:
                return (z - z_hat) + 0.5 * gamma * self.system.gradient(z)
            return (z - z_hat) + 0.5 * gamma * violation_gradient(z, self.constraint_set)

        z, value = z_hat.copy(), start
        if warm_start is not None and np.shape(warm_start) == z_hat.shape:
            candidate = np.asarray(warm_start, dtype=float)
            candidate_value = self.objective(candidate, z_hat, gamma)
            if candidate_value < value:
                z, value = candidate.copy(), candidate_value
        best_z, best = z.copy(), value
        history = [start, best] if best < start else [start]
        fixed_step = 0.99 * 2.0 / (2.0 + gamma * self._lipschitz())
        eta = 1.0
        previous: tuple[np.ndarray, np.ndarray] | None = None
        converged = False
        iteration = 0
        for iteration in range(1, self.cfg.max_iterations + 1):
            g = subgradient(z)
            g_norm2 = float(np.sum(g * g))
            if math.sqrt(g_norm2) <= self.cfg.grad_tolerance:
                converged = True
                iteration -= 1
                break
            if self.cfg.step_rule == 'fixed_lipschitz':
                z = z - fixed_step * g
                value = self.objective(z, z_hat, gamma)
            else:
                if previous is not None:
                    s, r = z - previous[0], g - previous[1]
                    curvature = float(np.sum(s * r))
                    eta = float(np.sum(s * s)) / curvature if curvature > 0.0 else min(2.0 * eta, 1.0)
                    eta = min(max(eta, 1e-12), 1.0)
                previous = (z, g)
                while True:
                    candidate = z - eta * g
                    candidate_value = self.objective(candidate, z_hat, gamma)
                    if candidate_value <= value - self.cfg.sufficient_decrease * eta * g_norm2:
                        break
                    eta *= 0.5
                    if eta < 1e-16:
                        candidate = None
                        break
                if candidate is None:
                    history.append(best)
                    break
                z, value = candidate, candidate_value
            if value < best:
                best_z, best = z.copy(), value
            history.append(best)
        return ProjectionResult(best_z, best, iteration, 0.0, converged, np.array(history), 'primal')


def project(z_hat: Any, constraint_set: ConstraintSet, gamma: float,
            cfg: ProjectionConfig | None = None, warm_start: Any = None) -> ProjectionResult:
    """
    Project one estimate onto a constraint set: approximately minimize ``1/2 (||z - z_hat||^2 + gamma Pi(z))``.

    Builds a :class:`Projector` for the call; samplers keep one per run instead.

    :param z_hat: The estimate, shape ``(K, L)``.
    :param constraint_set: The constraints.
    :param gamma: Penalty coefficient, ``>= 0``.
    :param cfg: Solver settings.
    :param warm_start: See :meth:`Projector.__call__`.
    :rtype: ProjectionResult
    :raises NumericalFailureError: If the objective becomes NaN or infinite.

    **Examples**

    .. code-block:: python

        level = ConstraintSet.from_list([MeanConstraint(target=0.0, threshold=0.0)])
        project(np.array([[2.0, 2.0]]), level, 1e6).z_pr  # close to [[0, 0]]
    """
    z_hat = np.asarray(z_hat, dtype=float)
    if z_hat.ndim != 2:
        raise ShapeMismatchError(f"Expected a (K, L) sample, got shape {z_hat.shape}")
    return Projector(constraint_set, *z_hat.shape, cfg=cfg)(z_hat, gamma, warm_start=warm_start)
