"""
Numerical checks of the convergence guarantee of constrained posterior sampling in the Gaussian prior / linear equality setting.

For data distributed as ``N(mu, I)`` and constraints ``A z = y`` with ``A`` of full column rank, the feasible set is the single point ``x*`` and every quantity of the sampler has a closed form. With ``sigma = 0`` and the quadratic penalty, one step of the sampler is

.. code-block:: text

    z_{t-1} = K_t z_t + E_t mu - F_t mu + gamma(t) sqrt(a[t-1]) [I + gamma(t) A^T A]^{-1} A^T A x*

    K_t = sqrt(a[t-1]) sqrt(a[t]) [I + gamma(t) A^T A]^{-1} + sqrt(1 - a[t-1]) sqrt(1 - a[t]) I
    E_t = (1 - a[t]) sqrt(a[t-1]) [I + gamma(t) A^T A]^{-1}
    F_t = sqrt(1 - a[t-1]) sqrt(1 - a[t]) sqrt(a[t]) I
    D_t = gamma(t) sqrt(a[t-1]) [I + gamma(t) A^T A]^{-1} A^T A - I

and with ``gamma(t) = 2 k (T - t + 1) / lambda_min(A^T A)`` the output satisfies
``||x_gen - x*|| <= sqrt(a[1]) / k * (||x*|| + ||mu||)``.
"""
from __future__ import annotations

import concurrent.futures
import dataclasses
from typing import Any, Callable

import numpy as np
import pandas as pd
import scipy.linalg
from tqdm import tqdm

from .constraint_kinds import AffineEqualityConstraint
from .constraints import ConstraintSet
from .denoiser import GaussianDenoiser
from .errors import AcceptanceError, ConstraintError, ScheduleError
from .linalg import gram_extreme_eigenvalues, spectral_norm
from .logging_config import logger
from .projection import ProjectionConfig
from .sampler import SamplerConfig, cps_sample
from .schedule import PenaltySchedule, Schedule, harness_schedule, lemma_margins

RANK_TOLERANCE = 1e-8
NORM_METHODS = ('power', 'eigen')
SWEEP_COLUMNS = ['instance', 'n', 'm', 'k', 'T', 'measured', 'bound', 'margin', 'passed', 'norms_passed',
                 'lambda_k']


@dataclasses.dataclass
class GaussianLinearInstance:
    """
    A Gaussian prior ``N(mu, I)`` with the equality constraints ``A z = y``.

    :ivar A: ``m x n`` matrix of rank ``n``, ``m >= n``.
    :ivar y: Right-hand side in the range of ``A``.
    :ivar mu: Prior mean, ``n`` entries.
    :ivar x_target: The point ``y`` was generated from, if known.
    :raises ConstraintError: If ``A`` is rank deficient, ``m < n``, the shapes disagree or ``A z = y`` has no solution.
    """
    A: np.ndarray
    y: np.ndarray
    mu: np.ndarray
    x_target: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        self.mu = np.asarray(self.mu, dtype=float).reshape(-1)
        m, n = self.A.shape
        if m < n:
            raise ConstraintError(f"Need at least as many rows as columns, got {m} x {n}")
        if self.y.size != m or self.mu.size != n:
            raise ConstraintError(f"y needs {m} entries and mu {n}, got {self.y.size} and {self.mu.size}")
        singular_values = scipy.linalg.svdvals(self.A)
        if singular_values[-1] <= RANK_TOLERANCE * singular_values[0]:
            raise ConstraintError(f"A is rank deficient (singular values {singular_values})")
        self.x_star = solve_x_star(self)
        residual = np.linalg.norm(self.A @ self.x_star - self.y)
        if residual > 1e-8 * max(1.0, np.linalg.norm(self.y)):
            raise ConstraintError(f"A z = y has no solution (least-squares residual {residual:.3g})")
        self.lambda_min, self.lambda_max = gram_extreme_eigenvalues(self.A)

    @property
    def n(self) -> int:
        return self.A.shape[1]

    @property
    def m(self) -> int:
        return self.A.shape[0]

    def constraint_set(self) -> ConstraintSet:
        """
        The constraints as a one-element set on a single channel of horizon ``n``.
        """
        return ConstraintSet.from_list([AffineEqualityConstraint(A=self.A, y=self.y)], budget=0.0)

    def to_dict(self) -> dict[str, Any]:
        return {'A': self.A.tolist(), 'y': self.y.tolist(), 'mu': self.mu.tolist(),
                'x_star': self.x_star.tolist(), 'lambda_min': self.lambda_min, 'lambda_max': self.lambda_max}


def solve_x_star(inst: GaussianLinearInstance) -> np.ndarray:
    """
    The single feasible point ``(A^T A)^{-1} A^T y`` of a full-column-rank system, by least squares.

    **Examples**

    .. code-block:: python

        A = np.array([[1.0], [2.0]])
        solve_x_star(GaussianLinearInstance(A, [3.0, 6.0], [0.0]))  # [3.0]
    """
    solution, _, rank, _ = scipy.linalg.lstsq(inst.A, inst.y)
    if rank < inst.A.shape[1]:
        raise ConstraintError(f"A has rank {rank} < {inst.A.shape[1]}")
    return solution


def random_instance(n: int, m: int, rng: np.random.Generator, mu_scale: float = 1.0) -> GaussianLinearInstance:
    """
    Draw ``A`` with standard normal entries, ``x_target`` and ``mu`` from ``N(0, I)`` (``mu`` scaled by ``mu_scale``) and set ``y = A x_target``.
    """
    A = rng.standard_normal((m, n))
    x_target = rng.standard_normal(n)
    mu = mu_scale * rng.standard_normal(n)
    return GaussianLinearInstance(A, A @ x_target, mu, x_target)


def _schedule(T: int, schedule_kind: str) -> Schedule:
    if schedule_kind != 'harness':
        raise ScheduleError(f"The convergence check needs alpha_bar[T] = 0; schedule kind "
                            f"'{schedule_kind}' is not supported, use 'harness'")
    return harness_schedule(T)


def _inverse(inst: GaussianLinearInstance, gamma: float) -> np.ndarray:
    return scipy.linalg.inv(np.eye(inst.n) + gamma * (inst.A.T @ inst.A))


def step_matrices(inst: GaussianLinearInstance, schedule: Schedule, gamma: float,
                  t: int) -> dict[str, np.ndarray]:
    """
    ``K_t``, ``E_t``, ``F_t`` and ``D_t`` of one step.

    :rtype: dict[str, numpy.ndarray]
    """
    a, a_prev = float(schedule.alpha_bar[t]), float(schedule.alpha_bar[t - 1])
    inverse = _inverse(inst, gamma)
    identity = np.eye(inst.n)
    noise_product = np.sqrt(1.0 - a_prev) * np.sqrt(1.0 - a)
    return {
        'K': np.sqrt(a_prev) * np.sqrt(a) * inverse + noise_product * identity,
        'E': (1.0 - a) * np.sqrt(a_prev) * inverse,
        'F': noise_product * np.sqrt(a) * identity,
        'D': gamma * np.sqrt(a_prev) * inverse @ (inst.A.T @ inst.A) - identity,
    }


def recursion_step(inst: GaussianLinearInstance, schedule: Schedule, gamma: float, t: int,
                   z_t: np.ndarray) -> np.ndarray:
    """
    ``z_{t-1}`` from the matrix form ``K_t z_t + E_t mu - F_t mu + gamma sqrt(a[t-1]) [I + gamma A^T A]^{-1} A^T A x*``.
    """
    matrices = step_matrices(inst, schedule, gamma, t)
    a_prev = float(schedule.alpha_bar[t - 1])
    pull = gamma * np.sqrt(a_prev) * _inverse(inst, gamma) @ (inst.A.T @ inst.A @ inst.x_star)
    z_t = np.asarray(z_t, dtype=float).reshape(-1)
    return matrices['K'] @ z_t + matrices['E'] @ inst.mu - matrices['F'] @ inst.mu + pull


def _norm(matrix: np.ndarray, method: str) -> float:
    if method == 'eigen':
        return float(np.linalg.norm(matrix, 2))
    return spectral_norm(matrix, max_iter=2000, tol=1e-9)


@dataclasses.dataclass
class NormReport:
    """
    Results of the convergence checks on one instance.

    :ivar norms: One row per step: ``t``, ``gamma``, ``alpha_bar``, the norms ``K``, ``E``, ``F``, ``D``, ``D_applicable`` (``gamma > 2 / lambda_min``) and the margin of the ``alpha_bar`` inequality.
    :ivar lambda_k: ``max_t ||K_t||``.
    :ivar failures: Human-readable descriptions of failed checks.
    :ivar measured: ``||x_gen - x*||`` when a sampling run was made.
    :ivar bound: The guaranteed bound for that run.
    :ivar k: Design parameter of the penalty schedule.
    """
    norms: pd.DataFrame
    lambda_k: float
    failures: list[str] = dataclasses.field(default_factory=list)
    measured: float | None = None
    bound: float | None = None
    k: float | None = None

    @property
    def passed(self) -> bool:
        within = self.measured is None or self.measured <= self.bound
        return within and not self.failures

    def to_dict(self) -> dict[str, Any]:
        return {'lambda_k': self.lambda_k, 'failures': list(self.failures), 'measured': self.measured,
                'bound': self.bound, 'k': self.k, 'passed': self.passed}


def norm_checks(inst: GaussianLinearInstance, schedule: Schedule,
                gamma_fn: PenaltySchedule | Callable[[int, Schedule], float],
                method: str = 'power', check: bool = True) -> NormReport:
    """
    Evaluate ``||K_t||``, ``||E_t||``, ``||F_t||`` and ``||D_t||`` at every step and test them against the bounds of the analysis:
    all four below 1 (``D_t`` only where ``gamma(t) > 2 / lambda_min``), ``F_1 = 0``, ``||K_1|| <= sqrt(a[1]) / (1 + gamma(1) lambda_min)``
    and ``sqrt(a[t-1]) sqrt(a[t]) < 1 - sqrt(1 - a[t-1]) sqrt(1 - a[t])``.

    :param inst: The instance.
    :param schedule: Schedule with strictly decreasing ``alpha_bar`` from 1 to 0.
    :param gamma_fn: Penalty coefficient per step.
    :param method: ``'power'`` (power iteration on ``M^T M``) or ``'eigen'`` (dense SVD).
    :param check: Raise on failures instead of only reporting them.
    :rtype: NormReport
    :raises AcceptanceError: If ``check`` and any test fails; the dump holds the failures and the table.
    """
    if method not in NORM_METHODS:
        raise ScheduleError(f"Unknown norm method '{method}'. Valid methods are: {', '.join(NORM_METHODS)}.")
    margins = lemma_margins(schedule)
    threshold = 2.0 / inst.lambda_min
    rows, failures = [], []
    for t in range(1, schedule.T + 1):
        gamma = float(gamma_fn(t, schedule))
        matrices = step_matrices(inst, schedule, gamma, t)
        row = {'t': t, 'gamma': gamma, 'alpha_bar': float(schedule.alpha_bar[t])}
        row.update({name: _norm(matrix, method) for name, matrix in matrices.items()})
        row['D_applicable'] = gamma > threshold
        row['alpha_margin'] = float(margins[t - 1])
        rows.append(row)
        if gamma > 0.0:
            failures.extend(f"t={t}: ||{name}_t|| = {row[name]:.15g} >= 1"
                            for name in ('K', 'E', 'F') if row[name] >= 1.0)
        if row['D_applicable'] and row['D'] >= 1.0:
            failures.append(f"t={t}: ||D_t|| = {row['D']:.15g} >= 1")
        if row['alpha_margin'] <= 0.0:
            failures.append(f"t={t}: alpha_bar inequality fails (margin {row['alpha_margin']:.3g})")
    table = pd.DataFrame(rows)

    first = table.iloc[0]
    if first['F'] != 0.0:
        failures.append(f"t=1: ||F_1|| = {first['F']:.3g}, expected exactly 0")
    k1_bound = np.sqrt(schedule.alpha_bar[1]) / (1.0 + first['gamma'] * inst.lambda_min)
    if first['K'] > k1_bound * (1.0 + 1e-9) + 1e-12:
        failures.append(f"t=1: ||K_1|| = {first['K']:.15g} exceeds {k1_bound:.15g}")

    report = NormReport(table, float(table['K'].max()), failures)
    logger.debug(f"Norm checks over {schedule.T} steps: lambda_k = {report.lambda_k:.6g}, "
                 f"smallest alpha margin {table['alpha_margin'].min():.3g}")
    if check and failures:
        raise AcceptanceError(f"{len(failures)} norm check(s) failed, first: {failures[0]}",
                              dump={'instance': inst.to_dict(), 'schedule': schedule.to_dict(),
                                    'failures': failures, 'norms': table})
    return report


def theorem2_bound(inst: GaussianLinearInstance, schedule: Schedule, k: float) -> float:
    """
    ``sqrt(a[1]) / k * (||x*|| + ||mu||)``.
    """
    return float(np.sqrt(schedule.alpha_bar[1]) / k * (np.linalg.norm(inst.x_star) + np.linalg.norm(inst.mu)))


def verify_theorem2(inst: GaussianLinearInstance, T: int, k: float, schedule_kind: str = 'harness',
                    seed: int = 0, norm_method: str = 'eigen', check_norms: bool = True) -> NormReport:
    """
    Sample with the optimal Gaussian denoiser, deterministic DDIM steps, the closed-form projection and ``gamma(t) = 2 k (T - t + 1) / lambda_min``, then compare ``||x_gen - x*||`` with the guaranteed bound.

    :param inst: The instance.
    :param T: Number of steps.
    :param k: Design parameter, greater than 1.
    :param schedule_kind: Only ``'harness'`` (``alpha_bar[t] = 1 - t / T``) reaches ``alpha_bar[T] = 0``.
    :param seed: Seed of the initial noise.
    :param norm_method: Method of :func:`norm_checks`.
    :param check_norms: Also run :func:`norm_checks`.
    :rtype: NormReport
    :raises ScheduleError: If ``k <= 1`` or the schedule kind is unsupported.
    :raises AcceptanceError: If the bound or a norm check fails; the dump holds the instance, schedule and a per-step trace.
    """
    schedule = _schedule(T, schedule_kind)
    penalty = PenaltySchedule('theorem2', k=k, lambda_min=inst.lambda_min)
    denoiser = GaussianDenoiser(inst.mu.reshape(1, -1), schedule)
    constraints = inst.constraint_set()
    cfg = SamplerConfig(seed=seed, penalty=penalty, projection=ProjectionConfig(use_closed_form=True))
    x_gen = cps_sample(denoiser, constraints, cfg).sample.values.reshape(-1)
    measured = float(np.linalg.norm(x_gen - inst.x_star))
    bound = theorem2_bound(inst, schedule, k)

    if check_norms:
        report = norm_checks(inst, schedule, penalty, method=norm_method, check=True)
    else:
        report = NormReport(pd.DataFrame(), float('nan'))
    report.measured, report.bound, report.k = measured, bound, float(k)
    logger.info(f"n={inst.n} m={inst.m} k={k:g} T={T}: measured {measured:.3e}, bound {bound:.3e}")
    if measured > bound:
        trace = cps_sample(denoiser, constraints, cfg.replace(trace=True)).trace
        raise AcceptanceError(f"Measured error {measured:.6g} exceeds the bound {bound:.6g}",
                              dump={'instance': inst.to_dict(), 'schedule': schedule.to_dict(),
                                    'k': k, 'measured': measured, 'bound': bound, 'trace': trace})
    return report


def _sweep_row(instance: int, inst: GaussianLinearInstance, T: int, k: float, seed: int,
               norm_method: str) -> dict[str, Any]:
    row = {'instance': instance, 'n': inst.n, 'm': inst.m, 'k': k, 'T': T}
    try:
        report = verify_theorem2(inst, T, k, seed=seed + instance, norm_method=norm_method)
        row.update(measured=report.measured, bound=report.bound, passed=True, norms_passed=True,
                   lambda_k=report.lambda_k)
    except AcceptanceError as error:
        logger.error(f"Instance {instance}, k={k:g}: {error}")
        dump = error.dump or {}
        row.update(measured=dump.get('measured', np.nan), bound=dump.get('bound', np.nan),
                   passed=False, norms_passed='failures' not in dump, lambda_k=np.nan)
    row['margin'] = row['bound'] - row['measured']
    return row


def sweep(n_instances: int = 100, ks: tuple[float, ...] = (2.0, 10.0, 100.0), T: int = 2000,
          n_range: tuple[int, int] = (2, 8), m_max: int = 16, seed: int = 0, norm_method: str = 'eigen',
          threads: int = 1, show_progress: bool = False) -> pd.DataFrame:
    """
    Verify the bound and the norm lemmas on random instances for several ``k``.

    Instance ``i`` has ``n`` drawn from ``n_range`` and ``m`` from ``n..m_max``; failures are recorded, not raised.

    :return: One row per (instance, k) with the columns ``SWEEP_COLUMNS``.
    :rtype: pandas.DataFrame
    """
    rng = np.random.default_rng(seed)
    instances = []
    for _ in range(n_instances):
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        m = int(rng.integers(n, max(n, m_max) + 1))
        instances.append(random_instance(n, m, rng))
    jobs = [(i, inst, k) for i, inst in enumerate(instances) for k in ks]
    with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as executor:
        futures = [executor.submit(_sweep_row, i, inst, T, k, seed, norm_method) for i, inst, k in jobs]
        rows = [future.result() for future in tqdm(futures, desc="Convergence sweep", disable=not show_progress)]
    table = pd.DataFrame(rows, columns=SWEEP_COLUMNS)
    medians = table.groupby('k')['measured'].median()
    logger.info(f"Sweep passed {int(table['passed'].sum())}/{len(table)}; median error by k: {medians.to_dict()}")
    return table


def median_error_non_increasing(table: pd.DataFrame) -> bool:
    """
    Whether the median measured error of a sweep does not increase with ``k``.
    """
    medians = table.groupby('k')['measured'].median().sort_index().to_numpy()
    return bool(np.all(np.diff(medians) <= 1e-12))
