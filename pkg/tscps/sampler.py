"""
Reverse diffusion samplers.

* :func:`ddim_sample` - unconstrained DDIM;
* :func:`cps_sample` - constrained posterior sampling: the posterior mean of every step is projected towards the constraint set with a growing penalty coefficient before the DDIM recombination;
* :func:`guided_sample` - guidance baseline: each step is pushed along the negative subgradient of the violation at the posterior mean, and fixed values are pinned;
* :func:`cop_project_baseline` - one-shot projection of a dataset sample (COP) or of a DDIM sample (COP-FT), with the distance term only.

Every sample draws its initial state and per-step noise from :func:`~tscps.series.noise_generator` keyed by the sample index, so the noise a sample sees does not depend on batching or thread count, and the samplers consume noise at identical call points.
"""
from __future__ import annotations

import concurrent.futures
import dataclasses
import math
import time
from typing import Any, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm
from typing_extensions import Self

from .constraints import (ConstraintSet, fixed_values, per_constraint_violation, violation,
                          violation_gradient)
from .denoiser import Denoiser
from .errors import ConfigError, ConstraintError, DatasetError, NumericalFailureError
from .logging_config import logger
from .metrics import violation_stats
from .projection import ProjectionConfig, Projector
from .schedule import DEFAULT_GAMMA_CLIP, PenaltySchedule, Schedule, stochastic_sigma
from .series import (NOISE_STREAM_COP_SEED, NOISE_STREAM_INITIAL, NOISE_STREAM_STEP, Dataset,
                     TimeSeries, noise_generator)

METHODS = ('ddim', 'cps', 'guided', 'cop', 'cop_ft')
GUIDANCE_WEIGHTS = (1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0)
METHOD_LABELS = {
    'ddim': 'DDIM',
    'cps': 'CPS',
    'guided': 'Guided',
    'cop': 'COP (distance-only)',
    'cop_ft': 'COP-FT (distance-only)',
}


@dataclasses.dataclass
class SamplerConfig:
    """
    Settings shared by every sampler. The diffusion schedule is the denoiser's, with ``sigma`` derived from ``eta``.

    :ivar eta: DDIM stochasticity in ``[0, 1]``; 0 is deterministic. ``sigma[1]`` is always 0.
    :ivar seed: Run seed of the noise generator.
    :ivar projection: Projection solver settings.
    :ivar penalty: Rule for the penalty coefficient of the projection step; ``'none'`` turns projection off.
    :ivar guidance_weight: Step size of the guidance baseline.
    :ivar trace: Record per-step diagnostics.
    :ivar cop_gamma: Penalty coefficient of the COP baselines; the schedule's ``gamma_clip`` when ``None``.
    :ivar chunk_size: Samples per vectorized chunk in :func:`sample_batch`.
    :ivar threads: Worker threads of :func:`sample_batch`.
    :ivar show_progress: Show progress bars.
    """
    eta: float = 0.0
    seed: int = 0
    projection: ProjectionConfig = dataclasses.field(default_factory=ProjectionConfig)
    penalty: PenaltySchedule = dataclasses.field(default_factory=PenaltySchedule)
    guidance_weight: float = 0.0
    trace: bool = False
    cop_gamma: float | None = None
    chunk_size: int = 64
    threads: int = 1
    show_progress: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"eta must lie in [0, 1], got {self.eta}")
        if not self.guidance_weight >= 0.0:
            raise ConfigError(f"guidance_weight must be nonnegative, got {self.guidance_weight}")
        if self.cop_gamma is not None and not self.cop_gamma > 0.0:
            raise ConfigError(f"cop_gamma must be positive, got {self.cop_gamma}")
        if self.chunk_size < 1 or self.threads < 1:
            raise ConfigError("chunk_size and threads must be at least 1")

    def replace(self, **changes: Any) -> SamplerConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        result = {field.name: getattr(self, field.name) for field in dataclasses.fields(self)}
        result['projection'] = self.projection.to_dict()
        result['penalty'] = self.penalty.to_dict()
        return result

    @classmethod
    def from_dict(cls, settings: dict[str, Any]) -> Self:
        known = {field.name for field in dataclasses.fields(cls)}
        if unknown := set(settings) - known:
            raise ConfigError(f"Unknown sampler keys: {', '.join(sorted(unknown))}")
        settings = dict(settings)
        if isinstance(settings.get('projection'), dict):
            settings['projection'] = ProjectionConfig.from_dict(settings['projection'])
        if isinstance(settings.get('penalty'), dict):
            settings['penalty'] = PenaltySchedule.from_dict(settings['penalty'])
        return cls(**settings)


@dataclasses.dataclass
class SampleReport:
    """
    One generated sample with its violation report.

    :ivar sample: The generated series.
    :ivar violation_total: Total violation of the final sample (0 without constraints).
    :ivar per_constraint: Per-constraint excess over the budget, in set order.
    :ivar steps: Reverse diffusion steps taken (0 for COP).
    :ivar wall_time: Seconds spent, shared evenly by the samples of a chunk.
    :ivar method: One of ``METHODS``.
    :ivar converged: Whether every projection of the run met its tolerance.
    :ivar projection_iterations: Solver iterations summed over the run.
    :ivar trace: Per-step diagnostics when requested: ``step``, ``gamma``, ``penalty_hat``, ``penalty_pr``, ``objective``, ``iterations``, ``converged``, ``solver`` and the arrays ``z0_hat`` / ``z0_pr``.
    :ivar sample_index: Index of the sample in its run (keys the noise).
    :ivar label: Display name of the method.
    """
    sample: TimeSeries
    violation_total: float
    per_constraint: np.ndarray
    steps: int
    wall_time: float
    method: str
    converged: bool = True
    projection_iterations: int = 0
    trace: pd.DataFrame | None = None
    sample_index: int = 0
    label: str = ''

    @property
    def feasible(self) -> bool:
        return not np.any(self.per_constraint > 0.0)

    def to_dict(self) -> dict[str, Any]:
        return {
            'sample_index': self.sample_index,
            'method': self.method,
            'label': self.label,
            'steps': self.steps,
            'wall_time': self.wall_time,
            'violation_total': self.violation_total,
            'per_constraint': [float(v) for v in self.per_constraint],
            'feasible': self.feasible,
            'converged': self.converged,
            'projection_iterations': self.projection_iterations,
        }


def _final_report(z: np.ndarray, constraint_set: ConstraintSet, method: str, steps: int,
                  wall_time: float, sample_index: int, converged: bool = True,
                  iterations: int = 0, trace: pd.DataFrame | None = None) -> SampleReport:
    if len(constraint_set) > 0:
        total = violation(z, constraint_set)
        excess = per_constraint_violation(z, constraint_set)
    else:
        total, excess = 0.0, np.zeros(0)
    return SampleReport(TimeSeries(z), total, excess, steps, wall_time, method, converged,
                        iterations, trace, sample_index, METHOD_LABELS[method])


def ddim_update(schedule: Schedule, t: int, z0: np.ndarray, eps_hat: np.ndarray,
                noise: np.ndarray | None = None) -> np.ndarray:
    """
    One DDIM recombination: ``sqrt(alpha_bar[t-1]) z0 + sqrt(1 - alpha_bar[t-1] - sigma[t]^2) eps_hat + sigma[t] noise``.

    :param schedule: Schedule with the ``sigma`` of the run.
    :param t: Current step.
    :param z0: Clean-sample estimate (posterior mean, or its projection).
    :param eps_hat: Noise estimate at ``z_t``.
    :param noise: Fresh standard normal noise; required when ``sigma[t] > 0``.
    :return: ``z_{t-1}``.
    :rtype: numpy.ndarray
    """
    z = math.sqrt(float(schedule.alpha_bar[t - 1])) * z0 + schedule.ddim_noise_weight(t) * eps_hat
    sigma = float(schedule.sigma[t])
    if sigma > 0.0:
        if noise is None:
            raise ConfigError(f"Step {t} has sigma {sigma:g} and needs noise")
        z = z + sigma * noise
    return z


def _reverse_diffusion(d: Denoiser, constraint_set: ConstraintSet, cfg: SamplerConfig,
                       method: str, indices: Sequence[int]) -> list[SampleReport]:
    """
    Run the reverse process for a chunk of samples at once.
    """
    schedule = stochastic_sigma(d.schedule, cfg.eta)
    shape = d.sample_shape
    batch = len(indices)
    projector = None
    if method == 'cps' and cfg.penalty.enabled:
        projector = Projector(constraint_set, *shape, cfg.projection)
    guided = method == 'guided' and cfg.guidance_weight > 0.0
    pins = fixed_values(constraint_set) if guided else []

    z = np.stack([noise_generator(cfg.seed, i, NOISE_STREAM_INITIAL, schedule.T).standard_normal(shape)
                  for i in indices])
    warm: list[Any] = [None] * batch
    converged = np.ones(batch, dtype=bool)
    iterations = np.zeros(batch, dtype=int)
    traces: list[list[dict[str, Any]]] = [[] for _ in indices]
    start = time.perf_counter()

    steps = range(schedule.T, 0, -1)
    for t in tqdm(steps, desc=f"{method} sampling", disable=not cfg.show_progress, leave=False):
        eps_hat, z0_hat = d.estimate(z, t)
        z0_used = z0_hat
        gamma = math.nan
        results = [None] * batch
        if projector is not None:
            gamma = cfg.penalty(t, schedule)
            z0_used = np.empty_like(z0_hat)
            for b in range(batch):
                try:
                    result = projector(z0_hat[b], gamma, warm[b])
                except NumericalFailureError as error:
                    raise NumericalFailureError(f"Projection failed: {error}", step=t) from error
                z0_used[b] = result.z_pr
                warm[b] = result.multipliers if result.multipliers is not None else result.z_pr
                converged[b] &= result.converged
                iterations[b] += result.iterations
                results[b] = result
        guidance = None
        if guided:
            guidance = np.stack([violation_gradient(x, constraint_set) for x in z0_hat])
            z0_used = z0_hat.copy()
            for k, u, value in pins:
                z0_used[:, k, u] = value
                guidance[:, k, u] = 0.0

        noise = None
        if schedule.sigma[t] > 0.0:
            noise = np.stack([noise_generator(cfg.seed, i, NOISE_STREAM_STEP, t).standard_normal(shape)
                              for i in indices])
        z = ddim_update(schedule, t, z0_used, eps_hat, noise)
        if guidance is not None:
            z = z - cfg.guidance_weight * guidance
        if not np.all(np.isfinite(z)):
            raise NumericalFailureError(f"Non-finite values in the {method} trajectory", step=t)

        if cfg.trace:
            for b in range(batch):
                traces[b].append(_trace_row(t, gamma, z0_hat[b], z0_used[b], results[b], constraint_set))

    elapsed = (time.perf_counter() - start) / batch
    reports = []
    for b, index in enumerate(indices):
        trace = pd.DataFrame(traces[b]) if cfg.trace else None
        reports.append(_final_report(z[b], constraint_set, method, schedule.T, elapsed, index,
                                     bool(converged[b]), int(iterations[b]), trace))
    if not converged.all():
        logger.warning(f"{int(np.sum(~converged))} of {batch} samples had non-converged projections")
    return reports


def _trace_row(t: int, gamma: float, z0_hat: np.ndarray, z0_pr: np.ndarray, result: Any,
               constraint_set: ConstraintSet) -> dict[str, Any]:
    has_constraints = len(constraint_set) > 0
    return {
        'step': t,
        'gamma': gamma,
        'penalty_hat': violation(z0_hat, constraint_set) if has_constraints else 0.0,
        'penalty_pr': violation(z0_pr, constraint_set) if has_constraints else 0.0,
        'objective': result.objective if result is not None else math.nan,
        'iterations': result.iterations if result is not None else 0,
        'converged': result.converged if result is not None else True,
        'solver': result.solver if result is not None else '',
        'z0_hat': z0_hat.copy(),
        'z0_pr': z0_pr.copy(),
    }


def ddim_sample(d: Denoiser, cfg: SamplerConfig | None = None, sample_index: int = 0) -> SampleReport:
    """
    Unconstrained DDIM sampling.

    :param d: The denoiser; its schedule drives the process.
    :type d: Denoiser
    :param cfg: Sampler settings.
    :type cfg: SamplerConfig | None, optional
    :param sample_index: Index keying the sample's noise.
    :type sample_index: int, optional
    :rtype: SampleReport
    :raises NumericalFailureError: If the trajectory becomes non-finite; carries the step.

    **Examples**

    .. code-block:: python

        d = GaussianDenoiser(np.zeros((1, 8)), linear_schedule(100))
        report = ddim_sample(d, SamplerConfig(seed=3))
        report.sample.values.shape  # (1, 8)
    """
    cfg = cfg or SamplerConfig()
    return _reverse_diffusion(d, ConstraintSet(), cfg, 'ddim', [sample_index])[0]


def _require_constraints(constraint_set: ConstraintSet, method: str) -> None:
    if len(constraint_set) == 0:
        raise ConstraintError(f"Method '{method}' needs at least one constraint; use 'ddim' for "
                              "unconstrained sampling")


def cps_sample(d: Denoiser, constraint_set: ConstraintSet, cfg: SamplerConfig | None = None,
               sample_index: int = 0) -> SampleReport:
    """
    Constrained posterior sampling.

    At every step the posterior mean is replaced by the minimizer of ``1/2 ||z - z0_hat||^2 + gamma(t)/2 Pi(z)``, with ``gamma(t)`` from ``cfg.penalty``, before the DDIM recombination. Projections of consecutive steps are warm-started from each other. With the ``'none'`` penalty rule the run is identical to :func:`ddim_sample`.

    :param d: The denoiser.
    :param constraint_set: The constraints, non-empty.
    :param cfg: Sampler settings.
    :param sample_index: Index keying the sample's noise.
    :rtype: SampleReport
    :raises ConstraintError: If the set is empty.
    :raises NumericalFailureError: If the trajectory or a projection objective becomes non-finite.
    """
    cfg = cfg or SamplerConfig()
    _require_constraints(constraint_set, 'cps')
    return _reverse_diffusion(d, constraint_set, cfg, 'cps', [sample_index])[0]


def guided_sample(d: Denoiser, constraint_set: ConstraintSet, cfg: SamplerConfig | None = None,
                  sample_index: int = 0) -> SampleReport:
    """
    Guidance baseline: ``z_{t-1}`` is moved by ``-guidance_weight`` times a subgradient of the violation at the posterior mean, and values pinned by fixed-value constraints are written into the posterior mean (and excluded from guidance) at every step, so they hold exactly at the output.

    A zero ``guidance_weight`` reproduces :func:`ddim_sample`.
    """
    cfg = cfg or SamplerConfig()
    return _reverse_diffusion(d, constraint_set, cfg, 'guided', [sample_index])[0]


def cop_project_baseline(seed_source: str, constraint_set: ConstraintSet, cfg: SamplerConfig | None = None,
                         dataset: Dataset | None = None, denoiser: Denoiser | None = None,
                         sample_index: int = 0) -> SampleReport:
    """
    Project one seed sample onto the constraints with a single large penalty coefficient.

    :param seed_source: ``'dataset'`` for a random dataset sample (COP) or ``'generated'`` for a DDIM sample (COP-FT).
    :type seed_source: str
    :param constraint_set: The constraints.
    :param cfg: Sampler settings; ``cop_gamma`` (or the schedule's ``gamma_clip``) is the coefficient.
    :param dataset: Source of COP seeds.
    :param denoiser: Generator of COP-FT seeds.
    :param sample_index: Index keying the seed choice or the DDIM noise.
    :rtype: SampleReport
    :raises ConfigError: If the source is unknown or its input is missing.
    """
    cfg = cfg or SamplerConfig()
    start = time.perf_counter()
    if seed_source == 'dataset':
        if dataset is None:
            raise ConfigError("COP needs a dataset to draw seeds from")
        dataset.require_samples()
        pick = int(noise_generator(cfg.seed, sample_index, NOISE_STREAM_COP_SEED, 0).integers(len(dataset)))
        seed = dataset.to_array()[pick]
        method, steps = 'cop', 0
    elif seed_source == 'generated':
        if denoiser is None:
            raise ConfigError("COP-FT needs a denoiser to generate seeds")
        seed = ddim_sample(denoiser, cfg.replace(trace=False), sample_index).sample.values
        method, steps = 'cop_ft', denoiser.T
    else:
        raise ConfigError(f"Unknown seed source '{seed_source}', expected 'dataset' or 'generated'")

    gamma = cfg.cop_gamma
    if gamma is None:
        gamma = denoiser.schedule.gamma_clip if denoiser is not None else DEFAULT_GAMMA_CLIP
    converged, iterations = True, 0
    z = np.array(seed, dtype=float)
    if len(constraint_set) > 0:
        result = Projector(constraint_set, *z.shape, cfg.projection)(z, gamma)
        z, converged, iterations = result.z_pr, result.converged, result.iterations
    return _final_report(z, constraint_set, method, steps, time.perf_counter() - start, sample_index,
                         converged, iterations)


def sample_batch(method: str, count: int, cfg: SamplerConfig | None = None, denoiser: Denoiser | None = None,
                 constraint_set: ConstraintSet | None = None, dataset: Dataset | None = None,
                 first_index: int = 0) -> list[SampleReport]:
    """
    Generate ``count`` samples with one method.

    Diffusion methods run in chunks of ``cfg.chunk_size`` samples, spread over ``cfg.threads`` worker threads; sample ``i`` always uses the noise keyed by ``first_index + i``.

    :param method: One of ``METHODS``.
    :type method: str
    :param count: Number of samples.
    :type count: int
    :param cfg: Sampler settings.
    :param denoiser: Required by every method but ``'cop'``.
    :param constraint_set: Constraints (required by ``'cps'``).
    :param dataset: Seed source of ``'cop'``.
    :param first_index: Index of the first sample.
    :return: Reports in sample order.
    :rtype: list[SampleReport]
    :raises ConfigError: If the method is unknown or an input is missing.
    """
    cfg = cfg or SamplerConfig()
    constraint_set = constraint_set if constraint_set is not None else ConstraintSet()
    if method not in METHODS:
        raise ConfigError(f"Unknown method '{method}'. Valid methods are: {', '.join(METHODS)}.")
    if count < 1:
        raise ConfigError(f"count must be at least 1, got {count}")
    if method != 'cop' and denoiser is None:
        raise ConfigError(f"Method '{method}' needs a denoiser")
    if method == 'cps':
        _require_constraints(constraint_set, method)

    indices = [first_index + i for i in range(count)]
    if method in ('cop', 'cop_ft'):
        source = 'dataset' if method == 'cop' else 'generated'
        jobs = [lambda i=i: [cop_project_baseline(source, constraint_set, cfg, dataset, denoiser, i)]
                for i in indices]
    else:
        chunk_cfg = cfg.replace(show_progress=False)
        jobs = [lambda chunk=chunk: _reverse_diffusion(denoiser, constraint_set, chunk_cfg, method, chunk)
                for chunk in _chunks(indices, cfg.chunk_size)]

    logger.info(f"Generating {count} samples with '{method}' in {len(jobs)} jobs on {cfg.threads} threads")
    progress = tqdm(total=count, desc=METHOD_LABELS[method], disable=not cfg.show_progress)
    reports: list[SampleReport] = []
    with concurrent.futures.ThreadPoolExecutor(max_workers=cfg.threads) as executor:
        for chunk_reports in executor.map(lambda job: job(), jobs):
            reports.extend(chunk_reports)
            progress.update(len(chunk_reports))
    progress.close()
    return reports


def _chunks(indices: list[int], size: int) -> list[list[int]]:
    return [indices[first:first + size] for first in range(0, len(indices), size)]


def reports_to_dataset(reports: Sequence[SampleReport]) -> Dataset:
    """
    Stack the samples of ``reports`` into a :class:`Dataset`.

    :raises DatasetError: If there are no reports.
    """
    if not reports:
        raise DatasetError("No samples to collect")
    return Dataset(np.stack([r.sample.values for r in reports]))


def reports_frame(reports: Sequence[SampleReport]) -> pd.DataFrame:
    """
    One row per report with the scalar fields of :meth:`SampleReport.to_dict`.
    """
    return pd.DataFrame([r.to_dict() for r in reports])


def select_guidance_weight(d: Denoiser, constraint_set: ConstraintSet, cfg: SamplerConfig | None = None,
                           count: int = 10, weights: Sequence[float] = GUIDANCE_WEIGHTS
                           ) -> tuple[float, pd.DataFrame]:
    """
    Pick the guidance weight with the lowest violation rate over ``count`` samples; ties go to the smaller weight.

    :return: The chosen weight and a table with one row per weight (``weight``, ``violation_rate``, ``violation_magnitude``).
    :rtype: tuple[float, pandas.DataFrame]
    """
    cfg = cfg or SamplerConfig()
    rows = []
    for weight in sorted(weights):
        reports = sample_batch('guided', count, cfg.replace(guidance_weight=weight), d, constraint_set)
        rate, magnitude = violation_stats([r.sample.values for r in reports], constraint_set)
        rows.append({'weight': weight, 'violation_rate': rate, 'violation_magnitude': magnitude})
        logger.debug(f"Guidance weight {weight:g}: violation rate {rate:.3f}")
    table = pd.DataFrame(rows)
    best = float(table.loc[table['violation_rate'].idxmin(), 'weight'])
    logger.info(f"Selected guidance weight {best:g}")
    return best, table
