"""
Comparison of the samplers on the tracking protocol: for each reference sample, constraints are extracted from the reference, every method generates one sample under them, and the output is scored against the reference.
"""
from __future__ import annotations

import dataclasses
from typing import Any

import numpy as np
import pandas as pd
from tqdm import tqdm
from typing_extensions import Self

from .constraints import DEFAULT_EXTRACTION_KINDS, extract_constraints
from .denoiser import Denoiser
from .errors import ConfigError, DatasetError
from .logging_config import logger
from .metrics import SSIM_WINDOW, dtw, ssim_1d
from .sampler import (GUIDANCE_WEIGHTS, METHOD_LABELS, METHODS, SamplerConfig, cop_project_baseline,
                      cps_sample, ddim_sample, guided_sample, select_guidance_weight)
from .series import Dataset

BENCHMARK_COLUMNS = ['trial', 'method', 'label', 'n_constraints', 'dtw', 'ssim', 'violation', 'violating',
                     'converged', 'guidance_weight']


@dataclasses.dataclass
class BenchmarkConfig:
    """
    Settings of :func:`run_benchmark`.

    :ivar methods: Methods to compare.
    :ivar n_constraints: Numbers of extracted constraints to test; the first ``n`` of the extraction order are used.
    :ivar kinds: Extraction order.
    :ivar trials: Number of reference samples.
    :ivar guidance_weight: Fixed guidance weight; selected by violation rate when ``None``.
    :ivar selection_samples: Samples per weight during selection.
    :ivar ssim_window: SSIM window.
    """
    methods: tuple[str, ...] = ('ddim', 'cps', 'guided', 'cop', 'cop_ft')
    n_constraints: tuple[int, ...] = (1, 10)
    kinds: tuple[str, ...] = DEFAULT_EXTRACTION_KINDS
    trials: int = 50
    guidance_weight: float | None = None
    selection_samples: int = 10
    ssim_window: int = SSIM_WINDOW

    def __post_init__(self) -> None:
        self.methods = tuple(self.methods)
        self.n_constraints = tuple(int(n) for n in self.n_constraints)
        self.kinds = tuple(self.kinds)
        if unknown := [m for m in self.methods if m not in METHODS]:
            raise ConfigError(f"Unknown method(s) {', '.join(unknown)}. Valid methods are: {', '.join(METHODS)}.")
        if self.trials < 1 or any(n < 1 for n in self.n_constraints):
            raise ConfigError("trials and every n_constraints entry must be at least 1")

    def to_dict(self) -> dict[str, Any]:
        return {field.name: (list(value) if isinstance(value := getattr(self, field.name), tuple) else value)
                for field in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, settings: dict[str, Any]) -> Self:
        known = {field.name for field in dataclasses.fields(cls)}
        if unknown := set(settings) - known:
            raise ConfigError(f"Unknown benchmark keys: {', '.join(sorted(unknown))}")
        return cls(**settings)


def _generate(method: str, denoiser: Denoiser, constraint_set: Any, cfg: SamplerConfig,
              train_ds: Dataset | None, trial: int):
    if method == 'ddim':
        return ddim_sample(denoiser, cfg, trial)
    if method == 'cps':
        return cps_sample(denoiser, constraint_set, cfg, trial)
    if method == 'guided':
        return guided_sample(denoiser, constraint_set, cfg, trial)
    if method == 'cop':
        return cop_project_baseline('dataset', constraint_set, cfg, dataset=train_ds, denoiser=denoiser,
                                    sample_index=trial)
    return cop_project_baseline('generated', constraint_set, cfg, denoiser=denoiser, sample_index=trial)


def run_benchmark(denoiser: Denoiser, references: Dataset, train_ds: Dataset | None = None,
                  bench: BenchmarkConfig | None = None, cfg: SamplerConfig | None = None,
                  show_progress: bool = False) -> pd.DataFrame:
    """
    Run every method of ``bench.methods`` on every trial and constraint count.

    Trial ``i`` uses reference ``i`` (cycling through ``references``) and the noise keyed by ``i``, so all methods see the same randomness.

    :param denoiser: Trained denoiser.
    :param references: Reference samples (normally the test split).
    :param train_ds: Seed source of the ``'cop'`` method.
    :param bench: Benchmark settings.
    :param cfg: Sampler settings.
    :return: One row per (trial, constraint count, method) with the columns ``BENCHMARK_COLUMNS``.
    :rtype: pandas.DataFrame
    :raises DatasetError: If there are no references, or ``'cop'`` is requested without a training set.
    """
    bench = bench or BenchmarkConfig()
    cfg = cfg or SamplerConfig()
    references.require_samples()
    if 'cop' in bench.methods and (train_ds is None or len(train_ds) == 0):
        raise DatasetError("The 'cop' method needs a training dataset to draw seeds from")
    reference_values = references.to_array()

    weights: dict[int, float] = {}
    if 'guided' in bench.methods:
        for n in bench.n_constraints:
            if bench.guidance_weight is not None:
                weights[n] = bench.guidance_weight
                continue
            selection_set = extract_constraints(reference_values[0], bench.kinds).head(n)
            weights[n], _ = select_guidance_weight(denoiser, selection_set, cfg, bench.selection_samples,
                                                   GUIDANCE_WEIGHTS)

    rows = []
    jobs = [(trial, n) for trial in range(bench.trials) for n in bench.n_constraints]
    for trial, n in tqdm(jobs, desc="Benchmark", disable=not show_progress):
        reference = reference_values[trial % len(reference_values)]
        constraint_set = extract_constraints(reference, bench.kinds).head(n)
        for method in bench.methods:
            method_cfg = cfg.replace(guidance_weight=weights.get(n, 0.0)) if method == 'guided' else cfg
            report = _generate(method, denoiser, constraint_set, method_cfg, train_ds, trial)
            sample = report.sample.values
            rows.append({
                'trial': trial,
                'method': method,
                'label': METHOD_LABELS[method],
                'n_constraints': n,
                'dtw': dtw(sample, reference),
                'ssim': ssim_1d(sample, reference, bench.ssim_window),
                'violation': float(report.per_constraint.sum()),
                'violating': not report.feasible,
                'converged': report.converged,
                'guidance_weight': method_cfg.guidance_weight if method == 'guided' else np.nan,
            })
    table = pd.DataFrame(rows, columns=BENCHMARK_COLUMNS)
    logger.info(f"Benchmark finished: {bench.trials} trials, {len(bench.methods)} methods")
    return table


def summarize(table: pd.DataFrame) -> pd.DataFrame:
    """
    Per (method, constraint count): median and mean DTW, mean and standard deviation of DTW and SSIM, violation rate and the share of converged runs.

    :rtype: pandas.DataFrame
    """
    grouped = table.groupby(['method', 'n_constraints'], sort=False)
    summary = grouped.agg(
        dtw_median=('dtw', 'median'),
        dtw_mean=('dtw', 'mean'),
        dtw_std=('dtw', 'std'),
        ssim_mean=('ssim', 'mean'),
        ssim_std=('ssim', 'std'),
        violation_rate=('violating', 'mean'),
        converged_rate=('converged', 'mean'),
        trials=('trial', 'count'),
    ).reset_index()
    summary.insert(1, 'label', summary['method'].map(METHOD_LABELS))
    return summary


def ordering_checks(summary: pd.DataFrame) -> dict[str, bool]:
    """
    Directional comparisons on a :func:`summarize` table, for each constraint count that has the methods involved:
    CPS tracks the reference better than COP, guidance violates more often than CPS, and CPS tracks better with more constraints.

    :return: Check name to outcome; checks whose methods are missing are left out.
    :rtype: dict[str, bool]
    """
    checks: dict[str, bool] = {}
    indexed = summary.set_index(['method', 'n_constraints'])
    counts = sorted(summary['n_constraints'].unique())
    for n in counts:
        if ('cps', n) in indexed.index and ('cop', n) in indexed.index:
            checks[f"dtw_cps_below_cop@{n}"] = bool(
                indexed.loc[('cps', n), 'dtw_median'] < indexed.loc[('cop', n), 'dtw_median'])
        if ('cps', n) in indexed.index and ('guided', n) in indexed.index:
            checks[f"violation_guided_above_cps@{n}"] = bool(
                indexed.loc[('guided', n), 'violation_rate'] > indexed.loc[('cps', n), 'violation_rate'])
    cps_counts = [n for n in counts if ('cps', n) in indexed.index]
    if len(cps_counts) >= 2:
        checks['dtw_cps_decreases_with_constraints'] = bool(
            indexed.loc[('cps', cps_counts[-1]), 'dtw_median'] < indexed.loc[('cps', cps_counts[0]), 'dtw_median'])
    return checks
