"""
Similarity and quality metrics for generated time series.

* :func:`dtw` - dynamic time warping cost (symmetric step pattern, no window, Euclidean cost across channels);
* :func:`ssim_1d` - structural similarity with 1-D uniform windows, averaged over positions and channels;
* :func:`violation_stats` - violation rate and mean violation magnitude of a batch at a budget;
* :func:`feature_frechet` - Fréchet distance between Gaussian fits of fixed statistical feature vectors.

DTW costs are unnormalized cumulative costs.
"""
from __future__ import annotations

import dataclasses
from typing import Any, Sequence

import numpy as np
import pandas as pd
from scipy.ndimage import uniform_filter1d
from scipy.spatial.distance import cdist

from .constraints import ConstraintSet, per_constraint_violation
from .errors import ConfigError, DatasetError, ShapeMismatchError
from .linalg import symmetric_sqrtm
from .logging_config import logger
from .series import Dataset

SSIM_WINDOW = 7
SSIM_C1 = 1e-4
SSIM_C2 = 9e-4
FRECHET_JITTER = 1e-6
FEATURE_NAMES = ('mean', 'std', 'min', 'max', 'lag1_autocorrelation', 'mean_abs_change')
FEATURE_VERSION = 1


def _as_channels(series: Any) -> np.ndarray:
    values = np.asarray(series, dtype=float)
    if values.ndim == 1:
        values = values[np.newaxis, :]
    if values.ndim != 2:
        raise ShapeMismatchError(f"Expected a (K, L) series, got shape {values.shape}")
    return values


def dtw(a: Any, b: Any) -> float:
    """
    Dynamic time warping cost between two series with the same channel count.

    The local cost of aligning step ``i`` of ``a`` with step ``j`` of ``b`` is the Euclidean distance between the two channel vectors; moves are match, insertion and deletion with unit weights.

    :param a: Series of shape ``(K, La)`` (or ``(La,)`` for one channel).
    :type a: array-like
    :param b: Series of shape ``(K, Lb)``.
    :type b: array-like
    :return: The optimal cumulative cost.
    :rtype: float
    :raises ShapeMismatchError: If the channel counts differ.

    **Examples**

    .. code-block:: python

        dtw([0.0, 0.0, 1.0], [0.0, 1.0])  # 0.0
        dtw([0.0], [3.0])  # 3.0
    """
    a, b = _as_channels(a), _as_channels(b)
    if a.shape[0] != b.shape[0]:
        raise ShapeMismatchError(f"Channel counts differ: {a.shape[0]} and {b.shape[0]}")
    cost = cdist(a.T, b.T)
    rows, cols = cost.shape
    accumulated = np.full((rows + 1, cols + 1), np.inf)
    accumulated[0, 0] = 0.0
    for i in range(rows):
        previous, current = accumulated[i], accumulated[i + 1]
        for j in range(cols):
            current[j + 1] = cost[i, j] + min(previous[j], previous[j + 1], current[j])
    return float(accumulated[rows, cols])


def ssim_1d(a: Any, b: Any, window: int = SSIM_WINDOW, C1: float = SSIM_C1, C2: float = SSIM_C2) -> float:
    """
    Structural similarity of two equally shaped series using uniform moving windows.

    Local means, variances and covariance are computed per channel with :func:`scipy.ndimage.uniform_filter1d` (reflecting borders); the SSIM map is averaged over every position and channel.

    :param a: Series of shape ``(K, L)``.
    :param b: Series of the same shape.
    :param window: Odd window length, ``1 <= window <= L``.
    :type window: int
    :param C1: Luminance stabilizer.
    :param C2: Contrast stabilizer.
    :rtype: float
    :raises ShapeMismatchError: If the shapes differ.
    :raises ConfigError: If the window is even or out of range.
    """
    a, b = _as_channels(a), _as_channels(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"SSIM needs equal shapes, got {a.shape} and {b.shape}")
    L = a.shape[1]
    if window < 1 or window % 2 == 0 or window > L:
        raise ConfigError(f"SSIM window must be odd and within 1..{L}, got {window}")

    def local_mean(values: np.ndarray) -> np.ndarray:
        return uniform_filter1d(values, size=window, axis=1, mode='reflect')

    mean_a, mean_b = local_mean(a), local_mean(b)
    var_a = np.maximum(local_mean(a * a) - mean_a * mean_a, 0.0)
    var_b = np.maximum(local_mean(b * b) - mean_b * mean_b, 0.0)
    bound = np.sqrt(var_a * var_b)
    cov = np.clip(local_mean(a * b) - mean_a * mean_b, -bound, bound)
    numerator = (2.0 * mean_a * mean_b + C1) * (2.0 * cov + C2)
    denominator = (mean_a * mean_a + mean_b * mean_b + C1) * (var_a + var_b + C2)
    return float(np.mean(numerator / denominator))


def violation_stats(samples: Sequence[Any], constraint_set: ConstraintSet,
                    budget: float | None = None) -> tuple[float, float]:
    """
    Fraction of samples that violate any constraint beyond the budget, and the mean summed excess.

    :param samples: ``(K, L)`` samples, or a ``(N, K, L)`` array or :class:`Dataset`.
    :param constraint_set: The constraints.
    :param budget: Allowable violation per constraint; the set's budget by default.
    :return: ``(rate, magnitude)``.
    :rtype: tuple[float, float]
    :raises DatasetError: If there are no samples.
    """
    if isinstance(samples, Dataset):
        samples = samples.to_array()
    if len(samples) == 0:
        raise DatasetError("Violation statistics need at least one sample")
    excess = np.array([per_constraint_violation(z, constraint_set, budget).sum() for z in samples])
    return float(np.mean(excess > 0.0)), float(np.mean(excess))


def feature_vector(sample: Any) -> np.ndarray:
    """
    Statistical features of one sample: per channel the mean, standard deviation, minimum, maximum, lag-1 autocorrelation and mean absolute consecutive change, concatenated channel by channel.
    """
    values = _as_channels(sample)
    features = []
    for x in values:
        centered = x - x.mean()
        energy = float(np.dot(centered, centered))
        autocorrelation = float(np.dot(centered[:-1], centered[1:]) / energy) if energy > 0.0 else 0.0
        change = float(np.mean(np.abs(np.diff(x)))) if x.size > 1 else 0.0
        features.extend([x.mean(), x.std(), x.min(), x.max(), autocorrelation, change])
    return np.array(features, dtype=float)


def _feature_cloud(samples: Any, side: str) -> np.ndarray:
    array = samples.to_array() if isinstance(samples, Dataset) else np.asarray(samples, dtype=float)
    if array.ndim == 2:
        array = array[:, np.newaxis, :]
    if array.ndim != 3 or array.shape[0] < 2:
        raise DatasetError(f"Fréchet distance needs at least 2 {side} samples of shape (K, L)")
    return np.stack([feature_vector(z) for z in array])


def feature_frechet(real: Any, gen: Any) -> float:
    """
    Fréchet distance between Gaussian fits of the feature vectors of two datasets:
    ``||mu_r - mu_g||^2 + tr(S_r + S_g - 2 (S_r^{1/2} S_g S_r^{1/2})^{1/2})``.

    If either covariance is singular, ``1e-6`` is added to both diagonals and a warning is logged.

    :param real: Reference samples (:class:`Dataset` or ``(N, K, L)`` array), at least 2.
    :param gen: Generated samples, at least 2, same sample shape.
    :rtype: float
    :raises DatasetError: If a side has fewer than 2 samples.
    :raises ShapeMismatchError: If the feature dimensions differ.
    """
    features_real = _feature_cloud(real, 'reference')
    features_gen = _feature_cloud(gen, 'generated')
    if features_real.shape[1] != features_gen.shape[1]:
        raise ShapeMismatchError("Reference and generated samples have different channel counts")
    mu_r, mu_g = features_real.mean(axis=0), features_gen.mean(axis=0)
    cov_r = np.atleast_2d(np.cov(features_real, rowvar=False))
    cov_g = np.atleast_2d(np.cov(features_gen, rowvar=False))
    if _is_singular(cov_r) or _is_singular(cov_g):
        logger.warning(f"Singular feature covariance, adding {FRECHET_JITTER:g} diagonal jitter")
        jitter = FRECHET_JITTER * np.eye(cov_r.shape[0])
        cov_r, cov_g = cov_r + jitter, cov_g + jitter
    root_r = symmetric_sqrtm(cov_r)
    cross = symmetric_sqrtm(root_r @ cov_g @ root_r)
    distance = float(np.sum((mu_r - mu_g) ** 2) + np.trace(cov_r) + np.trace(cov_g) - 2.0 * np.trace(cross))
    return max(distance, 0.0)


def _is_singular(cov: np.ndarray) -> bool:
    eigenvalues = np.linalg.eigvalsh(cov)
    return bool(eigenvalues[0] <= 1e-12 * max(eigenvalues[-1], 1.0))


@dataclasses.dataclass
class MetricReport:
    """
    Aggregate metrics of a generated batch against its references.

    :ivar dtw: Mean DTW cost.
    :ivar ssim: Mean SSIM.
    :ivar violation_rate: Fraction of samples violating the constraints (``None`` without constraints).
    :ivar violation_magnitude: Mean summed excess (``None`` without constraints).
    :ivar feature_fd: Feature Fréchet distance (``None`` with fewer than 2 samples on a side).
    :ivar n_generated: Number of generated samples.
    :ivar n_reference: Number of reference samples.
    """
    dtw: float
    ssim: float
    violation_rate: float | None
    violation_magnitude: float | None
    feature_fd: float | None
    n_generated: int
    n_reference: int

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def evaluate_batch(generated: Any, reference: Any, constraint_set: ConstraintSet | None = None,
                   window: int = SSIM_WINDOW, C1: float = SSIM_C1, C2: float = SSIM_C2,
                   budget: float | None = None) -> tuple[pd.DataFrame, MetricReport]:
    """
    Per-sample and aggregate metrics of generated samples against references.

    Sample ``i`` is compared with reference ``i``; a single reference is compared with every sample.

    :param generated: Generated samples (:class:`Dataset` or ``(N, K, L)`` array).
    :param reference: Reference samples, either ``N`` or 1.
    :param constraint_set: Constraints for the violation columns, optional.
    :return: A table with one row per generated sample (``sample``, ``dtw``, ``ssim`` and, with constraints, ``violation`` and ``violating``) and the aggregate report.
    :rtype: tuple[pandas.DataFrame, MetricReport]
    :raises ShapeMismatchError: If sample shapes or counts do not match.
    :raises DatasetError: If there are no generated samples.
    """
    gen = generated.to_array() if isinstance(generated, Dataset) else np.asarray(generated, dtype=float)
    ref = reference.to_array() if isinstance(reference, Dataset) else np.asarray(reference, dtype=float)
    if gen.ndim != 3 or ref.ndim != 3:
        raise ShapeMismatchError("Expected (N, K, L) arrays of generated and reference samples")
    if len(gen) == 0:
        raise DatasetError("No generated samples to evaluate")
    if gen.shape[1:] != ref.shape[1:]:
        raise ShapeMismatchError(f"Sample shapes differ: {gen.shape[1:]} and {ref.shape[1:]}")
    if len(ref) not in (1, len(gen)):
        raise ShapeMismatchError(f"{len(gen)} generated samples cannot be paired with {len(ref)} references")

    rows = []
    for i, z in enumerate(gen):
        target = ref[0] if len(ref) == 1 else ref[i]
        row = {'sample': i, 'dtw': dtw(z, target), 'ssim': ssim_1d(z, target, window, C1, C2)}
        if constraint_set is not None:
            excess = float(per_constraint_violation(z, constraint_set, budget).sum())
            row['violation'] = excess
            row['violating'] = excess > 0.0
        rows.append(row)
    table = pd.DataFrame(rows)

    rate = magnitude = None
    if constraint_set is not None:
        rate, magnitude = float(table['violating'].mean()), float(table['violation'].mean())
    fd = None
    if len(gen) >= 2 and len(ref) >= 2:
        fd = feature_frechet(ref, gen)
    report = MetricReport(float(table['dtw'].mean()), float(table['ssim'].mean()), rate, magnitude,
                          fd, len(gen), len(ref))
    return table, report
