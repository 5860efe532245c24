"""
Time series data model: samples, datasets, the synthetic waveforms generator, CSV exchange, normalization and the forward noising transform.

Numerical kernels across the package accept anything array-like of shape ``(K, L)`` (a :class:`TimeSeries` included) and return plain :class:`numpy.ndarray` objects; :class:`TimeSeries` and :class:`Dataset` are the validated containers used at the edges (files, reports).
"""
from __future__ import annotations

import json
import math
import os
import re
from typing import Any, Iterator, Sequence

import numpy as np
import pandas as pd
from typing_extensions import Self

from .errors import DatasetError, DatasetParseError, ShapeMismatchError
from .logging_config import logger
from .schedule import Schedule

NOISE_STREAM_INITIAL = 0
NOISE_STREAM_STEP = 1
NOISE_STREAM_TRAINING = 2
NOISE_STREAM_COP_SEED = 3


class TimeSeries:
    """
    A single ``K``-channel sample of horizon ``L``.

    :param values: A ``(K, L)`` array, or a 1-D array for a univariate series.
    :type values: array-like
    :raises ShapeMismatchError: If the values are not 1-D or 2-D or have an empty axis.
    :raises DatasetError: If any value is NaN or infinite.
    """

    def __init__(self, values: Any) -> None:
        array = np.array(values, dtype=float)
        if array.ndim == 1:
            array = array[np.newaxis, :]
        if array.ndim != 2:
            raise ShapeMismatchError(
                f"A time series needs a (K, L) array, got {array.ndim} dimensions")
        if array.shape[0] < 1 or array.shape[1] < 1:
            raise ShapeMismatchError(
                f"A time series needs K >= 1 and L >= 1, got shape {array.shape}")
        if not np.all(np.isfinite(array)):
            raise DatasetError("Time series values must be finite")
        array.setflags(write=False)
        self.values: np.ndarray = array

    @property
    def K(self) -> int:
        return self.values.shape[0]

    @property
    def L(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def channel(self, k: int) -> np.ndarray:
        return self.values[k]

    def __array__(self, dtype=None, copy=None) -> np.ndarray:
        if dtype is None:
            return self.values.copy()
        return self.values.astype(dtype)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TimeSeries):
            return NotImplemented
        return np.array_equal(self.values, other.values)

    def __repr__(self) -> str:
        return f"TimeSeries(K={self.K}, L={self.L})"


class Normalization:
    """
    Per-channel ``(mean, std)`` record of a normalized dataset.

    :param mean: Channel means, shape ``(K,)``.
    :type mean: array-like
    :param std: Channel standard deviations, shape ``(K,)``, all strictly positive.
    :type std: array-like
    :raises DatasetError: If a standard deviation is not positive.
    """

    def __init__(self, mean: Any, std: Any) -> None:
        self.mean: np.ndarray = np.asarray(mean, dtype=float).reshape(-1)
        self.std: np.ndarray = np.asarray(std, dtype=float).reshape(-1)
        if self.mean.shape != self.std.shape:
            raise ShapeMismatchError("Normalization mean and std differ in length")
        if np.any(self.std <= 0.0):
            channel = int(np.argmax(self.std <= 0.0))
            raise DatasetError(
                f"Normalization std of channel {channel} must be positive")

    def to_dict(self) -> dict[str, list[float]]:
        return {'mean': self.mean.tolist(), 'std': self.std.tolist()}

    @classmethod
    def from_dict(cls, settings: dict[str, Any]) -> Self:
        return cls(settings['mean'], settings['std'])

    def save_as_json(self, filename: str) -> None:
        with open(filename, 'w') as file:
            json.dump(self.to_dict(), file, indent=4)

    @classmethod
    def load(cls, filename: str) -> Self:
        with open(filename, 'r') as file:
            return cls.from_dict(json.load(file))

    def __repr__(self) -> str:
        return f"Normalization(mean={self.mean.tolist()}, std={self.std.tolist()})"


class Dataset:
    """
    An ordered collection of samples that all share the shape ``(K, L)``.

    Samples are stored as one ``(N, K, L)`` array.

    :param samples: Either an ``(N, K, L)`` array or a sequence of :class:`TimeSeries` / ``(K, L)`` arrays.
    :type samples: array-like | Sequence[TimeSeries]
    :param normalization: The record of the transform that produced these values, if they are normalized.
    :type normalization: Normalization | None, optional

    :ivar normalization: Present exactly when the values are normalized.
    :vartype normalization: Normalization | None
    :raises ShapeMismatchError: If the samples do not share one shape.
    :raises DatasetError: If a value is not finite.
    """

    def __init__(self, samples: Any, normalization: Normalization | None = None) -> None:
        if isinstance(samples, np.ndarray):
            array = np.array(samples, dtype=float)
        else:
            items = [np.asarray(sample, dtype=float) for sample in samples]
            shapes = {item.shape for item in items}
            if len(shapes) > 1:
                raise ShapeMismatchError(
                    f"All samples of a dataset must share one shape, got {sorted(shapes)}")
            array = np.stack(items) if items else np.zeros((0, 1, 1))
        if array.ndim == 2:
            array = array[:, np.newaxis, :]
        if array.ndim != 3:
            raise ShapeMismatchError(
                f"Dataset arrays must be (N, K, L), got {array.ndim} dimensions")
        if not np.all(np.isfinite(array)):
            raise DatasetError("Dataset values must be finite")
        if normalization is not None and normalization.mean.size != array.shape[1]:
            raise ShapeMismatchError(
                f"Normalization covers {normalization.mean.size} channels, dataset has {array.shape[1]}")
        array.setflags(write=False)
        self._samples: np.ndarray = array
        self.normalization: Normalization | None = normalization

    @classmethod
    def from_array(cls, array: np.ndarray, normalization: Normalization | None = None) -> Self:
        return cls(np.asarray(array, dtype=float), normalization=normalization)

    def to_array(self) -> np.ndarray:
        """
        :return: A writable copy of the samples, shape ``(N, K, L)``.
        :rtype: numpy.ndarray
        """
        return self._samples.copy()

    @property
    def K(self) -> int:
        return self._samples.shape[1]

    @property
    def L(self) -> int:
        return self._samples.shape[2]

    @property
    def sample_shape(self) -> tuple[int, int]:
        return self._samples.shape[1:]

    def subset(self, indices: Sequence[int] | np.ndarray) -> Dataset:
        return Dataset(self._samples[np.asarray(indices, dtype=int)], normalization=self.normalization)

    def require_samples(self) -> None:
        """
        :raises DatasetError: If the dataset is empty.
        """
        if len(self) == 0:
            raise DatasetError("Dataset is empty")

    def save_normalization(self, filename: str) -> None:
        """
        Write the normalization record as a JSON key-value file.

        :raises DatasetError: If the dataset is not normalized.
        """
        if self.normalization is None:
            raise DatasetError("Dataset has no normalization record to save")
        self.normalization.save_as_json(filename)

    def load_normalization(self, filename: str) -> Dataset:
        """
        Attach a normalization record read from ``filename`` and return the new dataset.
        """
        return Dataset(self._samples, normalization=Normalization.load(filename))

    def __len__(self) -> int:
        return self._samples.shape[0]

    def __getitem__(self, index: int) -> TimeSeries:
        return TimeSeries(self._samples[index])

    def __iter__(self) -> Iterator[TimeSeries]:
        for index in range(len(self)):
            yield self[index]

    def __repr__(self) -> str:
        status = 'normalized' if self.normalization is not None else 'raw'
        return f"Dataset(N={len(self)}, K={self.K}, L={self.L}, {status})"


def waveform(amplitude: float, phase: float, frequency: int, L: int) -> np.ndarray:
    """
    One sinusoid ``amplitude * sin(2 pi frequency u / L + phase)`` for ``u = 0..L-1``.

    **Examples**

    .. code-block:: python

        waveform(0.5, 0.0, 1, 4)  # approximately [0, 0.5, 0, -0.5]
    """
    u = np.arange(L)
    return amplitude * np.sin(2.0 * np.pi * frequency * u / L + phase)


def max_frequency(L: int) -> int:
    """
    Largest integer frequency strictly below the Nyquist limit ``L / 2`` (at least 1).
    """
    return max(1, math.ceil(L / 2) - 1)


def generate_waveforms(count: int, L: int = 96, amp_range: tuple[float, float] = (0.1, 1.0),
                       seed: int = 0) -> Dataset:
    """
    Generate univariate sinusoids with random amplitude, phase and integer frequency.

    Amplitudes are uniform over ``amp_range``, phases uniform over ``[0, 2 pi)`` and frequencies uniform over the integers ``1..max_frequency(L)``.

    :param count: Number of samples, at least 1.
    :type count: int
    :param L: Horizon, at least 2.
    :type L: int, optional
    :param amp_range: Amplitude bounds within ``(0, 1]``.
    :type amp_range: tuple[float, float], optional
    :param seed: Seed of the generator; the output is a pure function of the arguments.
    :type seed: int, optional
    :return: A raw (not normalized) dataset of shape ``(count, 1, L)``.
    :rtype: Dataset
    :raises DatasetError: For an empty count, a horizon below 2 or an invalid amplitude range.
    """
    if int(count) < 1:
        raise DatasetError(f"Waveform count must be at least 1, got {count}")
    if int(L) < 2:
        raise DatasetError(f"Waveform horizon must be at least 2, got {L}")
    low, high = amp_range
    if not (0.0 < low <= high <= 1.0):
        raise DatasetError(
            f"Amplitude range must satisfy 0 < low <= high <= 1, got {amp_range}")

    rng = np.random.default_rng(seed)
    amplitudes = rng.uniform(low, high, size=count)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=count)
    frequencies = rng.integers(1, max_frequency(L) + 1, size=count)

    u = np.arange(L)
    values = amplitudes[:, None] * np.sin(
        2.0 * np.pi * frequencies[:, None] * u[None, :] / L + phases[:, None])
    logger.info(f"Generated {count} waveforms of horizon {L} (seed {seed})")
    return Dataset(values[:, np.newaxis, :])


def split_dataset(ds: Dataset, fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
                  seed: int = 0, shuffle: bool = True) -> tuple[Dataset, Dataset, Dataset]:
    """
    Split a dataset into train, validation and test parts.

    Train and validation sizes are rounded from the fractions, the test split takes the rest; 16650 samples give 13320/1665/1665 and 100 give 80/10/10.

    :raises DatasetError: If the fractions are negative or do not sum to 1.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0.0 for f in fractions) or not math.isclose(sum(fractions), 1.0):
        raise DatasetError(
            f"Split fractions must be three nonnegative numbers summing to 1, got {fractions}")
    n = len(ds)
    n_train = int(round(n * fractions[0]))
    n_val = min(int(round(n * fractions[1])), n - n_train)
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    return tuple(ds.subset(part) for part in parts)


def normalize(ds: Dataset) -> Dataset:
    """
    Transform every channel to zero mean and unit variance over all samples and timestamps.

    :raises DatasetError: If the dataset is empty or a channel is constant; the message names the channel.
    """
    ds.require_samples()
    values = ds.to_array()
    mean = values.mean(axis=(0, 2))
    std = values.std(axis=(0, 2))
    for channel, value in enumerate(std):
        if not value > 0.0:
            raise DatasetError(
                f"Channel {channel} is constant and cannot be normalized")
    normalized = (values - mean[None, :, None]) / std[None, :, None]
    return Dataset(normalized, normalization=Normalization(mean, std))


def apply_normalization(ds: Dataset, record: Normalization) -> Dataset:
    """
    Normalize with an existing record, e.g. validation and test data with the training statistics.

    :raises ShapeMismatchError: If the record has another channel count.
    """
    if record.mean.size != ds.K:
        raise ShapeMismatchError(
            f"Normalization record has {record.mean.size} channels, dataset has {ds.K}")
    values = (ds.to_array() - record.mean[None, :, None]) / record.std[None, :, None]
    return Dataset(values, normalization=record)


def denormalize(ds: Dataset) -> Dataset:
    """
    Undo :func:`normalize` with the dataset's own record.

    :raises DatasetError: If the dataset carries no normalization record.
    """
    if ds.normalization is None:
        raise DatasetError("Dataset has no normalization record")
    record = ds.normalization
    values = ds.to_array() * record.std[None, :, None] + record.mean[None, :, None]
    return Dataset(values)


def noise_generator(seed: int, sample_index: int, stream: int, step: int) -> np.random.Generator:
    """
    Counter-based random generator keyed by ``(seed, sample_index, stream, step)``.

    Draws for one sample and step do not depend on how samples are batched or ordered, so every sampler reproduces the same noise at the same call point.

    :param seed: Global run seed.
    :param sample_index: Index of the sample within the batch.
    :param stream: Purpose of the draw (``NOISE_STREAM_INITIAL``, ``NOISE_STREAM_STEP``, ``NOISE_STREAM_TRAINING`` or ``NOISE_STREAM_COP_SEED``).
    :param step: Diffusion step or training iteration.
    :rtype: numpy.random.Generator
    """
    sequence = np.random.SeedSequence([int(seed), int(sample_index), int(stream), int(step)])
    return np.random.Generator(np.random.Philox(sequence))


def forward_noise(z0: Any, t: int, schedule: Schedule, eps: Any) -> np.ndarray:
    """
    Noise a clean sample to step ``t``: ``sqrt(alpha_bar[t]) z0 + sqrt(1 - alpha_bar[t]) eps``.

    ``t = 0`` is accepted and returns ``z0``.

    :param z0: Clean sample.
    :type z0: array-like
    :param t: Step in ``0..T``.
    :type t: int
    :param schedule: The diffusion schedule.
    :type schedule: Schedule
    :param eps: Standard normal noise of the same shape as ``z0``.
    :type eps: array-like
    :rtype: numpy.ndarray
    :raises ShapeMismatchError: If ``eps`` and ``z0`` differ in shape.
    """
    z0 = np.asarray(z0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if z0.shape != eps.shape:
        raise ShapeMismatchError(
            f"Noise shape {eps.shape} does not match sample shape {z0.shape}")
    if t != 0:
        schedule.check_step(t)
    a = schedule.alpha_bar[t]
    return math.sqrt(a) * z0 + math.sqrt(1.0 - a) * eps


def _parse_float(cell: Any) -> float:
    try:
        return float(cell)
    except (TypeError, ValueError):
        return math.nan


def _is_missing(cell: Any) -> bool:
    return (isinstance(cell, float) and math.isnan(cell)) or str(cell).strip() == ''


def _is_blank(row: pd.Series) -> bool:
    return all(_is_missing(cell) for cell in row)


def normalization_path(path: str) -> str:
    """
    Location of the normalization record stored alongside a dataset CSV.
    """
    root, _ = os.path.splitext(path)
    return f"{root}.normalization.json"


def read_csv(path: str) -> Dataset:
    """
    Read a dataset from CSV.

    Each sample is a block of ``L`` rows with ``K`` columns; blocks are separated by one or more blank lines. An optional header row (detected by a non-numeric first row) is skipped. A normalization record found next to the file (see :func:`normalization_path`) is attached.

    :param path: The CSV file.
    :type path: str
    :rtype: Dataset
    :raises DatasetError: If the file holds no samples.
    :raises DatasetParseError: For ragged rows, non-numeric or non-finite cells and samples of differing horizons; the message carries the 1-based row and column.
    """
    try:
        table = pd.read_csv(path, header=None, dtype=str, skip_blank_lines=False,
                            keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise DatasetError(f"Dataset file '{path}' is empty")
    except pd.errors.ParserError as error:
        match = re.search(r"line (\d+)", str(error))
        raise DatasetParseError(f"Ragged row in '{path}'",
                                row=int(match.group(1)) if match else None)

    numbers = table.map(_parse_float)
    rows = list(table.iterrows())
    start = 0
    if rows and any(not _is_missing(cell) and math.isnan(_parse_float(cell))
                    for cell in rows[0][1]):
        start = 1

    blocks: list[list[np.ndarray]] = []
    current: list[np.ndarray] = []
    for index in range(start, len(rows)):
        row = rows[index][1]
        if _is_blank(row):
            if current:
                blocks.append(current)
                current = []
            continue
        values = numbers.iloc[index].to_numpy()
        for column, (cell, value) in enumerate(zip(row, values)):
            if _is_missing(cell):
                raise DatasetParseError(f"Ragged row in '{path}'", row=index + 1, column=column + 1)
            if not math.isfinite(value):
                raise DatasetParseError(f"Non-numeric or non-finite cell '{cell}' in '{path}'",
                                        row=index + 1, column=column + 1)
        current.append(values)
    if current:
        blocks.append(current)

    if not blocks:
        raise DatasetError(f"Dataset file '{path}' holds no samples")
    horizon = len(blocks[0])
    for number, block in enumerate(blocks):
        if len(block) != horizon:
            raise DatasetParseError(
                f"Sample {number + 1} in '{path}' has {len(block)} rows, expected {horizon}")

    array = np.array([np.array(block).T for block in blocks], dtype=float)
    normalization = None
    if os.path.exists(normalization_path(path)):
        normalization = Normalization.load(normalization_path(path))
    logger.info(f"Read {array.shape[0]} samples of shape {array.shape[1:]} from '{path}'")
    return Dataset(array, normalization=normalization)


def write_csv(ds: Dataset, path: str, header: bool = True) -> None:
    """
    Write a dataset as CSV (layout of :func:`read_csv`) with 17 significant digits, so reading it back is exact. The normalization record, if any, is written alongside.

    :param ds: The dataset.
    :type ds: Dataset
    :param path: Target file; missing parent directories are created.
    :type path: str
    :param header: Whether to start the file with a ``channel_<k>`` header row.
    :type header: bool, optional
    """
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    columns = [f"channel_{k}" for k in range(ds.K)]
    chunks = []
    for index, sample in enumerate(ds.to_array()):
        frame = pd.DataFrame(sample.T, columns=columns)
        chunks.append(frame.to_csv(None, header=header and index == 0, index=False,
                                   float_format='%.17g', lineterminator='\n'))
    with open(path, 'w') as file:
        file.write('\n'.join(chunks))
    if ds.normalization is not None:
        ds.save_normalization(normalization_path(path))
    logger.info(f"Wrote {len(ds)} samples to '{path}'")
