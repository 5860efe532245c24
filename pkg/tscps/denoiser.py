"""
Noise prediction models.

:class:`Denoiser` is the interface the samplers use. :class:`GaussianDenoiser` is the closed-form optimal denoiser for data distributed as ``N(mu, I)``, used by the convergence harness; :class:`LearnedDenoiser` is a small fully connected network with a sinusoidal time embedding, trained by :func:`train_denoiser`.

All ``predict_noise`` / ``posterior_mean`` methods accept a single ``(K, L)`` sample or a ``(B, K, L)`` batch.
"""
from __future__ import annotations

import abc
import dataclasses
import json
import math
import os
import zipfile
from typing import Any

import numpy as np
import pandas as pd
from scipy.special import expit
from tqdm import tqdm
from typing_extensions import Self

from .errors import (CheckpointError, ConfigError, NumericalFailureError,
                     ShapeMismatchError, TrainingDivergenceError)
from .logging_config import logger
from .schedule import Schedule
from .series import NOISE_STREAM_TRAINING, Dataset, noise_generator

CHECKPOINT_FORMAT_VERSION = 1


class Denoiser(abc.ABC):
    """
    Maps a noisy sample ``z_t`` and its step ``t`` to an estimate of the noise it contains.

    :param K: Number of channels.
    :type K: int
    :param L: Horizon.
    :type L: int
    :param schedule: The diffusion schedule the model is used with.
    :type schedule: Schedule
    """

    def __init__(self, K: int, L: int, schedule: Schedule) -> None:
        self.K: int = int(K)
        self.L: int = int(L)
        self.schedule: Schedule = schedule

    @property
    def T(self) -> int:
        return self.schedule.T

    @property
    def sample_shape(self) -> tuple[int, int]:
        return (self.K, self.L)

    def check_input(self, z_t: Any, t: int) -> np.ndarray:
        """
        Validate a sample or batch and a step.

        :return: ``z_t`` as a float array.
        :rtype: numpy.ndarray
        :raises ShapeMismatchError: If the trailing dimensions are not ``(K, L)``.
        :raises ScheduleError: If ``t`` is outside ``1..T``.
        """
        z = np.asarray(z_t, dtype=float)
        if z.ndim not in (2, 3) or z.shape[-2:] != self.sample_shape:
            raise ShapeMismatchError(
                f"Denoiser expects samples of shape {self.sample_shape}, got {z.shape}")
        self.schedule.check_step(t)
        return z

    @abc.abstractmethod
    def _predict(self, z: np.ndarray, t: int) -> np.ndarray:
        """
        Noise estimate for a validated ``(B, K, L)`` batch.
        """

    def predict_noise(self, z_t: Any, t: int) -> np.ndarray:
        """
        Estimate the noise in ``z_t``.

        :param z_t: Noisy sample ``(K, L)`` or batch ``(B, K, L)``.
        :type z_t: array-like
        :param t: Step in ``1..T``.
        :type t: int
        :return: Array of the same shape as ``z_t``.
        :rtype: numpy.ndarray
        """
        z = self.check_input(z_t, t)
        if z.ndim == 2:
            return self._predict(z[np.newaxis], t)[0]
        return self._predict(z, t)

    def posterior_mean(self, z_t: Any, t: int) -> np.ndarray:
        """
        One-shot estimate of the clean sample, ``(z_t - sqrt(1 - alpha_bar[t]) eps_hat) / sqrt(alpha_bar[t])``.

        :raises NumericalFailureError: If ``alpha_bar[t] = 0``, where the estimate is undefined.
        """
        return self.estimate(z_t, t)[1]

    def estimate(self, z_t: Any, t: int) -> tuple[np.ndarray, np.ndarray]:
        """
        Noise estimate and posterior mean together, evaluating the model once.

        :return: ``(eps_hat, z0_hat)``.
        :rtype: tuple[numpy.ndarray, numpy.ndarray]
        """
        z = self.check_input(z_t, t)
        eps = self.predict_noise(z, t)
        a = float(self.schedule.alpha_bar[t])
        if a <= 0.0:
            raise NumericalFailureError(
                "Posterior mean is undefined where alpha_bar is 0", step=t)
        return eps, (z - math.sqrt(1.0 - a) * eps) / math.sqrt(a)

    def metadata(self) -> dict[str, Any]:
        return {'type': type(self).__name__, 'K': self.K, 'L': self.L, 'T': self.T}


def predict_noise(d: Denoiser, z_t: Any, t: int) -> np.ndarray:
    return d.predict_noise(z_t, t)


def posterior_mean(d: Denoiser, z_t: Any, t: int) -> np.ndarray:
    return d.posterior_mean(z_t, t)


class GaussianDenoiser(Denoiser):
    """
    Optimal denoiser for data distributed as ``N(mu, I)``:
    ``eps*(z_t, t) = -sqrt(1 - alpha_bar[t]) (sqrt(alpha_bar[t]) mu - z_t)``.

    :param mu: The data mean, ``(K, L)`` or 1-D for ``K = 1``.
    :type mu: array-like
    :param schedule: The diffusion schedule.
    :type schedule: Schedule
    :raises ShapeMismatchError: If ``mu`` is not 1-D or 2-D.
    :raises ValueError: If ``mu`` is not finite.

    **Examples**

    .. code-block:: python

        schedule = Schedule.from_alpha_bar([1.0, 0.36, 0.0])
        d = GaussianDenoiser([1.0], schedule)
        d.predict_noise([[2.0]], 1)  # [[1.12]]
        d.posterior_mean([[2.0]], 1)  # [[1.84]]
    """

    def __init__(self, mu: Any, schedule: Schedule) -> None:
        mu = np.array(mu, dtype=float)
        if mu.ndim == 1:
            mu = mu[np.newaxis, :]
        if mu.ndim != 2:
            raise ShapeMismatchError(f"mu must be (K, L), got {mu.ndim} dimensions")
        if not np.all(np.isfinite(mu)):
            raise ValueError("mu must be finite")
        mu.setflags(write=False)
        super().__init__(mu.shape[0], mu.shape[1], schedule)
        self.mu: np.ndarray = mu

    def _predict(self, z: np.ndarray, t: int) -> np.ndarray:
        a = float(self.schedule.alpha_bar[t])
        return -math.sqrt(1.0 - a) * (math.sqrt(a) * self.mu - z)

    def score(self, z_t: Any, t: int) -> np.ndarray:
        """
        Score of the noised marginal ``N(sqrt(alpha_bar[t]) mu, I)``, i.e. ``sqrt(alpha_bar[t]) mu - z_t``.
        """
        z = self.check_input(z_t, t)
        return math.sqrt(float(self.schedule.alpha_bar[t])) * self.mu - z

    def posterior_mean(self, z_t: Any, t: int) -> np.ndarray:
        # Same value as the generic formula, written so that alpha_bar[t] = 0 is allowed.
        z = self.check_input(z_t, t)
        a = float(self.schedule.alpha_bar[t])
        return math.sqrt(a) * z + (1.0 - a) * self.mu

    def estimate(self, z_t: Any, t: int) -> tuple[np.ndarray, np.ndarray]:
        return self.predict_noise(z_t, t), self.posterior_mean(z_t, t)


def time_embedding(t: Any, dim: int) -> np.ndarray:
    """
    Sinusoidal embedding of diffusion steps.

    :param t: Steps, scalar or shape ``(B,)``.
    :param dim: Embedding width.
    :return: Array of shape ``(B, dim)``: ``dim // 2`` sines followed by the matching cosines (and a zero column for odd ``dim``).
    :rtype: numpy.ndarray
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    half = dim // 2
    frequencies = np.exp(-math.log(10_000.0) * np.arange(half) / max(half, 1))
    angles = t[:, None] * frequencies[None, :]
    embedding = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    if dim % 2:
        embedding = np.concatenate([embedding, np.zeros((t.size, 1))], axis=1)
    return embedding


def _silu_derivative(a: np.ndarray) -> np.ndarray:
    s = expit(a)
    return s * (1.0 + a * (1.0 - s))


class AdamOptimizer:
    """
    First/second moment adaptive gradient updates over a dict of parameter arrays (updated in place).
    """

    def __init__(self, learning_rate: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8) -> None:
        self.learning_rate: float = learning_rate
        self.beta1: float = beta1
        self.beta2: float = beta2
        self.eps: float = eps
        self.step: int = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def update(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.step += 1
        correction1 = 1.0 - self.beta1 ** self.step
        correction2 = 1.0 - self.beta2 ** self.step
        for name, grad in grads.items():
            m = self.m.setdefault(name, np.zeros_like(grad))
            v = self.v.setdefault(name, np.zeros_like(grad))
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad ** 2
            params[name] -= self.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {f"adam_m/{name}": value for name, value in self.m.items()}
        arrays.update({f"adam_v/{name}": value for name, value in self.v.items()})
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step: int) -> None:
        self.step = int(step)
        self.m = {key.split('/', 1)[1]: np.array(value) for key, value in arrays.items()
                  if key.startswith('adam_m/')}
        self.v = {key.split('/', 1)[1]: np.array(value) for key, value in arrays.items()
                  if key.startswith('adam_v/')}


@dataclasses.dataclass
class TrainingConfig:
    """
    Hyperparameters of :func:`train_denoiser` and of the network it builds.
    """
    iterations: int = 5000
    batch_size: int = 64
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_interval: int = 100
    ema_decay: float = 0.99
    seed: int = 0
    hidden_layers: int = 3
    width: int = 256
    time_embedding_dim: int = 32

    def __post_init__(self) -> None:
        if self.iterations < 0 or self.batch_size < 1 or self.eval_interval < 1:
            raise ConfigError(
                "iterations must be >= 0, batch_size and eval_interval >= 1")
        if not self.learning_rate > 0.0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")
        if self.hidden_layers < 1 or self.width < 1 or self.time_embedding_dim < 0:
            raise ConfigError("The network needs at least one hidden layer of positive width")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, settings: dict[str, Any]) -> Self:
        known = {field.name for field in dataclasses.fields(cls)}
        if unknown := set(settings) - known:
            raise ConfigError(f"Unknown training keys: {', '.join(sorted(unknown))}")
        return cls(**settings)


class LearnedDenoiser(Denoiser):
    """
    Fully connected noise predictor: ``flatten(z_t)`` concatenated with a sinusoidal embedding of ``t``, ``hidden_layers`` SiLU layers of ``width`` units, and a linear output reshaped to ``(K, L)``.

    Gradients are computed by explicit reverse-mode passes over this fixed stack.

    :param K: Number of channels.
    :type K: int
    :param L: Horizon.
    :type L: int
    :param schedule: The diffusion schedule.
    :type schedule: Schedule
    :param hidden_layers: Number of hidden layers.
    :type hidden_layers: int, optional
    :param width: Units per hidden layer.
    :type width: int, optional
    :param time_embedding_dim: Width of the step embedding.
    :type time_embedding_dim: int, optional
    :param seed: Seed of the weight initialization.
    :type seed: int, optional
    :param params: Parameters to use instead of a fresh initialization.
    :type params: dict[str, numpy.ndarray] | None, optional

    :ivar params: Weights ``W<i>`` and biases ``b<i>`` per layer.
    :vartype params: dict[str, numpy.ndarray]
    :ivar iteration: Training iterations performed so far.
    :vartype iteration: int
    :ivar training_log: One row per evaluation interval (``iteration``, ``loss``, ``smoothed_loss``).
    :vartype training_log: pandas.DataFrame
    """

    def __init__(self, K: int, L: int, schedule: Schedule, hidden_layers: int = 3, width: int = 256,
                 time_embedding_dim: int = 32, seed: int = 0,
                 params: dict[str, np.ndarray] | None = None) -> None:
        super().__init__(K, L, schedule)
        self.hidden_layers: int = int(hidden_layers)
        self.width: int = int(width)
        self.time_embedding_dim: int = int(time_embedding_dim)
        sizes = self.layer_sizes
        if params is None:
            rng = np.random.default_rng(seed)
            params = {}
            for i in range(len(sizes) - 1):
                params[f"W{i}"] = rng.standard_normal((sizes[i], sizes[i + 1])) / math.sqrt(sizes[i])
                params[f"b{i}"] = np.zeros(sizes[i + 1])
        else:
            for i in range(len(sizes) - 1):
                expected = {f"W{i}": (sizes[i], sizes[i + 1]), f"b{i}": (sizes[i + 1],)}
                for name, shape in expected.items():
                    if name not in params or np.shape(params[name]) != shape:
                        raise ShapeMismatchError(
                            f"Parameter '{name}' must have shape {shape}")
            params = {name: np.array(value, dtype=float) for name, value in params.items()}
        self.params: dict[str, np.ndarray] = params
        self.iteration: int = 0
        self.smoothed_loss: float | None = None
        self.optimizer: AdamOptimizer | None = None
        self.training_log: pd.DataFrame = pd.DataFrame(
            columns=['iteration', 'loss', 'smoothed_loss'])
        logger.info(f"LearnedDenoiser with {self.parameter_count} parameters "
                    f"(K={K}, L={L}, {hidden_layers}x{width})")

    @property
    def layer_sizes(self) -> list[int]:
        return ([self.K * self.L + self.time_embedding_dim]
                + [self.width] * self.hidden_layers + [self.K * self.L])

    @property
    def n_layers(self) -> int:
        return self.hidden_layers + 1

    @property
    def parameter_count(self) -> int:
        return int(sum(value.size for value in self.params.values()))

    def _forward(self, z: np.ndarray, t: Any) -> tuple[np.ndarray, tuple[list, list]]:
        batch = z.shape[0]
        steps = np.broadcast_to(np.asarray(t, dtype=float), (batch,))
        h = np.concatenate([z.reshape(batch, -1), time_embedding(steps, self.time_embedding_dim)], axis=1)
        inputs, pre_activations = [], []
        for i in range(self.n_layers):
            inputs.append(h)
            a = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            if i < self.n_layers - 1:
                pre_activations.append(a)
                h = a * expit(a)
            else:
                h = a
        return h, (inputs, pre_activations)

    def _backward(self, grad_out: np.ndarray, cache: tuple[list, list]) -> dict[str, np.ndarray]:
        inputs, pre_activations = cache
        grads: dict[str, np.ndarray] = {}
        g = grad_out
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                g = g * _silu_derivative(pre_activations[i])
            grads[f"W{i}"] = inputs[i].T @ g
            grads[f"b{i}"] = g.sum(axis=0)
            if i > 0:
                g = g @ self.params[f"W{i}"].T
        return grads

    def _predict(self, z: np.ndarray, t: int) -> np.ndarray:
        out, _ = self._forward(z, t)
        return out.reshape(z.shape)

    def loss(self, z_t: np.ndarray, t: np.ndarray, eps: np.ndarray) -> float:
        """
        Mean squared error between ``eps`` and the prediction for a batch with per-sample steps.
        """
        out, _ = self._forward(np.asarray(z_t, dtype=float), t)
        return float(np.mean((out - np.asarray(eps).reshape(out.shape)) ** 2))

    def loss_and_gradients(self, z_t: np.ndarray, t: np.ndarray,
                           eps: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
        """
        Training objective of one batch and its gradients with respect to every parameter.

        :param z_t: Noised batch ``(B, K, L)``.
        :param t: Steps ``(B,)``.
        :param eps: The noise that produced ``z_t``, ``(B, K, L)``.
        :return: The mean squared error and a gradient per parameter name.
        :rtype: tuple[float, dict[str, numpy.ndarray]]
        """
        out, cache = self._forward(np.asarray(z_t, dtype=float), t)
        diff = out - np.asarray(eps, dtype=float).reshape(out.shape)
        loss = float(np.mean(diff ** 2))
        return loss, self._backward(2.0 * diff / diff.size, cache)

    def metadata(self) -> dict[str, Any]:
        result = super().metadata()
        result.update({'hidden_layers': self.hidden_layers, 'width': self.width,
                       'time_embedding_dim': self.time_embedding_dim,
                       'parameter_count': self.parameter_count})
        return result

    def save(self, path: str) -> None:
        """
        Write a checkpoint: parameters and optimizer moments to ``<path>.npz`` and a JSON manifest (format version, shapes, schedule, iteration, optimizer step, training log) to ``<path>.json``.
        """
        npz_path, manifest_path = checkpoint_paths(path)
        directory = os.path.dirname(npz_path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        arrays = dict(self.params)
        if self.optimizer is not None:
            arrays.update(self.optimizer.state_arrays())
        np.savez(npz_path, **arrays)
        manifest = {
            'format_version': CHECKPOINT_FORMAT_VERSION,
            'architecture': self.metadata(),
            'schedule': self.schedule.to_dict(),
            'parameter_shapes': {name: list(value.shape) for name, value in self.params.items()},
            'iteration': self.iteration,
            'smoothed_loss': self.smoothed_loss,
            'optimizer': None if self.optimizer is None else {
                'step': self.optimizer.step, 'learning_rate': self.optimizer.learning_rate,
                'beta1': self.optimizer.beta1, 'beta2': self.optimizer.beta2,
                'eps': self.optimizer.eps},
            'training_log': self.training_log.to_dict(orient='list'),
        }
        with open(manifest_path, 'w') as file:
            json.dump(manifest, file, indent=4)
        logger.info(f"Saved checkpoint at iteration {self.iteration} to '{npz_path}'")

    @classmethod
    def load(cls, path: str) -> Self:
        """
        Read a checkpoint written by :meth:`save`.

        :raises CheckpointError: If a file is missing, unreadable, of another format version or inconsistent with its manifest.
        """
        npz_path, manifest_path = checkpoint_paths(path)
        try:
            with open(manifest_path, 'r') as file:
                manifest = json.load(file)
            with np.load(npz_path) as archive:
                arrays = {name: archive[name] for name in archive.files}
        except (OSError, ValueError, zipfile.BadZipFile, json.JSONDecodeError) as error:
            raise CheckpointError(f"Cannot read checkpoint '{path}': {error}")
        if manifest.get('format_version') != CHECKPOINT_FORMAT_VERSION:
            raise CheckpointError(
                f"Checkpoint format {manifest.get('format_version')} is not supported")
        try:
            architecture = manifest['architecture']
            shapes = manifest['parameter_shapes']
            params = {name: arrays[name] for name in shapes}
            for name, shape in shapes.items():
                if list(params[name].shape) != shape:
                    raise CheckpointError(f"Parameter '{name}' does not match its manifest shape")
            denoiser = cls(architecture['K'], architecture['L'], Schedule.from_dict(manifest['schedule']),
                           hidden_layers=architecture['hidden_layers'], width=architecture['width'],
                           time_embedding_dim=architecture['time_embedding_dim'], params=params)
        except (KeyError, TypeError, ShapeMismatchError) as error:
            raise CheckpointError(f"Checkpoint '{path}' is inconsistent: {error}")
        denoiser.iteration = int(manifest.get('iteration', 0))
        denoiser.smoothed_loss = manifest.get('smoothed_loss')
        if (optimizer := manifest.get('optimizer')) is not None:
            denoiser.optimizer = AdamOptimizer(optimizer['learning_rate'], optimizer['beta1'],
                                               optimizer['beta2'], optimizer['eps'])
            denoiser.optimizer.load_state_arrays(arrays, optimizer['step'])
        denoiser.training_log = pd.DataFrame(manifest.get('training_log') or
                                             {'iteration': [], 'loss': [], 'smoothed_loss': []})
        return denoiser


def checkpoint_paths(path: str) -> tuple[str, str]:
    """
    ``(<root>.npz, <root>.json)`` for a checkpoint path given with or without the ``.npz`` suffix.
    """
    root = path[:-4] if path.endswith('.npz') else path
    return f"{root}.npz", f"{root}.json"


def train_denoiser(ds: Dataset, schedule: Schedule, cfg: TrainingConfig,
                   denoiser: LearnedDenoiser | None = None,
                   show_progress: bool = False) -> LearnedDenoiser:
    """
    Train a :class:`LearnedDenoiser` on the noise prediction objective.

    Each iteration draws a batch of dataset indices, steps uniform on ``1..T`` and standard normal noise from a generator keyed by ``(cfg.seed, iteration)``, so a run resumed from a checkpoint continues exactly as an uninterrupted one.

    :param ds: Training data, normally normalized.
    :type ds: Dataset
    :param schedule: The diffusion schedule.
    :type schedule: Schedule
    :param cfg: Hyperparameters.
    :type cfg: TrainingConfig
    :param denoiser: A model to continue training (e.g. loaded from a checkpoint); a fresh one is built otherwise.
    :type denoiser: LearnedDenoiser | None, optional
    :param show_progress: Show a progress bar.
    :type show_progress: bool, optional
    :return: The trained model, with ``training_log`` extended.
    :rtype: LearnedDenoiser
    :raises DatasetError: If the dataset is empty.
    :raises ShapeMismatchError: If ``denoiser`` does not fit the dataset.
    :raises TrainingDivergenceError: If the loss becomes NaN or infinite; the error carries the last finite parameters.
    """
    ds.require_samples()
    if ds.normalization is None:
        logger.warning("Training on a dataset without normalization record")
    if denoiser is None:
        denoiser = LearnedDenoiser(ds.K, ds.L, schedule, hidden_layers=cfg.hidden_layers,
                                   width=cfg.width, time_embedding_dim=cfg.time_embedding_dim,
                                   seed=cfg.seed)
    elif denoiser.sample_shape != ds.sample_shape:
        raise ShapeMismatchError(
            f"Denoiser shape {denoiser.sample_shape} does not match dataset shape {ds.sample_shape}")
    if denoiser.optimizer is None:
        denoiser.optimizer = AdamOptimizer(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)

    data = ds.to_array()
    rows = denoiser.training_log.to_dict(orient='records')
    smoothed = denoiser.smoothed_loss
    start = denoiser.iteration
    stop = start + cfg.iterations
    last_finite = {'iteration': start, 'params': {k: v.copy() for k, v in denoiser.params.items()}}

    for iteration in tqdm(range(start, stop), desc="Training", disable=not show_progress):
        rng = noise_generator(cfg.seed, 0, NOISE_STREAM_TRAINING, iteration)
        indices = rng.integers(0, len(data), size=cfg.batch_size)
        steps = rng.integers(1, schedule.T + 1, size=cfg.batch_size)
        eps = rng.standard_normal((cfg.batch_size,) + ds.sample_shape)
        a = schedule.alpha_bar[steps][:, None, None]
        z_t = np.sqrt(a) * data[indices] + np.sqrt(1.0 - a) * eps

        loss, grads = denoiser.loss_and_gradients(z_t, steps, eps)
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingDivergenceError(iteration, last_finite)
        smoothed = loss if smoothed is None else cfg.ema_decay * smoothed + (1.0 - cfg.ema_decay) * loss

        if iteration % cfg.eval_interval == 0 or iteration == stop - 1:
            rows.append({'iteration': iteration, 'loss': loss, 'smoothed_loss': smoothed})
            last_finite = {'iteration': iteration,
                           'params': {k: v.copy() for k, v in denoiser.params.items()}}
            logger.debug(f"iteration {iteration}: loss {loss:.6g}, smoothed {smoothed:.6g}")
        denoiser.optimizer.update(denoiser.params, grads)

    denoiser.iteration = stop
    denoiser.smoothed_loss = smoothed
    denoiser.training_log = pd.DataFrame(rows, columns=['iteration', 'loss', 'smoothed_loss'])
    if len(rows) >= 2 and not rows[-1]['smoothed_loss'] < rows[0]['smoothed_loss']:
        logger.warning(
            f"Smoothed loss did not decrease ({rows[0]['smoothed_loss']:.6g} -> {rows[-1]['smoothed_loss']:.6g})")
    logger.info(f"Trained {cfg.iterations} iterations, smoothed loss {smoothed}")
    return denoiser


def gradient_check(denoiser: LearnedDenoiser, z_t: np.ndarray, t: np.ndarray, eps: np.ndarray,
                   count: int = 100, h: float = 1e-5, seed: int = 0) -> float:
    """
    Compare analytic gradients of the training objective with central finite differences on ``count`` randomly selected parameter entries.

    :return: The largest relative discrepancy, ``|g - g_fd| / max(|g| + |g_fd|, 1e-5)``.
    :rtype: float
    """
    _, grads = denoiser.loss_and_gradients(z_t, t, eps)
    rng = np.random.default_rng(seed)
    names = sorted(denoiser.params)
    sizes = np.array([denoiser.params[name].size for name in names])
    worst = 0.0
    for _ in range(count):
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        flat = denoiser.params[name].reshape(-1)
        index = int(rng.integers(flat.size))
        original = flat[index]
        flat[index] = original + h
        upper = denoiser.loss(z_t, t, eps)
        flat[index] = original - h
        lower = denoiser.loss(z_t, t, eps)
        flat[index] = original
        numeric = (upper - lower) / (2.0 * h)
        analytic = grads[name].reshape(-1)[index]
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-5))
    return worst
