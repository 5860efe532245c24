import numpy as np
import pytest

from tscps.denoiser import (GaussianDenoiser, LearnedDenoiser, TrainingConfig, checkpoint_paths,
                            gradient_check, time_embedding, train_denoiser)
from tscps.errors import (CheckpointError, ConfigError, NumericalFailureError, ScheduleError,
                          ShapeMismatchError, TrainingDivergenceError)
from tscps.schedule import Schedule, harness_schedule, linear_schedule
from tscps.series import generate_waveforms, normalize


@pytest.fixture
def schedule():
    return linear_schedule(20)


@pytest.fixture
def dataset():
    return normalize(generate_waveforms(64, L=8, seed=1))


@pytest.fixture
def small_config():
    return TrainingConfig(iterations=10, batch_size=8, learning_rate=1e-3, eval_interval=2,
                          hidden_layers=2, width=16, time_embedding_dim=8, seed=4)


def test_gaussian_denoiser_examples():
    schedule = Schedule.from_alpha_bar([1.0, 0.36, 0.0])
    d = GaussianDenoiser([1.0], schedule)
    assert np.allclose(d.predict_noise([[2.0]], 1), [[1.12]])
    assert np.allclose(d.posterior_mean([[2.0]], 1), [[1.84]])


def test_gaussian_score():
    schedule = Schedule.from_alpha_bar([1.0, 0.36, 0.0])
    d = GaussianDenoiser([1.0], schedule)
    assert np.allclose(d.score([[2.0]], 1), [[-1.4]])
    # score = -eps / sqrt(1 - alpha_bar) for the exact denoiser
    assert np.allclose(d.score([[2.0]], 1), -d.predict_noise([[2.0]], 1) / 0.8)


def test_gaussian_posterior_mean_at_pure_noise():
    schedule = harness_schedule(4)
    mu = np.array([[0.5, -1.0, 2.0]])
    d = GaussianDenoiser(mu, schedule)
    # alpha_bar[T] = 0: the estimate is the data mean whatever the input
    assert np.allclose(d.posterior_mean(np.full((1, 3), 7.0), 4), mu)


def test_gaussian_estimate_matches_generic_formula(schedule):
    rng = np.random.default_rng(0)
    mu = rng.standard_normal((2, 5))
    d = GaussianDenoiser(mu, schedule)
    z = rng.standard_normal((3, 2, 5))
    for t in (1, 7, 20):
        eps, z0 = d.estimate(z, t)
        a = schedule.alpha_bar[t]
        assert np.allclose(z0, (z - np.sqrt(1.0 - a) * eps) / np.sqrt(a))


def test_denoiser_input_checks(schedule):
    d = GaussianDenoiser(np.zeros((1, 4)), schedule)
    with pytest.raises(ShapeMismatchError):
        d.predict_noise(np.zeros((1, 5)), 1)
    with pytest.raises(ScheduleError):
        d.predict_noise(np.zeros((1, 4)), 21)


def test_learned_posterior_mean_undefined_at_zero_alpha_bar():
    d = LearnedDenoiser(1, 4, harness_schedule(3), hidden_layers=1, width=4, time_embedding_dim=2)
    with pytest.raises(NumericalFailureError):
        d.posterior_mean(np.zeros((1, 4)), 3)


def test_time_embedding_shape():
    embedding = time_embedding(np.array([1, 2, 3]), 7)
    assert embedding.shape == (3, 7)
    assert np.all(embedding[:, -1] == 0.0)
    assert np.allclose(time_embedding(0, 4), [[0.0, 0.0, 1.0, 1.0]])


def test_gradient_check(schedule):
    rng = np.random.default_rng(2)
    d = LearnedDenoiser(2, 6, schedule, hidden_layers=2, width=12, time_embedding_dim=6, seed=5)
    z_t = rng.standard_normal((4, 2, 6))
    t = rng.integers(1, schedule.T + 1, size=4)
    eps = rng.standard_normal((4, 2, 6))
    assert gradient_check(d, z_t, t, eps, count=200) <= 1e-4


def test_training_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        TrainingConfig.from_dict({'iterations': 3, 'momentum': 0.9})
    with pytest.raises(ConfigError):
        TrainingConfig(learning_rate=0.0)
    config = TrainingConfig(iterations=3)
    assert TrainingConfig.from_dict(config.to_dict()) == config


def test_training_reduces_smoothed_loss(dataset, schedule):
    cfg = TrainingConfig(iterations=300, batch_size=32, learning_rate=3e-3, eval_interval=50,
                         ema_decay=0.9, hidden_layers=2, width=32, time_embedding_dim=8)
    d = train_denoiser(dataset, schedule, cfg)
    log = d.training_log
    assert list(log.columns) == ['iteration', 'loss', 'smoothed_loss']
    assert log['iteration'].tolist() == [0, 50, 100, 150, 200, 250, 299]
    assert log['smoothed_loss'].iloc[-1] < log['smoothed_loss'].iloc[0]
    assert d.iteration == 300


def test_checkpoint_round_trip(tmp_path, dataset, schedule, small_config):
    d = train_denoiser(dataset, schedule, small_config)
    path = str(tmp_path / "model.npz")
    d.save(path)
    loaded = LearnedDenoiser.load(path)
    z = np.random.default_rng(0).standard_normal((3, 1, 8))
    assert np.array_equal(loaded.predict_noise(z, 5), d.predict_noise(z, 5))
    assert loaded.iteration == d.iteration
    assert loaded.schedule == schedule
    assert loaded.training_log['iteration'].tolist() == d.training_log['iteration'].tolist()


def test_resumed_training_matches_uninterrupted(tmp_path, dataset, schedule, small_config):
    straight = train_denoiser(dataset, schedule, small_config)

    half = TrainingConfig(**{**small_config.to_dict(), 'iterations': 5})
    first = train_denoiser(dataset, schedule, half)
    path = str(tmp_path / "half")
    first.save(path)
    resumed = train_denoiser(dataset, schedule, half, denoiser=LearnedDenoiser.load(path))

    assert resumed.iteration == straight.iteration
    for name, value in straight.params.items():
        assert np.array_equal(resumed.params[name], value), f"parameter {name} differs"


def test_corrupt_checkpoint(tmp_path, dataset, schedule, small_config):
    path = str(tmp_path / "model")
    train_denoiser(dataset, schedule, small_config).save(path)
    npz_path, manifest_path = checkpoint_paths(path)
    with open(npz_path, 'wb') as file:
        file.write(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        LearnedDenoiser.load(path)
    with pytest.raises(CheckpointError):
        LearnedDenoiser.load(str(tmp_path / "missing"))


def test_training_shape_mismatch(dataset, schedule, small_config):
    d = LearnedDenoiser(1, 9, schedule, hidden_layers=1, width=4, time_embedding_dim=2)
    with pytest.raises(ShapeMismatchError):
        train_denoiser(dataset, schedule, small_config, denoiser=d)


def test_training_divergence_carries_last_parameters(dataset, schedule, small_config):
    d = LearnedDenoiser(1, 8, schedule, hidden_layers=2, width=16, time_embedding_dim=8)
    d.params['W0'][0, 0] = np.inf
    with pytest.raises(TrainingDivergenceError) as excinfo:
        train_denoiser(dataset, schedule, small_config, denoiser=d)
    assert excinfo.value.iteration == 0
    assert 'params' in excinfo.value.checkpoint
