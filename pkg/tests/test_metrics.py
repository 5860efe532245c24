import numpy as np
import pytest

from tscps.constraints import AvailableConstraints, ConstraintSet
from tscps.errors import ConfigError, DatasetError, ShapeMismatchError
from tscps.metrics import (FEATURE_NAMES, dtw, evaluate_batch, feature_frechet, feature_vector, ssim_1d,
                           violation_stats)
from tscps.series import Dataset, generate_waveforms


def warping_paths(n, m):
    """
    Every monotone alignment of ``n`` and ``m`` steps, as lists of index pairs.
    """
    if n == 1 and m == 1:
        return [[(0, 0)]]
    paths = []
    for di, dj in ((1, 0), (0, 1), (1, 1)):
        if n - di >= 1 and m - dj >= 1:
            paths += [path + [(n - 1, m - 1)] for path in warping_paths(n - di, m - dj)]
    return paths


def brute_force_dtw(a, b):
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    return min(sum(np.linalg.norm(a[:, i] - b[:, j]) for i, j in path)
               for path in warping_paths(a.shape[1], b.shape[1]))


@pytest.fixture
def waveforms():
    return generate_waveforms(40, L=16, seed=21)


def test_dtw_examples():
    assert dtw([0.0, 0.0, 1.0], [0.0, 1.0]) == 0.0
    assert dtw([0.0], [3.0]) == 3.0
    assert dtw([[0.0, 1.0], [0.0, 1.0]], [[0.0, 0.0], [0.0, 1.0]]) == pytest.approx(1.0)


def test_dtw_matches_brute_force():
    rng = np.random.default_rng(0)
    for n in range(1, 6):
        for m in range(1, 6):
            a, b = rng.standard_normal((2, n)), rng.standard_normal((2, m))
            assert dtw(a, b) == pytest.approx(brute_force_dtw(a, b))
            assert dtw(a, b) == pytest.approx(dtw(b, a))


def test_dtw_channel_mismatch():
    with pytest.raises(ShapeMismatchError):
        dtw(np.zeros((2, 4)), np.zeros((1, 4)))


def test_ssim_of_identical_series(waveforms):
    x = waveforms.to_array()[0]
    assert ssim_1d(x, x) == pytest.approx(1.0, abs=1e-12)
    y = waveforms.to_array()[1]
    assert -1.0 <= ssim_1d(x, y) <= 1.0


@pytest.mark.parametrize("window", [0, 4, 17])
def test_ssim_window_validation(waveforms, window):
    x = waveforms.to_array()[0]
    with pytest.raises(ConfigError):
        ssim_1d(x, x, window=window)


def test_ssim_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        ssim_1d(np.zeros((1, 8)), np.zeros((1, 9)))


def test_feature_vector():
    features = feature_vector([[1.0, 2.0, 3.0, 4.0]])
    assert features.size == len(FEATURE_NAMES)
    assert features[0] == 2.5
    assert features[2:4].tolist() == [1.0, 4.0]
    assert features[5] == 1.0


def test_frechet_of_identical_sets(waveforms):
    assert feature_frechet(waveforms, waveforms) == pytest.approx(0.0, abs=1e-6)


def test_frechet_of_shifted_sets(waveforms):
    shifted = Dataset(waveforms.to_array() + 2.0)
    # mean, min and max move by 2, the other features are unchanged
    assert feature_frechet(waveforms, shifted) == pytest.approx(12.0, abs=1e-5)


def test_frechet_needs_two_samples(waveforms):
    with pytest.raises(DatasetError):
        feature_frechet(waveforms.to_array()[:1], waveforms)


def test_violation_stats():
    level = ConstraintSet.from_list([AvailableConstraints.get('mean')(target=0.0)])
    samples = [np.zeros((1, 4)), np.full((1, 4), 0.5)]
    rate, magnitude = violation_stats(samples, level)
    assert rate == 0.5
    assert magnitude == pytest.approx((0.5 - 0.01) / 2)
    with pytest.raises(DatasetError):
        violation_stats([], level)


def test_evaluate_identical_batches(waveforms):
    bounded = ConstraintSet.from_list([AvailableConstraints.get('affine_inequality')(A=np.ones((1, 16)), b=[1000.0])])
    table, report = evaluate_batch(waveforms, waveforms, bounded)
    assert len(table) == 40
    assert list(table.columns) == ['sample', 'dtw', 'ssim', 'violation', 'violating']
    assert report.dtw == 0.0
    assert report.ssim == pytest.approx(1.0)
    assert report.violation_rate == 0.0
    assert report.feature_fd == pytest.approx(0.0, abs=1e-6)
    assert report.to_dict()['n_reference'] == 40


def test_evaluate_against_one_reference(waveforms):
    table, report = evaluate_batch(waveforms.to_array()[:3], waveforms.to_array()[:1])
    assert table.loc[0, 'dtw'] == 0.0
    assert 'violation' not in table.columns
    assert report.violation_rate is None
    assert report.feature_fd is None


def test_evaluate_rejects_mismatches(waveforms):
    values = waveforms.to_array()
    with pytest.raises(ShapeMismatchError):
        evaluate_batch(values[:3], values[:2])
    with pytest.raises(ShapeMismatchError):
        evaluate_batch(values[:3, :, :8], values[:3])
    with pytest.raises(DatasetError):
        evaluate_batch(values[:0], values[:1])
