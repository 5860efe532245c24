import numpy as np
import pandas as pd
import pytest

from tscps.benchmark import BENCHMARK_COLUMNS, BenchmarkConfig, ordering_checks, run_benchmark, summarize
from tscps.denoiser import GaussianDenoiser
from tscps.errors import ConfigError, DatasetError
from tscps.sampler import SamplerConfig
from tscps.schedule import linear_schedule
from tscps.series import generate_waveforms


def synthetic_table():
    rows = []
    for trial in range(4):
        for n, scale in ((1, 1.0), (10, 0.5)):
            rows.append({'trial': trial, 'method': 'cps', 'n_constraints': n, 'dtw': scale * (1 + trial),
                         'ssim': 0.9, 'violating': False, 'converged': True})
            rows.append({'trial': trial, 'method': 'cop', 'n_constraints': n, 'dtw': 5.0 + trial,
                         'ssim': 0.5, 'violating': False, 'converged': True})
            rows.append({'trial': trial, 'method': 'guided', 'n_constraints': n, 'dtw': 2.0,
                         'ssim': 0.7, 'violating': trial % 2 == 0, 'converged': True})
    return pd.DataFrame(rows)


@pytest.fixture
def denoiser():
    return GaussianDenoiser(np.zeros((1, 16)), linear_schedule(10))


def test_summarize():
    summary = summarize(synthetic_table())
    assert len(summary) == 6
    assert summary.columns[:3].tolist() == ['method', 'label', 'n_constraints']
    cps = summary[(summary['method'] == 'cps') & (summary['n_constraints'] == 1)].iloc[0]
    assert cps['label'] == 'CPS'
    assert cps['dtw_median'] == 2.5
    assert cps['trials'] == 4
    guided = summary[(summary['method'] == 'guided') & (summary['n_constraints'] == 10)].iloc[0]
    assert guided['violation_rate'] == 0.5


def test_ordering_checks():
    checks = ordering_checks(summarize(synthetic_table()))
    assert checks == {
        'dtw_cps_below_cop@1': True,
        'violation_guided_above_cps@1': True,
        'dtw_cps_below_cop@10': True,
        'violation_guided_above_cps@10': True,
        'dtw_cps_decreases_with_constraints': True,
    }


def test_ordering_checks_skip_missing_methods():
    table = synthetic_table()
    checks = ordering_checks(summarize(table[table['method'] != 'cop']))
    assert not any(name.startswith('dtw_cps_below_cop') for name in checks)


def test_run_benchmark(denoiser):
    references = generate_waveforms(2, L=16, seed=5)
    train = generate_waveforms(4, L=16, seed=6)
    bench = BenchmarkConfig(n_constraints=(1, 3), trials=2, guidance_weight=0.01)
    table = run_benchmark(denoiser, references, train, bench, SamplerConfig(seed=1))
    assert list(table.columns) == BENCHMARK_COLUMNS
    assert len(table) == 2 * 2 * 5
    cps = table[table['method'] == 'cps']
    assert not cps['violating'].any()
    guided = table[table['method'] == 'guided']
    assert (guided['guidance_weight'] == 0.01).all()
    assert table[table['method'] == 'ddim']['guidance_weight'].isna().all()


def test_run_benchmark_needs_training_data_for_cop(denoiser):
    references = generate_waveforms(2, L=16, seed=5)
    with pytest.raises(DatasetError):
        run_benchmark(denoiser, references, None, BenchmarkConfig(trials=1))


@pytest.mark.parametrize("settings", [
    {'methods': ['ddim', 'ddpm']},
    {'trials': 0},
    {'n_constraints': [0]},
    {'repeats': 3},
])
def test_benchmark_config_validation(settings):
    with pytest.raises(ConfigError):
        BenchmarkConfig.from_dict(settings)
