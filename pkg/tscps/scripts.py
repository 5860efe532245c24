import argparse
import json
import os
import sys
from typing import Any, Callable, Optional

import numpy as np
import pandas as pd

from .analysis import median_error_non_increasing, sweep
from .benchmark import ordering_checks, run_benchmark, summarize
from .config import DEFAULT_CONFIG_FILE, RESOLVED_CONFIG_NAME, RunConfig
from .constraints import ConstraintSet, extract_constraints
from .denoiser import Denoiser, GaussianDenoiser, LearnedDenoiser, train_denoiser
from .errors import AcceptanceError, ConfigError, NumericalFailureError, ScheduleError, TscpsError
from .logging_config import logger, set_console_level
from .metrics import evaluate_batch
from .report import Report
from .sampler import (METHOD_LABELS, METHODS, SampleReport, reports_frame, reports_to_dataset, sample_batch,
                      select_guidance_weight)
from .schedule import describe
from .series import (Dataset, apply_normalization, generate_waveforms, normalize, read_csv, split_dataset,
                     write_csv)

FORMATS = ['auto', 'csv', 'json', 'html', 'xlsx']
CONSTRAINTS_FILE = 'constraints.json'
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2
EXIT_ACCEPTANCE = 3


class CommandParser(argparse.ArgumentParser):
    """
    Argument parser that reports usage errors with exit code 1 like every other configuration problem.
    """

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config_keys_help() -> str:
    with open(DEFAULT_CONFIG_FILE, 'r') as file:
        defaults = json.load(file)
    lines = ["config keys (defaults), settable with --set KEY=VALUE:"]

    def walk(node: dict[str, Any], prefix: str) -> None:
        for key, value in node.items():
            if isinstance(value, dict):
                walk(value, f"{prefix}{key}.")
            else:
                lines.append(f"  {prefix}{key} = {json.dumps(value)}")

    walk(defaults, '')
    lines.append("precedence: defaults < --config file < command flags < --set")
    return '\n'.join(lines)


def _parser(description: str) -> CommandParser:
    parser = CommandParser(description=description, epilog=_config_keys_help(),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-c", "--config", type=str, default=None,
                        help="JSON run config merged over the packaged defaults.")
    parser.add_argument("--set", action='append', default=[], metavar="KEY=VALUE",
                        help="Override one config key, e.g. --set sampler.eta=0.5. Can be used multiple times.")
    parser.add_argument("-o", "--output-dir", type=str, default=None,
                        help="Directory for every output of the run. Created when missing.")
    parser.add_argument("--seed", type=int, default=None,
                        help="Global seed.")
    parser.add_argument("--threads", type=int, default=None,
                        help="Worker threads. Defaults to one per CPU.")
    parser.add_argument("-v", "--verbose", action='count', default=0,
                        help="Log to the console at INFO (-v) or DEBUG (-vv) level.")
    parser.add_argument("--show-progress", action='store_true', default=None,
                        help="Show progress bars.")
    parser.add_argument("-f", "--format", choices=FORMATS, default='auto',
                        help="Format of result tables (csv, json, html, xlsx). Defaults to 'auto' (csv).")
    return parser


def _resolve_config(args: argparse.Namespace, flags: Optional[dict[str, Any]] = None) -> RunConfig:
    """
    Build the run config of a command: packaged defaults, then the ``--config`` file, then explicit flags, then ``--set`` overrides. The result is written to ``resolved_config.json`` in the output directory.

    :raises ConfigError: For unknown keys, malformed overrides or invalid values.
    """
    if args.verbose:
        set_console_level('DEBUG' if args.verbose > 1 else 'INFO')
    config = RunConfig(settings_file=args.config)
    explicit = {'output_dir': args.output_dir, 'seed': args.seed, 'threads': args.threads,
                'show_progress': args.show_progress}
    explicit.update(flags or {})
    for key, value in explicit.items():
        if value is not None:
            config.override(key, value)
    for item in args.set:
        key, separator, value = item.partition('=')
        if not separator or not key:
            raise ConfigError(f"Override '{item}' is not of the form KEY=VALUE")
        config.override(key.strip(), value)
    config.validate_configuration()

    os.makedirs(config.settings['output_dir'], exist_ok=True)
    config.save_as_json(config.output_path(RESOLVED_CONFIG_NAME))
    return config


def _run_command(command: Callable[[], Any]) -> int:
    """
    Run a command and map its outcome to an exit code: 0 on success, 1 for usage, configuration and input errors, 2 for numerical failures and 3 for failed acceptance checks.
    """
    try:
        command()
    except AcceptanceError as error:
        logger.error(f"Acceptance check failed: {error}")
        return EXIT_ACCEPTANCE
    except NumericalFailureError as error:
        logger.error(f"Numerical failure: {error}")
        return EXIT_NUMERICAL
    except (TscpsError, OSError, ValueError) as error:
        logger.error(f"{type(error).__name__}: {error}")
        return EXIT_USAGE
    return EXIT_OK


def export_table(table: pd.DataFrame, output_file: str, file_format: str = 'auto') -> None:
    """
    Write a result table in the given format.

    :param table: The table.
    :type table: pandas.DataFrame
    :param output_file: Target path.
    :type output_file: str
    :param file_format: One of ``'auto'``, ``'csv'``, ``'json'``, ``'html'`` or ``'xlsx'``. With ``'auto'`` the format is inferred from the file extension.
    :type file_format: str, optional
    :raises ConfigError: If the format is not supported.
    """
    if file_format == 'auto':
        file_format = os.path.splitext(output_file)[-1][1:]

    if file_format == 'csv':
        table.to_csv(output_file, index=False)
    elif file_format == 'json':
        table.to_json(output_file, orient="records", lines=True)
    elif file_format == 'html':
        table.to_html(output_file, index=False)
    elif file_format == 'xlsx':
        table.to_excel(output_file, index=False)
    else:
        raise ConfigError(f"Unsupported table format '{file_format}'. Valid formats are: {', '.join(FORMATS[1:])}.")
    logger.info(f"Table with {len(table)} rows written to '{output_file}'")


def table_path(config: RunConfig, stem: str, file_format: str = 'auto') -> str:
    """
    Output path of the result table ``stem``; ``'auto'`` writes CSV.
    """
    extension = 'csv' if file_format == 'auto' else file_format
    return config.output_path(f"{stem}.{extension}")


def load_denoiser(config: RunConfig) -> Denoiser:
    """
    The denoiser named by the ``denoiser`` section: the Gaussian one with ``gaussian_mu`` (zeros of the data horizon when ``null``), or the learned checkpoint in the output directory.

    :raises CheckpointError: If the checkpoint cannot be read.
    """
    settings = config['denoiser']
    if settings['type'] == 'gaussian':
        mu = settings['gaussian_mu']
        if mu is None:
            mu = np.zeros(int(config['data']['L']))
        return GaussianDenoiser(mu, config.schedule())
    return LearnedDenoiser.load(config.output_path(settings['checkpoint']))


def resolve_constraints(config: RunConfig) -> ConstraintSet:
    """
    The constraints of a sampling run: the file ``constraints.file`` if set, else the features extracted from sample ``reference_index`` of ``reference_file`` (the first ``n_constraints`` of them when set), else an empty set.

    :raises ConfigError: If the reference index is outside the reference file.
    """
    settings = config['constraints']
    constraint_set = config.constraint_set()
    if constraint_set is not None:
        return constraint_set
    if settings['reference_file'] is None:
        return ConstraintSet(budget=float(settings['budget']))

    references = read_csv(config.output_path(settings['reference_file']))
    index = int(settings['reference_index'])
    if not 0 <= index < len(references):
        raise ConfigError(f"constraints.reference_index {index} is outside the {len(references)} reference samples")
    constraint_set = extract_constraints(references.to_array()[index], settings['kinds'],
                                         threshold=settings['threshold'], budget=float(settings['budget']))
    if settings['n_constraints'] is not None:
        constraint_set = constraint_set.head(int(settings['n_constraints']))
    logger.info(f"Extracted {len(constraint_set)} constraints from reference {index}")
    return constraint_set


def gen_data(config: RunConfig) -> tuple[Dataset, Dataset, Dataset]:
    """
    Generate the waveform dataset and write its train, validation and test splits as CSV.

    With ``data.count`` set the samples are split 80/10/10, otherwise the split sizes are ``data.train``, ``data.val`` and ``data.test``. When ``data.normalize`` is on, all splits are normalized with the training statistics and the record is written next to each file.

    :param config: The run configuration.
    :type config: RunConfig
    :return: The train, validation and test splits as written.
    :rtype: tuple[Dataset, Dataset, Dataset]
    """
    data = config['data']
    if data['count'] is not None:
        total = int(data['count'])
        fractions = (0.8, 0.1, 0.1)
    else:
        sizes = [int(data['train']), int(data['val']), int(data['test'])]
        total = sum(sizes)
        if total < 1 or min(sizes) < 0:
            raise ConfigError(f"Split sizes must be nonnegative with a positive total, got {sizes}")
        fractions = tuple(size / total for size in sizes)

    seed = int(config.settings['seed'])
    ds = generate_waveforms(total, int(data['L']), (float(data['amp_min']), float(data['amp_max'])), seed)
    train, val, test = split_dataset(ds, fractions, seed=seed)
    if data['normalize']:
        train = normalize(train)
        val = apply_normalization(val, train.normalization)
        test = apply_normalization(test, train.normalization)

    splits = (train, val, test)
    for split, name in zip(splits, ('train_file', 'val_file', 'test_file')):
        write_csv(split, config.output_path(data[name]))
    logger.info(f"Wrote {len(train)}/{len(val)}/{len(test)} train/val/test samples to "
                f"'{config.settings['output_dir']}'")
    return splits


def gen_data_cli(argv: Optional[list[str]] = None) -> None:
    """
    CLI entry point for :func:`gen_data`.
    """
    parser = _parser("Generate the waveform dataset and write train/val/test CSV splits.")
    parser.add_argument("--count", type=int, default=None,
                        help="Total number of samples, split 80/10/10. Overrides data.count.")
    args = parser.parse_args(argv)
    sys.exit(_run_command(lambda: gen_data(_resolve_config(args, {'data.count': args.count}))))


def train(config: RunConfig, file_format: str = 'auto') -> LearnedDenoiser:
    """
    Train the learned denoiser on the training split, save the checkpoint and the loss curve.

    With ``training.resume`` the checkpoint is loaded first and training continues from its iteration.

    :raises CheckpointError: If resuming from a missing or corrupt checkpoint.
    :raises TrainingDivergenceError: If the loss diverges.
    """
    train_ds = read_csv(config.output_path(config['data']['train_file']))
    checkpoint = config.output_path(config['denoiser']['checkpoint'])
    denoiser = None
    if config['training']['resume']:
        denoiser = LearnedDenoiser.load(checkpoint)
        logger.info(f"Resuming training at iteration {denoiser.iteration}")
    denoiser = train_denoiser(train_ds, config.schedule(), config.training_config(), denoiser,
                              show_progress=bool(config.settings['show_progress']))
    denoiser.save(checkpoint)
    export_table(denoiser.training_log, table_path(config, 'training_log', file_format), file_format)
    return denoiser


def train_cli(argv: Optional[list[str]] = None) -> None:
    """
    CLI entry point for :func:`train`.
    """
    parser = _parser("Train the learned denoiser and write a checkpoint and its loss curve.")
    parser.add_argument("--iterations", type=int, default=None,
                        help="Training iterations. Overrides training.iterations.")
    parser.add_argument("--resume", action='store_true', default=None,
                        help="Continue from the checkpoint in the output directory.")
    args = parser.parse_args(argv)
    flags = {'training.iterations': args.iterations, 'training.resume': args.resume}
    sys.exit(_run_command(lambda: train(_resolve_config(args, flags), args.format)))


def _trace_table(reports: list[SampleReport]) -> pd.DataFrame:
    frames = []
    for report in reports:
        if report.trace is not None:
            frame = report.trace.drop(columns=['z0_hat', 'z0_pr'], errors='ignore')
            frame.insert(0, 'sample_index', report.sample_index)
            frames.append(frame)
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()


def sample(config: RunConfig, file_format: str = 'auto') -> Report:
    """
    Generate samples with the method ``sampler.method`` and write them as CSV together with a JSON report.

    The guidance baseline picks its weight by violation rate when ``sampler.guidance_weight`` is ``null``. The constraints used are written to ``constraints.json``; with ``sampler.trace`` the per-step diagnostics are written as a table.

    :return: The run report: method, violation and convergence rates, and one record per sample.
    :rtype: Report
    :raises ConstraintError: If ``'cps'`` is requested without constraints.
    :raises NumericalFailureError: If a trajectory stops being finite.
    """
    settings = config['sampler']
    method = settings['method']
    cfg = config.sampler_config()
    constraint_set = resolve_constraints(config)
    denoiser = None if method == 'cop' else load_denoiser(config)
    dataset = read_csv(config.output_path(config['data']['train_file'])) if method == 'cop' else None

    if method == 'guided' and settings['guidance_weight'] is None:
        weight, selection = select_guidance_weight(denoiser, constraint_set, cfg,
                                                   int(settings['guidance_selection_samples']))
        export_table(selection, table_path(config, 'guidance_selection', file_format), file_format)
        cfg = cfg.replace(guidance_weight=weight)

    if denoiser is not None:
        describe(denoiser.schedule, cfg.penalty)
    reports = sample_batch(method, int(settings['count']), cfg, denoiser, constraint_set, dataset)
    write_csv(reports_to_dataset(reports), config.output_path(settings['samples_file']))
    if len(constraint_set) > 0:
        constraint_set.save_as_json(config.output_path(CONSTRAINTS_FILE))
    if cfg.trace:
        export_table(_trace_table(reports), table_path(config, 'trace', file_format), file_format)

    frame = reports_frame(reports)
    report = Report({
        'method': method,
        'label': METHOD_LABELS[method],
        'count': len(reports),
        'n_constraints': len(constraint_set),
        'budget': constraint_set.budget,
        'guidance_weight': cfg.guidance_weight if method == 'guided' else None,
        'violation_rate': float((~frame['feasible']).mean()),
        'violation_mean': float(frame['violation_total'].mean()),
        'converged_rate': float(frame['converged'].mean()),
        'samples': [r.to_dict() for r in reports],
    }, comment="wall_time fields vary between runs")
    report.save_as_json(config.output_path(settings['report_file']))
    logger.info(f"{METHOD_LABELS[method]}: {len(reports)} samples, violation rate {report['violation_rate']:.3f}")
    return report


def sample_cli(argv: Optional[list[str]] = None) -> None:
    """
    CLI entry point for :func:`sample`.
    """
    parser = _parser("Generate samples with DDIM, CPS, guidance or the COP baselines.")
    parser.add_argument("--method", choices=list(METHODS), default=None,
                        help="Sampling method. Overrides sampler.method.")
    parser.add_argument("--count", type=int, default=None,
                        help="Number of samples. Overrides sampler.count.")
    parser.add_argument("--constraints", type=str, default=None,
                        help="Constraint set JSON file. Overrides constraints.file.")
    args = parser.parse_args(argv)
    flags = {'sampler.method': args.method, 'sampler.count': args.count, 'constraints.file': args.constraints}
    sys.exit(_run_command(lambda: sample(_resolve_config(args, flags), args.format)))


def evaluate(config: RunConfig, file_format: str = 'auto') -> Report:
    """
    Score generated samples against reference samples: DTW and SSIM per sample, violation statistics and the feature Fréchet distance.

    Sample ``i`` is paired with reference ``i``; surplus references are ignored. The constraints are ``constraints.file`` when set, else those written by the sample command, if any.

    :return: The aggregate metrics.
    :rtype: Report
    :raises ShapeMismatchError: If sample shapes differ or there are fewer references than samples (and more than one).
    """
    settings = config['metrics']
    generated = read_csv(config.output_path(settings['generated_file']))
    reference = read_csv(config.output_path(settings['reference_file']))
    if len(reference) > len(generated):
        reference = reference.subset(np.arange(len(generated)))

    constraint_set = config.constraint_set()
    if constraint_set is None and os.path.exists(config.output_path(CONSTRAINTS_FILE)):
        constraint_set = ConstraintSet(settings_file=config.output_path(CONSTRAINTS_FILE))

    table, metrics = evaluate_batch(generated, reference, constraint_set, int(settings['ssim_window']),
                                    float(settings['C1']), float(settings['C2']), settings['budget'])
    export_table(table, table_path(config, 'metrics', file_format), file_format)
    report = Report(metrics.to_dict())
    report.save_as_json(config.output_path('metrics.json'))
    logger.info(f"Evaluation of {len(generated)} samples:\n{report}")
    return report


def evaluate_cli(argv: Optional[list[str]] = None) -> None:
    """
    CLI entry point for :func:`evaluate`.
    """
    parser = _parser("Compute DTW, SSIM, violation and feature distance metrics of generated samples.")
    parser.add_argument("--generated", type=str, default=None,
                        help="Generated samples CSV. Overrides metrics.generated_file.")
    parser.add_argument("--reference", type=str, default=None,
                        help="Reference samples CSV. Overrides metrics.reference_file.")
    args = parser.parse_args(argv)
    flags = {'metrics.generated_file': args.generated, 'metrics.reference_file': args.reference}
    sys.exit(_run_command(lambda: evaluate(_resolve_config(args, flags), args.format)))


def verify(config: RunConfig, file_format: str = 'auto') -> Report:
    """
    Check the convergence guarantee of constrained sampling on random Gaussian instances with affine equality constraints, for every ``k`` of ``analysis.ks``, together with the norm bounds of the step matrices.

    The sweep table (measured error against bound per instance and ``k``) and a JSON summary are written before any failure is raised.

    :raises ScheduleError: If some ``k`` is not greater than 1.
    :raises AcceptanceError: If an instance violates its bound or a norm check, or the median error increases with ``k``.
    """
    settings = config['analysis']
    ks = tuple(float(k) for k in settings['ks'])
    if not ks or any(k <= 1.0 for k in ks):
        raise ScheduleError(f"Every k must be greater than 1, got {list(ks)}")

    table = sweep(int(settings['instances']), ks, int(settings['steps']),
                  (int(settings['n_min']), int(settings['n_max'])), int(settings['m_max']),
                  seed=int(config.settings['seed']), norm_method=settings['norm_method'],
                  threads=config.threads(), show_progress=bool(config.settings['show_progress']))
    export_table(table, table_path(config, 'verify', file_format), file_format)

    monotone = median_error_non_increasing(table)
    failed = table[~table['passed'].astype(bool)]
    report = Report({
        'cases': len(table),
        'passed': int(table['passed'].sum()),
        'norms_passed': int(table['norms_passed'].astype(bool).sum()),
        'median_error_by_k': {str(k): v for k, v in table.groupby('k')['measured'].median().items()},
        'median_error_non_increasing': monotone,
        'failed_instances': failed[['instance', 'k']].to_dict(orient='records'),
    })
    report.save_as_json(config.output_path('verify_report.json'))
    if len(failed) > 0 or not monotone:
        raise AcceptanceError(f"{len(failed)} of {len(table)} cases failed"
                              + ("" if monotone else "; median error increases with k"),
                              dump=report.to_dict())
    return report


def verify_cli(argv: Optional[list[str]] = None) -> None:
    """
    CLI entry point for :func:`verify`. Exits with 3 if any check fails.
    """
    parser = _parser("Verify the convergence bound and the step matrix norm bounds on random instances.")
    parser.add_argument("--instances", type=int, default=None,
                        help="Number of random instances. Overrides analysis.instances.")
    parser.add_argument("--k", type=float, action='append', default=None,
                        help="Design parameter k > 1. Can be used multiple times. Overrides analysis.ks.")
    parser.add_argument("--steps", type=int, default=None,
                        help="Diffusion steps. Overrides analysis.steps.")
    args = parser.parse_args(argv)
    flags = {'analysis.instances': args.instances, 'analysis.ks': args.k, 'analysis.steps': args.steps}
    sys.exit(_run_command(lambda: verify(_resolve_config(args, flags), args.format)))


def benchmark(config: RunConfig, file_format: str = 'auto') -> Report:
    """
    Compare the samplers on the tracking protocol over the reference samples of ``metrics.reference_file`` and write the per-trial table, the summary table and the ordering checks.
    """
    bench = config.benchmark_config()
    denoiser = load_denoiser(config)
    references = read_csv(config.output_path(config['metrics']['reference_file']))
    train_ds = read_csv(config.output_path(config['data']['train_file'])) if 'cop' in bench.methods else None

    table = run_benchmark(denoiser, references, train_ds, bench, config.sampler_config(),
                          show_progress=bool(config.settings['show_progress']))
    summary = summarize(table)
    export_table(table, table_path(config, 'benchmark', file_format), file_format)
    export_table(summary, table_path(config, 'benchmark_summary', file_format), file_format)

    checks = ordering_checks(summary)
    for name, outcome in checks.items():
        if not outcome:
            logger.warning(f"Benchmark ordering check '{name}' did not hold")
    report = Report({'benchmark': bench.to_dict(), 'checks': checks,
                     'summary': summary.to_dict(orient='records')})
    report.save_as_json(config.output_path('benchmark_report.json'))
    return report


def benchmark_cli(argv: Optional[list[str]] = None) -> None:
    """
    CLI entry point for :func:`benchmark`.
    """
    parser = _parser("Compare DDIM, CPS, guidance and the COP baselines on extracted constraints.")
    parser.add_argument("--trials", type=int, default=None,
                        help="Number of reference samples. Overrides benchmark.trials.")
    args = parser.parse_args(argv)
    sys.exit(_run_command(lambda: benchmark(_resolve_config(args, {'benchmark.trials': args.trials}),
                                            args.format)))
