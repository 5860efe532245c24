from . import constraint_kinds
from .analysis import (GaussianLinearInstance, norm_checks, random_instance, solve_x_star, sweep,
                       verify_theorem2)
from .benchmark import BenchmarkConfig, run_benchmark, summarize
from .config import DEFAULT_CONFIG_FILE, DEFAULT_RUN_CONFIG, RunConfig
from .constraints import (AvailableConstraints, Constraint, ConstraintSet, compile_affine,
                          extract_constraints, per_constraint_violation, violation)
from .denoiser import (Denoiser, GaussianDenoiser, LearnedDenoiser, TrainingConfig, posterior_mean,
                       predict_noise, train_denoiser)
from .metrics import MetricReport, dtw, evaluate_batch, feature_frechet, ssim_1d, violation_stats
from .projection import ProjectionConfig, ProjectionResult, Projector, closed_form_affine_eq, project
from .report import Report
from .sampler import (SampleReport, SamplerConfig, cop_project_baseline, cps_sample, ddim_sample,
                      guided_sample, sample_batch)
from .schedule import (PenaltySchedule, Schedule, linear_schedule, penalty_coefficient,
                       stochastic_sigma, theorem2_penalty)
from .series import Dataset, TimeSeries, generate_waveforms, normalize, read_csv, write_csv
