"""Score-distillation refinement of the field priors."""

from .loop import (
    FieldScene,
    IdentityScene,
    LRSchedule,
    NumericalAbort,
    RefineConfig,
    TraceRow,
    lr_schedule,
    refine_loop,
    run_vsd,
    vsd_pixel_gradient,
    write_trace_csv,
)
from .providers import (
    AnalyticGaussianScore,
    ExternalScoreProvider,
    ProviderKind,
    ScoreProvider,
    TrainableScoreNet,
    analytic_gaussian_score,
    lora_regression_step,
    predict_epsilon,
)
from .schedule import DiffusionSchedule, Parameterization, add_noise, epsilon_from_v, v_from_epsilon

__all__ = [
    "add_noise",
    "analytic_gaussian_score",
    "AnalyticGaussianScore",
    "DiffusionSchedule",
    "epsilon_from_v",
    "ExternalScoreProvider",
    "FieldScene",
    "IdentityScene",
    "lora_regression_step",
    "lr_schedule",
    "LRSchedule",
    "NumericalAbort",
    "Parameterization",
    "predict_epsilon",
    "ProviderKind",
    "refine_loop",
    "RefineConfig",
    "run_vsd",
    "ScoreProvider",
    "TraceRow",
    "TrainableScoreNet",
    "v_from_epsilon",
    "vsd_pixel_gradient",
    "write_trace_csv",
]
