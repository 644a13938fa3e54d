"""Desk-scale laboratory for DDIM error propagation and iterative error correction."""

__version__ = "0.1.0"

from .analysis import (  # noqa: E402
    ErrorReport,
    contraction_constant,
    cumulative_error_prediction,
    error_curve,
    iec_error_bound,
    predicted_error_step,
    spectral_norm,
    step_amplification,
)
from .metrics import SampleSet, frechet_distance, reference_samples  # noqa: E402
from .models import GaussianMixtureModel, LinearGaussianModel, default_mixture  # noqa: E402
from .perturb import Injector, PerturbationConfig, quantize_vector  # noqa: E402
from .sampler import (  # noqa: E402
    IecConfig,
    Trajectory,
    ddim_step,
    iec_refine,
    sample_batch,
    sample_trajectory,
    select_iec_steps,
)
from .schedule import (  # noqa: E402
    NoiseSchedule,
    StepCoefficients,
    make_beta_schedule,
    select_timesteps,
    step_coeffs,
)

__all__ = [
    "ErrorReport", "contraction_constant", "cumulative_error_prediction", "error_curve",
    "iec_error_bound", "predicted_error_step", "spectral_norm", "step_amplification",
    "SampleSet", "frechet_distance", "reference_samples",
    "GaussianMixtureModel", "LinearGaussianModel", "default_mixture",
    "Injector", "PerturbationConfig", "quantize_vector",
    "IecConfig", "Trajectory", "ddim_step", "iec_refine", "sample_batch",
    "sample_trajectory", "select_iec_steps",
    "NoiseSchedule", "StepCoefficients", "make_beta_schedule", "select_timesteps", "step_coeffs",
]
