"""Hyperspectral deconvolution with an equilibrium HQS solver and a learnable prior."""

__version__ = "0.1.0"

from .cube import SpectralCube, SpectrumCube, fft_cube, ifft_cube, read_cube, write_cube
from .degrade import (
    BlurKernel, DegradationScenario, apply_degradation, make_kernel,
    pad_and_shift_kernel, scenario_preset,
)
from .denoiser import (
    ConvLayer, DenoiserModel, build_denoiser, estimate_lipschitz, forward,
    load_model, save_model, spectral_normalize, vjp_input, vjp_params,
)
from .hqs import HQSContext, build_context, data_consistency, iterate, objective
from .fixedpoint import (
    FixedPointConfig, FixedPointTrace, infer, solve_anderson, solve_plain,
)
from .convergence import ConvergenceReport, contraction_report, operator_spectrum
from .metrics import MetricReport, evaluate
from .training import (
    TrainConfig, TrainingRun, deq_loss_grad, infer_pnp, pretrain_denoiser,
    train_deq, train_du,
)
from .synth import synth_cube, synth_cubes, synth_dataset
