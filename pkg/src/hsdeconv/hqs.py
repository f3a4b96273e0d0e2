"""One full solver step: denoise, then the closed-form frequency data-fit update.

The data-consistency update solves, per band and exactly under circular
boundaries, the ridge-coupled least-squares problem

    argmin_x  0.5*||y - h * x||^2 + (b/2)*||z - x||^2

via elementwise frequency arithmetic: X = (conj(H).Y + b.Z) / (|H|^2 + b).
The conjugated form is used so the update solves the least-squares problem
for non-symmetric kernels too; for symmetric kernels it coincides with the
unconjugated product.
"""

from dataclasses import dataclass

import numpy as np

from .cube import SpectralCube, ifft_raw
from .degrade import BlurKernel, pad_and_shift_kernel
from .denoiser import DenoiserModel, ShapeMismatch, forward_raw


@dataclass
class HQSContext:
    """Frequency-domain operator cache for one (kernel, observation) pair.

    The penalty b may be retuned between iterations; everything b-independent
    is precomputed once since the step runs hundreds of times per solve.
    """

    h_hat: np.ndarray        # (M, N) complex, padded-shifted kernel DFT
    h_abs2: np.ndarray       # (M, N) real, |h_hat|^2
    hty_hat: np.ndarray      # (d, M, N) complex, conj(h_hat) * fft(y)
    y_hat: np.ndarray        # (d, M, N) complex, fft(y)
    b: float
    lambda_reg: float = 0.0  # recorded only; the prior absorbs it

    def __post_init__(self):
        if self.b <= 0:
            raise ValueError(f"penalty b must be positive, got {self.b}")


def build_context(kernel: BlurKernel, y: SpectralCube, b: float,
                  lambda_reg: float = 0.0) -> HQSContext:
    h_hat = pad_and_shift_kernel(kernel, y.height, y.width)
    y_hat = np.fft.fft2(y.data, axes=(1, 2))
    return HQSContext(
        h_hat=h_hat,
        h_abs2=(h_hat.real**2 + h_hat.imag**2),
        hty_hat=np.conj(h_hat)[None, :, :] * y_hat,
        y_hat=y_hat,
        b=float(b),
        lambda_reg=lambda_reg,
    )


def data_consistency_raw(z: np.ndarray, ctx: HQSContext) -> np.ndarray:
    z_hat = np.fft.fft2(z, axes=(1, 2))
    x_hat = (ctx.hty_hat + ctx.b * z_hat) / (ctx.h_abs2 + ctx.b)
    return ifft_raw(x_hat)


def data_consistency(z: SpectralCube, ctx: HQSContext) -> SpectralCube:
    """Exact minimizer of the blur-fit plus b-coupling objective at anchor z."""
    if z.data.shape != ctx.hty_hat.shape:
        raise ShapeMismatch(f"z shape {z.data.shape} vs observation {ctx.hty_hat.shape}")
    return SpectralCube(data_consistency_raw(z.data, ctx))


def iterate_raw(x: np.ndarray, ctx: HQSContext, model: DenoiserModel) -> np.ndarray:
    return data_consistency_raw(forward_raw(model, x), ctx)


def iterate(x: SpectralCube, ctx: HQSContext, model: DenoiserModel) -> SpectralCube:
    """One solver step: exactly one denoiser call and one FFT round trip."""
    if x.data.shape != ctx.hty_hat.shape:
        raise ShapeMismatch(f"x shape {x.data.shape} vs observation {ctx.hty_hat.shape}")
    return SpectralCube(iterate_raw(x.data, ctx, model))


def dc_multiplier(ctx: HQSContext) -> np.ndarray:
    """Real frequency multiplier b/(|H|^2+b): the data-consistency Jacobian in z."""
    return ctx.b / (ctx.h_abs2 + ctx.b)


def dc_adjoint_raw(cot: np.ndarray, ctx: HQSContext) -> np.ndarray:
    """Transpose of the linear part of data_consistency (self-adjoint multiplier)."""
    return ifft_raw(dc_multiplier(ctx)[None, :, :] * np.fft.fft2(cot, axes=(1, 2)))


def dc_b_partial_raw(z: np.ndarray, ctx: HQSContext) -> np.ndarray:
    """Partial derivative of data_consistency output in the penalty b, at anchor z."""
    z_hat = np.fft.fft2(z, axes=(1, 2))
    denom = ctx.h_abs2 + ctx.b
    x_hat = (ctx.hty_hat + ctx.b * z_hat) / denom
    return ifft_raw((z_hat - x_hat) / denom)


def objective(x: SpectralCube, z: SpectralCube, ctx: HQSContext) -> float:
    """Diagnostic scalar: data term plus coupling term.

    The prior term is implicit in the learned denoiser and is not evaluable,
    so it is excluded; use this only for monitoring.
    """
    if x.data.shape != ctx.hty_hat.shape or z.data.shape != ctx.hty_hat.shape:
        raise ShapeMismatch("x/z shapes must match the observation")
    x_hat = np.fft.fft2(x.data, axes=(1, 2))
    mn = x.height * x.width
    resid = ctx.y_hat - ctx.h_hat[None, :, :] * x_hat
    data_term = 0.5 * np.sum(resid.real**2 + resid.imag**2) / mn
    coupling = 0.5 * ctx.b * np.sum((z.data - x.data) ** 2)
    return float(data_term + coupling)
