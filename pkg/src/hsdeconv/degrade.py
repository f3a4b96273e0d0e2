"""Blur kernels, the separable circular degradation model, and named scenarios.

Degradation is centered circular convolution per band with a shared kernel,
plus additive white Gaussian noise. Circular boundaries keep the forward
model, the solver, and the spectral analysis mutually consistent.
"""

from dataclasses import dataclass, field

import numpy as np

from .cube import SpectralCube, ifft_raw


class BadKernelParams(Exception):
    """Kernel parameters violate their preconditions."""


class KernelTooLarge(Exception):
    """Kernel does not fit inside the target spatial grid."""


class UnknownScenario(Exception):
    """Scenario tag outside a..e."""


@dataclass(frozen=True)
class BlurKernel:
    """Normalized k-by-k convolution kernel with k odd."""

    kind: str                       # "gaussian" | "circle" | "square"
    weights: np.ndarray             # (k, k), nonnegative, sums to 1
    params: tuple = ()              # constructor parameters, for provenance

    def __post_init__(self):
        w = np.ascontiguousarray(np.asarray(self.weights, dtype=np.float64))
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise BadKernelParams(f"kernel must be square, got shape {w.shape}")
        if w.shape[0] % 2 == 0:
            raise BadKernelParams(f"kernel size must be odd, got {w.shape[0]}")
        if np.any(w < 0):
            raise BadKernelParams("kernel weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise BadKernelParams(f"kernel weights must sum to 1, got {w.sum()!r}")
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.weights.shape[0]


def make_kernel(kind: str, **params) -> BlurKernel:
    """Build a normalized blur kernel.

    gaussian: size (odd), sigma > 0; weights sampled at integer offsets.
    circle:   diameter >= 1; a pixel belongs to the disk iff its center lies
              within diameter/2 of the kernel center.
    square:   side >= 1; uniform block. Circle and square arrays are sized to
              the smallest odd k containing the support.
    """
    kind = kind.lower()
    if kind == "gaussian":
        size, sigma = int(params["size"]), float(params["sigma"])
        if size < 1 or size % 2 == 0:
            raise BadKernelParams(f"gaussian size must be odd and positive, got {size}")
        if sigma <= 0:
            raise BadKernelParams(f"gaussian sigma must be positive, got {sigma}")
        ctr = size // 2
        offsets = np.arange(size) - ctr
        rr, cc = np.meshgrid(offsets, offsets, indexing="ij")
        w = np.exp(-(rr**2 + cc**2) / (2.0 * sigma**2))
        return BlurKernel("gaussian", w / w.sum(), (size, sigma))
    if kind == "circle":
        diameter = float(params["diameter"])
        if diameter < 1:
            raise BadKernelParams(f"circle diameter must be >= 1, got {diameter}")
        radius = int(diameter // 2)
        k = 2 * radius + 1
        offsets = np.arange(k) - radius
        rr, cc = np.meshgrid(offsets, offsets, indexing="ij")
        w = ((rr**2 + cc**2) <= (diameter / 2.0) ** 2).astype(np.float64)
        return BlurKernel("circle", w / w.sum(), (diameter,))
    if kind == "square":
        side = int(params["side"])
        if side < 1:
            raise BadKernelParams(f"square side must be >= 1, got {side}")
        k = side if side % 2 == 1 else side + 1
        w = np.zeros((k, k))
        start = (k - side) // 2
        w[start:start + side, start:start + side] = 1.0
        return BlurKernel("square", w / w.sum(), (side,))
    raise BadKernelParams(f"unknown kernel kind {kind!r}")


def pad_and_shift_kernel(kernel: BlurKernel, height: int, width: int) -> np.ndarray:
    """Zero-pad to (height, width), roll the center tap to index (0, 0), DFT.

    Multiplying a band spectrum by the result equals centered circular
    convolution with the kernel in space.
    """
    k = kernel.size
    if k > min(height, width):
        raise KernelTooLarge(f"kernel {k}x{k} exceeds grid {height}x{width}")
    padded = np.zeros((height, width))
    padded[:k, :k] = kernel.weights
    padded = np.roll(padded, (-(k // 2), -(k // 2)), axis=(0, 1))
    return np.fft.fft2(padded)


@dataclass(frozen=True)
class DegradationScenario:
    """Blur kernel plus noise level and RNG seed for the noise draw."""

    kernel: BlurKernel
    noise_sigma: float
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")

    def with_seed(self, seed: int) -> "DegradationScenario":
        return DegradationScenario(self.kernel, self.noise_sigma, seed)


_PRESETS = {
    "a": ("gaussian", {"size": 9, "sigma": 2.0}, 0.01),
    "b": ("gaussian", {"size": 13, "sigma": 3.0}, 0.01),
    "c": ("gaussian", {"size": 9, "sigma": 2.0}, 0.03),
    "d": ("circle", {"diameter": 7}, 0.01),
    "e": ("square", {"side": 5}, 0.01),
}


def scenario_preset(tag: str, seed: int = 0) -> DegradationScenario:
    """One of the five named blur/noise scenarios (a..e)."""
    if tag not in _PRESETS:
        raise UnknownScenario(f"scenario must be one of {sorted(_PRESETS)}, got {tag!r}")
    kind, params, sigma = _PRESETS[tag]
    return DegradationScenario(make_kernel(kind, **params), sigma, seed)


def blur_raw(data: np.ndarray, h_hat: np.ndarray) -> np.ndarray:
    """Circularly convolve each band of a (bands, M, N) array in frequency space."""
    return ifft_raw(h_hat[None, :, :] * np.fft.fft2(data, axes=(1, 2)))


def apply_degradation(x: SpectralCube, scenario: DegradationScenario) -> SpectralCube:
    """Blur every band with the shared kernel, then add seeded Gaussian noise."""
    h_hat = pad_and_shift_kernel(scenario.kernel, x.height, x.width)
    y = blur_raw(x.data, h_hat)
    if scenario.noise_sigma > 0:
        rng = np.random.default_rng(scenario.seed)
        y = y + rng.normal(0.0, scenario.noise_sigma, size=y.shape)
    return SpectralCube(y)
