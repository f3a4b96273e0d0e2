"""Synthetic hyperspectral cube generation for desk-scale experiments.

Cubes are sums of random low-frequency spatial patterns mixed across bands so
that adjacent bands stay strongly correlated, rescaled into [0, 1]. Everything
is deterministic given the seed.
"""

from pathlib import Path

import numpy as np

from .cube import SpectralCube, write_cube
from .util import derive_seed

TEXTURES = ("sinusoids", "bumps")


def synth_cube(height: int, width: int, bands: int, seed: int,
               texture: str = "sinusoids", n_modes: int = 8) -> SpectralCube:
    if texture not in TEXTURES:
        raise ValueError(f"texture must be one of {TEXTURES}, got {texture!r}")
    if min(height, width, bands) < 1:
        raise ValueError("dimensions must be positive")
    rng = np.random.default_rng(seed)
    rr, cc = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    data = np.zeros((bands, height, width))
    band_axis = np.arange(bands)
    for _ in range(n_modes):
        if texture == "sinusoids":
            fr = rng.integers(0, 4)
            fc = rng.integers(0, 4)
            if fr == 0 and fc == 0:
                fc = 1
            phase = rng.uniform(0, 2 * np.pi)
            pattern = np.sin(2 * np.pi * (fr * rr / height + fc * cc / width) + phase)
        else:
            r0 = rng.uniform(0, height)
            c0 = rng.uniform(0, width)
            rad = rng.uniform(0.1, 0.3) * min(height, width)
            pattern = np.exp(-(((rr - r0) ** 2 + (cc - c0) ** 2) / (2 * rad**2)))
        amp = rng.uniform(0.3, 1.0)
        # mostly-shared band weights keep adjacent bands correlated
        wob = rng.uniform(0.05, 0.25)
        coupling = 1.0 + wob * np.cos(rng.uniform(0.2, 0.9) * band_axis + rng.uniform(0, np.pi))
        data += amp * coupling[:, None, None] * pattern[None, :, :]
    lo, hi = data.min(), data.max()
    if hi - lo < 1e-12:
        return SpectralCube(np.full_like(data, 0.5))
    return SpectralCube((data - lo) / (hi - lo))


def synth_dataset(out_dir, count: int, height: int, width: int, bands: int,
                  texture: str = "sinusoids", seed: int = 0,
                  dtype: str = "f32") -> list:
    """Write `count` cubes as cube_###.cube files; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        cube = synth_cube(height, width, bands, derive_seed(seed, "synth", i), texture)
        paths.append(write_cube(cube, out / f"cube_{i:03d}.cube", dtype=dtype))
    return paths


def synth_cubes(count: int, height: int, width: int, bands: int,
                texture: str = "sinusoids", seed: int = 0) -> list:
    """In-memory variant of synth_dataset."""
    return [
        synth_cube(height, width, bands, derive_seed(seed, "synth", i), texture)
        for i in range(count)
    ]
