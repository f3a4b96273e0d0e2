"""Spectral cube container, per-band 2-D FFT helpers, and the cube file format.

A cube is a real (bands, height, width) stack, band-major in memory so each
band is a contiguous 2-D plane. Forward transforms are unnormalized; the
inverse carries the 1/(M*N) factor.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAG_RESIDUE_TOL = 1e-8

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class CubeError(Exception):
    """Base class for cube failures."""


class NonRealResult(CubeError):
    """Inverse transform left a non-negligible imaginary part."""


class MalformedHeader(CubeError):
    """Cube file header is missing, unparseable, or declares invalid fields."""


class DimensionMismatch(CubeError):
    """Payload holds more scalars than the header declares."""


class TruncatedPayload(CubeError):
    """Payload holds fewer scalars than the header declares."""


@dataclass
class SpectralCube:
    """Real-valued hyperspectral image, shape (bands, height, width)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64))
        if arr.ndim != 3:
            raise ValueError(f"cube data must be 3-d (bands, height, width), got {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"cube dimensions must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("cube data contains NaN or Inf")
        self.data = arr

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def copy(self) -> "SpectralCube":
        return SpectralCube(self.data.copy())


@dataclass
class SpectrumCube:
    """Per-band 2-D DFT of a spectral cube, shape (bands, height, width)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.data, dtype=np.complex128))
        if arr.ndim != 3:
            raise ValueError(f"spectrum data must be 3-d, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("spectrum data contains NaN or Inf")
        self.data = arr

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def fft_cube(x: SpectralCube) -> SpectrumCube:
    """Unnormalized forward 2-D DFT applied independently to each band."""
    return SpectrumCube(np.fft.fft2(x.data, axes=(1, 2)))


def ifft_raw(spec: np.ndarray, tol: float = IMAG_RESIDUE_TOL) -> np.ndarray:
    """Per-band inverse 2-D DFT of a (bands, M, N) complex array; real part only.

    Raises NonRealResult when the imaginary residue exceeds `tol` relative to
    the largest output magnitude, which signals a non-Hermitian spectrum bug
    upstream.
    """
    spatial = np.fft.ifft2(spec, axes=(-2, -1))
    scale = np.max(np.abs(spatial))
    residue = np.max(np.abs(spatial.imag))
    if residue > tol * max(scale, np.finfo(np.float64).tiny):
        raise NonRealResult(
            f"imaginary residue {residue:.3e} exceeds {tol:.0e} of output scale {scale:.3e}"
        )
    return np.ascontiguousarray(spatial.real)


def ifft_cube(s: SpectrumCube) -> SpectralCube:
    """Inverse of fft_cube, with the 1/(M*N) normalization."""
    return SpectralCube(ifft_raw(s.data))


def _parse_header(line: bytes) -> tuple:
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise MalformedHeader("header must be a JSON object")
    for key in ("height", "width", "bands", "dtype", "order"):
        if key not in header:
            raise MalformedHeader(f"header missing field {key!r}")
    m, n, d = header["height"], header["width"], header["bands"]
    for name, val in (("height", m), ("width", n), ("bands", d)):
        if not isinstance(val, int) or val < 1:
            raise MalformedHeader(f"{name} must be a positive integer, got {val!r}")
    if header["dtype"] not in _DTYPES:
        raise MalformedHeader(f"dtype must be 'f32' or 'f64', got {header['dtype']!r}")
    if header["order"] != "band-major":
        raise MalformedHeader(f"order must be 'band-major', got {header['order']!r}")
    return m, n, d, _DTYPES[header["dtype"]]


def _decode_payload(payload: bytes, m: int, n: int, d: int, dtype: np.dtype) -> np.ndarray:
    expected = m * n * d * dtype.itemsize
    if len(payload) < expected:
        raise TruncatedPayload(
            f"payload holds {len(payload)} bytes, header declares {expected}"
        )
    if len(payload) > expected:
        raise DimensionMismatch(
            f"payload holds {len(payload)} bytes, header declares {expected}"
        )
    flat = np.frombuffer(payload, dtype=dtype)
    return flat.astype(np.float64).reshape(d, m, n)


def read_cube(path) -> SpectralCube:
    """Read a cube from the single-file form, or from a .json + .bin sidecar pair."""
    p = Path(path)
    if p.suffix == ".json":
        header_bytes = p.read_bytes()
        bin_path = p.with_suffix(".bin")
        if not bin_path.exists():
            raise TruncatedPayload(f"missing payload file {bin_path}")
        payload = bin_path.read_bytes()
    else:
        raw = p.read_bytes()
        sep = raw.find(b"\n")
        if sep < 0:
            raise MalformedHeader("no newline-terminated header line found")
        header_bytes, payload = raw[:sep], raw[sep + 1:]
    m, n, d, dtype = _parse_header(header_bytes.strip())
    return SpectralCube(_decode_payload(payload, m, n, d, dtype))


def write_cube(cube: SpectralCube, path, dtype: str = "f64") -> Path:
    """Write the single-file form: one JSON header line, then the raw payload."""
    if dtype not in _DTYPES:
        raise ValueError(f"dtype must be 'f32' or 'f64', got {dtype!r}")
    header = {
        "height": cube.height,
        "width": cube.width,
        "bands": cube.bands,
        "dtype": dtype,
        "order": "band-major",
    }
    payload = np.ascontiguousarray(cube.data, dtype=_DTYPES[dtype]).tobytes()
    p = Path(path)
    with open(p, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        fh.write(payload)
    return p
