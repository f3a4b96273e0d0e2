import json
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hsdeconv.cube import (
    DimensionMismatch, MalformedHeader, NonRealResult, SpectralCube,
    SpectrumCube, TruncatedPayload, fft_cube, ifft_cube, read_cube, write_cube,
)


def random_cube(rng, bands=3, m=8, n=8):
    return SpectralCube(rng.uniform(0.0, 1.0, (bands, m, n)))


def test_fft_constant_band_dc_only(rng):
    c = 0.37
    cube = SpectralCube(np.full((1, 4, 4), c))
    spec = fft_cube(cube).data[0]
    assert spec[0, 0] == pytest.approx(16 * c, rel=1e-12)
    off_dc = spec.copy()
    off_dc[0, 0] = 0
    assert np.abs(off_dc).max() < 1e-12


def test_fft_impulse_all_ones():
    cube = SpectralCube(np.zeros((1, 8, 8)))
    cube.data[0, 0, 0] = 1.0
    spec = fft_cube(cube).data[0]
    assert np.allclose(spec, 1.0, atol=1e-12)


def test_fft_round_trip(rng):
    cube = random_cube(rng)
    back = ifft_cube(fft_cube(cube))
    assert np.abs(back.data - cube.data).max() < 1e-10 * np.abs(cube.data).max()


@pytest.mark.parametrize("m,n", [(12, 12), (13, 13), (5, 9)])
def test_fft_round_trip_odd_sizes(rng, m, n):
    cube = SpectralCube(rng.uniform(0, 1, (2, m, n)))
    back = ifft_cube(fft_cube(cube))
    assert np.abs(back.data - cube.data).max() < 1e-10


def test_ifft_impulse_spectrum():
    spec = SpectrumCube(np.ones((1, 8, 8), dtype=complex))
    cube = ifft_cube(spec)
    expected = np.zeros((1, 8, 8))
    expected[0, 0, 0] = 1.0
    assert np.allclose(cube.data, expected, atol=1e-12)


def test_ifft_zero_spectrum():
    cube = ifft_cube(SpectrumCube(np.zeros((2, 4, 4), dtype=complex)))
    assert np.all(cube.data == 0)


def test_ifft_rejects_non_hermitian(rng):
    spec = rng.standard_normal((1, 8, 8)) + 1j * rng.standard_normal((1, 8, 8))
    with pytest.raises(NonRealResult):
        ifft_cube(SpectrumCube(spec))


def test_parseval_per_band(rng):
    cube = random_cube(rng, bands=2, m=7, n=5)
    spec = fft_cube(cube)
    for b in range(cube.bands):
        lhs = np.sum(np.abs(spec.data[b]) ** 2)
        rhs = 7 * 5 * np.sum(cube.data[b] ** 2)
        assert lhs == pytest.approx(rhs, rel=1e-8)


@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**32 - 1))
def test_fft_linearity(a, b, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (2, 6, 6))
    y = rng.uniform(-1, 1, (2, 6, 6))
    lhs = fft_cube(SpectralCube(a * x + b * y)).data
    rhs = a * fft_cube(SpectralCube(x)).data + b * fft_cube(SpectralCube(y)).data
    assert np.abs(lhs - rhs).max() < 1e-10 * max(np.abs(rhs).max(), 1.0)


def test_cube_invariants():
    with pytest.raises(ValueError):
        SpectralCube(np.zeros((4, 4)))
    bad = np.zeros((1, 2, 2))
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        SpectralCube(bad)


def test_file_round_trip_bitwise(tmp_path, rng):
    cube = random_cube(rng, bands=4, m=16, n=16)
    path = write_cube(cube, tmp_path / "x.cube")
    back = read_cube(path)
    assert back.shape == cube.shape
    assert np.array_equal(back.data, cube.data)


def test_file_round_trip_f32_widens(tmp_path, rng):
    cube = random_cube(rng, bands=2, m=5, n=6)
    path = write_cube(cube, tmp_path / "x.cube", dtype="f32")
    back = read_cube(path)
    assert back.data.dtype == np.float64
    assert np.array_equal(back.data, cube.data.astype(np.float32).astype(np.float64))


def test_sidecar_reader(tmp_path, rng):
    cube = random_cube(rng, bands=2, m=4, n=4)
    header = {"height": 4, "width": 4, "bands": 2, "dtype": "f64", "order": "band-major"}
    (tmp_path / "x.json").write_text(json.dumps(header))
    (tmp_path / "x.bin").write_bytes(cube.data.astype("<f8").tobytes())
    back = read_cube(tmp_path / "x.json")
    assert np.array_equal(back.data, cube.data)


def test_truncated_payload(tmp_path):
    header = {"height": 4, "width": 4, "bands": 2, "dtype": "f64", "order": "band-major"}
    blob = json.dumps(header).encode() + b"\n" + np.zeros(31).astype("<f8").tobytes()
    (tmp_path / "bad.cube").write_bytes(blob)
    with pytest.raises(TruncatedPayload):
        read_cube(tmp_path / "bad.cube")


def test_oversized_payload(tmp_path):
    header = {"height": 2, "width": 2, "bands": 1, "dtype": "f64", "order": "band-major"}
    blob = json.dumps(header).encode() + b"\n" + np.zeros(5).astype("<f8").tobytes()
    (tmp_path / "bad.cube").write_bytes(blob)
    with pytest.raises(DimensionMismatch):
        read_cube(tmp_path / "bad.cube")


@pytest.mark.parametrize("header", [
    {"height": 4, "width": 4, "bands": 0, "dtype": "f64", "order": "band-major"},
    {"height": 4, "width": 4, "dtype": "f64", "order": "band-major"},
    {"height": 4, "width": 4, "bands": 2, "dtype": "f16", "order": "band-major"},
    {"height": 4, "width": 4, "bands": 2, "dtype": "f64", "order": "row-major"},
])
def test_malformed_headers(tmp_path, header):
    blob = json.dumps(header).encode() + b"\n" + np.zeros(32).astype("<f8").tobytes()
    (tmp_path / "bad.cube").write_bytes(blob)
    with pytest.raises(MalformedHeader):
        read_cube(tmp_path / "bad.cube")


def test_non_json_header(tmp_path):
    (tmp_path / "bad.cube").write_bytes(b"not json\n" + b"\x00" * 64)
    with pytest.raises(MalformedHeader):
        read_cube(tmp_path / "bad.cube")


def test_concurrent_band_transforms(rng):
    cube = random_cube(rng, bands=8, m=12, n=12)
    serial = fft_cube(cube).data
    with ThreadPoolExecutor(max_workers=4) as pool:
        parallel = list(pool.map(
            lambda b: np.fft.fft2(cube.data[b]), range(cube.bands)))
    assert np.array_equal(np.stack(parallel), serial)
