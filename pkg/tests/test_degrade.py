import numpy as np
import pytest
from hypothesis import given, strategies as st

from hsdeconv.cube import SpectralCube
from hsdeconv.degrade import (
    BadKernelParams, DegradationScenario, KernelTooLarge, UnknownScenario,
    apply_degradation, make_kernel, pad_and_shift_kernel, scenario_preset,
)

from oracles import loop_blur, conv_matrix


def test_square_kernel_uniform():
    k = make_kernel("square", side=5)
    assert k.size == 5
    assert np.allclose(k.weights, 1.0 / 25.0)


def test_gaussian_kernel_scenario_a_shape():
    k = make_kernel("gaussian", size=9, sigma=2.0)
    w = k.weights
    assert w.shape == (9, 9)
    assert w[4, 4] == w.max()
    assert np.allclose(w, np.rot90(w))
    assert w.sum() == pytest.approx(1.0, abs=1e-12)


def test_circle_diameter_one_is_identity():
    k = make_kernel("circle", diameter=1)
    assert k.size == 1
    assert k.weights[0, 0] == 1.0


def test_circle_diameter_seven_support():
    k = make_kernel("circle", diameter=7)
    assert k.size == 7
    # corner pixels lie outside the disk, the axis extremes inside
    assert k.weights[0, 0] == 0
    assert k.weights[3, 0] > 0
    assert k.weights[0, 3] > 0


def test_bad_kernel_params():
    with pytest.raises(BadKernelParams):
        make_kernel("gaussian", size=8, sigma=2.0)
    with pytest.raises(BadKernelParams):
        make_kernel("gaussian", size=9, sigma=0.0)
    with pytest.raises(BadKernelParams):
        make_kernel("circle", diameter=0.5)
    with pytest.raises(BadKernelParams):
        make_kernel("square", side=0)


@given(st.sampled_from(["gaussian", "circle", "square"]), st.integers(1, 6))
def test_kernel_normalization(kind, p):
    if kind == "gaussian":
        k = make_kernel(kind, size=2 * p + 1, sigma=0.5 * p)
    elif kind == "circle":
        k = make_kernel(kind, diameter=p)
    else:
        k = make_kernel(kind, side=p)
    assert k.weights.sum() == pytest.approx(1.0, abs=1e-12)
    assert k.size % 2 == 1


def test_pad_shift_identity_kernel():
    k = make_kernel("circle", diameter=1)
    h = pad_and_shift_kernel(k, 6, 7)
    assert np.allclose(h, 1.0, atol=1e-12)


def test_pad_shift_dc_gain():
    k = make_kernel("square", side=3)
    h = pad_and_shift_kernel(k, 8, 8)
    assert h[0, 0] == pytest.approx(1.0, abs=1e-12)


def test_pad_shift_conjugate_symmetry():
    k = make_kernel("gaussian", size=5, sigma=1.0)
    h = pad_and_shift_kernel(k, 8, 10)
    for r in range(8):
        for c in range(10):
            assert h[r, c] == pytest.approx(np.conj(h[(-r) % 8, (-c) % 10]), abs=1e-10)


def test_kernel_too_large():
    k = make_kernel("gaussian", size=9, sigma=2.0)
    with pytest.raises(KernelTooLarge):
        pad_and_shift_kernel(k, 8, 8)


def test_identity_degradation(rng):
    cube = SpectralCube(rng.uniform(0, 1, (2, 8, 8)))
    scen = DegradationScenario(make_kernel("circle", diameter=1), 0.0)
    out = apply_degradation(cube, scen)
    assert np.abs(out.data - cube.data).max() < 1e-10


def test_constant_preserved(rng):
    cube = SpectralCube(np.full((3, 10, 10), 0.42))
    scen = DegradationScenario(make_kernel("square", side=3), 0.0)
    out = apply_degradation(cube, scen)
    assert np.abs(out.data - 0.42).max() < 1e-12


def test_blur_matches_dense_cbc_matvec(rng):
    cube = SpectralCube(rng.uniform(0, 1, (2, 6, 6)))
    kernel = make_kernel("square", side=3)
    scen = DegradationScenario(kernel, 0.0)
    got = apply_degradation(cube, scen).data
    h = conv_matrix(kernel.weights, 6, 6)
    want = np.stack([(h @ band.ravel()).reshape(6, 6) for band in cube.data])
    assert np.abs(got - want).max() < 1e-12


@pytest.mark.parametrize("m,n", [(4, 4), (6, 6), (8, 8), (5, 8)])
@pytest.mark.parametrize("kind,params", [
    ("gaussian", {"size": 3, "sigma": 1.0}),
    ("square", {"side": 3}),
    ("circle", {"diameter": 3}),
])
def test_blur_matches_loop_oracle_exhaustive(rng, m, n, kind, params):
    kernel = make_kernel(kind, **params)
    cube = SpectralCube(rng.uniform(0, 1, (2, m, n)))
    got = apply_degradation(cube, DegradationScenario(kernel, 0.0)).data
    want = loop_blur(cube.data, kernel.weights)
    assert np.abs(got - want).max() < 1e-12


def test_blur_commutes_with_shift(rng):
    cube = SpectralCube(rng.uniform(0, 1, (1, 9, 9)))
    scen = DegradationScenario(make_kernel("gaussian", size=5, sigma=1.2), 0.0)
    shifted = SpectralCube(np.roll(cube.data, (2, 3), axis=(1, 2)))
    lhs = apply_degradation(shifted, scen).data
    rhs = np.roll(apply_degradation(cube, scen).data, (2, 3), axis=(1, 2))
    assert np.abs(lhs - rhs).max() < 1e-12


def test_dc_preservation(rng):
    cube = SpectralCube(rng.uniform(0, 1, (3, 8, 8)))
    scen = DegradationScenario(make_kernel("gaussian", size=5, sigma=1.5), 0.0)
    out = apply_degradation(cube, scen)
    for b in range(3):
        assert out.data[b].mean() == pytest.approx(cube.data[b].mean(), abs=1e-10)


def test_seeded_determinism(rng):
    cube = SpectralCube(rng.uniform(0, 1, (2, 10, 10)))
    scen = scenario_preset("a", seed=99)
    first = apply_degradation(cube, scen).data
    second = apply_degradation(cube, scen).data
    assert np.array_equal(first, second)
    different = apply_degradation(cube, scen.with_seed(100)).data
    assert not np.array_equal(first, different)


def test_scenario_presets():
    c = scenario_preset("c")
    assert c.kernel.kind == "gaussian"
    assert c.kernel.size == 9
    assert c.kernel.params[1] == 2.0
    assert c.noise_sigma == 0.03

    e = scenario_preset("e")
    assert e.kernel.kind == "square"
    assert e.kernel.size == 5
    assert e.noise_sigma == 0.01

    a = scenario_preset("a")
    assert (a.kernel.size, a.kernel.params[1], a.noise_sigma) == (9, 2.0, 0.01)
    b = scenario_preset("b")
    assert (b.kernel.size, b.kernel.params[1], b.noise_sigma) == (13, 3.0, 0.01)
    d = scenario_preset("d")
    assert d.kernel.kind == "circle"
    assert d.noise_sigma == 0.01

    with pytest.raises(UnknownScenario):
        scenario_preset("z")


def test_noise_added_after_blur(rng):
    cube = SpectralCube(rng.uniform(0, 1, (1, 12, 12)))
    scen = scenario_preset("a", seed=5)
    noisy = apply_degradation(cube, scen).data
    clean = apply_degradation(cube, DegradationScenario(scen.kernel, 0.0)).data
    resid = noisy - clean
    assert np.std(resid) == pytest.approx(0.01, rel=0.25)
