import numpy as np
import pytest
from hypothesis import given, strategies as st

from hsdeconv.cube import SpectralCube
from hsdeconv.degrade import DegradationScenario, apply_degradation, make_kernel
from hsdeconv.fixedpoint import (
    FixedPointConfig, NonFiniteIterate, export_trace_csv, infer,
    solve_anderson, solve_plain,
)

from test_denoiser import identity_model, tiny_model


def linear_map(a, b):
    return lambda x: a @ x + b


def contraction_matrix(rng, dim, norm):
    a = rng.standard_normal((dim, dim))
    return a * (norm / np.linalg.svd(a, compute_uv=False)[0])


def symmetric_contraction(rng, dim, norm):
    """Spectral radius equals the operator norm, so plain iteration is slow."""
    a = rng.standard_normal((dim, dim))
    a = 0.5 * (a + a.T)
    return a * (norm / np.abs(np.linalg.eigvalsh(a)).max())


def test_scalar_halving():
    cfg = FixedPointConfig(max_iters=60, tol=1e-12)
    x, trace = solve_plain(lambda x: 0.5 * x, np.array([1.0]), cfg)
    assert abs(x[0]) < 1e-11
    ratios = np.array(trace.residuals[1:]) / np.array(trace.residuals[:-1])
    assert np.allclose(ratios, 0.5, atol=1e-12)


def test_identity_map_converges_immediately(rng):
    x0 = rng.standard_normal(7)
    x, trace = solve_plain(lambda x: x, x0, FixedPointConfig(max_iters=10))
    assert trace.iters_used == 1
    assert trace.residuals == [0.0]
    assert trace.converged
    assert np.array_equal(x, x0)


def test_linear_contraction_reaches_closed_form(rng):
    a = contraction_matrix(rng, 10, 0.9)
    b = rng.standard_normal(10)
    fixed = np.linalg.solve(np.eye(10) - a, b)
    cfg = FixedPointConfig(max_iters=500, tol=1e-12, anderson_m=0)
    x, trace = solve_plain(linear_map(a, b), np.zeros(10), cfg)
    assert trace.converged
    assert np.linalg.norm(x - fixed) <= 1e-10 * np.linalg.norm(fixed)


def test_contraction_residual_ratio_bound(rng):
    a = contraction_matrix(rng, 12, 0.8)
    b = rng.standard_normal(12)
    _, trace = solve_plain(linear_map(a, b), np.zeros(12),
                           FixedPointConfig(max_iters=40, tol=0.0))
    r = trace.residuals
    for k in range(len(r) - 1):
        if r[k] > 1e-14:
            assert r[k + 1] <= 0.8 * r[k] * 1.05


def test_nonfinite_iterate_aborts_with_trace():
    def blowup(x):
        return 3.0 * x

    with pytest.raises(NonFiniteIterate) as err:
        solve_plain(blowup, np.array([1e300]), FixedPointConfig(max_iters=50, tol=0.0))
    assert err.value.trace.iters_used >= 1


def test_anderson_m1_gamma1_bitwise_equals_plain(rng):
    a = contraction_matrix(rng, 8, 0.95)
    b = rng.standard_normal(8)
    cfg_p = FixedPointConfig(max_iters=30, tol=1e-10)
    cfg_a = FixedPointConfig(max_iters=30, tol=1e-10, anderson_m=1, anderson_gamma=1.0)
    xp, tp = solve_plain(linear_map(a, b), np.zeros(8), cfg_p)
    xa, ta = solve_anderson(linear_map(a, b), np.zeros(8), cfg_a)
    assert np.array_equal(xp, xa)
    assert tp.residuals == ta.residuals
    assert tp.iters_used == ta.iters_used


@given(st.integers(0, 2**31 - 1))
def test_anderson_m1_bitwise_property(seed):
    rng = np.random.default_rng(seed)
    a = contraction_matrix(rng, 5, 0.9)
    b = rng.standard_normal(5)
    cfg_p = FixedPointConfig(max_iters=15, tol=1e-8)
    cfg_a = cfg_p.replace(anderson_m=1)
    xp, _ = solve_plain(linear_map(a, b), np.zeros(5), cfg_p)
    xa, _ = solve_anderson(linear_map(a, b), np.zeros(5), cfg_a)
    assert np.array_equal(xp, xa)


def test_anderson_accelerates_linear_map(rng):
    a = symmetric_contraction(rng, 20, 0.95)
    b = rng.standard_normal(20)
    tol = 1e-6
    cfg_p = FixedPointConfig(max_iters=600, tol=tol)
    cfg_a = FixedPointConfig(max_iters=600, tol=tol, anderson_m=5)
    _, tp = solve_plain(linear_map(a, b), np.zeros(20), cfg_p)
    _, ta = solve_anderson(linear_map(a, b), np.zeros(20), cfg_a)
    assert tp.converged and ta.converged
    assert ta.iters_used < tp.iters_used


def test_anderson_beta_sums_to_one(rng):
    from hsdeconv.fixedpoint import _anderson_beta

    u = rng.standard_normal((30, 4))
    beta = _anderson_beta(u, 1e-10)
    assert beta.sum() == pytest.approx(1.0, abs=1e-10)

    # single-column system has only one feasible point
    single = np.array([[1.0], [0.0]])
    assert np.allclose(_anderson_beta(single, 0.0), [1.0])


def test_traces_deterministic(rng):
    a = contraction_matrix(rng, 6, 0.9)
    b = rng.standard_normal(6)
    cfg = FixedPointConfig(max_iters=25, tol=1e-10, anderson_m=3)
    x1, t1 = solve_anderson(linear_map(a, b), np.zeros(6), cfg)
    x2, t2 = solve_anderson(linear_map(a, b), np.zeros(6), cfg)
    assert np.array_equal(x1, x2)
    assert t1.residuals == t2.residuals


def test_infer_identity_setup(rng):
    y = SpectralCube(rng.uniform(0, 1, (2, 8, 8)))
    model = identity_model(2)
    cfg = FixedPointConfig(max_iters=10, tol=1e-8)
    restored, trace = infer(y, make_kernel("circle", diameter=1), model, b=1.0, cfg=cfg)
    assert trace.iters_used == 1
    assert np.abs(restored.data - y.data).max() < 1e-10


def test_infer_monotone_residuals_when_contractive(rng):
    x = SpectralCube(rng.uniform(0, 1, (2, 12, 12)))
    kernel = make_kernel("gaussian", size=5, sigma=1.5)
    y = apply_degradation(x, DegradationScenario(kernel, 0.01, seed=11))
    model = tiny_model(bands=2, hidden=4, n_layers=2, m=12, n=12, seed=21)
    cfg = FixedPointConfig(max_iters=40, tol=0.0, anderson_m=0)
    _, trace = infer(y, kernel, model, b=1.5, cfg=cfg)
    r = trace.residuals
    for k in range(3, len(r) - 1):
        if r[k] > 1e-13:
            assert r[k + 1] < r[k]


def test_infer_overrides_iteration_count(rng):
    y = SpectralCube(rng.uniform(0, 1, (1, 8, 8)))
    kernel = make_kernel("square", side=3)
    model = tiny_model(bands=1, hidden=2, n_layers=1, m=8, n=8, seed=5)
    for iters in (3, 7):
        _, trace = infer(y, kernel, model, b=1.0,
                         cfg=FixedPointConfig(max_iters=iters, tol=0.0, anderson_m=0))
        assert trace.iters_used == iters


def test_trace_csv_export(tmp_path, rng):
    a = contraction_matrix(rng, 4, 0.5)
    _, trace = solve_plain(linear_map(a, np.ones(4)), np.zeros(4),
                           FixedPointConfig(max_iters=8, tol=0.0))
    path = export_trace_csv(trace, tmp_path / "trace.csv")
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "iter,residual"
    assert len(lines) == trace.iters_used + 1
    assert float(lines[1].split(",")[1]) == trace.residuals[0]


def test_store_iterates(rng):
    a = contraction_matrix(rng, 4, 0.5)
    cfg = FixedPointConfig(max_iters=6, tol=0.0, store_iterates=True)
    _, trace = solve_plain(linear_map(a, np.ones(4)), np.zeros(4), cfg)
    assert len(trace.iterates_kept) == trace.iters_used


def test_config_validation():
    with pytest.raises(ValueError):
        FixedPointConfig(max_iters=0)
    with pytest.raises(ValueError):
        FixedPointConfig(anderson_gamma=0.0)
    with pytest.raises(ValueError):
        FixedPointConfig(anderson_gamma=1.5)
    with pytest.raises(ValueError):
        FixedPointConfig(tol=-1.0)
