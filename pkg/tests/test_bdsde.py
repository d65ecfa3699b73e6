import numpy as np
import pytest

from spdelab.bdsde import (
    RankDeficientError,
    check_representation,
    ipp_residual,
    polynomial_basis,
    simulate_forward,
    solve_bdsde,
)
from spdelab.config import RunConfig
from spdelab.grid import GridSpec
from spdelab.noise import LevelSpec, sample_noise
from spdelab.pipeline import bdsde_closed_form, ipp_scan, representation
from spdelab.spde import CoefficientKernel, SolverConfig, gaussian_cdf, solve

CFG = RunConfig()


# -- forward paths -------------------------------------------------------------------


def test_forward_variance():
    fw = simulate_forward(0.1, 0.4, 0.018, 50, seed=3, n_paths=10_000)
    assert np.all(fw.X[:, 0] == 0.4)
    assert fw.times[-1] == pytest.approx(1.0)
    assert np.var(fw.X[:, -1] - 0.4, ddof=1) == pytest.approx(0.9, rel=0.05)
    np.testing.assert_allclose(np.diff(fw.X, axis=1), fw.dB, atol=1e-12)


def test_forward_zero_steps_and_determinism():
    fw = simulate_forward(0.0, 3.0, 0.01, 0, seed=1, n_paths=20)
    assert fw.X.shape == (20, 1) and np.all(fw.X == 3.0)
    a = simulate_forward(0.0, 0.0, 0.01, 10, seed=5, n_paths=100)
    b = simulate_forward(0.0, 0.0, 0.01, 10, seed=5, n_paths=100)
    np.testing.assert_array_equal(a.X, b.X)
    c = simulate_forward(0.0, 0.0, 0.01, 10, seed=6, n_paths=100)
    assert not np.array_equal(a.X, c.X)
    with pytest.raises(ValueError):
        simulate_forward(0.0, 0.0, 0.0, 10, seed=1)


def test_polynomial_basis():
    P = polynomial_basis(np.linspace(-1, 3, 50), 3)
    assert P.shape == (50, 4)
    np.testing.assert_array_equal(P[:, 0], 1.0)
    assert abs(P[:, 1].mean()) < 1e-12
    assert polynomial_basis(np.full(7, 2.0)).shape == (7, 1)


# -- regression solver ---------------------------------------------------------------


@pytest.mark.parametrize("terminal", ["x", "x2"])
def test_closed_form_terminals(terminal):
    rep = bdsde_closed_form(CFG, terminal)
    assert rep["n_paths"] == 10_000 and rep["n_knots"] == 51
    assert rep["y_rms_error"] <= 0.02
    assert rep["z_rms_error"] <= 0.02
    assert rep["passed"]


def _setup(n_paths=2000, n_steps=20, dt=0.01):
    k = CoefficientKernel.fv(64)
    fw = simulate_forward(0.0, 0.0, dt, n_steps, seed=11, n_paths=n_paths)
    return k, fw


def test_terminal_condition_exact_and_martingale():
    lv = LevelSpec.unit(1)
    k, fw = CoefficientKernel.none(lv), simulate_forward(0.0, 0.3, 0.02, 50, seed=2, n_paths=5000)
    F = lambda x: np.sin(x) + x**2
    path = solve_bdsde(F, k, sample_noise(50, 0.02, lv, 2, 9), fw)
    np.testing.assert_array_equal(path.Y[:, -1], F(fw.X[:, -1]))
    np.testing.assert_array_equal(path.xi, F(fw.X[:, -1]))
    dY = np.diff(path.Y, axis=1)
    z = dY.mean(axis=0) / (dY.std(axis=0, ddof=1) / np.sqrt(dY.shape[0]))
    assert abs(z.mean()) < 3
    assert np.isfinite(path.report()["E_int_Z2"])


def test_fv_backward_noise_coupling():
    k, fw = _setup()
    F = lambda x: 1 / (1 + np.exp(-x))
    n1 = sample_noise(fw.n_steps, fw.dt, k.level, 4, 0)
    n2 = sample_noise(fw.n_steps, fw.dt, k.level, 4, 2)
    a = solve_bdsde(F, k, n1, fw)
    b = solve_bdsde(F, k, n1, fw)
    c = solve_bdsde(F, k, n2, fw)
    np.testing.assert_array_equal(a.Y, b.Y)
    np.testing.assert_array_equal(a.Z, b.Z)
    assert np.abs(a.Y[:, 0] - c.Y[:, 0]).max() > 1e-4


def test_backward_noise_must_be_distinct_stream():
    k, fw = _setup(500, 5)
    same = sample_noise(fw.n_steps, fw.dt, k.level, fw.seed, fw.stream_id)
    with pytest.raises(ValueError, match="distinct"):
        solve_bdsde(lambda x: x, k, same, fw)
    with pytest.raises(ValueError):
        solve_bdsde(lambda x: x, k, sample_noise(6, fw.dt, k.level, 1, 0), fw)
    with pytest.raises(ValueError):
        solve_bdsde(lambda x: x, k, sample_noise(5, fw.dt, LevelSpec.unit(32), 1, 0), fw)


def test_rank_deficient_regression():
    lv = LevelSpec.unit(1)
    fw = simulate_forward(0.0, 0.0, 0.01, 3, seed=1, n_paths=10)
    with pytest.raises(RankDeficientError, match="more paths"):
        solve_bdsde(lambda x: x, CoefficientKernel.none(lv), sample_noise(3, 0.01, lv, 1, 0), fw, degree=6)


# -- Itô-Pardoux-Peng ---------------------------------------------------------------


def test_ipp_linear_function():
    rep = ipp_scan(CFG, [1e-3], 1000, linear=True)
    assert rep["reference_residual"] <= 0.02


def test_ipp_quadratic_refinement():
    rep = ipp_scan(CFG)
    assert rep["reference_residual"] <= 0.03
    assert rep["decreasing"]
    # with f = x², α ≡ 1, z ≡ 0 the residual is Σ(A_j² - dt): RMS √(2T dt) against
    # the scale √E(1 + W_1)⁴ = √10, so the refinement order is exactly one half
    oracle = np.sqrt(np.asarray(rep["dts"]) / 5)
    np.testing.assert_allclose(rep["relative_residual"], oracle, rtol=0.1)
    assert rep["order"] == pytest.approx(0.5, abs=0.1)


def test_ipp_shared_noise_field_accepted():
    lv = LevelSpec.index(2)
    fw = simulate_forward(0.0, 0.0, 0.01, 100, seed=1, n_paths=50)
    nz = sample_noise(100, 0.01, lv, 3, 0)
    r = ipp_residual(lambda x: x, lambda x: 1 + 0 * x, lambda x: 0 * x, np.ones((100, 2)), 0.5, 1.0, nz, fw.dB)
    assert r["rms"] < 1e-12
    with pytest.raises(ValueError):
        ipp_residual(lambda x: x, lambda x: 1 + 0 * x, lambda x: 0 * x, 1.0, 0.0, 1.0, [nz, nz], fw.dB)


# -- representation ---------------------------------------------------------------


def test_representation_kernel_free_feynman_kac():
    rep = representation(CFG, "none", n_paths=10_000)
    assert rep["relative_gap"] <= 0.01
    assert rep["norm1_integral"] > 0


def test_representation_fv_residual():
    rep = representation(CFG, "fv")
    assert rep["relative_residual"] <= 0.05
    assert np.isfinite(rep["norm1_integral"])


def test_representation_solve_mode():
    rep = representation(CFG, "none", n_paths=4000, mode="solve")
    assert rep["solve_gap"] <= 0.01


def test_representation_requires_reversed_noise():
    spec = GridSpec(-8, 8, 64)
    F = gaussian_cdf(spec)
    k = CoefficientKernel.fv(32)
    sc = SolverConfig(spec, 1e-3, 20, k, F, save_every=1)
    nz = sc.make_noise(0)
    tr = solve(sc, nz)
    with pytest.raises(ValueError, match="reversal"):
        check_representation(tr, 0.005, 0.0, k, sc.make_noise(1).reversed(), 100)
    with pytest.raises(ValueError, match="reversal"):
        check_representation(tr, 0.005, 0.0, k, nz, 100)
    sparse = solve(SolverConfig(spec, 1e-3, 20, k, F, save_every=2), nz)
    with pytest.raises(ValueError, match="every step"):
        check_representation(sparse, 0.005, 0.0, k, nz.reversed(), 100)
    with pytest.raises(ValueError):
        check_representation(tr, 0.02, 0.0, k, nz.reversed(), 100)
    rep = check_representation(tr, 0.005, 0.0, k, nz.reversed(), 100)
    assert rep.mode == "residual" and rep.solve_gap is None
