import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_smooth
from spdelab.grid import (
    GridFunction,
    GridMismatchError,
    GridSpec,
    Weight,
    inner0,
    j_bounds,
    mollifier,
    norm0,
    norm0_batch,
    norm1,
    weight_j,
)

# mpmath, 30 digits: ∫ e^{-|y|} ρ(x - y) dy with ρ the normalized bump exp(-1/(1-x²))
J_AT_0 = 0.731988598162352657545898165649
J_AT_1_7 = 0.197535094339755022327250067973
# mpmath: sqrt(∫ e^{-2x²} e^{-|x|} dx)
NORM0_GAUSS = 0.93614339524118437628333810937


def test_mollifier_unit_mass():
    x = np.linspace(-1, 1, 200_001)
    assert np.trapezoid(mollifier(x), x) == pytest.approx(1.0, abs=1e-9)
    assert mollifier(np.array([1.0, -1.5, 2.0])).tolist() == [0.0, 0.0, 0.0]


@pytest.mark.parametrize("x", [0.3, 1.7])
def test_weight_j_even(x):
    assert abs(weight_j(x) - weight_j(-x)) <= 1e-12


def test_weight_j_oracle_values():
    assert weight_j(0.0) == pytest.approx(J_AT_0, abs=1e-12)
    assert weight_j(1.7) == pytest.approx(J_AT_1_7, abs=1e-11)


def test_weight_j_two_sided_bound():
    c0, C0 = j_bounds()
    assert 0.1 <= c0 <= C0 <= 10.0
    xs = np.linspace(-10, 10, 801)
    j = weight_j(xs)
    e = np.exp(-np.abs(xs))
    assert np.all(j >= c0 * e * (1 - 1e-12)) and np.all(j <= C0 * e * (1 + 1e-12))
    assert np.all(j >= 0.1 * e) and np.all(j <= 10 * e)


def test_weight_j_rejects_nonfinite():
    with pytest.raises(ValueError):
        weight_j(np.inf)
    with pytest.raises(ValueError):
        weight_j(np.array([0.0, np.nan]))


def test_weights_positive_on_grid():
    spec = GridSpec(-8, 8, 128)
    assert np.all(Weight.exponential(spec).values > 0)
    assert np.all(Weight.mollified(spec).values > 0)


def test_norm0_of_one_wide_domain():
    spec = GridSpec(-40, 40, 32768)
    assert norm0(GridFunction.constant(spec)) == pytest.approx(np.sqrt(2), abs=1e-6)


def test_norm0_of_zero():
    spec = GridSpec()
    assert norm0(GridFunction.constant(spec, 0.0)) == 0.0
    assert norm1(GridFunction.constant(spec, 0.0)) == 0.0


def test_norm0_gaussian_matches_oracle():
    fn = lambda x: np.exp(-(x**2))
    coarse = norm0(GridFunction.from_callable(GridSpec(-8, 8, 8192), fn))
    fine = norm0(GridFunction.from_callable(GridSpec(-8, 8, 8192 * 16), fn))
    assert abs(coarse - fine) <= 1e-6
    assert abs(coarse - NORM0_GAUSS) <= 1e-6


def test_trapezoid_converges_at_second_order():
    fn = lambda x: np.exp(-(x**2)) * np.cos(x)
    exact = norm0(GridFunction.from_callable(GridSpec(-8, 8, 2**16), fn))
    errs = [abs(norm0(GridFunction.from_callable(GridSpec(-8, 8, n), fn)) - exact) for n in (128, 256, 512)]
    assert errs[0] / errs[1] >= 3 and errs[1] / errs[2] >= 3


def test_norm1_constant_and_linear():
    spec = GridSpec(-40, 40, 32768)
    assert norm1(GridFunction.constant(spec)) == pytest.approx(np.sqrt(2), abs=1e-6)
    # ∫ (x² + 1) e^{-|x|} dx = 6
    assert norm1(GridFunction.from_callable(spec, lambda x: x)) == pytest.approx(np.sqrt(6), abs=1e-6)


def test_norm1_dominates_norm0(rng):
    spec = GridSpec(-8, 8, 256)
    for _ in range(20):
        f = GridFunction(spec, random_smooth(spec, rng))
        assert norm1(f) >= norm0(f)


def test_inner0_consistency(rng):
    spec = GridSpec(-8, 8, 256)
    f = GridFunction(spec, random_smooth(spec, rng))
    g = GridFunction(spec, random_smooth(spec, rng))
    assert inner0(f, f) == pytest.approx(norm0(f) ** 2, rel=1e-12)
    assert inner0(f, g) == inner0(g, f)
    one = GridFunction.constant(GridSpec(-40, 40, 32768))
    assert inner0(one, one) == pytest.approx(2.0, abs=1e-6)


def test_mismatched_grids_rejected():
    a = GridFunction.constant(GridSpec(-8, 8, 64))
    b = GridFunction.constant(GridSpec(-8, 8, 128))
    with pytest.raises(GridMismatchError):
        inner0(a, b)


def test_norm0_batch_matches_loop(rng):
    spec = GridSpec(-8, 8, 64)
    vals = np.stack([random_smooth(spec, rng) for _ in range(5)])
    batch = norm0_batch(vals, spec)
    assert np.allclose(batch, [norm0(GridFunction(spec, v)) for v in vals], rtol=1e-13)


def test_mollified_weight_norm_equivalent(rng):
    spec = GridSpec(-8, 8, 256)
    c0, C0 = j_bounds(-8, 8, 401)
    w = Weight.mollified(spec)
    for _ in range(5):
        f = GridFunction(spec, random_smooth(spec, rng))
        r = norm0(f, w) ** 2 / norm0(f) ** 2
        assert c0 * (1 - 1e-3) <= r <= C0 * (1 + 1e-3)


def test_csv_round_trip(tmp_path, rng):
    spec = GridSpec(-2, 2, 16)
    f = GridFunction(spec, random_smooth(spec, rng))
    f.to_csv(tmp_path / "f.csv")
    g = GridFunction.from_csv(tmp_path / "f.csv")
    assert g.spec == spec and np.array_equal(g.values, f.values)


def test_interpolation_and_derivative():
    spec = GridSpec(-4, 4, 400)
    f = GridFunction.from_callable(spec, np.sin)
    assert f(0.5) == pytest.approx(np.sin(0.5), abs=1e-4)
    assert np.max(np.abs(f.derivative().values - np.cos(spec.points))) < 1e-3


coef = st.lists(st.floats(-3, 3, allow_nan=False), min_size=4, max_size=4)


@given(coef, coef)
def test_cauchy_schwarz(a, b):
    spec = GridSpec(-8, 8, 64)
    x = spec.points
    basis = np.stack([np.exp(-((x - c) ** 2)) for c in (-3, -1, 1, 3)])
    f = GridFunction(spec, np.asarray(a) @ basis)
    g = GridFunction(spec, np.asarray(b) @ basis)
    assert abs(inner0(f, g)) <= norm0(f) * norm0(g) * (1 + 1e-12) + 1e-300


@given(coef, coef)
def test_triangle_inequality(a, b):
    spec = GridSpec(-8, 8, 64)
    x = spec.points
    basis = np.stack([np.exp(-((x - c) ** 2)) for c in (-3, -1, 1, 3)])
    f = GridFunction(spec, np.asarray(a) @ basis)
    g = GridFunction(spec, np.asarray(b) @ basis)
    assert norm0(GridFunction(spec, f.values + g.values)) <= (norm0(f) + norm0(g)) * (1 + 1e-12) + 1e-300
