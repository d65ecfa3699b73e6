import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import ndtr

from spdelab.grid import GridFunction, GridSpec
from spdelab.particles import (
    AtomicMeasure,
    ParticleConfig,
    ParticlePath,
    PopulationCapError,
    empirical_cdf,
    fv_generator_moments,
    generalized_inverse,
    quantile_positions,
    sbm_generator_moments,
    simulate_fv_particles,
    simulate_sbm_particles,
)
from spdelab.verify import TestFunction, mp_check_ensemble

GRID = GridSpec(-8, 8, 256)


# -- measures and distribution functions -------------------------------------------


def test_atomic_measure_validation():
    with pytest.raises(ValueError):
        AtomicMeasure([0.0, 1.0], [1.0, 0.0])
    with pytest.raises(ValueError):
        AtomicMeasure([np.nan], [1.0])
    m = AtomicMeasure([0.0, 1.0], 0.5)
    assert m.total_mass == 1.0
    with pytest.raises(ValueError):
        m.positions[0] = 3.0


def test_measure_csv_roundtrip(tmp_path):
    m = AtomicMeasure([-1.5, 0.25, 2.0], [0.1, 0.2, 0.7], 0.3)
    m.to_csv(tmp_path / "m.csv")
    back = AtomicMeasure.from_csv(tmp_path / "m.csv", 0.3)
    np.testing.assert_array_equal(back.positions, m.positions)
    np.testing.assert_array_equal(back.masses, m.masses)
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "position,mass"


def test_cdf_single_atom():
    u = empirical_cdf(AtomicMeasure([0.5], [1.0]), GRID)
    x = GRID.points
    np.testing.assert_array_equal(u.values, np.where(x >= 0.5, 1.0, 0.0))


def test_cdf_signed_convention():
    spec = GridSpec(-4, 4, 8)  # grid points at the integers
    u = empirical_cdf(AtomicMeasure([-1.0, 1.0], [0.5, 0.5]), spec)
    at = dict(zip(spec.points, u.values))
    assert at[-2.0] == -0.5
    assert at[0.0] == 0.0
    assert at[2.0] == 0.5
    # an atom sitting on y < 0 is excluded from (y, 0]
    assert at[-1.0] == 0.0


def test_cdf_origins_differ_by_mass_below_zero(rng):
    m = AtomicMeasure(rng.normal(size=40), rng.uniform(0.1, 1, 40))
    zero = empirical_cdf(m, GRID, origin="zero").values
    neg = empirical_cdf(m, GRID, origin="-inf").values
    below = m.masses[m.positions <= 0].sum()
    np.testing.assert_allclose(neg - zero, below, atol=1e-14)
    with pytest.raises(ValueError):
        empirical_cdf(m, GRID, origin="median")


def test_cdf_telescopes_to_total_mass(rng):
    m = AtomicMeasure(rng.uniform(-6, 6, 100), rng.exponential(size=100))
    u = empirical_cdf(m, GRID).values
    assert np.all(np.diff(u) >= 0)
    # both tails sum the same masses, only the summation order differs
    assert u[-1] - u[0] == pytest.approx(m.total_mass, rel=1e-14)


@given(
    st.lists(st.floats(-7, 7, allow_nan=False), min_size=1, max_size=30),
    st.integers(0, 2**31),
)
def test_cdf_piecewise_constant_between_atoms(pos, seed):
    masses = np.random.default_rng(seed).uniform(0.01, 1, len(pos))
    u = empirical_cdf(AtomicMeasure(pos, masses), GRID)
    x, v = GRID.points, u.values
    assert np.all(np.diff(v) >= 0)
    # a jump between neighbouring grid points needs an atom in (x_i, x_{i+1}]
    jumps = np.nonzero(np.diff(v))[0]
    p = np.asarray(pos)
    for i in jumps:
        assert np.any((p > x[i]) & (p <= x[i + 1]))


def test_generalized_inverse_normal_median():
    spec = GridSpec(-8, 8, 1000)
    u = GridFunction(spec, ndtr(spec.points))
    assert abs(generalized_inverse(u, 0.5)) <= spec.dx


def test_generalized_inverse_single_atom():
    u = empirical_cdf(AtomicMeasure([0.5], [1.0]), GRID, origin="-inf")
    assert abs(generalized_inverse(u, 0.5) - 0.5) <= GRID.dx


def test_generalized_inverse_edges_and_monotonicity():
    u = GridFunction(GRID, ndtr(GRID.points))
    assert generalized_inverse(u, -1.0) == GRID.x_min
    assert generalized_inverse(u, 2.0) == GRID.x_max
    levels = np.linspace(0.01, 0.99, 50)
    assert np.all(np.diff(generalized_inverse(u, levels)) > 0)
    with pytest.raises(ValueError):
        generalized_inverse(GridFunction(GRID, -ndtr(GRID.points)), 0.5)


def test_change_of_variables(rng):
    spec = GridSpec(-8, 8, 2**15)
    m = AtomicMeasure(rng.normal(0, 1.5, 50), rng.uniform(0.2, 1.0, 50))
    g = TestFunction.gaussian_bump(0.3, 1.0).f
    u = empirical_cdf(m, spec, origin="-inf")
    n = 200_000
    a = (np.arange(n) + 0.5) / n * m.total_mass
    lhs = np.sum(g(generalized_inverse(u, a)) ** 2) * m.total_mass / n
    rhs = m.integrate(lambda x: g(x) ** 2)
    assert lhs == pytest.approx(rhs, abs=1e-3)


# -- configuration -----------------------------------------------------------------


def test_config_step_bound():
    c = ParticleConfig(2000, 0.1)
    dt, n = c.step("sbm")
    assert dt * n == pytest.approx(0.1, rel=1e-12)
    assert c.branching_rate * dt < 0.1
    with pytest.raises(ValueError):
        ParticleConfig(2000, 0.1, dt=1e-3).step("sbm")
    with pytest.raises(ValueError):
        ParticleConfig(0, 0.1)
    with pytest.raises(ValueError):
        ParticleConfig(10, 0.1, rate_factor=-1)


def test_quantile_positions_symmetric():
    x = quantile_positions(101, 0.5)
    assert x[50] == 0.0
    np.testing.assert_allclose(x, -x[::-1], atol=1e-15)


def test_generator_moments_match_limit_quadratic_variation(rng):
    # exact enumeration of the jump rates for small systems
    f = TestFunction.gaussian_bump(0.2, 0.8).f
    for n in (2, 3, 7):
        x = rng.normal(size=n)
        drift, qv = fv_generator_moments(x, f)
        fx = f(x)
        assert drift == pytest.approx(0.0, abs=1e-15)
        assert qv == pytest.approx(np.mean(fx**2) - np.mean(fx) ** 2, rel=1e-12)
        eps = 1.0 / n
        drift, qv = sbm_generator_moments(x, f, eps, 1.0 / eps)
        assert drift == 0.0
        assert qv == pytest.approx(eps * np.sum(fx**2), rel=1e-12)


# -- branching particles -----------------------------------------------------------


def test_sbm_without_branching_is_brownian():
    c = ParticleConfig(1, 1.0, rate_factor=0.0, seed=3, snapshot_dt=1.0)
    ends = []
    for s in range(2000):
        p = simulate_sbm_particles(c, s)
        assert np.all(p.total_mass() == 1.0)
        ends.append(p.snapshots[-1].positions[0])
    ends = np.array(ends)
    # Var of the sample variance of N(0,1) is 2/n
    assert np.var(ends, ddof=1) == pytest.approx(1.0, abs=3 * np.sqrt(2 / 2000))
    assert abs(ends.mean()) < 3 / np.sqrt(2000)


@pytest.mark.slow
def test_sbm_total_mass_moments():
    c = ParticleConfig(2000, 0.25, seed=11, snapshot_dt=0.25)
    mass = np.array([simulate_sbm_particles(c, s).total_mass()[-1] for s in range(500)])
    sigma = mass.std(ddof=1) / np.sqrt(len(mass))
    assert abs(mass.mean() - 1.0) <= 3 * sigma
    assert mass.var(ddof=1) == pytest.approx(1.0 * 0.25, rel=0.15)


def test_sbm_extinction_is_absorbing():
    c = ParticleConfig(5, 2.0, seed=2, snapshot_dt=0.02)
    extinct = 0
    for s in range(40):
        mass = simulate_sbm_particles(c, s).total_mass()
        assert np.all(mass >= 0)
        hit = np.nonzero(mass == 0)[0]
        if len(hit):
            extinct += 1
            assert np.all(mass[hit[0]:] == 0)
    assert extinct > 0


def test_sbm_population_cap():
    c = ParticleConfig(100, 5.0, seed=0, cap_factor=1)
    with pytest.raises(PopulationCapError):
        simulate_sbm_particles(c, 0)


def test_sbm_qv_ratio():
    c = ParticleConfig(2000, 0.1, seed=5)
    paths = [simulate_sbm_particles(c, s) for s in range(100)]
    rep = mp_check_ensemble(paths, TestFunction.gaussian_bump(0.5, 1.0), "sbm")
    assert 0.9 <= rep.ratio <= 1.1


def test_particles_reproducible(tmp_path):
    c = ParticleConfig(200, 0.05, seed=9)
    for sim in (simulate_sbm_particles, simulate_fv_particles):
        a, b = sim(c, 4), sim(c, 4)
        for ma, mb in zip(a.snapshots, b.snapshots):
            np.testing.assert_array_equal(ma.positions, mb.positions)
        other = sim(c, 5)
        assert not np.array_equal(a.snapshots[-1].positions, other.snapshots[-1].positions)


def test_path_write_load(tmp_path):
    p = simulate_sbm_particles(ParticleConfig(50, 0.02, seed=1, snapshot_dt=0.01), 2)
    p.write(tmp_path)
    q = ParticlePath.load(tmp_path)
    np.testing.assert_array_equal(q.times, p.times)
    for a, b in zip(p.snapshots, q.snapshots):
        np.testing.assert_array_equal(a.positions, b.positions)
    with pytest.raises(ValueError):
        p.at(0.015)


# -- resampling particles ---------------------------------------------------------


def test_fv_needs_two_particles():
    with pytest.raises(ValueError):
        simulate_fv_particles(ParticleConfig(1, 0.1), 0)


def test_fv_single_particle_without_resampling():
    c = ParticleConfig(1, 0.5, pair_rate=0.0, seed=1, snapshot_dt=0.05)
    p = simulate_fv_particles(c, 0)
    xs = np.array([m.positions[0] for m in p.snapshots])
    assert all(len(m) == 1 and m.masses[0] == 1.0 for m in p.snapshots)
    assert xs[0] == 0.0
    increments = np.diff(xs)
    assert np.all(increments != 0)
    # Brownian increments over 0.05
    assert np.std(increments) < 1.0


@given(st.integers(2, 60), st.integers(0, 1000))
def test_fv_mass_and_count_constant(n, stream):
    p = simulate_fv_particles(ParticleConfig(n, 0.02, seed=1, snapshot_dt=0.005), stream)
    assert np.all(np.abs(p.total_mass() - 1.0) <= 1e-12)
    assert all(len(m) == n for m in p.snapshots)


def test_fv_linear_mean_preserved():
    c = ParticleConfig(500, 0.1, seed=7, init_center=0.3, snapshot_dt=0.1)
    v = np.array([simulate_fv_particles(c, s).snapshots[-1].integrate(lambda x: x) for s in range(500)])
    # μ₀(T_T f) = μ₀(f) for f(x) = x
    mu0 = np.mean(quantile_positions(500, 0.5, 0.3))
    assert abs(v.mean() - mu0) <= 3 * v.std(ddof=1) / np.sqrt(len(v))


def test_fv_qv_ratio():
    c = ParticleConfig(500, 0.1, seed=5)
    paths = [simulate_fv_particles(c, s) for s in range(100)]
    rep = mp_check_ensemble(paths, TestFunction.gaussian_bump(0.5, 1.0), "fv")
    assert 0.85 <= rep.ratio <= 1.15
