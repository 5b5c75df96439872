import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from memheat import noise
from memheat.exceptions import ConfigurationError, ControlClassError, DomainError
from memheat.noise import ExponentialMarks, MarkGrid, NoiseSpec, PowerMarks

N_DRAWS = 10_000


def counts(spec, m, T, eps, n=N_DRAWS):
    return np.array([len(noise.sample_prm(spec, m, T, path=p, eps=eps)) for p in range(n)])


def test_zero_step_increments():
    dW = noise.wiener_increments(NoiseSpec(k_noise=3, seed=5), 10, 0.0)
    assert dW.shape == (10, 3) and np.all(dW == 0)


def test_negative_step_rejected():
    with pytest.raises(DomainError):
        noise.wiener_increments(NoiseSpec(), 3, -0.1)


def test_wiener_moments():
    dt, n = 0.01, 100_000
    dW = noise.wiener_increments(NoiseSpec(k_noise=4, seed=1), n, dt)
    assert np.all(np.abs(dW.mean(axis=0)) < 4 * math.sqrt(dt / n))
    assert np.allclose(dW.var(axis=0), dt, rtol=0.05)


def test_wiener_reproducible_and_path_dependent():
    spec = NoiseSpec(k_noise=2, seed=9)
    a = noise.wiener_increments(spec, 50, 0.1, path=3)
    assert np.array_equal(a, noise.wiener_increments(spec, 50, 0.1, path=3))
    assert not np.array_equal(a, noise.wiener_increments(spec, 50, 0.1, path=4))


def test_empty_measure_gives_empty_realization():
    spec = NoiseSpec(measure=ExponentialMarks(mass=0.0))
    assert len(noise.sample_prm(spec, 8, 1.0, eps=1.0)) == 0


def test_eps_zero_rejected():
    with pytest.raises(DomainError):
        noise.sample_prm(NoiseSpec(), 4, 1.0, eps=0.0)


def test_poisson_counts():
    spec = NoiseSpec(measure=ExponentialMarks(mass=2.0), seed=4, m=6)
    lam = noise.truncation_mass(spec.measure, 6)
    c = counts(spec, 6, 1.0, 1.0)
    assert abs(c.mean() - lam) < 3 * math.sqrt(lam / N_DRAWS)
    # variance of the sample variance of a Poisson(lam) is about (lam + 2 lam^2) / n
    assert abs(c.var() - lam) < 3 * math.sqrt((lam + 2 * lam**2) / N_DRAWS)


def test_eps_scales_rate():
    spec = NoiseSpec(seed=2, m=3)
    lam = noise.truncation_mass(spec.measure, 3)
    c = counts(spec, 3, 1.0, 0.1, n=2000)
    assert abs(c.mean() - 10 * lam) < 3 * math.sqrt(10 * lam / 2000)


def test_marks_inside_truncation():
    spec = NoiseSpec(measure=PowerMarks(), seed=0, m=10)
    jr = noise.sample_prm(spec, 10, 5.0)
    ax = np.abs(jr.marks)
    assert np.all((ax >= 0.1) & (ax <= 1.0))
    assert np.all(np.diff(jr.times) >= 0)
    assert np.all((jr.heights >= 0) & (jr.heights <= 1))


def test_power_mass_growth():
    m = PowerMarks()
    # c/alpha (m^alpha - 1) on each half, for m >= cutoff^-1
    assert noise.truncation_mass(m, 16) == pytest.approx(2 * 2 * (4 - 1))


def test_coupling_across_levels():
    spec = NoiseSpec(seed=7, m=8)
    big = noise.sample_prm(spec, 8, 2.0, path=1)
    small = noise.sample_prm(spec, 4, 2.0, path=1)
    r = big.restrict(4)
    assert np.array_equal(r.times, small.times)
    assert np.array_equal(r.marks, small.marks)
    assert np.array_equal(r.heights, small.heights)


def test_reproducible_realizations():
    spec = NoiseSpec(seed=3)
    a = noise.sample_noise(spec, 1.0, 0.01, path=2)
    b = noise.sample_noise(spec, 1.0, 0.01, path=2)
    assert np.array_equal(a.dW, b.dW)
    assert np.array_equal(a.jumps.times, b.jumps.times)


def test_thinning_trivial_cases():
    base = noise.sample_prm(NoiseSpec(seed=1), 8, 3.0)
    same = noise.thin_to_control(base, lambda t, x: np.ones_like(t))
    assert np.array_equal(same.times, base.times) and np.array_equal(same.marks, base.marks)
    assert len(noise.thin_to_control(base, lambda t, x: np.zeros_like(t))) == 0


def test_thinning_rejects_excess_intensity():
    base = noise.sample_prm(NoiseSpec(seed=1), 8, 3.0)
    with pytest.raises(ControlClassError):
        noise.thin_to_control(base, lambda t, x: 2.0 * np.ones_like(t))
    with pytest.raises(ControlClassError):
        noise.thin_to_control(base, lambda t, x: np.ones_like(t), psi_max=2.0)


def test_thinning_constant_intensity_is_poisson():
    spec = NoiseSpec(seed=11, m=4)
    lam = 0.5 * noise.truncation_mass(spec.measure, 4)
    c = np.array([len(noise.thin_to_control(noise.sample_prm(spec, 4, 1.0, p), lambda t, x: 0.5 * np.ones_like(t)))
                  for p in range(4000)])
    assert abs(c.mean() - lam) < 3 * math.sqrt(lam / 4000)


def test_mark_grid_masses():
    for measure in (ExponentialMarks(), PowerMarks()):
        mg = MarkGrid.build(measure, 8, 16)
        assert mg.total_mass == pytest.approx(noise.truncation_mass(measure, 8), rel=1e-12)
        assert np.allclose(mg.weights, mg.weights[0])
        assert np.allclose(mg.nodes, -mg.nodes[::-1])
        assert np.array_equal(mg.cell_index(mg.nodes), np.arange(16))
    with pytest.raises(ConfigurationError):
        MarkGrid.build(ExponentialMarks(), 4, 3)


def test_cell_index_outside():
    mg = MarkGrid.build(ExponentialMarks(), 4, 8)
    assert list(mg.cell_index(np.array([0.0, 0.1, 5.0, -5.0]))) == [-1, -1, -1, -1]


def test_compensated_integral_trivial():
    spec = NoiseSpec(seed=0, m=4)
    jr = noise.sample_prm(spec, 4, 1.0)
    zero = lambda t, x: np.zeros((np.size(t), 2))
    assert np.all(noise.compensated_integral(jr, zero, spec.mark_grid, 0.1, 10) == 0)
    empty = noise.JumpRealization.empty(1.0, 4)
    one = lambda t, x: np.ones((np.size(t), 1))
    out = noise.compensated_integral(empty, one, spec.mark_grid, 0.1, 10)
    assert np.allclose(out, -0.1 * spec.nu_K())


def test_compensated_integral_martingale():
    spec = NoiseSpec(seed=21, m=6, n_mark_cells=16)
    c = 0.7
    integrand = lambda t, x: np.full((np.size(t), 1), c)
    vals = np.array([noise.compensated_integral(noise.sample_prm(spec, 6, 1.0, p), integrand,
                                                spec.mark_grid, 0.1, 10).sum() for p in range(N_DRAWS)])
    sd = c * math.sqrt(spec.nu_K())
    assert abs(vals.mean()) < 3 * sd / math.sqrt(N_DRAWS)


def test_h_tail_mass_vanishes_for_equal_levels():
    env = lambda t, x: np.abs(x) * np.exp(-np.abs(x))
    assert noise.h_tail_mass(env, ExponentialMarks(), 4, 4) == 0.0
    assert noise.h_tail_mass(env, ExponentialMarks(), 4, 8) > noise.h_tail_mass(env, ExponentialMarks(), 6, 8)


def test_coarsen():
    nr = noise.sample_noise(NoiseSpec(k_noise=2), 1.0, 0.01, jumps=False)
    c = nr.coarsen(4)
    assert c.n_steps == 25 and c.dt == pytest.approx(0.04)
    assert np.allclose(c.dW.sum(axis=0), nr.dW.sum(axis=0))
    with pytest.raises(DomainError):
        nr.coarsen(3)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 1.0, exclude_min=True), st.integers(1, 30))
def test_step_index_contains_event(t, n_steps):
    jr = noise.JumpRealization(np.array([t]), np.array([1.0]), np.array([0.5]), 1.0, 1.0)
    dt = 1.0 / n_steps
    n = jr.step_index(dt, n_steps)[0]
    assert n * dt < t + 1e-12 and t <= (n + 1) * dt + 1e-12


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        NoiseSpec(k_noise=0)
    with pytest.raises(ConfigurationError):
        NoiseSpec(m=0)
    with pytest.raises(ConfigurationError):
        noise.make_measure("gamma")
    with pytest.raises(DomainError):
        PowerMarks(alpha=1.5)
