"""Acceptance suite: twelve criteria, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -v`` (the summary lines are printed
at the end of the session) or ``python tests/test_acceptance.py``.
"""

import math
import sys
import time

import numpy as np
import pytest

from memheat import coefficients as C, io, ldp, memory, noise, solver
from memheat.exceptions import DomainError
from memheat.memory import MemoryKernel
from memheat.noise import NoiseSpec
from memheat.solver import SimConfig

RESULTS = []


def record(n, name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d} {name}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def builtin(name, **kw):
    return C.get_coefficient_set(name, **kw)


def scalar_gaussian():
    # one mode, a' = -(pi^2 + 1) a + sigma (f or noise), sigma = g1 / pi = 1
    return C.builtin_polynomial_set(a=0.0, b=-1.0, beta=0.0, g1=math.pi, p=1.0, g2=0.0,
                                    multiplicative=False, name="scalar-ou")


KAPPA = math.pi**2 + 1.0


# 1


def test_01_heat_decay():
    t0 = time.perf_counter()
    exact = math.exp(-(math.pi**2) * 0.1)
    errs = []
    for dt in (1e-3, 5e-4):
        cfg = SimConfig(T=0.1, dt=dt, n_modes=8, coeffs=builtin("zero"), u0=np.eye(8)[0])
        errs.append(abs(solver.solve(cfg).terminal.coeffs[0] - exact) / exact)
    elapsed = time.perf_counter() - t0
    ratio = errs[0] / errs[1]
    ok = errs[0] < 0.015 and 1.6 <= ratio <= 2.4 and elapsed < 1.0
    record(1, "heat decay", ok, f"rel err {errs[0]:.4%}, halving ratio {ratio:.3f}, {elapsed:.2f}s")


# 2


def test_02_delta_horizon_closed_forms():
    cases = [
        (MemoryKernel.exponential(1.0, 2.0), [(math.inf, 0.5), (1.0, 0.5 * (1 - math.exp(-2.0)))], math.inf),
        (MemoryKernel.exponential(2.0, 2.0), [(math.inf, 1.0), (0.25, 1 - math.exp(-0.5))], math.log(2) / 2),
        (MemoryKernel.exponential(3.0, 1.0), [(0.5, 3 * (1 - math.exp(-0.5)))], -math.log(1 - 1 / 6)),
    ]
    worst = 0.0
    for k, pairs, T0 in cases:
        for t, val in pairs:
            worst = max(worst, abs(memory.delta(k, t) - val))
        got = memory.horizon_T0(k)
        worst = max(worst, 0.0 if (math.isinf(T0) and math.isinf(got)) else abs(got - T0))
        worst = max(worst, memory.delta(k, 0.0))
    record(2, "delta/T0 closed forms", worst < 1e-10, f"max abs error {worst:.2e}")


# 3


def test_03_hypothesis_probes():
    t0 = time.perf_counter()
    failed = []
    for name in ("cubic", "linear", "gaussian-only", "jump-only", "zero"):
        for rep in C.probe_all(builtin(name), n_samples=1000, radii=(1.0, 10.0, 100.0)):
            if not rep.passed:
                failed.append(f"{name}/{rep}")
    forced = builtin("cubic").with_constants(c1=0.0)
    forced_rejected = not all(r.passed for r in C.probe_all(forced, n_samples=1000))
    try:
        C.builtin_polynomial_set(a=-1.0)
        negative_rejected = False
    except DomainError:
        negative_rejected = True
    elapsed = time.perf_counter() - t0
    ok = not failed and forced_rejected and negative_rejected and elapsed < 10
    record(3, "hypothesis probes", ok,
           f"{len(failed)} builtin failures, forced set rejected={forced_rejected}, "
           f"a<0 rejected={negative_rejected}, {elapsed:.2f}s")


# 4


def picard_config(dt, eps):
    return SimConfig(T=0.2, dt=dt, n_modes=16, coeffs=builtin("linear"),
                     kernel=MemoryKernel.exponential(0.5, 2.0), u0=np.eye(16)[0] + 0.3 * np.eye(16)[2],
                     noise=NoiseSpec(k_noise=16, m=4, n_mark_cells=16, seed=2, eps=eps),
                     picard_tol=1e-10, picard_max_iter=30)


def test_04_picard_construction():
    t0 = time.perf_counter()
    details, ok = [], True
    for eps in (0.0, 0.1, 1.0):
        dts = (2e-3, 1e-3, 5e-4)
        fine = noise.sample_noise(picard_config(dts[-1], eps).noise, 0.2, dts[-1], path=0) if eps else None
        dist = []
        for dt in dts:
            cfg = picard_config(dt, eps)
            nr = None if fine is None else fine.coarsen(int(round(dt / dts[-1])))
            traj, rep = solver.solve_picard(cfg, eps, noise_realization=nr)
            direct = solver.solve(cfg, eps, noise_realization=nr)
            ratios = rep.ratios(0)
            geometric = bool(np.all(ratios < 1)) and rep.distances[0][-1] < 1e-6
            ok = ok and rep.all_converged and geometric and len(rep.distances[0]) <= 30
            dist.append(traj.sup_distance(direct))
        shrink = [b / a for a, b in zip(dist, dist[1:])]
        ok = ok and all(s <= 0.6 for s in shrink)
        details.append(f"eps={eps}: picard-vs-direct {dist[0]:.2e}->{dist[-1]:.2e} (ratios "
                       + ", ".join(f"{s:.2f}" for s in shrink) + ")")
    elapsed = time.perf_counter() - t0
    ok = ok and elapsed < 60
    record(4, "Picard construction", ok, "; ".join(details) + f"; {elapsed:.1f}s")


# 5


@pytest.mark.slow
def test_05_moment_bounds():
    t0 = time.perf_counter()
    cfg = SimConfig(T=1.0, dt=1e-3, n_modes=16, coeffs=builtin("cubic"), u0=np.eye(16)[0],
                    kernel=MemoryKernel.exponential(0.5, 2.0),
                    noise=NoiseSpec(k_noise=16, m=8, n_mark_cells=32, seed=0, eps=0.1))
    a = solver.solve_ensemble(cfg, 0.1, 1000)
    b = solver.solve_ensemble(cfg, 0.1, 1000, first_path=1000)
    m1 = a.means()
    both = {k: 0.5 * (m1[k] + v) for k, v in b.means().items()}
    change = {k: abs(both[k] - m1[k]) / m1[k] for k in m1}
    finite = all(np.isfinite(v) for v in both.values())
    elapsed = time.perf_counter() - t0
    ok = finite and max(change.values()) < 0.10 and elapsed < 300
    record(5, "moment-bound monitor", ok,
           ", ".join(f"{k}={both[k]:.4g} (change {change[k]:.2%})" for k in m1) + f"; {elapsed:.1f}s")


# 6


def test_06_thinning():
    t0 = time.perf_counter()
    T, n_draws = 1.0, 10_000
    spec = NoiseSpec(seed=17, m=6, n_mark_cells=16, eps=1.0)
    psi = lambda t, x: np.where(t < T / 2, 2.0, 0.0)
    early = late = 0
    n_steps, dt = 10, 0.1
    integrand = lambda t, x: np.full((np.size(t), 1), 1.0)
    finals = np.empty(n_draws)
    for p in range(n_draws):
        thinned = noise.thin_to_control(noise.sample_prm(spec, 6, T, p, height_cap=2.0), psi)
        k = int(np.sum(thinned.times < T / 2))
        early += k
        late += len(thinned) - k
        finals[p] = noise.compensated_integral(thinned, integrand, spec.mark_grid, dt, n_steps, psi=psi).sum()
    # psi = 2 then 0: all events in the first half, rate 2 nu(K_m)
    lam = 2 * spec.nu_K() * T / 2
    z_rate = (early - n_draws * lam) / math.sqrt(n_draws * lam)
    # companion check with psi = 2 then 1: early rate twice the late rate
    psi2 = lambda t, x: np.where(t < T / 2, 2.0, 1.0)
    e2 = l2 = 0
    for p in range(n_draws):
        th = noise.thin_to_control(noise.sample_prm(spec, 6, T, n_draws + p, height_cap=2.0), psi2)
        k = int(np.sum(th.times < T / 2))
        e2 += k
        l2 += len(th) - k
    z_ratio = (e2 - 2 * l2) / math.sqrt(e2 + 4 * l2)
    z_mean = finals.mean() / (finals.std(ddof=1) / math.sqrt(n_draws))
    elapsed = time.perf_counter() - t0
    ok = late == 0 and abs(z_rate) < 3 and abs(z_ratio) < 3 and abs(z_mean) < 3 and elapsed < 60
    record(6, "thinning", ok, f"early-rate z={z_rate:.2f}, late events={late}, 2:1 ratio z={z_ratio:.2f}, "
                              f"compensated mean z={z_mean:.2f}, {elapsed:.1f}s")


# 7


@pytest.mark.slow
def test_07_y_scaling():
    t0 = time.perf_counter()
    cfg = SimConfig(T=0.5, dt=1e-3, n_modes=16, coeffs=builtin("cubic"), u0=np.eye(16)[0],
                    kernel=MemoryKernel.exponential(0.5, 2.0),
                    noise=NoiseSpec(k_noise=16, m=8, n_mark_cells=32, seed=4))
    ctl = ldp.ControlPair.for_config(cfg, f=np.r_[0.5, np.zeros(15)],
                                     g=np.where(cfg.noise.mark_grid.nodes > 0, 1.5, 1.0))
    eps_list = [1e-1, 1e-2, 1e-3, 1e-4]
    med, gaps = [], []
    for eps in eps_list:
        ens = solver.solve_ensemble(cfg, eps, 200, ctl, track_yzj=True)
        med.append(float(np.median(ens.extras["sup_y_l2sq"])))
        gaps.append(float(ens.extras["j_gap"].max()))
    slope = float(np.polyfit(np.log(eps_list), np.log(med), 1)[0])
    elapsed = time.perf_counter() - t0
    ok = abs(slope - 1) <= 0.15 and max(gaps) < 10 * cfg.dt and elapsed < 600
    record(7, "Y scaling", ok, f"slope {slope:.4f}, medians {', '.join(f'{m:.2e}' for m in med)}, "
                               f"max |J_sub - J| {max(gaps):.1e}, {elapsed:.1f}s")


# 8


@pytest.mark.slow
def test_08_c2_convergence():
    t0 = time.perf_counter()
    cfg = SimConfig(T=0.5, dt=1e-3, n_modes=16, coeffs=builtin("gaussian-only"), u0=np.eye(16)[0],
                    kernel=MemoryKernel.exponential(0.5, 2.0), noise=NoiseSpec(k_noise=16, seed=8))
    ctl = ldp.ControlPair.for_config(cfg, f=np.r_[0.5, np.zeros(15)])
    rep = ldp.c2_convergence_experiment(ctl, [1e-1, 1e-2, 1e-3, 1e-4], 200, cfg, tol=1e-3)
    elapsed = time.perf_counter() - t0
    ok = rep.passed and elapsed < 600
    record(8, "C2 convergence", ok, f"medians {', '.join(f'{m:.2e}' for m in rep.medians)}, "
                                    f"decreasing={rep.decreasing}, slope {rep.slope:.3f}, {elapsed:.1f}s")


# 9


def test_09_rate_oracle():
    t0 = time.perf_counter()
    cfg = SimConfig(T=0.3, dt=1e-3, n_modes=1, coeffs=scalar_gaussian(), noise=NoiseSpec(k_noise=1), n_quad=16)
    errs = []
    for z, r in ((0.5, 0.0), (0.5, 0.1)):
        est = ldp.rate_function(ldp.TerminalTarget([z], r), cfg, n_time_blocks=20, n_starts=2)
        exact = ldp.lqr_value(KAPPA, 1.0, cfg.T, 0.0, z, r)
        errs.append(abs(est.value - exact) / exact)
    # zero-cost target: the unforced endpoint, here in a set with jumps so g is optimised too
    jcfg = SimConfig(T=0.05, dt=1e-3, n_modes=4, coeffs=builtin("linear"), u0=np.eye(4)[0],
                     noise=NoiseSpec(k_noise=4, m=4, n_mark_cells=8))
    end = ldp.skeleton_solve(ldp.ControlPair.zero(jcfg), jcfg).states[-1]
    zero = ldp.rate_function(ldp.TerminalTarget(end, 0.01), jcfg, n_time_blocks=4, n_starts=2)
    zero_ok = (zero.value == 0.0 and np.all(zero.controls.f == 0) and np.all(zero.controls.g == 1.0)
               and zero.converged)
    elapsed = time.perf_counter() - t0
    ok = max(errs) < 0.02 and zero_ok and elapsed < 120
    record(9, "rate-function oracle", ok, f"LQR rel errors {', '.join(f'{e:.3%}' for e in errs)}, "
                                          f"zero target value={zero.value} minimizer=(0,1):{zero_ok}, {elapsed:.1f}s")


# 10


@pytest.mark.slow
def test_10_ldp_cross_check():
    t0 = time.perf_counter()
    eps, n = 0.01, 100_000
    cfg = SimConfig(T=0.3, dt=1e-3, n_modes=1, coeffs=scalar_gaussian(), noise=NoiseSpec(k_noise=1, seed=11),
                    n_quad=16)
    z, r = 0.11, 0.04
    target = ldp.TerminalTarget([z], r)
    est = ldp.rate_function(target, cfg, n_time_blocks=20, n_starts=2)
    rep = ldp.rare_event_mc(target, [eps], n, cfg, rate=est.value)
    mc = rep.log_rates[0]
    mean, var = ldp.ou_terminal_law(KAPPA, 1.0, cfg.T, 0.0)
    tail = ldp.gaussian_ball_log_rate(eps, mean, var, z, r)
    rate = ldp.lqr_value(KAPPA, 1.0, cfg.T, 0.0, z, r)
    mc_vs_tail = abs(mc - tail) / tail
    lo, hi = est.interval
    # the rate is the eps -> 0 limit and sits below -eps log p at finite eps
    brackets = lo <= mc and lo * (1 - 0.02) <= rate <= hi * (1 + 0.02)
    elapsed = time.perf_counter() - t0
    ok = mc_vs_tail < 0.25 and brackets and not rep.one_sided[0] and elapsed < 900
    record(10, "LDP cross-check", ok,
           f"MC -eps log p={mc:.4f} ({rep.hits[0]} hits), Gaussian tail={tail:.4f} (diff {mc_vs_tail:.1%}), "
           f"rate estimate [{lo:.4f}, {hi:.4f}] vs analytic rate {rate:.4f}, {elapsed:.1f}s")


# 11


def test_11_functional_identities():
    rng = np.random.default_rng(0)
    f = rng.standard_normal((200, 5))
    dt = 1e-3
    w = np.full(8, 0.125)
    quad = [abs(ldp.q1(c * f, dt) - c * c * ldp.q1(f, dt)) / (c * c * ldp.q1(f, dt)) for c in (0.3, 2.0, -7.5)]
    vals = dict(l1=ldp.ell(1.0), l0=ldp.ell(0.0), le=ldp.ell(math.e), q2=ldp.q2(np.ones((200, 8)), dt, w))
    ok = (vals["l1"] == 0.0 and vals["l0"] == 1.0 and abs(vals["le"] - 1.0) <= 4e-16 and vals["q2"] == 0.0
          and max(quad) <= 4e-16)
    record(11, "functional identities", ok,
           f"ell(1)={vals['l1']}, ell(0)={vals['l0']}, ell(e)-1={vals['le'] - 1:.1e}, Q2(1)={vals['q2']}, "
           f"max Q1 scaling rel err {max(quad):.1e}")


# 12


def test_12_reproducibility(tmp_path):
    t0 = time.perf_counter()
    cfg = SimConfig(T=0.1, dt=1e-3, n_modes=8, coeffs=builtin("cubic"), u0=np.eye(8)[0],
                    kernel=MemoryKernel.exponential(0.5, 2.0), noise=NoiseSpec(k_noise=8, m=4, seed=12))
    a = io.write_trajectory(tmp_path / "a.bin", solver.solve(cfg, 0.1, path=0)).read_bytes()
    b = io.write_trajectory(tmp_path / "b.bin", solver.solve(cfg, 0.1, path=0)).read_bytes()
    elapsed = time.perf_counter() - t0
    record(12, "reproducibility", a == b and elapsed < 1.0,
           f"{len(a)} bytes, identical={a == b}, {elapsed:.2f}s")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-p", "no:cacheprovider"]))
