"""Coefficient operators F, B, G1, G2 and falsification probes for H1-H4.

F and B act pointwise (Nemytskii operators ``u(x) -> F(t, u(x))``) and are
supplied as functions of grid values; the solver sees their sine projections.
G1 maps noise-mode coefficients to field coefficients, G2 maps a state and a
mark to a field. All callables are batched over leading axes so the same set
drives single paths and whole ensembles.

Each set carries *declared* constants and envelopes for the hypotheses.
:func:`probe_hypothesis` samples inputs and reports the worst lhs/rhs ratio; it
can falsify a declaration but never certify it.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import spectral
from .exceptions import DomainError
from .spectral import SpatialGrid, SpectralField

HYPOTHESES = ("H1", "H2", "H3", "H4")
VIOLATION_RTOL = 1e-9
#: accepted ratio of successive max-differences in the continuity probe
CONTINUITY_RATIO = 0.55


def mark_profile(x):
    """Mark dependence ``x exp(-|x|)`` of the builtin jump coefficient."""
    x = np.asarray(x, dtype=float)
    return x * np.exp(-np.abs(x))


@dataclass(frozen=True)
class CoefficientSet:
    """Pluggable coefficients with declared constants ``c1..c6`` and envelopes ``h1..h6``.

    ``drift(t, values)`` and ``flux(t, values)`` act on grid values;
    ``diffusion(t, a)`` returns G1 with shape ``(..., n_modes, k_noise)``;
    ``jump(t, a, x)`` returns G2 rows with shape ``(n, n_modes)`` for states
    ``a`` of shape ``(n, n_modes)`` and marks ``x`` of shape ``(n,)``.
    ``None`` stands for an identically zero coefficient.
    """

    name: str
    q: float
    constants: dict
    envelopes: dict
    drift: Callable | None = None
    flux: Callable | None = None
    diffusion: Callable | None = None
    jump: Callable | None = None
    diffusion_apply: Callable | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.q < 2:
            raise DomainError(f"growth exponent q must be >= 2, got {self.q}")

    @property
    def q_conjugate(self):
        return self.q / (self.q - 1.0)

    @property
    def has_gaussian(self):
        return self.diffusion is not None

    @property
    def has_jumps(self):
        return self.jump is not None

    def with_constants(self, **overrides):
        """Copy with some declared constants replaced (used to force probe failures)."""
        return dataclasses.replace(self, constants={**self.constants, **overrides})

    # batched, coefficient-array level

    def drift_coeffs(self, t, a, grid):
        a = np.asarray(a, dtype=float)
        if self.drift is None:
            return np.zeros_like(a)
        vals = spectral.synthesize_coeffs(a, grid)
        return spectral.analyze_values(self.drift(t, vals), grid, a.shape[-1])

    def flux_coeffs(self, t, a, grid):
        a = np.asarray(a, dtype=float)
        if self.flux is None:
            return np.zeros_like(a)
        vals = spectral.synthesize_coeffs(a, grid)
        return spectral.analyze_values(self.flux(t, vals), grid, a.shape[-1])

    def divergence_coeffs(self, t, a, grid):
        """Sine coefficients of ``d/dx B(t, u)``."""
        b = self.flux_coeffs(t, a, grid)
        return b @ spectral.derivative_matrix(b.shape[-1]).T

    def apply_diffusion(self, t, a, w):
        """``G1(t, u) w`` for noise-coefficient vectors ``w`` of shape ``(..., k_noise)``."""
        a = np.asarray(a, dtype=float)
        if self.diffusion is None:
            return np.zeros_like(a)
        if self.diffusion_apply is not None:
            return self.diffusion_apply(t, a, w)
        return np.einsum("...nk,...k->...n", self.diffusion(t, a), w)

    def jump_coeffs(self, t, a, x):
        a = np.asarray(a, dtype=float)
        if self.jump is None:
            return np.zeros((np.shape(x)[0], a.shape[-1]))
        return self.jump(t, a, np.asarray(x, dtype=float))

    # single-field convenience

    def F(self, t, u, grid=None):
        grid = grid or SpatialGrid.for_modes(u.n_modes)
        return SpectralField(self.drift_coeffs(t, u.coeffs, grid))

    def B(self, t, u, grid=None):
        grid = grid or SpatialGrid.for_modes(u.n_modes)
        return SpectralField(self.flux_coeffs(t, u.coeffs, grid))

    def div_B(self, t, u, grid=None):
        grid = grid or SpatialGrid.for_modes(u.n_modes)
        return SpectralField(self.divergence_coeffs(t, u.coeffs, grid))

    def G1(self, t, u, k_noise=None):
        k = k_noise or u.n_modes
        if self.diffusion is None:
            return np.zeros((u.n_modes, k))
        return np.asarray(self.diffusion(t, u.coeffs[None, :]))[0]

    def G2(self, t, u, mark):
        return SpectralField(self.jump_coeffs(t, u.coeffs[None, :], np.atleast_1d(mark))[0])

    def hs_norm(self, t, u):
        return float(np.linalg.norm(self.G1(t, u)))


def _const(c):
    return lambda t: float(c)


def builtin_polynomial_set(a=1.0, b=1.0, beta=0.5, g1=0.5, p=1.0, g2=1.0,
                           multiplicative=True, name="polynomial"):
    """Polynomial coefficient family with analytically declared constants.

    ``F(u) = -a u^3 + b u`` and ``B(u) = beta u`` pointwise; G1 is diagonal
    with entries ``g1 (k pi)^{-p}``; ``G2(u, x) = g2 x exp(-|x|) phi_1``. With
    ``multiplicative=True`` both noise coefficients carry the factor
    ``1 + ||u||_2``.
    """
    if a < 0:
        raise DomainError(f"cubic coefficient a={a} < 0 breaks the coercivity bound of H2")
    if p <= 0.5:
        raise DomainError(f"noise decay p={p} must exceed 1/2 for a Hilbert-Schmidt G1")

    params = dict(a=a, b=b, beta=beta, g1=g1, p=p, g2=g2, multiplicative=multiplicative)
    cubic = a > 0
    q = 4.0 if cubic else 2.0
    bp = max(b, 0.0)

    drift = None
    if a != 0 or b != 0:
        if a:
            def drift(t, u):
                return (b - a * u * u) * u
        else:
            def drift(t, u):
                return b * u

    flux = None
    if beta != 0:
        def flux(t, u):
            return beta * u

    def amplitude(arr):
        if multiplicative:
            return 1.0 + spectral.l2_norm(arr)
        return np.ones(np.shape(arr)[:-1])

    diffusion = diffusion_apply = None
    if g1 != 0:
        def _sigma(n_modes):
            return g1 * spectral.wavenumbers(n_modes) ** (-p)

        def diffusion(t, arr):
            arr = np.asarray(arr, dtype=float)
            n = arr.shape[-1]
            return amplitude(arr)[..., None, None] * np.diag(_sigma(n))

        def diffusion_apply(t, arr, w):
            arr = np.asarray(arr, dtype=float)
            n = arr.shape[-1]
            k = min(n, w.shape[-1])
            out = np.zeros(np.broadcast_shapes(arr.shape, w.shape[:-1] + (n,)))
            out[..., :k] = _sigma(n)[:k] * w[..., :k]
            return amplitude(arr)[..., None] * out

    jump = None
    if g2 != 0:
        def jump(t, arr, x):
            arr = np.asarray(arr, dtype=float)
            out = np.zeros((x.shape[0], arr.shape[-1]))
            out[:, 0] = g2 * mark_profile(x) * amplitude(arr)
            return out

    # H3 constant depends on the mode count; declared for the spectrum's infinite sum
    s2 = g1**2 * np.sum(np.pi ** (-2 * p) * np.arange(1, 100001, dtype=float) ** (-2 * p))
    s2 += g1**2 * np.pi ** (-2 * p) * 100000.0 ** (1 - 2 * p) / (2 * p - 1)
    if cubic:
        c5 = (a + abs(b)) ** (4.0 / 3.0)
        h2, h3, c4 = bp, c5, a
    else:
        c5, h3, c4 = b**2, 0.0, 1.0
        h2 = bp + c4
    constants = dict(
        c1=beta**2, c2=beta**2, c3=bp, c4=c4, c5=c5,
        c6=s2 if multiplicative else 0.0,
    )
    env_g2 = lambda t, x: abs(g2) * np.abs(mark_profile(x))
    envelopes = dict(
        h1=_const(0.0), h2=_const(h2), h3=_const(h3),
        h4=_const(2.0 * s2 if multiplicative else s2),
        h5=env_g2 if multiplicative else (lambda t, x: np.zeros_like(np.asarray(x, dtype=float))),
        h6=env_g2,
    )
    return CoefficientSet(name=name, q=q, constants=constants, envelopes=envelopes,
                          drift=drift, flux=flux, diffusion=diffusion, jump=jump,
                          diffusion_apply=diffusion_apply, params=params)


BUILTIN_PRESETS = {
    "cubic": dict(a=1.0, b=1.0, beta=0.5, g1=0.5, p=1.0, g2=1.0, multiplicative=True),
    "linear": dict(a=0.0, b=-1.0, beta=0.5, g1=0.5, p=1.0, g2=0.5, multiplicative=False),
    "gaussian-only": dict(a=1.0, b=1.0, beta=0.5, g1=0.5, p=1.0, g2=0.0, multiplicative=True),
    "jump-only": dict(a=1.0, b=1.0, beta=0.5, g1=0.0, p=1.0, g2=1.0, multiplicative=True),
    "zero": dict(a=0.0, b=0.0, beta=0.0, g1=0.0, p=1.0, g2=0.0, multiplicative=False),
}

_REGISTRY: dict[str, Callable[..., CoefficientSet]] = {}


def register_coefficient_set(name, factory):
    """Make ``factory(**params) -> CoefficientSet`` selectable by name in configs."""
    _REGISTRY[name] = factory


def get_coefficient_set(name, **overrides):
    if name in _REGISTRY:
        return _REGISTRY[name](**overrides)
    if name not in BUILTIN_PRESETS:
        raise DomainError(f"unknown coefficient set {name!r}; known: {available_sets()}")
    return builtin_polynomial_set(**{**BUILTIN_PRESETS[name], **overrides}, name=name)


def available_sets():
    return sorted(set(BUILTIN_PRESETS) | set(_REGISTRY))


# probes


@dataclass
class ProbeReport:
    hypothesis: str
    n_samples: int
    worst_ratio: float
    worst_inequality: str
    violation: dict | None = None

    @property
    def passed(self):
        return self.violation is None

    def __str__(self):
        status = "pass" if self.passed else "VIOLATION"
        return (f"{self.hypothesis}: {status} (n={self.n_samples}, worst lhs/rhs="
                f"{self.worst_ratio:.6g} in {self.worst_inequality})")


def _ratio(lhs, rhs):
    if rhs > 0:
        return lhs / rhs
    return 0.0 if lhs <= 0 else np.inf


def _violates(lhs, rhs):
    return lhs > rhs + VIOLATION_RTOL * abs(rhs) if rhs != 0 else lhs > 0


def random_fields(rng, n, n_modes, radius):
    """``n`` random coefficient vectors, decaying spectrum, L2 norms uniform in [0, radius]."""
    a = rng.standard_normal((n, n_modes)) / np.arange(1, n_modes + 1)
    r = radius * rng.uniform(size=n)
    nrm = np.linalg.norm(a, axis=1)
    return a * np.where(nrm > 0, r / np.where(nrm > 0, nrm, 1.0), 0.0)[:, None]


def hypothesis_terms(cs, hypothesis, t, v1, v2, x, grid):
    """``[(label, lhs, rhs), ...]`` for every inequality of one hypothesis.

    ``v1``, ``v2`` are coefficient arrays of shape ``(n, n_modes)`` and ``x``
    marks of shape ``(n,)``; ``lhs`` and ``rhs`` come back with shape ``(n,)``.
    Each entry reads ``lhs <= rhs`` with a nonnegative right-hand side.
    """
    v1, v2 = np.atleast_2d(v1), np.atleast_2d(v2)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    c, h = cs.constants, cs.envelopes
    d = v1 - v2
    n2 = lambda v: np.sum(np.square(v), axis=-1)
    if hypothesis == "H1":
        b1, b2 = cs.flux_coeffs(t, v1, grid), cs.flux_coeffs(t, v2, grid)
        return [
            ("H1.1 Lipschitz", n2(b1 - b2), c["c1"] * n2(d)),
            ("H1.2 growth", n2(b1), c["c2"] * n2(v1) + h["h1"](t)),
        ]
    if hypothesis == "H2":
        q, qs = cs.q, cs.q_conjugate
        f1, f2 = cs.drift_coeffs(t, v1, grid), cs.drift_coeffs(t, v2, grid)
        lq = spectral.lq_norm(v1, q, grid) ** q
        if cs.drift is None:
            fq = np.zeros(len(v1))
        else:
            fq = grid.integrate(np.abs(cs.drift(t, spectral.synthesize_coeffs(v1, grid))) ** qs)
        return [
            ("H2.1 monotonicity", np.sum(d * (f1 - f2), axis=-1), c["c3"] * n2(d)),
            ("H2.2 coercivity", np.sum(v1 * f1, axis=-1) + c["c4"] * lq, h["h2"](t) * (1.0 + n2(v1))),
            ("H2.3 growth", fq, c["c5"] * lq + h["h3"](t)),
        ]
    if hypothesis == "H3":
        if cs.diffusion is None:
            m1 = m2 = np.zeros(v1.shape + (1,))
        else:
            m1, m2 = np.asarray(cs.diffusion(t, v1)), np.asarray(cs.diffusion(t, v2))
        return [
            ("H3.1 Lipschitz", np.sum((m1 - m2) ** 2, axis=(-2, -1)), c["c6"] * n2(d)),
            ("H3.2 growth", np.sum(m1**2, axis=(-2, -1)), h["h4"](t) * (1.0 + n2(v1))),
        ]
    if hypothesis == "H4":
        j1, j2 = cs.jump_coeffs(t, v1, x), cs.jump_coeffs(t, v2, x)
        h5 = np.asarray(h["h5"](t, x), dtype=float)
        h6 = np.asarray(h["h6"](t, x), dtype=float)
        return [
            ("H4.1 Lipschitz", np.sqrt(n2(j1 - j2)), h5 * np.sqrt(n2(d))),
            ("H4.2 growth", np.sqrt(n2(j1)), h6 * (1.0 + np.sqrt(n2(v1)))),
        ]
    raise DomainError(f"unknown hypothesis {hypothesis!r}; expected one of {HYPOTHESES}")


def continuity_differences(cs, t, x, y, z, grid, n_points=101):
    """Max successive difference of ``eta -> <x, F(t, y + eta z)>`` on ``n_points``."""
    eta = np.linspace(0.0, 1.0, n_points)
    states = y[None, :] + eta[:, None] * z[None, :]
    vals = cs.drift_coeffs(t, states, grid) @ x
    return float(np.max(np.abs(np.diff(vals))))


def probe_hypothesis(cs, hypothesis, n_samples=1000, field_radius=1.0, n_modes=16,
                     T=1.0, seed=0, n_times=8):
    """Falsification sampling of one hypothesis with the set's declared constants.

    Samples are split into ``n_times`` groups sharing a random time.
    """
    if hypothesis not in HYPOTHESES:
        raise DomainError(f"unknown hypothesis {hypothesis!r}; expected one of {HYPOTHESES}")
    if n_samples < 1:
        raise DomainError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    grid = SpatialGrid.for_modes(n_modes)
    worst, worst_label, violation = -np.inf, "", None

    def record(label, lhs, rhs, t, v1=None, v2=None, x=None):
        nonlocal worst, worst_label, violation
        lhs, rhs = np.atleast_1d(lhs), np.atleast_1d(rhs)
        ratios = np.array([_ratio(a, b) for a, b in zip(lhs, rhs)])
        i = int(np.argmax(ratios))
        if ratios[i] > worst:
            worst, worst_label = float(ratios[i]), label
        bad = [j for j, (a, b) in enumerate(zip(lhs, rhs)) if _violates(a, b)]
        if violation is None and bad:
            j = bad[0]
            violation = dict(inequality=label, t=t, lhs=float(lhs[j]), rhs=float(rhs[j]))
            if v1 is not None:
                violation.update(v1=v1[j], v2=v2[j], mark=float(x[j]))

    for group in np.array_split(np.arange(n_samples), min(n_times, n_samples)):
        n = len(group)
        t = T * rng.uniform()
        v1 = random_fields(rng, n, n_modes, field_radius)
        v2 = random_fields(rng, n, n_modes, field_radius)
        # a quarter of the pairs are near-diagonal, where Lipschitz bounds are tight
        near = rng.uniform(size=n) < 0.25
        v2[near] = v1[near] + random_fields(rng, int(near.sum()), n_modes, 1e-3 * field_radius)
        x = 3.0 * rng.standard_normal(n)
        for label, lhs, rhs in hypothesis_terms(cs, hypothesis, t, v1, v2, x, grid):
            record(label, lhs, rhs, t, v1, v2, x)
        if hypothesis == "H2" and cs.drift is not None:
            y, z, xf = random_fields(rng, 3, n_modes, field_radius)
            coarse = continuity_differences(cs, t, xf, y, z, grid, 101)
            fine = continuity_differences(cs, t, xf, y, z, grid, 201)
            # differences below roundoff carry no information
            if fine > 1e-12 * (1.0 + coarse):
                record("H2.4 continuity", fine, CONTINUITY_RATIO * coarse, t)
    return ProbeReport(hypothesis=hypothesis, n_samples=n_samples, worst_ratio=float(worst),
                       worst_inequality=worst_label, violation=violation)


def probe_all(cs, n_samples=1000, radii=(1.0, 10.0, 100.0), n_modes=16, seed=0):
    return [probe_hypothesis(cs, h, n_samples, r, n_modes=n_modes, seed=seed + j)
            for j, r in enumerate(radii) for h in HYPOTHESES]
