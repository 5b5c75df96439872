"""Driving noise: truncated cylindrical Wiener increments and Poisson random measures.

The mark space is the real line. A mark measure ``nu`` is symmetric and
exhausted by ``K_m = {1/m <= |x| <= m}``. Jumps are sampled shell by shell
(``K_j \\ K_{j-1}``), each shell from its own random substream, so the
realisation for level ``m`` is exactly the restriction of the one for any
``m' > m`` drawn from the same seed.

Every event carries a thinning height ``h`` uniform in ``[0, 1]``. A base
realisation drawn with its rate inflated by ``psi_max`` is thinned to the
controlled measure ``N^{eps^{-1} psi}`` by keeping events with
``h * psi_max <= psi(t, x)``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import integrate

from .exceptions import ConfigurationError, ControlClassError, DomainError

WIENER_STREAM = 0
JUMP_STREAM = 1


class ExponentialMarks:
    """Finite measure with density ``mass * rate / 2 * exp(-rate |x|)``."""

    name = "exponential"

    def __init__(self, mass=1.0, rate=1.0):
        if mass < 0 or rate <= 0:
            raise DomainError("exponential mark measure needs mass >= 0 and rate > 0")
        self.mass, self.rate = float(mass), float(rate)
        self.support = (0.0, math.inf)

    def params(self):
        return dict(mass=self.mass, rate=self.rate)

    def density(self, x):
        return 0.5 * self.mass * self.rate * np.exp(-self.rate * np.abs(x))

    def half_mass(self, lo, hi):
        """Mass of ``[lo, hi]`` on the positive half-line."""
        r = self.rate
        return 0.5 * self.mass * (math.exp(-r * lo) - math.exp(-r * hi))

    def half_moment(self, lo, hi):
        r = self.rate
        f = lambda x: (x + 1.0 / r) * math.exp(-r * x)
        return 0.5 * self.mass * (f(lo) - f(hi))

    def half_ppf(self, u, lo, hi):
        r = self.rate
        a, b = math.exp(-r * lo), math.exp(-r * hi)
        return -np.log(a - u * (a - b)) / r


class PowerMarks:
    """Sigma-finite measure with density ``c |x|^{-1-alpha}`` on ``0 < |x| <= cutoff``.

    The defaults give the ``|x|^{-3/2}`` stress case; ``nu(K_m)`` grows like
    ``sqrt(m)``.
    """

    name = "power"

    def __init__(self, c=1.0, alpha=0.5, cutoff=1.0):
        if c < 0 or not 0 < alpha < 1 or cutoff <= 0:
            raise DomainError("power mark measure needs c >= 0, 0 < alpha < 1, cutoff > 0")
        self.c, self.alpha, self.cutoff = float(c), float(alpha), float(cutoff)
        self.support = (0.0, self.cutoff)

    def params(self):
        return dict(c=self.c, alpha=self.alpha, cutoff=self.cutoff)

    def density(self, x):
        ax = np.abs(np.asarray(x, dtype=float))
        with np.errstate(divide="ignore"):
            return np.where((ax > 0) & (ax <= self.cutoff), self.c * ax ** (-1.0 - self.alpha), 0.0)

    def _clip(self, lo, hi):
        return lo, min(hi, self.cutoff)

    def half_mass(self, lo, hi):
        lo, hi = self._clip(lo, hi)
        if hi <= lo:
            return 0.0
        a = self.alpha
        return self.c / a * (lo**-a - hi**-a)

    def half_moment(self, lo, hi):
        lo, hi = self._clip(lo, hi)
        if hi <= lo:
            return 0.0
        a = self.alpha
        return self.c / (1.0 - a) * (hi ** (1 - a) - lo ** (1 - a))

    def half_ppf(self, u, lo, hi):
        lo, hi = self._clip(lo, hi)
        a = self.alpha
        return (lo**-a - u * (lo**-a - hi**-a)) ** (-1.0 / a)


MEASURES = {"exponential": ExponentialMarks, "power": PowerMarks}


def make_measure(name, **params):
    if name not in MEASURES:
        raise ConfigurationError(f"unknown mark measure {name!r}; known: {sorted(MEASURES)}", field="measure")
    return MEASURES[name](**params)


def shell_intervals(j):
    """Positive-half intervals of ``K_j \\ K_{j-1}`` (``K_0`` empty)."""
    if j < 1:
        raise DomainError(f"truncation level must be >= 1, got {j}")
    if j == 1:
        return [(1.0, 1.0)]
    return [(1.0 / j, 1.0 / (j - 1)), (float(j - 1), float(j))]


def truncation_mass(measure, m):
    """``nu(K_m)``."""
    return 2.0 * measure.half_mass(1.0 / m, float(m)) if m > 1 else 0.0


@dataclass(frozen=True)
class MarkGrid:
    """Partition of ``K_m`` into cells of equal ``nu``-mass.

    ``nodes`` are the ``nu``-centroids and ``weights`` the cell masses; a
    function constant on cells integrates exactly. Cells are symmetric:
    the first half covers negative marks.
    """

    edges: np.ndarray  # positive-half edges, increasing, length n_half + 1
    nodes: np.ndarray
    weights: np.ndarray

    @classmethod
    def build(cls, measure, m, n_cells=64):
        if n_cells < 2 or n_cells % 2:
            raise ConfigurationError("must be an even integer >= 2", field="n_mark_cells")
        half = n_cells // 2
        lo, hi = 1.0 / m, float(m)
        hi = min(hi, measure.support[1])
        total = measure.half_mass(lo, hi) if hi > lo else 0.0
        if total <= 0:
            edges = np.linspace(lo, max(hi, lo), half + 1)
            pos_nodes = 0.5 * (edges[:-1] + edges[1:])
            pos_w = np.zeros(half)
        else:
            u = np.linspace(0.0, 1.0, half + 1)
            edges = np.array([measure.half_ppf(ui, lo, hi) for ui in u], dtype=float)
            edges[0], edges[-1] = lo, hi
            pos_w = np.array([measure.half_mass(a, b) for a, b in zip(edges[:-1], edges[1:])])
            moments = np.array([measure.half_moment(a, b) for a, b in zip(edges[:-1], edges[1:])])
            pos_nodes = np.where(pos_w > 0, moments / np.where(pos_w > 0, pos_w, 1.0),
                                 0.5 * (edges[:-1] + edges[1:]))
        nodes = np.concatenate((-pos_nodes[::-1], pos_nodes))
        weights = np.concatenate((pos_w[::-1], pos_w))
        return cls(edges=edges, nodes=nodes, weights=weights)

    @property
    def n_cells(self):
        return self.nodes.size

    @property
    def total_mass(self):
        return float(self.weights.sum())

    def cell_index(self, x):
        """Cell of each mark; -1 for marks outside ``K_m``."""
        x = np.asarray(x, dtype=float)
        ax = np.abs(x)
        half = self.edges.size - 1
        k = np.searchsorted(self.edges, ax, side="right") - 1
        k = np.where(ax == self.edges[-1], half - 1, k)
        inside = (k >= 0) & (k < half)
        idx = np.where(x > 0, half + k, half - 1 - k)
        return np.where(inside, idx, -1)


@dataclass(frozen=True)
class NoiseSpec:
    """Noise configuration: Wiener modes, mark measure, truncation level, eps and seed."""

    measure: object = field(default_factory=ExponentialMarks)
    k_noise: int = 16
    eps: float = 1.0
    seed: int = 0
    m: int = 8
    n_mark_cells: int = 64

    def __post_init__(self):
        if self.k_noise < 1:
            raise ConfigurationError("must be >= 1", field="k_noise")
        if self.m < 1:
            raise ConfigurationError("must be >= 1", field="m_truncation")
        if not self.eps >= 0:
            raise ConfigurationError("must be >= 0", field="eps")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @cached_property
    def mark_grid(self):
        return MarkGrid.build(self.measure, self.m, self.n_mark_cells)

    def nu_K(self, m=None):
        return truncation_mass(self.measure, self.m if m is None else m)


def substream(seed, path, stream):
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(path), int(stream))))


def wiener_increments(spec, n_steps, dt, path=0):
    """I.i.d. ``N(0, dt I)`` vectors of length ``k_noise``; shape ``(n_steps, k_noise)``."""
    if dt < 0:
        raise DomainError(f"dt must be >= 0, got {dt}")
    rng = substream(spec.seed, path, WIENER_STREAM)
    z = rng.standard_normal((n_steps, spec.k_noise))
    return math.sqrt(dt) * z


@dataclass(frozen=True)
class JumpRealization:
    """Marked point process on ``[0, T]``: sorted times, marks and thinning heights.

    ``base_rate`` is the total event rate of the generating homogeneous
    process; ``height_cap`` the ``psi_max`` it was inflated by; ``thinned``
    describes a control applied afterwards, if any.
    """

    times: np.ndarray
    marks: np.ndarray
    heights: np.ndarray
    T: float
    base_rate: float
    height_cap: float = 1.0
    m: int = 1
    eps: float = 1.0
    thinned: str | None = None

    @classmethod
    def empty(cls, T, m=1, eps=1.0, height_cap=1.0):
        z = np.zeros(0)
        return cls(z, z, z, T, 0.0, height_cap, m, eps)

    def __len__(self):
        return self.times.size

    def select(self, keep, **changes):
        return dataclasses.replace(self, times=self.times[keep], marks=self.marks[keep],
                                   heights=self.heights[keep], **changes)

    def restrict(self, m):
        """Events with marks in ``K_m``."""
        ax = np.abs(self.marks)
        return self.select((ax >= 1.0 / m) & (ax <= m), m=m)

    def step_index(self, dt, n_steps):
        """Index ``n`` of the step ``(t_n, t_{n+1}]`` holding each event."""
        idx = np.ceil(self.times / dt).astype(int) - 1
        return np.clip(idx, 0, n_steps - 1)


def sample_prm(spec, m, T, path=0, height_cap=1.0, eps=None):
    """Poisson random measure on ``[0, T] x K_m`` with intensity ``eps^{-1} psi_max dt nu(dx)``."""
    eps = spec.eps if eps is None else eps
    if eps <= 0:
        raise DomainError("sampling a jump realisation needs eps > 0")
    times, marks, heights = [], [], []
    rate = 0.0
    for j in range(1, m + 1):
        rng = substream(spec.seed, path, JUMP_STREAM + j)
        pieces = [(lo, hi, spec.measure.half_mass(lo, hi) if hi > lo else 0.0)
                  for lo, hi in shell_intervals(j)]
        shell_mass = 2.0 * sum(w for _, _, w in pieces)
        lam = height_cap * shell_mass * T / eps
        rate += height_cap * shell_mass / eps
        n = rng.poisson(lam) if lam > 0 else 0
        if n == 0:
            continue
        t = rng.uniform(0.0, T, size=n)
        weights = np.array([w for _, _, w in pieces])
        which = rng.choice(len(pieces), size=n, p=weights / weights.sum())
        u = rng.uniform(size=n)
        x = np.empty(n)
        for i, (lo, hi, _) in enumerate(pieces):
            sel = which == i
            x[sel] = spec.measure.half_ppf(u[sel], lo, hi)
        sign = np.where(rng.uniform(size=n) < 0.5, -1.0, 1.0)
        times.append(t)
        marks.append(sign * x)
        heights.append(rng.uniform(size=n))
    if not times:
        return JumpRealization.empty(T, m, eps, height_cap)
    t = np.concatenate(times)
    x = np.concatenate(marks)
    h = np.concatenate(heights)
    order = np.argsort(t, kind="stable")
    return JumpRealization(t[order], x[order], h[order], T, rate, height_cap, m, eps)


def thin_to_control(base, psi, psi_max=None):
    """Keep events with ``height * psi_max <= psi(t, x)``.

    ``psi`` is a callable ``(times, marks) -> intensities``. The result is a
    Poisson random measure with intensity ``eps^{-1} psi(t, x) dt nu(dx)``.
    """
    cap = base.height_cap if psi_max is None else float(psi_max)
    if cap > base.height_cap * (1 + 1e-12):
        raise ControlClassError(f"psi_max={cap} exceeds the base realisation's cap {base.height_cap}")
    if len(base) == 0:
        return dataclasses.replace(base, thinned="psi")
    vals = np.asarray(psi(base.times, base.marks), dtype=float)
    if np.any(vals < 0) or np.any(vals > cap * (1 + 1e-12)):
        raise ControlClassError(f"control intensity outside [0, psi_max={cap}]")
    keep = base.heights * base.height_cap <= vals
    return base.select(keep, thinned="psi")


def compensated_integral(realization, integrand, mark_grid, dt, n_steps, eps=None, psi=None):
    """Increments of ``eps * int int f(s, x) (N^{eps^{-1} psi} - eps^{-1} psi nu ds)`` per step.

    ``integrand(times, marks)`` returns rows of shape ``(n, n_modes)``. The
    compensator uses left-endpoint time quadrature and the mark grid. Returns
    an array of shape ``(n_steps, n_modes)``.
    """
    eps = realization.eps if eps is None else eps
    t_grid = dt * np.arange(n_steps)
    nodes, w = mark_grid.nodes, mark_grid.weights
    tt = np.repeat(t_grid, nodes.size)
    xx = np.tile(nodes, n_steps)
    comp_vals = np.asarray(integrand(tt, xx), dtype=float)
    n_modes = comp_vals.shape[-1]
    weight = np.tile(w, n_steps)
    if psi is not None:
        weight = weight * np.asarray(psi(tt, xx), dtype=float)
    comp = (comp_vals * weight[:, None]).reshape(n_steps, nodes.size, n_modes).sum(axis=1) * dt
    out = -comp
    if len(realization):
        jumps = eps * np.asarray(integrand(realization.times, realization.marks), dtype=float)
        np.add.at(out, realization.step_index(dt, n_steps), jumps)
    return out


def h_tail_mass(envelope, measure, m, M, T=1.0):
    """``int_0^T int_{K_M \\ K_m} envelope(s, x)^2 nu(dx) ds`` for a time-independent envelope."""
    total = 0.0
    for j in range(m + 1, M + 1):
        for lo, hi in shell_intervals(j):
            hi = min(hi, measure.support[1])
            if hi <= lo:
                continue
            f = lambda x: float(np.asarray(envelope(0.0, np.array([x])))[0]) ** 2 * float(measure.density(x))
            total += integrate.quad(f, lo, hi)[0] + integrate.quad(f, -hi, -lo)[0]
    return T * total


@dataclass
class NoiseRealization:
    """Wiener increments on a uniform grid plus one jump realisation."""

    dW: np.ndarray
    dt: float
    jumps: JumpRealization | None = None

    @property
    def n_steps(self):
        return self.dW.shape[0]

    def coarsen(self, factor):
        """Aggregate Wiener increments over ``factor`` consecutive steps."""
        factor = int(factor)
        if factor < 1 or self.n_steps % factor:
            raise DomainError(f"cannot coarsen {self.n_steps} steps by {factor}")
        dW = self.dW.reshape(self.n_steps // factor, factor, -1).sum(axis=1)
        return NoiseRealization(dW, self.dt * factor, self.jumps)


def sample_noise(spec, T, dt, path=0, height_cap=1.0, eps=None, jumps=True):
    """Full noise for one path; jumps are skipped when ``jumps`` is false or eps is 0."""
    eps = spec.eps if eps is None else eps
    n_steps = int(round(T / dt))
    dW = wiener_increments(spec, n_steps, dt, path)
    jr = None
    if jumps and eps > 0:
        jr = sample_prm(spec, spec.m, T, path, height_cap, eps)
    return NoiseRealization(dW, dt, jr)
