"""Time stepping for the stochastic heat equation with memory.

Semi-implicit Galerkin scheme in the sine basis: the Laplacian is taken
implicitly (a diagonal solve), everything else explicitly at the left end of
the step. Jumps falling in a step are applied at its end with the pre-step
state as left limit.

States are coefficient arrays with a leading path axis, so one code path
integrates a single trajectory, an ensemble chunk, or the zero-noise skeleton.
The same stepper with ``eps = 0`` *is* the skeleton map.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import types
from dataclasses import dataclass, field

import numpy as np

from . import memory, noise, spectral
from .coefficients import CoefficientSet
from .exceptions import BlowUpError, ConfigurationError, ConsistencyError, DomainError
from .memory import MemoryKernel, PrescribedPast
from .noise import NoiseRealization, NoiseSpec
from .spectral import SpatialGrid, SpectralField

SCHEMES = ("semi_implicit_euler", "picard")
#: cap on dW entries held in memory per ensemble chunk
CHUNK_BUDGET = 4_000_000


@dataclass(frozen=True)
class SimConfig:
    T: float
    dt: float
    n_modes: int
    coeffs: CoefficientSet
    kernel: MemoryKernel = field(default_factory=MemoryKernel.zero)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    u0: np.ndarray | None = None
    past: PrescribedPast | None = None  # None: constant past equal to u0
    scheme: str = "semi_implicit_euler"
    picard_tol: float = 1e-8
    picard_max_iter: int = 30
    picard_m_sweep: tuple = ()
    n_quad: int | None = None

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigurationError(f"must be > 0, got {self.dt}", field="dt")
        if not self.T > 0:
            raise ConfigurationError(f"must be > 0, got {self.T}", field="T")
        ratio = self.T / self.dt
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise ConfigurationError(f"T={self.T} is not an integer multiple of dt={self.dt}", field="dt")
        if int(self.n_modes) != self.n_modes or self.n_modes < 1:
            raise ConfigurationError("must be a positive integer", field="n_modes")
        if self.scheme not in SCHEMES:
            raise ConfigurationError(f"unknown scheme {self.scheme!r}", field="scheme")
        if not self.picard_tol > 0:
            raise ConfigurationError("must be > 0", field="picard_tol")
        if self.picard_max_iter < 1:
            raise ConfigurationError("must be >= 1", field="picard_max_iter")
        u0 = np.zeros(self.n_modes) if self.u0 is None else getattr(self.u0, "coeffs", self.u0)
        u0 = np.asarray(u0, dtype=float).reshape(-1)
        fitted = np.zeros(self.n_modes)
        fitted[: min(u0.size, self.n_modes)] = u0[: self.n_modes]
        fitted.setflags(write=False)
        object.__setattr__(self, "u0", fitted)

    @property
    def n_steps(self):
        return int(round(self.T / self.dt))

    @property
    def times(self):
        return self.dt * np.arange(self.n_steps + 1)

    @property
    def m_truncation(self):
        return self.noise.m

    @property
    def grid(self):
        return SpatialGrid.for_modes(self.n_modes, self.n_quad)

    @property
    def prescribed_past(self):
        return PrescribedPast.constant(self.u0) if self.past is None else self.past

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def describe(self):
        """Plain-data description; seed and eps are left out (they travel separately)."""
        k = self.kernel
        past = self.prescribed_past
        return dict(
            T=self.T, dt=self.dt, n_modes=self.n_modes, scheme=self.scheme,
            n_quad=self.grid.n_quad,
            coeffs=dict(name=self.coeffs.name, params=self.coeffs.params),
            kernel=dict(form=k.form, a=k.a, eta=k.eta,
                        grid=None if k.grid is None else k.grid.tolist(),
                        values=None if k.values is None else k.values.tolist()),
            noise=dict(measure=self.noise.measure.name, params=self.noise.measure.params(),
                       k_noise=self.noise.k_noise, m=self.noise.m,
                       n_mark_cells=self.noise.n_mark_cells),
            u0=self.u0.tolist(),
            past=dict(kind=past.kind, value=None if past.value is None else np.asarray(past.value).tolist()),
            picard=dict(tol=self.picard_tol, max_iter=self.picard_max_iter, m_sweep=list(self.picard_m_sweep)),
        )

    def config_hash(self):
        blob = json.dumps(self.describe(), sort_keys=True, default=repr).encode()
        return hashlib.sha256(blob).hexdigest()


def diagnostics(a, grid, q):
    """``||u||_2^2``, ``||u||_{2,1}^2`` and ``||u||_q^q`` along the last axis."""
    a = np.asarray(a, dtype=float)
    l2 = np.sum(a * a, axis=-1)
    h1 = np.sum((a * spectral.wavenumbers(a.shape[-1])) ** 2, axis=-1)
    vals = spectral.synthesize_coeffs(a, grid)
    lq = grid.integrate(spectral.abs_power(vals, q))
    return l2, h1, lq


@dataclass
class Trajectory:
    """One path on the grid ``0, dt, ..., T`` with per-time diagnostics."""

    times: np.ndarray
    states: np.ndarray  # (n_times, n_modes)
    diagnostics: dict
    metadata: dict = field(default_factory=dict)
    noise: NoiseRealization | None = None

    @property
    def n_steps(self):
        return self.times.size - 1

    @property
    def dt(self):
        return float(self.times[1] - self.times[0])

    def state(self, i):
        return SpectralField(self.states[i])

    @property
    def terminal(self):
        return self.state(-1)

    @property
    def sup_l2sq(self):
        return float(self.diagnostics["l2sq"].max())

    @property
    def int_h1sq(self):
        return float(self.dt * self.diagnostics["h1sq"][1:].sum())

    @property
    def int_lqq(self):
        return float(self.dt * self.diagnostics["lqq"][1:].sum())

    def sup_distance(self, other):
        """``sup_t ||u(t) - v(t)||_2`` on the common grid."""
        b = other.states if isinstance(other, Trajectory) else np.asarray(other)
        if b.shape != self.states.shape:
            raise DomainError(f"trajectory shapes differ: {self.states.shape} vs {b.shape}")
        return float(np.sqrt(np.max(np.sum((self.states - b) ** 2, axis=-1))))


def _trajectory(cfg, states, eps, seed, path, jump_counts=None, noise_real=None, **extra):
    l2, h1, lq = diagnostics(states, cfg.grid, cfg.coeffs.q)
    diag = dict(l2sq=l2, h1sq=h1, lqq=lq)
    if jump_counts is not None:
        diag["jumps"] = jump_counts
    meta = dict(seed=seed, eps=eps, path=path, config_hash=cfg.config_hash(), scheme=cfg.scheme, **extra)
    return Trajectory(cfg.times, states, diag, meta, noise_real)


class Dynamics:
    """Per-run operator cache: implicit resolvent, mark quadrature, controls.

    ``controls`` is any object with ``f`` (``(n_steps, k_noise)`` or None) and
    ``g`` (``(n_steps, n_cells)`` on the noise spec's mark grid, or None).
    Either may carry a leading path axis, one control per row of the batch;
    batched ``g`` is only supported without noise.
    """

    def __init__(self, cfg, eps=0.0, controls=None):
        if eps < 0:
            raise DomainError(f"eps must be >= 0, got {eps}")
        self.cfg, self.eps = cfg, float(eps)
        self.cs = cfg.coeffs
        self.dt = cfg.dt
        self.grid = cfg.grid
        self.lap = spectral.laplacian_diagonal(cfg.n_modes)
        self.resolvent = 1.0 / (1.0 - cfg.dt * self.lap)
        self.f = None if controls is None else getattr(controls, "f", None)
        g = None if controls is None else getattr(controls, "g", None)
        if self.f is not None:
            self.f = np.asarray(self.f, dtype=float)
            if self.f.shape[-2:] != (cfg.n_steps, cfg.noise.k_noise):
                raise ConfigurationError(f"f has shape {self.f.shape}, expected {(cfg.n_steps, cfg.noise.k_noise)}",
                                         field="controls.f")
            if not np.any(self.f) or not self.cs.has_gaussian:
                self.f = None
        self.mark_grid = cfg.noise.mark_grid if self.cs.has_jumps else None
        self.g = None
        if g is not None:
            g = np.asarray(g, dtype=float)
            expected = (cfg.n_steps, cfg.noise.mark_grid.n_cells)
            if g.shape[-2:] != expected:
                raise ConfigurationError(f"g has shape {g.shape}, expected {expected}", field="controls.g")
            if np.any(g < 0):
                raise DomainError("control g must be nonnegative")
            if g.ndim == 3 and self.eps > 0:
                raise ConfigurationError("per-path g needs eps = 0", field="controls.g")
            self.g = g
        self.psi_max = 1.0 if self.g is None else max(1.0, float(self.g.max()))
        self._has_ctrl_jump = self.g is not None and self.mark_grid is not None and np.any(self.g != 1.0)

    # building blocks, all batched over leading axes of ``a``

    def t(self, n):
        return n * self.dt

    def mark_integral(self, n, a, weights):
        """``sum_c G2(t_n, a, x_c) weights_c`` for states ``a`` of shape ``(P, N)``."""
        nodes = self.mark_grid.nodes
        P, N = a.shape
        rows = np.repeat(a, nodes.size, axis=0)
        marks = np.tile(nodes, P)
        vals = self.cs.jump_coeffs(self.t(n), rows, marks).reshape(P, nodes.size, N)
        return np.einsum("pcn,pc->pn", vals, np.broadcast_to(weights, (P, nodes.size)))

    def drift(self, n, a):
        """``F + div B`` at ``(t_n, a)``."""
        t = self.t(n)
        return self.cs.drift_coeffs(t, a, self.grid) + self.cs.divergence_coeffs(t, a, self.grid)

    def control_drift(self, n, a):
        """``G1 f_n + int G2 (g_n - 1) dnu``; zero without controls."""
        out = np.zeros_like(a)
        if self.f is not None:
            out += self.cs.apply_diffusion(self.t(n), a, self.f[..., n, :])
        if self._has_ctrl_jump:
            out += self.mark_integral(n, a, (self.g[..., n, :] - 1.0) * self.mark_grid.weights)
        return out

    def noise_increment(self, n, a, dW=None, jumps=None):
        """``sqrt(eps) G1 dW + eps sum G2 - dt int G2 g dnu`` over step ``n``.

        ``jumps`` is ``(rows, marks)``: events in the step and the row of
        ``a`` they act on.
        """
        out = np.zeros_like(a)
        if self.eps == 0:
            return out
        t = self.t(n)
        if dW is not None and self.cs.has_gaussian:
            out += math.sqrt(self.eps) * self.cs.apply_diffusion(t, a, dW)
        if self.mark_grid is not None:
            w = self.mark_grid.weights if self.g is None else self.g[n] * self.mark_grid.weights
            out -= self.dt * self.mark_integral(n, a, w)
            if jumps is not None and len(jumps[0]):
                rows, marks = jumps
                vals = self.cs.jump_coeffs(t, a[rows], marks)
                np.add.at(out, rows, self.eps * vals)
        return out

    def explicit_increment(self, n, a, conv):
        return self.dt * (self.drift(n, a) + self.lap * conv + self.control_drift(n, a))


def step_semi_implicit(dyn, n, a, conv, dW=None, jumps=None):
    """One step from ``t_n`` to ``t_{n+1}``.

    Solves ``(I - dt Laplacian) a_{n+1} = a_n + dt (F + div B + M + control
    drift) + noise``, all explicit terms at ``(t_n, a_n)``. ``conv`` is the
    memory convolution at ``t_n`` (before the Laplacian).
    """
    a = np.asarray(a, dtype=float)
    single = a.ndim == 1
    a2 = np.atleast_2d(a)
    conv2 = np.broadcast_to(conv, a2.shape)
    dW2 = None if dW is None else np.atleast_2d(dW)
    if jumps is not None and single:
        jumps = (np.zeros(len(jumps[1]), dtype=int), np.asarray(jumps[1], dtype=float))
    out = dyn.resolvent * (a2 + dyn.explicit_increment(n, a2, conv2) + dyn.noise_increment(n, a2, dW2, jumps))
    return out[0] if single else out


class _MemoryState:
    """Memory convolution for a batch advancing one step at a time."""

    def __init__(self, cfg, a0):
        self.kernel = cfg.kernel
        self.zero = cfg.kernel.is_zero
        past = cfg.prescribed_past
        if self.zero:
            return
        if cfg.kernel.form == "exponential":
            self.rec = memory.ExponentialConvolution(cfg.kernel, cfg.dt, past, a0)
        else:
            self.rec = None
            self.hist = memory.HistoryBuffer(cfg.dt, past, [np.array(a0)])
        self.n = 0

    def value(self, a):
        if self.zero:
            return 0.0
        if self.rec is not None:
            return self.rec.value(a)
        return memory.convolution(self.kernel, self.hist, self.n * self.hist.dt)

    def push(self, a):
        if self.zero:
            return
        self.n += 1
        if self.rec is not None:
            self.rec.push(a)
        else:
            self.hist.append(a)


def _path_noise(cfg, eps, path, dyn, need_jumps=True):
    """Wiener increments and the (thinned) jump realisation for one path."""
    dW = None
    if eps > 0 and dyn.cs.has_gaussian:
        dW = noise.wiener_increments(cfg.noise, cfg.n_steps, cfg.dt, path)
    jr = None
    if eps > 0 and dyn.cs.has_jumps and need_jumps:
        jr = _controlled_jumps(cfg, eps, path, dyn)
    return NoiseRealization(dW if dW is not None else np.zeros((cfg.n_steps, 0)), cfg.dt, jr)


def _controlled_jumps(cfg, eps, path, dyn):
    base = noise.sample_prm(cfg.noise, cfg.noise.m, cfg.T, path, dyn.psi_max, eps)
    if dyn.g is None:
        return base
    mg, g, n_steps = dyn.mark_grid, dyn.g, cfg.n_steps

    def psi(times, marks):
        cell = mg.cell_index(marks)
        step = np.clip(np.ceil(times / cfg.dt).astype(int) - 1, 0, n_steps - 1)
        return np.where(cell >= 0, g[step, np.maximum(cell, 0)], 1.0)

    return noise.thin_to_control(base, psi, dyn.psi_max)


class _EventIndex:
    """Events of a batch grouped by step: ``rows(n), marks(n)``."""

    def __init__(self, realizations, dt, n_steps):
        steps, rows, marks = [], [], []
        for r, jr in enumerate(realizations):
            if jr is None or len(jr) == 0:
                continue
            steps.append(jr.step_index(dt, n_steps))
            rows.append(np.full(len(jr), r))
            marks.append(jr.marks)
        if steps:
            s = np.concatenate(steps)
            order = np.argsort(s, kind="stable")
            self.steps = s[order]
            self.rows = np.concatenate(rows)[order]
            self.marks = np.concatenate(marks)[order]
        else:
            self.steps = np.zeros(0, dtype=int)
            self.rows = np.zeros(0, dtype=int)
            self.marks = np.zeros(0)
        self.bounds = np.searchsorted(self.steps, np.arange(n_steps + 1))

    def at(self, n):
        lo, hi = self.bounds[n], self.bounds[n + 1]
        return self.rows[lo:hi], self.marks[lo:hi]

    def counts(self, n_rows, n_steps):
        c = np.zeros((n_rows, n_steps), dtype=int)
        np.add.at(c, (self.rows, self.steps), 1)
        return c


def _check_finite(a, n, t, last):
    if not np.all(np.isfinite(a)):
        raise BlowUpError(n, t, last)


def _integrate(cfg, dyn, dW, events, record=True, reference=None, track_yzj=False, diagnose=True):
    """March a batch of ``P`` paths over ``[0, T]``.

    ``dW`` has shape ``(P, n_steps, k_noise)`` or is None. Returns a dict of
    streamed statistics, plus full state arrays when ``record`` is set.
    """
    n_steps, dt, grid, q = cfg.n_steps, cfg.dt, cfg.grid, cfg.coeffs.q
    P = dW.shape[0] if dW is not None else (events.n_rows if events is not None else 1)
    a = np.tile(cfg.u0, (P, 1))
    mem = _MemoryState(cfg, a)
    l2, h1, lq = diagnostics(a, grid, q)
    sup_l2, int_h1, int_lq = l2.copy(), np.zeros(P), np.zeros(P)
    states = np.empty((P, n_steps + 1, cfg.n_modes)) if record else None
    if record:
        states[:, 0] = a
    if reference is not None:
        d = a - reference[0]
        ref_sup = np.sum(d * d, axis=-1)
        ref_int = np.zeros(P)
    if track_yzj:
        Y = np.zeros_like(a)
        Z = np.zeros_like(a)
        J = a.copy()
        sup_y = np.zeros(P)
        yzj = np.zeros((3, P, n_steps + 1, cfg.n_modes)) if record else None
        if record:
            yzj[2, :, 0] = J
        j_gap = np.zeros(P)
    R = dyn.resolvent
    last = {}
    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(n_steps):
            conv = mem.value(a)
            dWn = None if dW is None else dW[:, n]
            jumps = None if events is None else events.at(n)
            det = dyn.dt * (dyn.drift(n, a) + dyn.lap * conv)
            ctrl = dyn.dt * dyn.control_drift(n, a)
            nz = dyn.noise_increment(n, a, dWn, jumps)
            if track_yzj:
                Y = R * (Y + nz)
                g_part = np.zeros_like(a)
                if dyn._has_ctrl_jump:
                    g_part = dyn.dt * dyn.mark_integral(n, a, (dyn.g[n] - 1.0) * dyn.mark_grid.weights)
                Z = R * (Z + g_part)
                J = R * (J + det + ctrl - g_part)
            a = R * (a + det + ctrl + nz)
            _check_finite(a, n + 1, (n + 1) * dt, last)
            mem.push(a)
            if diagnose:
                l2, h1, lq = diagnostics(a, grid, q)
                last = dict(l2sq=float(l2.max()), h1sq=float(h1.max()))
                np.maximum(sup_l2, l2, out=sup_l2)
                int_h1 += dt * h1
                int_lq += dt * lq
            if record:
                states[:, n + 1] = a
            if reference is not None:
                d = a - reference[n + 1]
                np.maximum(ref_sup, np.sum(d * d, axis=-1), out=ref_sup)
                ref_int += dt * np.sum((d * spectral.wavenumbers(cfg.n_modes)) ** 2, axis=-1)
            if track_yzj:
                np.maximum(sup_y, np.sum(Y * Y, axis=-1), out=sup_y)
                gap = a - Y - Z - J
                np.maximum(j_gap, np.sqrt(np.sum(gap * gap, axis=-1)), out=j_gap)
                if record:
                    yzj[0, :, n + 1], yzj[1, :, n + 1], yzj[2, :, n + 1] = Y, Z, J
    out = dict(sup_l2sq=sup_l2, int_h1sq=int_h1, int_lqq=int_lq, terminal=a, states=states)
    if reference is not None:
        out.update(ref_sup_l2sq=ref_sup, ref_int_h1sq=ref_int)
    if track_yzj:
        out.update(sup_y_l2sq=sup_y, j_gap=j_gap, yzj=yzj)
    return out


def solve(cfg, eps=0.0, controls=None, path=0, noise_realization=None):
    """One trajectory of the (controlled) equation at noise level ``eps``.

    ``noise_realization`` overrides sampling, e.g. increments coarsened from a
    finer grid; with ``eps = 0`` no noise is drawn at all.
    """
    if cfg.scheme == "picard":
        return solve_picard(cfg, eps, controls, path, noise_realization)[0]
    dyn = Dynamics(cfg, eps, controls)
    nr = _resolve_noise(cfg, eps, path, dyn, noise_realization)
    dW, events = _batch_inputs(cfg, dyn, [nr])
    res = _integrate(cfg, dyn, dW, events, record=True)
    counts = events.counts(1, cfg.n_steps)[0] if events is not None else np.zeros(cfg.n_steps, dtype=int)
    return _trajectory(cfg, res["states"][0], eps, cfg.noise.seed, path,
                       np.concatenate(([0], counts)), nr)


def _resolve_noise(cfg, eps, path, dyn, given):
    if given is None:
        return _path_noise(cfg, eps, path, dyn)
    if eps > 0 and dyn.cs.has_gaussian and given.n_steps != cfg.n_steps:
        raise ConfigurationError(f"noise has {given.n_steps} steps, config needs {cfg.n_steps}", field="dt")
    return given


def _batch_inputs(cfg, dyn, realizations):
    dW = None
    if dyn.eps > 0 and dyn.cs.has_gaussian:
        dW = np.stack([r.dW for r in realizations])
    events = None
    if dyn.eps > 0 and dyn.cs.has_jumps:
        events = _EventIndex([r.jumps for r in realizations], cfg.dt, cfg.n_steps)
    if events is None and dW is None:
        events = _EventIndex([None] * len(realizations), cfg.dt, cfg.n_steps)
    if events is not None:
        events.n_rows = len(realizations)
    return dW, events


@dataclass
class EnsembleResult:
    """Per-path summaries of an ensemble run (paths ``first_path ..``)."""

    sup_l2sq: np.ndarray
    int_h1sq: np.ndarray
    int_lqq: np.ndarray
    terminal: np.ndarray
    extras: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @property
    def n_paths(self):
        return self.sup_l2sq.size

    def means(self, n=None):
        sl = slice(None, n)
        return dict(sup_l2sq=float(self.sup_l2sq[sl].mean()),
                    int_h1sq=float(self.int_h1sq[sl].mean()),
                    int_lqq=float(self.int_lqq[sl].mean()))


def _chunk_size(cfg, requested):
    if requested:
        return int(requested)
    per_path = max(1, cfg.n_steps * cfg.noise.k_noise)
    return max(1, min(8192, CHUNK_BUDGET // per_path))


def solve_ensemble(cfg, eps, n_paths, controls=None, reference=None, first_path=0,
                   chunk_size=None, track_yzj=False, diagnose=True):
    """Independent paths with substreams ``first_path .. first_path + n_paths - 1``.

    Paths are integrated together in chunks; only summaries are kept.
    ``reference`` (a Trajectory or state array) adds per-path
    ``sup ||u - ref||^2`` and ``int ||u - ref||_{2,1}^2``.
    """
    if n_paths < 1:
        raise ConfigurationError("must be >= 1", field="ensemble")
    dyn = Dynamics(cfg, eps, controls)
    ref = None if reference is None else np.asarray(getattr(reference, "states", reference))
    size = _chunk_size(cfg, chunk_size)
    parts = []
    for start in range(first_path, first_path + n_paths, size):
        paths = range(start, min(start + size, first_path + n_paths))
        reals = [_path_noise(cfg, eps, p, dyn) for p in paths]
        dW, events = _batch_inputs(cfg, dyn, reals)
        res = _integrate(cfg, dyn, dW, events, record=False, reference=ref, track_yzj=track_yzj,
                         diagnose=diagnose)
        if events is not None:
            res["jump_counts"] = events.counts(len(reals), cfg.n_steps).sum(axis=1)
        parts.append(res)
    cat = lambda k: np.concatenate([p[k] for p in parts])
    extras = {k: cat(k) for k in ("ref_sup_l2sq", "ref_int_h1sq", "sup_y_l2sq", "j_gap", "jump_counts")
              if k in parts[0]}
    meta = dict(seed=cfg.noise.seed, eps=eps, first_path=first_path, config_hash=cfg.config_hash())
    return EnsembleResult(cat("sup_l2sq"), cat("int_h1sq"), cat("int_lqq"), cat("terminal"), extras, meta)


# Picard construction


@dataclass
class PicardReport:
    window_steps: int
    horizon: float
    distances: list  # per window: successive sup-L2 distances
    converged: list
    m_sweep: list = field(default_factory=list)  # (m, sup distance to full-m solution, tail term)

    @property
    def all_converged(self):
        return all(self.converged)

    def ratios(self, window=0):
        d = np.asarray(self.distances[window], dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return d[1:] / d[:-1]


def _picard_path(cfg, dyn, nr, window_steps):
    """Windowed fixed-point iteration on one frozen noise realisation.

    Within an iterate ``F``, the noise coefficients and the controls act on the
    current iterate at ``t_k``; ``div B`` and the memory term are taken from
    the previous iterate at ``t_{k+1}``.
    """
    n_steps, dt = cfg.n_steps, cfg.dt
    past = cfg.prescribed_past
    R = dyn.resolvent
    dW, events = _batch_inputs(cfg, dyn, [nr])
    U = np.zeros((n_steps + 1, cfg.n_modes))
    U[0] = cfg.u0
    distances, converged = [], []
    for s0 in range(0, n_steps, window_steps):
        s1 = min(s0 + window_steps, n_steps)
        prev = np.zeros((s1 - s0 + 1, cfg.n_modes))
        prev[0] = U[s0]
        dist_seq, ok = [], False
        for _ in range(cfg.picard_max_iter):
            U[s0 + 1 : s1 + 1] = prev[1:]
            conv = memory.convolve_path(cfg.kernel, dt, past, U[: s1 + 1], start=s0 + 1)
            tt = dt * np.arange(s0 + 1, s1 + 1)
            divb = np.stack([cfg.coeffs.divergence_coeffs(t, prev[i + 1], dyn.grid) for i, t in enumerate(tt)])
            lagged = dt * (divb + dyn.lap * conv)
            cur = np.empty_like(prev)
            cur[0] = U[s0]
            with np.errstate(over="ignore", invalid="ignore"):
                for i, k in enumerate(range(s0, s1)):
                    a = cur[i][None, :]
                    t = k * dt
                    expl = dt * (cfg.coeffs.drift_coeffs(t, a, dyn.grid) + dyn.control_drift(k, a))
                    nz = dyn.noise_increment(k, a, None if dW is None else dW[:, k],
                                             None if events is None else events.at(k))
                    cur[i + 1] = (R * (a + expl + lagged[i] + nz))[0]
            _check_finite(cur, s1, s1 * dt, {})
            d = float(np.sqrt(np.max(np.sum((cur - prev) ** 2, axis=-1))))
            dist_seq.append(d)
            prev = cur
            if d < cfg.picard_tol:
                ok = True
                break
        U[s0 : s1 + 1] = prev
        distances.append(dist_seq)
        converged.append(ok)
    return U, distances, converged


def solve_picard(cfg, eps=0.0, controls=None, path=0, noise_realization=None):
    """Picard construction on windows of length ``T0`` (the whole interval if infinite).

    Returns the trajectory and a :class:`PicardReport`. Levels in
    ``cfg.picard_m_sweep`` are re-solved with the jumps restricted to
    ``K_m``; the report pairs their distance to the full solution with the
    neglected ``h6``-mass on ``K_M \\ K_m``.
    """
    T0 = memory.horizon_T0(cfg.kernel)
    window_steps = cfg.n_steps if math.isinf(T0) else max(1, int(math.floor(T0 / cfg.dt + 1e-9)))
    dyn = Dynamics(cfg, eps, controls)
    nr = _resolve_noise(cfg, eps, path, dyn, noise_realization)
    U, distances, converged = _picard_path(cfg, dyn, nr, window_steps)
    report = PicardReport(window_steps, T0, distances, converged)
    M = cfg.noise.m
    for m in cfg.picard_m_sweep:
        if not 1 <= m < M:
            raise ConfigurationError(f"sweep level {m} must lie in [1, {M})", field="picard_m_sweep")
        sub = cfg.replace(noise=cfg.noise.replace(m=m))
        sub_dyn = Dynamics(sub, eps, None if controls is None else _restrict_controls(controls, cfg, sub))
        jumps = None if nr.jumps is None else nr.jumps.restrict(m)
        Um, _, _ = _picard_path(sub, sub_dyn, NoiseRealization(nr.dW, nr.dt, jumps), window_steps)
        dist = float(np.sqrt(np.max(np.sum((Um - U) ** 2, axis=-1))))
        h6 = cfg.coeffs.envelopes.get("h6")
        tail = noise.h_tail_mass(h6, cfg.noise.measure, m, M, cfg.T) if h6 is not None else 0.0
        report.m_sweep.append((m, dist, tail))
    traj = _trajectory(cfg.replace(scheme="picard"), U, eps, cfg.noise.seed, path, noise_real=nr,
                       picard_converged=report.all_converged)
    return traj, report


def _restrict_controls(controls, cfg, sub):
    g = getattr(controls, "g", None)
    if g is None:
        return controls
    # map the control onto the coarser mark grid by cell centroids
    idx = cfg.noise.mark_grid.cell_index(sub.noise.mark_grid.nodes)
    g_sub = np.where(idx >= 0, g[:, np.maximum(idx, 0)], 1.0)
    return types.SimpleNamespace(f=getattr(controls, "f", None), g=g_sub)


# Y / Z / J decomposition


@dataclass
class Decomposition:
    Y: Trajectory
    Z: Trajectory
    J: Trajectory  # re-solved from its own drift equation
    J_subtractive: np.ndarray
    mismatch: float


def decompose_yzj(cfg, eps, controls=None, path=0, noise_realization=None, tol=None):
    """Split ``V`` into the stochastic part ``Y``, the controlled jump drift ``Z`` and ``J``.

    ``Y`` and ``Z`` are driven by exactly the increments of ``V``'s run. ``J``
    is integrated from its own equation and compared with ``V - Y - Z``; a
    sup-L2 mismatch above ``tol`` (default ``10 dt``) raises ConsistencyError.
    """
    tol = 10 * cfg.dt if tol is None else tol
    dyn = Dynamics(cfg, eps, controls)
    nr = _resolve_noise(cfg, eps, path, dyn, noise_realization)
    dW, events = _batch_inputs(cfg, dyn, [nr])
    res = _integrate(cfg, dyn, dW, events, record=True, track_yzj=True)
    V = res["states"][0]
    Y, Z, J = res["yzj"][:, 0]
    J_sub = V - Y - Z
    mismatch = float(np.sqrt(np.max(np.sum((J_sub - J) ** 2, axis=-1))))
    if mismatch > tol:
        raise ConsistencyError(f"subtractive and re-solved J differ by {mismatch:.3e} > {tol:.3e}")
    mk = lambda s: _trajectory(cfg, s, eps, cfg.noise.seed, path)
    return Decomposition(mk(Y), mk(Z), mk(J), J_sub, mismatch)
