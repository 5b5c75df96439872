"""Memory kernel, history convolution and the Picard window horizon.

The memory term of the equation is ``int_{-inf}^0 gamma(r) Laplacian u(t+r) dr``.
In the sine basis the Laplacian is diagonal, so the term is
``-(k pi)^2 * int gamma(r) a_k(t+r) dr`` mode by mode. The integral over the
computed part of the history uses the trapezoid rule on the time grid; the part
reaching into the prescribed past is integrated exactly when the past has a
closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import brentq

from . import spectral
from .exceptions import ConfigurationError, CoverageError, DomainError
from .spectral import SpectralField

#: delta_{T0} threshold: 2 delta^2 = 1/2
HORIZON_DELTA = 0.5
TAIL_TOL = 1e-10


@dataclass(frozen=True)
class MemoryKernel:
    """Nonnegative kernel ``gamma`` on ``(-inf, 0]``.

    Either ``exponential`` with ``gamma(r) = a exp(eta r)``, or ``tabulated``
    on an increasing grid of nonpositive times (zero outside the table).
    """

    form: str
    a: float = 0.0
    eta: float = 1.0
    grid: np.ndarray | None = None
    values: np.ndarray | None = None

    def __post_init__(self):
        if self.form == "exponential":
            if self.a < 0 or not math.isfinite(self.a):
                raise DomainError(f"kernel amplitude a={self.a} must be finite and >= 0")
            if not self.eta > 0:
                raise DomainError(f"kernel rate eta={self.eta} must be > 0")
        elif self.form == "tabulated":
            g = np.asarray(self.grid, dtype=float)
            v = np.asarray(self.values, dtype=float)
            if g.ndim != 1 or g.shape != v.shape or g.size < 2:
                raise DomainError("tabulated kernel needs matching 1-D grid and values")
            if np.any(np.diff(g) <= 0) or g[-1] > 0:
                raise DomainError("tabulated kernel grid must increase and end at or before 0")
            if np.any(v < 0) or not np.all(np.isfinite(v)):
                raise DomainError("tabulated kernel values must be finite and >= 0")
            object.__setattr__(self, "grid", g)
            object.__setattr__(self, "values", v)
        else:
            raise DomainError(f"unknown kernel form {self.form!r}")

    @classmethod
    def exponential(cls, a, eta):
        return cls("exponential", a=float(a), eta=float(eta))

    @classmethod
    def zero(cls):
        return cls("exponential", a=0.0, eta=1.0)

    @classmethod
    def tabulated(cls, grid, values):
        return cls("tabulated", grid=np.asarray(grid, dtype=float), values=np.asarray(values, dtype=float))

    @classmethod
    def from_csv(cls, path):
        """Two columns ``r, gamma(r)``; header lines starting with ``#`` are skipped."""
        data = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
        return cls.tabulated(data[:, 0], data[:, 1])

    @property
    def is_zero(self):
        if self.form == "exponential":
            return self.a == 0.0
        return not np.any(self.values)

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        if self.form == "exponential":
            return np.where(r <= 0, self.a * np.exp(self.eta * np.minimum(r, 0.0)), 0.0)
        return np.interp(r, self.grid, self.values, left=0.0, right=0.0)

    @property
    def l1_norm(self):
        if self.form == "exponential":
            return self.a / self.eta
        return float(np.trapezoid(self.values, self.grid))


def delta(kernel, t):
    """``delta_t = int_{-t}^0 |gamma(s)| ds``."""
    if t < 0:
        raise DomainError(f"delta needs t >= 0, got {t}")
    if t == 0:
        return 0.0
    if kernel.form == "exponential":
        if math.isinf(t):
            return kernel.a / kernel.eta
        return kernel.a / kernel.eta * -math.expm1(-kernel.eta * t)
    g, v = kernel.grid, kernel.values
    lo = -t
    if lo <= g[0]:
        return float(np.trapezoid(v, g))
    inside = g > lo
    gg = np.concatenate(([lo], g[inside]))
    vv = np.concatenate(([np.interp(lo, g, v)], v[inside]))
    # a table ending before 0 means gamma vanishes on (g[-1], 0]
    return float(np.trapezoid(vv, gg))


def horizon_T0(kernel):
    """The time at which ``delta_t`` reaches 1/2, or ``inf`` if it never does."""
    if kernel.l1_norm <= HORIZON_DELTA:
        return math.inf
    if kernel.form == "exponential":
        # closed form of a/eta (1 - exp(-eta t)) = 1/2, refined by bisection
        guess = -math.log1p(-HORIZON_DELTA * kernel.eta / kernel.a) / kernel.eta
        lo, hi = 0.5 * guess, 2.0 * guess
    else:
        lo, hi = 0.0, -kernel.grid[0]
    return brentq(lambda t: delta(kernel, t) - HORIZON_DELTA, lo, hi, xtol=1e-14, rtol=1e-15)


@dataclass(frozen=True)
class PrescribedPast:
    """The history ``rho`` on ``(-inf, 0)``.

    ``kind`` is ``constant`` (a fixed field, by default the initial datum),
    ``zero``, or ``function`` (a callable ``s -> coefficient vector``).
    """

    kind: str = "constant"
    value: np.ndarray | None = None
    function: Callable | None = None

    @classmethod
    def constant(cls, field):
        return cls("constant", value=np.asarray(getattr(field, "coeffs", field), dtype=float))

    @classmethod
    def zero(cls):
        return cls("zero")

    @classmethod
    def from_function(cls, fn):
        return cls("function", function=fn)

    def at(self, s, n_modes):
        if self.kind == "zero":
            return np.zeros(n_modes)
        if self.kind == "constant":
            return _fit(self.value, n_modes)
        return _fit(np.asarray(self.function(s), dtype=float), n_modes)

    def tail_integral(self, kernel, t, n_modes):
        """``int_{-inf}^{-t} gamma(r) rho(t + r) dr`` as a coefficient vector."""
        if self.kind == "zero" or kernel.is_zero:
            return np.zeros(n_modes)
        if self.kind == "constant":
            return (kernel.l1_norm - delta(kernel, t)) * _fit(self.value, n_modes)
        # truncate where the remaining kernel mass drops below TAIL_TOL
        if kernel.form == "exponential":
            depth = math.log(max(kernel.a / kernel.eta, TAIL_TOL) / TAIL_TOL) / kernel.eta
            r = np.linspace(-t - depth, -t, 2049)
        else:
            lo = min(kernel.grid[0], -t)
            r = np.linspace(lo, -t, 2049)
        vals = np.array([self.at(t + ri, n_modes) for ri in r])
        return np.trapezoid(kernel(r)[:, None] * vals, r, axis=0)


def _fit(a, n_modes):
    out = np.zeros(n_modes)
    m = min(n_modes, a.size)
    out[:m] = a[:m]
    return out


@dataclass
class HistoryBuffer:
    """Computed trajectory on a uniform grid starting at time 0, plus the prescribed past.

    Single writer: the active stepper appends; readers take the arrays as is.
    States may carry a leading ensemble axis: ``states[j]`` has shape
    ``(..., n_modes)``.
    """

    dt: float
    past: PrescribedPast = field(default_factory=PrescribedPast.zero)
    states: list = field(default_factory=list)

    @property
    def n_times(self):
        return len(self.states)

    @property
    def t_last(self):
        return (self.n_times - 1) * self.dt

    def append(self, state):
        self.states.append(np.asarray(state, dtype=float))

    def snapshot(self):
        return HistoryBuffer(self.dt, self.past, list(self.states))


def convolution(kernel, history, t):
    """``int_{-inf}^0 gamma(r) a(t + r) dr`` over the history, mode by mode (no Laplacian).

    ``t`` must be a grid time ``n dt`` with ``0 <= n < history.n_times``.
    """
    if history.n_times == 0:
        raise CoverageError(0.0, t)
    n = int(round(t / history.dt))
    if abs(n * history.dt - t) > 1e-9 * max(1.0, abs(t)) or n < 0:
        raise DomainError(f"t={t} is not on the history grid with dt={history.dt}")
    if n >= history.n_times:
        raise CoverageError(history.t_last, t)
    ref = history.states[0]
    n_modes = ref.shape[-1]
    if kernel.is_zero:
        return np.zeros_like(ref)
    out = history.past.tail_integral(kernel, t, n_modes) + np.zeros_like(ref)
    if n == 0:
        return out
    j0 = 0
    if kernel.form == "tabulated":
        # lags past the end of the table carry zero weight
        j0 = max(0, n - int(math.ceil(-kernel.grid[0] / history.dt)) - 1)
    lags = history.dt * np.arange(n - j0, -1, -1)  # t - t_j for j = j0..n
    w = kernel(-lags) * history.dt
    w[0] *= 0.5
    w[-1] *= 0.5
    stack = np.stack(history.states[j0 : n + 1], axis=0)
    return out + np.tensordot(w, stack, axes=(0, 0))


def memory_term(kernel, history, t):
    """The memory contribution ``int gamma(r) Laplacian u(t + r) dr`` at time ``t``.

    Returns a :class:`SpectralField` for single histories and a coefficient
    array for ensemble histories.
    """
    conv = convolution(kernel, history, t)
    out = conv * spectral.laplacian_diagonal(conv.shape[-1])
    return SpectralField(out) if out.ndim == 1 else out


class ExponentialConvolution:
    """Running trapezoid sum for an exponential kernel in O(1) per step.

    Produces the same quadrature as :func:`convolution` on a uniform grid, by
    the recursion ``R_n = exp(-eta dt) R_{n-1} + a_n``.
    """

    def __init__(self, kernel, dt, past, first_state):
        if kernel.form != "exponential":
            raise ConfigurationError("recursive convolution needs an exponential kernel", field="kernel")
        self.kernel, self.dt, self.past = kernel, dt, past
        self.decay = math.exp(-kernel.eta * dt)
        self.first = np.array(first_state, dtype=float)
        self.running = np.array(first_state, dtype=float)
        self.n = 0

    def push(self, state):
        self.running = self.decay * self.running + state
        self.n += 1

    def value(self, current):
        """Convolution at ``t_n`` where ``current`` is the state at ``t_n``."""
        t = self.n * self.dt
        k = self.kernel
        n_modes = current.shape[-1]
        tail = self.past.tail_integral(k, t, n_modes)
        if self.n == 0:
            return tail + np.zeros_like(current)
        trap = self.running - 0.5 * math.exp(-k.eta * t) * self.first - 0.5 * current
        return tail + k.a * self.dt * trap


def convolve_path(kernel, dt, past, states, start=0):
    """Convolution at every grid time ``t_j``, ``j >= start``, of a stored path.

    ``states`` has shape ``(n_times, ..., n_modes)`` with ``states[0]`` at time 0.
    Same quadrature as :func:`convolution`; linear cost for exponential kernels.
    """
    states = np.asarray(states, dtype=float)
    n_times = states.shape[0]
    n_modes = states.shape[-1]
    out = np.zeros((n_times - start,) + states.shape[1:])
    if kernel.is_zero:
        return out
    if kernel.form == "exponential":
        rec = ExponentialConvolution(kernel, dt, past, states[0])
        for j in range(n_times):
            if j:
                rec.push(states[j])
            if j >= start:
                out[j - start] = rec.value(states[j])
        return out
    hist = HistoryBuffer(dt, past, list(states))
    for j in range(start, n_times):
        out[j - start] = convolution(kernel, hist, j * dt)
    return out
