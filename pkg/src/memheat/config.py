"""INI run configuration.

One section per module; every value is validated when the file is loaded so a
bad run fails before any computation, with the offending ``section.key`` in
the message. The README has a full example file.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import coefficients, memory, noise
from .exceptions import ConfigurationError, MemheatError
from .solver import SimConfig

DEFAULTS = {
    "simulation": dict(T="0.1", dt="1e-3", n_modes="16", scheme="semi_implicit_euler", n_quad="",
                       u0="mode:1:1.0", eps="0.1", seed="0", ensemble="1"),
    "coefficients": dict(set="cubic", probe_samples="200"),
    "memory": dict(form="exponential", a="0.5", eta="2.0", csv="", past="constant"),
    "noise": dict(measure="exponential", k_noise="16", m="8", n_mark_cells="32"),
    "picard": dict(tol="1e-8", max_iter="30", m_sweep=""),
    "controls": dict(f="", g="", m_budget="", csv=""),
    "rate": dict(target="skeleton", center="", radius="0.05", n_time_blocks="10", n_starts="3",
                 penalty0="1e3", penalty_loops="3", max_iter="200", optimize_g="true"),
    "experiments": dict(eps_schedule="1e-1,1e-2,1e-3,1e-4", n_samples="200", tol="1e-3",
                        dictionary_size="8", c1_steps="1,2,4,8,16"),
    "rareevent": dict(center="", radius="0.05", eps_schedule="0.1,0.05,0.02,0.01", n_samples="10000"),
}

COEFF_KEYS = dict(a=float, b=float, beta=float, g1=float, p=float, g2=float, multiplicative=None)
MEASURE_KEYS = dict(exponential=("mass", "rate"), power=("c", "alpha", "cutoff"))


def _field(section, key):
    return f"{section}.{key}"


class _Reader:
    def __init__(self, parser):
        self.p = parser

    def raw(self, section, key):
        if self.p.has_option(section, key):
            return self.p.get(section, key).strip()
        return DEFAULTS.get(section, {}).get(key, "")

    def float(self, section, key, positive=False, nonneg=False):
        s = self.raw(section, key)
        try:
            v = float(s)
        except ValueError:
            raise ConfigurationError(f"expected a number, got {s!r}", field=_field(section, key)) from None
        if not math.isfinite(v) or (positive and v <= 0) or (nonneg and v < 0):
            cond = "> 0" if positive else ">= 0" if nonneg else "finite"
            raise ConfigurationError(f"must be {cond}, got {v}", field=_field(section, key))
        return v

    def int(self, section, key, minimum=None):
        s = self.raw(section, key)
        try:
            v = int(s)
        except ValueError:
            raise ConfigurationError(f"expected an integer, got {s!r}", field=_field(section, key)) from None
        if minimum is not None and v < minimum:
            raise ConfigurationError(f"must be >= {minimum}, got {v}", field=_field(section, key))
        return v

    def bool(self, section, key):
        s = self.raw(section, key).lower()
        if s in ("1", "true", "yes", "on"):
            return True
        if s in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"expected a boolean, got {s!r}", field=_field(section, key))

    def floats(self, section, key):
        s = self.raw(section, key)
        if not s:
            return []
        try:
            return [float(x) for x in s.replace(";", ",").split(",") if x.strip()]
        except ValueError:
            raise ConfigurationError(f"expected a comma-separated list of numbers, got {s!r}",
                                     field=_field(section, key)) from None


def parse_field(spec, n_modes, name):
    """``mode:k:amp`` (amplitude times the k-th sine) or a comma list of coefficients."""
    spec = spec.strip()
    if not spec or spec == "zero":
        return np.zeros(n_modes)
    if spec.startswith("mode:"):
        try:
            _, k, amp = spec.split(":")
            k, amp = int(k), float(amp)
        except ValueError:
            raise ConfigurationError(f"expected mode:k:amplitude, got {spec!r}", field=name) from None
        if not 1 <= k <= n_modes:
            raise ConfigurationError(f"mode {k} outside 1..{n_modes}", field=name)
        out = np.zeros(n_modes)
        out[k - 1] = amp
        return out
    try:
        vals = np.array([float(x) for x in spec.split(",")])
    except ValueError:
        raise ConfigurationError(f"expected mode:k:amp or numbers, got {spec!r}", field=name) from None
    out = np.zeros(n_modes)
    out[: min(n_modes, vals.size)] = vals[:n_modes]
    return out


@dataclass
class RunConfig:
    sim: SimConfig
    eps: float
    seed: int
    ensemble: int
    sections: dict = field(default_factory=dict)
    text: str = ""
    source: str | None = None

    def reader(self):
        p = configparser.ConfigParser()
        p.read_dict(self.sections)
        return _Reader(p)


def load(path=None, text=None, overrides=None):
    """Parse and validate a configuration file (or string) with ``section.key=value`` overrides."""
    parser = configparser.ConfigParser()
    parser.read_dict(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigurationError(f"config file {p} not found", field="config")
        text = p.read_text()
    if text:
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigurationError(str(exc).splitlines()[0], field="config") from None
    for item in overrides or ():
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigurationError(f"override {item!r} is not section.key=value", field="override")
        lhs, value = item.split("=", 1)
        section, key = lhs.split(".", 1)
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key.strip(), value.strip())
    r = _Reader(parser)
    sim = build_sim_config(r)
    eps = r.float("simulation", "eps", nonneg=True)
    seed = r.int("simulation", "seed", minimum=0)
    if seed >= 2**64:
        raise ConfigurationError("must fit in 64 bits", field="simulation.seed")
    ensemble = r.int("simulation", "ensemble", minimum=1)
    sim = sim.replace(noise=sim.noise.replace(seed=seed, eps=eps))
    sections = {s: dict(parser.items(s)) for s in parser.sections()}
    return RunConfig(sim, eps, seed, ensemble, sections, text or "", None if path is None else str(path))


def build_coefficients(r):
    name = r.raw("coefficients", "set")
    overrides = {}
    for key, kind in COEFF_KEYS.items():
        if r.p.has_option("coefficients", key):
            overrides[key] = r.bool("coefficients", key) if kind is None else r.float("coefficients", key)
    try:
        return coefficients.get_coefficient_set(name, **overrides)
    except MemheatError as exc:
        raise ConfigurationError(str(exc), field="coefficients") from None
    except TypeError as exc:
        raise ConfigurationError(str(exc), field="coefficients") from None


def build_kernel(r):
    form = r.raw("memory", "form")
    try:
        if form == "zero":
            return memory.MemoryKernel.zero()
        if form == "exponential":
            return memory.MemoryKernel.exponential(r.float("memory", "a", nonneg=True),
                                                   r.float("memory", "eta", positive=True))
        if form == "tabulated":
            csv = r.raw("memory", "csv")
            if not csv:
                raise ConfigurationError("tabulated kernel needs a csv path", field="memory.csv")
            return memory.MemoryKernel.from_csv(csv)
    except (OSError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(str(exc), field="memory") from None
    raise ConfigurationError(f"unknown kernel form {form!r}", field="memory.form")


def build_noise(r):
    name = r.raw("noise", "measure")
    if name not in MEASURE_KEYS:
        raise ConfigurationError(f"unknown measure {name!r}; known: {sorted(MEASURE_KEYS)}", field="noise.measure")
    params = {k: r.float("noise", k) for k in MEASURE_KEYS[name] if r.p.has_option("noise", k)}
    try:
        measure = noise.make_measure(name, **params)
    except MemheatError as exc:
        raise ConfigurationError(str(exc), field="noise") from None
    cells = r.int("noise", "n_mark_cells", minimum=2)
    if cells % 2:
        raise ConfigurationError("must be even", field="noise.n_mark_cells")
    return noise.NoiseSpec(measure=measure, k_noise=r.int("noise", "k_noise", minimum=1),
                           m=r.int("noise", "m", minimum=1), n_mark_cells=cells)


def build_sim_config(r):
    n_modes = r.int("simulation", "n_modes", minimum=1)
    T = r.float("simulation", "T", positive=True)
    dt = r.float("simulation", "dt", positive=True)
    ratio = T / dt
    if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
        raise ConfigurationError(f"T={T} is not an integer multiple of dt={dt}", field="simulation.dt")
    nq = r.raw("simulation", "n_quad")
    n_quad = r.int("simulation", "n_quad", minimum=n_modes) if nq else None
    u0 = parse_field(r.raw("simulation", "u0"), n_modes, "simulation.u0")
    past_kind = r.raw("memory", "past")
    if past_kind not in ("constant", "zero"):
        raise ConfigurationError(f"expected constant or zero, got {past_kind!r}", field="memory.past")
    past = memory.PrescribedPast.zero() if past_kind == "zero" else None
    sweep = tuple(int(x) for x in r.floats("picard", "m_sweep"))
    nz = build_noise(r)
    if any(not 1 <= m < nz.m for m in sweep):
        raise ConfigurationError(f"levels must lie in [1, {nz.m})", field="picard.m_sweep")
    return SimConfig(
        T=T, dt=dt, n_modes=n_modes, coeffs=build_coefficients(r), kernel=build_kernel(r), noise=nz,
        u0=u0, past=past, scheme=r.raw("simulation", "scheme"),
        picard_tol=r.float("picard", "tol", positive=True),
        picard_max_iter=r.int("picard", "max_iter", minimum=1), picard_m_sweep=sweep, n_quad=n_quad,
    )
