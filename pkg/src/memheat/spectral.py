"""Fields on (0, 1) with homogeneous Dirichlet boundary, in the sine eigenbasis.

A field ``u = sum_k a_k phi_k`` with ``phi_k(x) = sqrt(2) sin(k pi x)`` is
stored through its coefficient vector. The basis is orthonormal in L2 and
diagonalises the Dirichlet Laplacian, so L2, H1_0 and H^{-d} norms are plain
weighted sums of squares. Pointwise quantities (L^q norms, Nemytskii
nonlinearities) go through a Gauss-Legendre grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import ConfigurationError, DomainError, IllPosedError

#: spatial dimension of the domain; enters the H^{-d} weight
DIMENSION = 1

NORM_KINDS = ("L2", "H1_0", "H_neg_d", "Lq")


def eigenvalue(k):
    """Eigenvalue ``(k pi)^2`` of ``-Laplacian`` for the k-th sine mode (k >= 1)."""
    if int(k) != k or k < 1:
        raise DomainError(f"mode index must be a positive integer, got {k!r}")
    return (k * np.pi) ** 2


def wavenumbers(n_modes):
    """``k pi`` for k = 1..n_modes."""
    return np.pi * np.arange(1, n_modes + 1, dtype=float)


def laplacian_diagonal(n_modes):
    """Diagonal of the Dirichlet Laplacian in the sine basis, ``-(k pi)^2``."""
    return -wavenumbers(n_modes) ** 2


@dataclass(frozen=True, eq=False)
class SpectralField:
    """Immutable coefficient vector of a field in the sine basis."""

    coeffs: np.ndarray

    def __post_init__(self):
        a = np.array(self.coeffs, dtype=float).reshape(-1)
        if a.size == 0:
            raise DomainError("a SpectralField needs at least one mode")
        if not np.all(np.isfinite(a)):
            raise DomainError("SpectralField coefficients must be finite")
        a.setflags(write=False)
        object.__setattr__(self, "coeffs", a)

    @property
    def n_modes(self):
        return self.coeffs.size

    @classmethod
    def zeros(cls, n_modes):
        return cls(np.zeros(n_modes))

    @classmethod
    def mode(cls, k, n_modes, amplitude=1.0):
        """``amplitude * phi_k`` truncated to ``n_modes``."""
        if not 1 <= k <= n_modes:
            raise DomainError(f"mode {k} outside 1..{n_modes}")
        a = np.zeros(n_modes)
        a[k - 1] = amplitude
        return cls(a)

    def truncate(self, n_modes):
        a = np.zeros(n_modes)
        m = min(n_modes, self.n_modes)
        a[:m] = self.coeffs[:m]
        return SpectralField(a)

    def __add__(self, other):
        return SpectralField(self.coeffs + _coeffs(other))

    def __sub__(self, other):
        return SpectralField(self.coeffs - _coeffs(other))

    def __mul__(self, scalar):
        return SpectralField(self.coeffs * float(scalar))

    __rmul__ = __mul__

    def __neg__(self):
        return SpectralField(-self.coeffs)

    def __eq__(self, other):
        if not isinstance(other, SpectralField):
            return NotImplemented
        return np.array_equal(self.coeffs, other.coeffs)

    def __hash__(self):
        return hash(self.coeffs.tobytes())

    def __repr__(self):
        return f"SpectralField(n_modes={self.n_modes}, coeffs={np.array2string(self.coeffs, precision=4, threshold=6)})"


def _coeffs(field):
    if isinstance(field, SpectralField):
        return field.coeffs
    return np.asarray(field, dtype=float)


@lru_cache(maxsize=32)
def _gauss_legendre(n_quad):
    x, w = np.polynomial.legendre.leggauss(n_quad)
    nodes = 0.5 * (x + 1.0)
    weights = 0.5 * w
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


@dataclass(frozen=True)
class SpatialGrid:
    """Gauss-Legendre rule on (0, 1); weights sum to one."""

    n_quad: int

    def __post_init__(self):
        if int(self.n_quad) != self.n_quad or self.n_quad < 1:
            raise ConfigurationError("must be a positive integer", field="n_quad")

    @classmethod
    def for_modes(cls, n_modes, n_quad=None):
        """Default rule for ``n_modes``: ``max(4 * n_modes, 256)`` points."""
        return cls(int(n_quad) if n_quad else max(4 * n_modes, 256))

    @property
    def nodes(self):
        return _gauss_legendre(self.n_quad)[0]

    @property
    def weights(self):
        return _gauss_legendre(self.n_quad)[1]

    def integrate(self, values):
        """Integral over (0, 1) of grid values along the last axis."""
        return np.asarray(values) @ self.weights


@lru_cache(maxsize=64)
def basis_matrix(n_quad, n_modes):
    """``Phi[j, k] = phi_{k+1}(x_j)`` on the Gauss-Legendre nodes."""
    x = _gauss_legendre(n_quad)[0]
    phi = np.sqrt(2.0) * np.sin(np.outer(x, wavenumbers(n_modes)))
    phi.setflags(write=False)
    return phi


@lru_cache(maxsize=64)
def projection_matrix(n_quad, n_modes):
    """Weighted least-squares projector from grid values to coefficients.

    Exact on the span of the first ``n_modes`` sines whenever
    ``n_quad >= n_modes``; otherwise equals the discrete L2 projection.
    """
    if n_quad < n_modes:
        raise IllPosedError(f"n_quad={n_quad} < n_modes={n_modes}: projection is ill-posed")
    phi = basis_matrix(n_quad, n_modes)
    sw = np.sqrt(_gauss_legendre(n_quad)[1])
    proj = np.linalg.pinv(sw[:, None] * phi) * sw[None, :]
    proj.setflags(write=False)
    return proj


@lru_cache(maxsize=32)
def derivative_matrix(n_modes):
    """``D[j, k] = <phi_j, d/dx phi_k>``; skew-symmetric.

    Used to apply ``d/dx`` to a sine series and project the resulting cosine
    series back onto the sines (the odd-extension convention).
    """
    j = np.arange(1, n_modes + 1)[:, None].astype(float)
    k = np.arange(1, n_modes + 1)[None, :].astype(float)
    odd = ((j + k) % 2 == 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(odd, 4.0 * j * k / (j**2 - k**2), 0.0)
    d.setflags(write=False)
    return d


def synthesize_coeffs(a, grid):
    """Grid values of coefficient arrays with shape ``(..., n_modes)``."""
    a = np.asarray(a, dtype=float)
    return a @ basis_matrix(grid.n_quad, a.shape[-1]).T


def analyze_values(values, grid, n_modes):
    values = np.asarray(values, dtype=float)
    return values @ projection_matrix(grid.n_quad, n_modes).T


def synthesize(field, grid):
    """Point values ``u(x_j) = sum_k a_k sqrt(2) sin(k pi x_j)``."""
    return synthesize_coeffs(_coeffs(field), grid)


def analyze(values, grid, n_modes):
    """Project grid values onto the first ``n_modes`` sines."""
    values = np.asarray(values, dtype=float)
    if values.shape[-1] != grid.n_quad:
        raise DomainError(f"expected {grid.n_quad} grid values, got {values.shape[-1]}")
    return SpectralField(analyze_values(values, grid, n_modes))


def l2_norm(a):
    return np.sqrt(np.sum(np.square(a), axis=-1))


def h1_norm(a):
    a = np.asarray(a)
    return np.sqrt(np.sum(np.square(a * wavenumbers(a.shape[-1])), axis=-1))


def h_neg_norm(a, d=DIMENSION):
    a = np.asarray(a)
    return np.sqrt(np.sum(np.square(a) * wavenumbers(a.shape[-1]) ** (-2.0 * d), axis=-1))


def abs_power(v, q):
    """``|v|^q``; integer exponents by repeated products (much faster than pow)."""
    if q == int(q) and 1 <= q <= 8:
        v = np.abs(v)
        out = v
        for _ in range(int(q) - 1):
            out = out * v
        return out
    return np.abs(v) ** q


def lq_norm(a, q, grid):
    if q < 2:
        raise DomainError(f"Lq norm needs q >= 2, got {q}")
    vals = synthesize_coeffs(a, grid)
    return grid.integrate(abs_power(vals, q)) ** (1.0 / q)


def norm(field, kind, q=None, grid=None):
    """Norm of a field; ``kind`` is one of ``L2``, ``H1_0``, ``H_neg_d``, ``Lq``."""
    a = _coeffs(field)
    if kind == "L2":
        return float(l2_norm(a))
    if kind == "H1_0":
        return float(h1_norm(a))
    if kind == "H_neg_d":
        return float(h_neg_norm(a))
    if kind == "Lq":
        if grid is None:
            raise ConfigurationError("Lq norm requires a SpatialGrid", field="grid")
        if q is None:
            raise ConfigurationError("Lq norm requires the exponent q", field="q")
        return float(lq_norm(a, q, grid))
    raise DomainError(f"unknown norm kind {kind!r}; expected one of {NORM_KINDS}")


def inner(u, v):
    return float(np.dot(_coeffs(u), _coeffs(v)))


class SineBasisTransformer(TransformerMixin, BaseEstimator):
    """Grid values <-> sine coefficients, usable inside sklearn pipelines.

    ``transform`` maps rows of point values on the Gauss-Legendre nodes to
    coefficients; ``inverse_transform`` synthesises them back.
    """

    def __init__(self, n_modes=16, n_quad=None):
        self.n_modes = n_modes
        self.n_quad = n_quad

    def fit(self, X=None, y=None):
        if self.n_modes < 1:
            raise ConfigurationError("must be >= 1", field="n_modes")
        self.grid_ = SpatialGrid.for_modes(self.n_modes, self.n_quad)
        projection_matrix(self.grid_.n_quad, self.n_modes)
        self.n_features_in_ = self.grid_.n_quad
        return self

    @property
    def nodes_(self):
        check_is_fitted(self, "grid_")
        return self.grid_.nodes

    def transform(self, X):
        check_is_fitted(self, "grid_")
        X = check_array(X)
        if X.shape[1] != self.grid_.n_quad:
            raise DomainError(f"expected {self.grid_.n_quad} columns, got {X.shape[1]}")
        return analyze_values(X, self.grid_, self.n_modes)

    def inverse_transform(self, X):
        check_is_fitted(self, "grid_")
        X = check_array(X)
        return synthesize_coeffs(X, self.grid_)
