"""Measures on the circle: grid densities, signed grid functions, atomic measures.

Grid objects carry *cell averages* on ``n`` uniform cells ``[i/n, (i+1)/n)``.
Point evaluation between cells (needed by the transfer operators) uses linear
interpolation between cell midpoints with cyclic wrap.

Sums go through ``numpy.sum`` on contiguous arrays, which uses pairwise
summation, so results do not depend on how callers chunk their work.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import ConfigurationError, DomainError

__all__ = [
    "GridDensity",
    "SignedGridFunction",
    "AtomicMeasure",
    "midpoints",
    "edges",
    "as_values",
    "like",
    "cyclic_derivative",
    "interp_weights",
    "interp",
    "norm",
    "dual_lip_atomic",
    "ulam_project",
    "hat_atom_project",
    "wasserstein1_circle",
    "save_density_csv",
    "load_density_csv",
]

MASS_TOL = 1e-12


def midpoints(n):
    """Cell midpoints ``(i + 1/2)/n``."""
    return (np.arange(n) + 0.5) / n


def edges(n):
    """Left cell edges ``i/n``."""
    return np.arange(n) / n


@dataclass(frozen=True)
class GridDensity:
    """Probability density given by its cell averages on ``n`` uniform cells.

    The constructor checks nonnegativity and unit mass (``mean(values) == 1``
    within ``1e-12``); use :meth:`normalized` to repair roundoff first.
    """

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 1 or v.size < 2:
            raise ConfigurationError("GridDensity needs a 1-D array with n >= 2")
        if np.any(v < 0):
            raise DomainError(f"negative density value {v.min():.3e}")
        mass = v.mean()
        if abs(mass - 1.0) > MASS_TOL:
            raise DomainError(f"density has mass {mass!r}, expected 1")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n(self):
        return self.values.size

    @classmethod
    def uniform(cls, n):
        return cls(np.ones(n))

    @classmethod
    def normalized(cls, values):
        v = np.clip(np.asarray(values, dtype=float), 0.0, None)
        return cls(v / v.mean())

    @classmethod
    def project(cls, f, n, q=32):
        """Ulam projection of an analytic density or a finer grid."""
        return cls.normalized(ulam_project(f, n, q))

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


@dataclass(frozen=True)
class SignedGridFunction:
    """Signed cell averages; ``zero_mean`` asserts membership of the zero-mean space."""

    values: np.ndarray
    zero_mean: bool = False

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 1 or v.size < 2:
            raise ConfigurationError("SignedGridFunction needs a 1-D array with n >= 2")
        if self.zero_mean and abs(v.mean()) > MASS_TOL * max(1.0, np.abs(v).mean()):
            raise DomainError(f"function flagged zero-mean has mean {v.mean():.3e}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n(self):
        return self.values.size

    @classmethod
    def centered(cls, values):
        v = np.asarray(values, dtype=float)
        return cls(v - v.mean(), zero_mean=True)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


GridLike = Union[np.ndarray, GridDensity, SignedGridFunction]


def as_values(f):
    """Plain float array behind any grid-like input."""
    if isinstance(f, (GridDensity, SignedGridFunction)):
        return f.values
    return np.asarray(f, dtype=float)


def like(template, values):
    """Wrap ``values`` in the same kind of object as ``template``."""
    if isinstance(template, GridDensity):
        return GridDensity.normalized(values)
    if isinstance(template, SignedGridFunction):
        if template.zero_mean:
            return SignedGridFunction.centered(values)
        return SignedGridFunction(values)
    return np.asarray(values)


@dataclass(frozen=True)
class AtomicMeasure:
    """Finite combination of point masses on the circle."""

    positions: np.ndarray
    weights: np.ndarray
    signed: bool = field(default=False)

    def __post_init__(self):
        p = np.mod(np.asarray(self.positions, dtype=float).ravel(), 1.0)
        w = np.asarray(self.weights, dtype=float).ravel()
        if p.shape != w.shape:
            raise ConfigurationError("positions and weights differ in length")
        if not self.signed:
            if np.any(w < 0):
                raise DomainError("atomic probability measure with negative weight")
            if abs(w.sum() - 1.0) > MASS_TOL:
                raise DomainError(f"atom weights sum to {w.sum()!r}")
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "weights", w)

    @classmethod
    def point(cls, x):
        return cls([x], [1.0])

    @classmethod
    def empirical(cls, samples):
        s = np.asarray(samples, dtype=float)
        return cls(s, np.full(s.size, 1.0 / s.size))

    def __sub__(self, other):
        return AtomicMeasure(
            np.concatenate([self.positions, other.positions]),
            np.concatenate([self.weights, -other.weights]),
            signed=True,
        )


def cyclic_derivative(values, kind="forward"):
    """Discrete derivative on the periodic grid.

    ``forward`` is ``n (f[i+1] - f[i])`` and is the one used by the Sobolev
    norms; ``central`` is ``n (f[i+1] - f[i-1]) / 2``.
    """
    v = np.asarray(values, dtype=float)
    n = v.shape[-1]
    if kind == "forward":
        return n * (np.roll(v, -1, axis=-1) - v)
    if kind == "central":
        return 0.5 * n * (np.roll(v, -1, axis=-1) - np.roll(v, 1, axis=-1))
    raise ConfigurationError(f"unknown derivative kind {kind!r}")


def interp_weights(points, n):
    """Indices and weights for cyclic linear interpolation between midpoints.

    Returns ``(j0, j1, w0, w1)`` such that ``f(x) ~ w0 f[j0] + w1 f[j1]``.
    """
    u = np.asarray(points, dtype=float) * n - 0.5
    j = np.floor(u)
    t = u - j
    j0 = np.mod(j.astype(np.int64), n)
    j1 = np.mod(j0 + 1, n)
    return j0, j1, 1.0 - t, t


def interp(values, points):
    v = np.asarray(values, dtype=float)
    j0, j1, w0, w1 = interp_weights(points, v.size)
    return w0 * v[j0] + w1 * v[j1]


def _segment_abs_integral(a, b, h):
    """Exact integral of |linear| over width h with endpoint values a, b."""
    same = a * b >= 0
    out = np.empty_like(a)
    out[same] = h * np.abs(a[same] + b[same]) / 2
    d = ~same
    out[d] = h * (a[d] ** 2 + b[d] ** 2) / (2 * np.abs(a[d] - b[d]))
    return out


def _dual_lip_grid(v):
    n = v.size
    if abs(v.mean()) > 1e-10 * max(1.0, np.abs(v).mean()):
        raise DomainError("dual_lip norm needs a zero-mean function")
    F = np.concatenate([[0.0], np.cumsum(v) / n])
    F[-1] = 0.0

    def cost(c):
        return _segment_abs_integral(F[:-1] - c, F[1:] - c, 1.0 / n).sum()

    lo, hi = F.min(), F.max()
    if hi - lo == 0.0:
        return cost(lo)
    res = minimize_scalar(cost, bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-15 * max(1.0, hi - lo)})
    return float(min(res.fun, cost(lo), cost(hi)))


def dual_lip_atomic(mu):
    """Kantorovich dual norm of a zero-total signed atomic measure on the circle.

    The CDF difference is piecewise constant, so the optimal rotation constant
    is a weighted median and the value is exact.
    """
    p, w = mu.positions, mu.weights
    if abs(w.sum()) > 1e-12 * max(1.0, np.abs(w).sum()):
        raise DomainError("dual_lip norm needs zero total mass")
    order = np.argsort(p, kind="stable")
    p, w = p[order], w[order]
    F = np.cumsum(w)
    # F is constant on [p_k, p_{k+1}); on [p_last, 1) u [0, p_first) it is 0
    lengths = np.diff(np.concatenate([p, [1.0 + p[0]]]))
    values = F.copy()
    values[-1] = 0.0
    keep = lengths > 0
    values, lengths = values[keep], lengths[keep]
    if values.size == 0:
        return 0.0
    idx = np.argsort(values, kind="stable")
    cum = np.cumsum(lengths[idx])
    c = values[idx][np.searchsorted(cum, 0.5 * cum[-1])]
    return float(np.sum(lengths * np.abs(values - c)))


def norm(f, kind="L1"):
    """Norm of a grid function or of a zero-mean atomic measure.

    Kinds: ``L1``, ``L2``, ``sup``, ``W11``, ``W21``, ``C1`` (sup-norm
    surrogate for C^1: ``sup|f| + sup|f'|``) and ``dual_lip`` (the
    Kantorovich-Rubinstein norm, only for zero-mean inputs).
    """
    if isinstance(f, AtomicMeasure):
        if kind != "dual_lip":
            raise ConfigurationError("atomic measures only support the dual_lip norm")
        return dual_lip_atomic(f)
    v = as_values(f)
    if v.shape[-1] < 2:
        raise ConfigurationError("norms need n >= 2")
    if v.ndim == 2:
        # pairs (two populations) use the direct-sum norm
        return float(sum(norm(row, kind) for row in v))
    if kind == "L1":
        return float(np.abs(v).mean())
    if kind == "L2":
        return float(np.sqrt(np.mean(v * v)))
    if kind == "sup":
        return float(np.abs(v).max())
    if kind == "W11":
        return float(np.abs(v).mean() + np.abs(cyclic_derivative(v)).mean())
    if kind == "W21":
        d1 = cyclic_derivative(v)
        d2 = cyclic_derivative(d1)
        return float(np.abs(v).mean() + np.abs(d1).mean() + np.abs(d2).mean())
    if kind == "C1":
        return float(np.abs(v).max() + np.abs(cyclic_derivative(v)).max())
    if kind == "dual_lip":
        return _dual_lip_grid(v)
    raise ConfigurationError(f"unknown norm kind {kind!r}")


def ulam_project(f, n, q=32):
    """Conditional expectation on the ``n``-cell partition.

    ``f`` is either a vectorized callable (cell averages estimated with ``q``
    midpoint subsamples per cell) or an array on a grid whose size is a
    multiple of ``n`` (exact block averaging).
    """
    if callable(f):
        sub = (np.arange(n)[:, None] + (np.arange(q)[None, :] + 0.5) / q) / n
        return np.asarray(f(sub), dtype=float).mean(axis=1)
    v = as_values(f)
    m = v.size
    if m % n:
        raise ConfigurationError(f"cannot block-average {m} cells onto {n}")
    return v.reshape(n, m // n).mean(axis=1)


def hat_atom_project(mu, n):
    """Project onto atoms at the grid nodes ``k/n`` with hat-function weights.

    Each node receives ``integral of phi_k d mu`` where ``phi_k`` is the hat
    of half-width ``1/n`` peaked at ``k/n``; the hats form a partition of
    unity so mass is preserved.
    """
    w = np.zeros(n)
    if isinstance(mu, AtomicMeasure):
        u = mu.positions * n
        k0 = np.floor(u).astype(np.int64)
        t = u - k0
        np.add.at(w, np.mod(k0, n), mu.weights * (1.0 - t))
        np.add.at(w, np.mod(k0 + 1, n), mu.weights * t)
        signed = mu.signed
    else:
        v = as_values(mu)
        if v.size != n:
            v = ulam_project(v, n)
        # a half hat over one cell integrates the cell value times 1/(2n)
        w = (v + np.roll(v, 1)) / (2 * n)
        signed = bool(np.any(w < 0))
    return AtomicMeasure(np.arange(n) / n, w, signed=signed)


def wasserstein1_circle(mu, nu):
    """W1 distance on the circle of circumference 1 between two atomic measures."""
    if isinstance(mu, GridDensity) or isinstance(nu, GridDensity):
        a = as_values(mu)
        b = as_values(nu)
        return _dual_lip_grid(a - b)
    return dual_lip_atomic(mu - nu)


def save_density_csv(path, f):
    """Write ``cell_index, x_left, value`` rows with 17 significant digits."""
    v = as_values(f)
    n = v.size
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["cell_index", "x_left", "value"])
        for i in range(n):
            w.writerow([i, f"{i / n:.17g}", f"{v[i]:.17g}"])


def load_density_csv(path, kind=None):
    """Read a density CSV back; ``kind`` may be ``GridDensity`` to validate."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    rows.sort(key=lambda r: int(r["cell_index"]))
    v = np.array([float(r["value"]) for r in rows])
    if kind is None:
        return v
    return kind(v)
