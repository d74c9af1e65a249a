"""Linear transfer operators on the uniform grid.

Every operator here acts on column vectors of cell values, so a Markov
matrix has unit column sums: ``mean(M @ f) == mean(f)``.

Two assembly routes exist for deterministic maps. The Ulam route integrates
exactly over preimages of cells (conditional expectation of the true
pushforward of a piecewise-constant density); the preimage route evaluates
the pointwise transfer formula at cell midpoints with linear interpolation.
"""
from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
from scipy import special
from scipy.linalg import circulant

from .densities import (GridDensity, SignedGridFunction, as_values, edges, interp_weights,
                        like, midpoints)
from .errors import ConfigurationError, NumericalError
from .maps import CircleMap, MeanFieldDiffeo

__all__ = [
    "TransferMatrix",
    "ulam_matrix",
    "preimage_matrix",
    "expanding_transfer_apply",
    "diffeo_matrix",
    "diffeo_pushforward",
    "NoiseKernel",
    "convolve",
    "convolution_matrix",
    "ReflectingKernel",
    "reflecting_kernel_matrix",
    "FixedDensity",
    "linear_fixed_density",
    "as_operator",
]

log = logging.getLogger(__name__)

MAGIC = b"SCTM"


@dataclass(frozen=True)
class TransferMatrix:
    """Markov matrix acting on density vectors (column convention).

    ``defect`` is the largest ``|column sum - 1|`` seen before renormalization.
    """

    entries: object
    defect: float = 0.0
    convention: str = "column"

    @property
    def n(self):
        return self.entries.shape[0]

    def __matmul__(self, other):
        return self.entries @ other

    def apply(self, f):
        return like(f, self.entries @ as_values(f))

    def toarray(self):
        e = self.entries
        return e.toarray() if sp.issparse(e) else np.asarray(e)

    def column_sums(self):
        return np.asarray(self.entries.sum(axis=0)).ravel()

    def save(self, path):
        """Dense little-endian binary: magic, n, convention tag, row-major float64."""
        a = np.ascontiguousarray(self.toarray(), dtype="<f8")
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", self.n))
            fh.write(self.convention.encode().ljust(8, b"\0")[:8])
            fh.write(a.tobytes(order="C"))

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            if fh.read(4) != MAGIC:
                raise ConfigurationError(f"{path} is not a transfer-matrix file")
            (n,) = struct.unpack("<Q", fh.read(8))
            conv = fh.read(8).rstrip(b"\0").decode()
            a = np.frombuffer(fh.read(), dtype="<f8")
        if a.size != n * n:
            raise ConfigurationError(f"{path}: truncated matrix body")
        return cls(a.reshape(n, n).astype(float), convention=conv)

    def save_csv(self, path):
        np.savetxt(path, self.toarray(), delimiter=",", fmt="%.17g")


def _renormalize_columns(M):
    """Scale columns to unit sum; returns the matrix and the pre-scaling defect."""
    sums = np.asarray(M.sum(axis=0)).ravel()
    defect = float(np.max(np.abs(sums - 1.0), initial=0.0))
    scale = np.where(sums > 0, 1.0 / np.where(sums > 0, sums, 1.0), 1.0)
    if sp.issparse(M):
        M = (M @ sp.diags(scale)).tocsr()
    else:
        M = M * scale[None, :]
    if defect > 1e-10:
        log.debug("Markov renormalization: column-sum defect %.3e", defect)
    return M, defect


def _overlaps(a, b, n, wrap=True):
    """Overlap (in cell units) of intervals ``[a_r, b_r]`` with the cells.

    ``a`` and ``b`` are lifted coordinates already multiplied by ``n``.
    Returns ``(rows, cells, lengths)``; cells are reduced mod ``n`` when
    ``wrap`` is set, otherwise clipped to ``[0, n)``.
    """
    k0 = np.floor(a).astype(np.int64)
    span = int(np.max(np.ceil(b) - k0, initial=0))
    rows, cols, vals = [], [], []
    idx = np.arange(a.size)
    for m in range(max(span, 1)):
        c = k0 + m
        ov = np.minimum(b, c + 1) - np.maximum(a, c)
        keep = ov > 0
        rows.append(idx[keep])
        cols.append(c[keep])
        vals.append(ov[keep])
    rows, cols, vals = (np.concatenate(v) for v in (rows, cols, vals))
    if wrap:
        cols = np.mod(cols, n)
    else:
        ok = (cols >= 0) & (cols < n)
        rows, cols, vals = rows[ok], cols[ok], vals[ok]
    return rows, cols, vals


def ulam_matrix(T: CircleMap, n: int, q: int = 64, method: str = "auto") -> TransferMatrix:
    """Ulam matrix ``P[j, i]`` = fraction of cell ``i`` mapped into cell ``j``.

    Parameters
    ----------
    T : CircleMap
    n : int
    q : int
        Subsamples per cell for the ``sample`` method.
    method : {"auto", "exact", "sample"}
        ``exact`` integrates over branch preimages of the cell edges (exact in
        floating point for affine branches on dyadic grids); ``auto`` uses it
        whenever branch data is present.
    """
    if method == "auto":
        method = "exact" if T.branches else "sample"
    e = np.arange(n + 1) / n
    if method == "exact":
        if not T.branches:
            raise ConfigurationError(f"map {T.name!r} has no branch data")
        rows, cols, vals = [], [], []
        for br in T.branches:
            lo, hi = br.domain
            g = br.inverse(e)
            a = np.minimum(g[:-1], g[1:])
            b = np.maximum(g[:-1], g[1:])
            # restrict to the branch domain (targets outside its image collapse)
            a, b = np.clip(a, lo, hi), np.clip(b, lo, hi)
            r, c, v = _overlaps(a * n, b * n, n, wrap=not T.interval)
            rows.append(r)
            cols.append(c)
            vals.append(v)
        M = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(n, n))
    elif method == "sample":
        x = (np.arange(n)[:, None] + (np.arange(q)[None, :] + 0.5) / q) / n
        y = T(x)
        j = np.floor(y * n).astype(np.int64)
        j = np.clip(j, 0, n - 1) if T.interval else np.mod(j, n)
        i = np.repeat(np.arange(n), q)
        M = sp.csr_matrix((np.full(n * q, 1.0 / q), (j.ravel(), i)), shape=(n, n))
    else:
        raise ConfigurationError(f"unknown Ulam method {method!r}")
    M, defect = _renormalize_columns(M)
    return TransferMatrix(M, defect)


def _interp_rows(points, n, weights, interval=False):
    """Sparse rows realizing ``weights * f(points)`` by linear interpolation."""
    if interval:
        u = np.clip(points * n - 0.5, 0.0, n - 1.0)
        j0 = np.minimum(np.floor(u).astype(np.int64), n - 2)
        t = u - j0
        j1 = j0 + 1
        w0, w1 = 1.0 - t, t
    else:
        j0, j1, w0, w1 = interp_weights(points, n)
    return j0, j1, weights * w0, weights * w1


def preimage_matrix(T: CircleMap, n: int) -> TransferMatrix:
    """Pointwise transfer formula ``sum_branches f(g(x)) |g'(x)|`` at midpoints."""
    if not T.branches:
        raise ConfigurationError(f"map {T.name!r} has no branch data")
    x = midpoints(n)
    rows = np.arange(n)
    R, C, V = [], [], []
    for br in T.branches:
        g = br.inverse(x)
        w = np.abs(br.inverse_deriv(x))
        j0, j1, v0, v1 = _interp_rows(g, n, w, T.interval)
        R += [rows, rows]
        C += [j0, j1]
        V += [v0, v1]
    M = sp.csr_matrix((np.concatenate(V), (np.concatenate(R), np.concatenate(C))), shape=(n, n))
    M, defect = _renormalize_columns(M)
    return TransferMatrix(M, defect)


def expanding_transfer_apply(T: CircleMap, f):
    """Apply the transfer operator of ``T`` to ``f`` through its preimage sum."""
    v = as_values(f)
    return like(f, preimage_matrix(T, v.size) @ v)


def diffeo_matrix(phi: MeanFieldDiffeo, method: str = "ulam") -> TransferMatrix:
    """Transfer operator of the mean-field diffeomorphism.

    ``ulam`` integrates the piecewise-constant density exactly over the
    preimage of each cell (mass and positivity exact); ``interp`` evaluates
    ``f(Phi^-1 x) / Phi'(Phi^-1 x)`` at midpoints.
    """
    n = phi.n
    if phi.is_identity:
        return TransferMatrix(sp.identity(n, format="csr"))
    if method == "ulam":
        z = phi.invert_lift(np.arange(n + 1) / n) * n
        r, c, v = _overlaps(z[:-1], z[1:], n)
        M = sp.csr_matrix((v, (r, c)), shape=(n, n))
    elif method == "interp":
        z = phi.invert(midpoints(n))
        j0, j1, v0, v1 = _interp_rows(z, n, 1.0 / phi.deriv(z))
        rows = np.arange(n)
        M = sp.csr_matrix((np.concatenate([v0, v1]),
                           (np.concatenate([rows, rows]), np.concatenate([j0, j1]))),
                          shape=(n, n))
    else:
        raise ConfigurationError(f"unknown pushforward method {method!r}")
    M, defect = _renormalize_columns(M)
    return TransferMatrix(M, defect)


def diffeo_pushforward(phi: MeanFieldDiffeo, f, method: str = "ulam"):
    v = as_values(f)
    if v.size != phi.n:
        raise ConfigurationError("density and diffeomorphism grids differ")
    return like(f, diffeo_matrix(phi, method) @ v)


# ---------------------------------------------------------------- noise

@dataclass(frozen=True)
class NoiseKernel:
    """Even noise profile on the line, optionally discretized on a grid.

    ``support`` is the half-width of the support (``inf`` for Gaussians).
    After :meth:`on_grid`, ``grid_samples`` holds the periodized profile at
    offsets ``k/n`` normalized so that ``mean(grid_samples) == 1``.
    """

    profile: Optional[Callable]
    derivative: Optional[Callable] = None
    cdf: Optional[Callable] = None
    support: float = np.inf
    name: str = "noise"
    params: dict = field(default_factory=dict)
    grid_samples: Optional[np.ndarray] = None
    truncation_terms: int = 0
    tail_bound: float = 0.0

    # constructors -------------------------------------------------------
    @classmethod
    def gaussian(cls, sigma):
        if sigma <= 0:
            raise ConfigurationError("sigma must be positive")
        c = 1.0 / (sigma * np.sqrt(2 * np.pi))
        return cls(
            profile=lambda u: c * np.exp(-0.5 * (np.asarray(u) / sigma) ** 2),
            derivative=lambda u: -np.asarray(u) / sigma**2 * c * np.exp(-0.5 * (np.asarray(u) / sigma) ** 2),
            cdf=lambda u: special.ndtr(np.asarray(u) / sigma),
            name="gaussian", params={"sigma": sigma},
        )

    @classmethod
    def truncated_gaussian(cls, sigma, width=1.0):
        """Gaussian restricted to ``[-width, width]`` and renormalized."""
        if sigma <= 0 or width <= 0:
            raise ConfigurationError("sigma and width must be positive")
        Z = special.ndtr(width / sigma) - special.ndtr(-width / sigma)
        c = 1.0 / (sigma * np.sqrt(2 * np.pi) * Z)

        def prof(u):
            u = np.asarray(u, dtype=float)
            return np.where(np.abs(u) <= width, c * np.exp(-0.5 * (u / sigma) ** 2), 0.0)

        def der(u):
            u = np.asarray(u, dtype=float)
            return np.where(np.abs(u) <= width, -u / sigma**2 * c * np.exp(-0.5 * (u / sigma) ** 2), 0.0)

        def cdf(u):
            u = np.clip(np.asarray(u, dtype=float), -width, width)
            return (special.ndtr(u / sigma) - special.ndtr(-width / sigma)) / Z

        return cls(prof, der, cdf, width, "truncated-gaussian", {"sigma": sigma, "width": width})

    @classmethod
    def triangular(cls, width):
        w = float(width)

        def prof(u):
            return np.clip(1.0 - np.abs(np.asarray(u, dtype=float)) / w, 0.0, None) / w

        def der(u):
            u = np.asarray(u, dtype=float)
            return np.where(np.abs(u) < w, -np.sign(u) / w**2, 0.0)

        def cdf(u):
            u = np.clip(np.asarray(u, dtype=float), -w, w)
            left = 0.5 * (1 + u / w) ** 2
            right = 1.0 - 0.5 * (1 - u / w) ** 2
            return np.where(u < 0, left, right)

        return cls(prof, der, cdf, w, "triangular", {"width": w})

    @classmethod
    def uniform(cls, width=1.0):
        """Flat profile ``1/(2 width)`` on the half-open ``[-width, width)``."""
        w = float(width)

        def prof(u):
            u = np.asarray(u, dtype=float)
            return np.where((u >= -w) & (u < w), 0.5 / w, 0.0)

        def cdf(u):
            return (np.clip(np.asarray(u, dtype=float), -w, w) + w) / (2 * w)

        return cls(prof, None, cdf, w, "uniform", {"width": w})

    @classmethod
    def delta(cls):
        return cls(None, None, lambda u: (np.asarray(u) >= 0).astype(float), 0.0, "delta")

    # discretization -----------------------------------------------------
    @property
    def sup(self):
        """Supremum of the line profile (of the periodized one once on a grid)."""
        if self.grid_samples is not None:
            return float(self.grid_samples.max())
        if self.profile is None:
            return np.inf
        return float(self.profile(0.0))

    def on_grid(self, n, tail_tol=1e-14):
        """Periodize ``sum_k rho(x + k)`` at offsets ``k/n`` and normalize to mean 1."""
        if self.profile is None:
            g = np.zeros(n)
            g[0] = n
            return replace(self, grid_samples=g, truncation_terms=0, tail_bound=0.0)
        k = np.arange(n)
        d = np.where(k <= n // 2, k, k - n) / n  # offsets in [-1/2, 1/2]
        if np.isfinite(self.support):
            K = int(np.ceil(self.support + 0.5))
            tail = 0.0
        else:
            sigma = self.params.get("sigma", 1.0)
            K, tail = 1, np.inf
            while tail >= tail_tol:
                K += 1
                tail = 2 * special.ndtr(-(K - 0.5) / sigma)
        g = sum(self.profile(d + j) for j in range(-K, K + 1))
        g = np.asarray(g, dtype=float)
        mass = g.mean()
        if mass <= 0:
            raise ConfigurationError("noise profile vanishes on the grid; refine n")
        g = g / mass
        g.setflags(write=False)
        return replace(self, grid_samples=g, truncation_terms=K, tail_bound=float(tail))


def _grid(rho, n):
    if rho.grid_samples is None or rho.grid_samples.size != n:
        return rho.on_grid(n).grid_samples
    return rho.grid_samples


def convolve(rho: NoiseKernel, f):
    """Circular convolution ``(1/n) sum_j rho~(x_i - x_j) f_j`` by FFT."""
    v = as_values(f)
    g = _grid(rho, v.shape[-1])
    out = np.fft.irfft(np.fft.rfft(g) * np.fft.rfft(v, axis=-1), n=v.shape[-1], axis=-1) / v.shape[-1]
    return like(f, out)


def convolution_matrix(rho: NoiseKernel, n: int) -> TransferMatrix:
    return TransferMatrix(circulant(_grid(rho, n)) / n)


# ---------------------------------------------------------------- reflecting kernel

@dataclass(frozen=True)
class ReflectingKernel:
    """Kernel values ``K[i, j] ~ k(x_i, y_j)`` on ``[0, 1]``; ``A = K / n`` acts on densities."""

    entries: np.ndarray
    defect: float = 0.0

    @property
    def n(self):
        return self.entries.shape[0]

    @property
    def matrix(self):
        return self.entries / self.n

    def __matmul__(self, other):
        return self.matrix @ other


REFLECTIONS = (-1, 0, 1)


def reflecting_kernel_matrix(Tmap, rho: NoiseKernel, n: int, derivative=False,
                             renormalize=True) -> ReflectingKernel:
    """Kernel of ``y -> pi(T(y) + omega)`` with reflection ``pi(u) = min_i |u - 2i|``.

    ``k(x, y) = sum_m rho(2m + x - T(y)) + rho(2m - x - T(y))`` for
    ``m in {-1, 0, 1}``, averaged over each x-cell (exactly, through the
    profile's CDF) and evaluated at the y-midpoints.

    Parameters
    ----------
    Tmap : CircleMap, callable or array
        The effective map, or its values at the ``n`` midpoints.
    rho : NoiseKernel
        Line profile supported in ``[-1, 1]``.
    derivative : bool
        Build the kernel of ``rho'`` instead (no renormalization); this is
        minus the derivative of the kernel with respect to ``T(y)``.
    """
    if not np.isfinite(rho.support) or rho.support > 1.0:
        raise ConfigurationError("reflecting kernels need a profile supported in [-1, 1]")
    if isinstance(Tmap, np.ndarray) or np.ndim(Tmap) > 0:
        t = np.asarray(Tmap, dtype=float)
    else:
        t = np.asarray(Tmap(midpoints(n)), dtype=float)
    if t.shape != (n,):
        raise ConfigurationError("map values must be given at the n midpoints")
    e = edges(n)
    lo, hi = e[:, None], (e + 1.0 / n)[:, None]
    t = t[None, :]
    K = np.zeros((n, n))
    if derivative:
        if rho.profile is None or rho.derivative is None:
            raise ConfigurationError(f"noise profile {rho.name!r} has no derivative")
        F = rho.profile
    else:
        F = rho.cdf
    for m in REFLECTIONS:
        if F is not None:
            K += F(2 * m + hi - t) - F(2 * m + lo - t)
            K += F(2 * m - lo - t) - F(2 * m - hi - t)
    if F is not None:
        K *= n
    elif rho.profile is not None:
        x = midpoints(n)[:, None]
        for m in REFLECTIONS:
            K += rho.profile(2 * m + x - t) + rho.profile(2 * m - x - t)
    else:
        raise ConfigurationError("noise kernel lacks both a profile and a CDF")
    if derivative:
        return ReflectingKernel(K, 0.0)
    sums = K.mean(axis=0)
    defect = float(np.max(np.abs(sums - 1.0)))
    if renormalize:
        K = K / sums[None, :]
    return ReflectingKernel(K, defect)


# ---------------------------------------------------------------- fixed densities

@dataclass
class FixedDensity:
    """Result of :func:`linear_fixed_density`."""

    density: GridDensity
    iterations: int
    step: float
    second_eig: float
    unique: bool
    residual: float


def as_operator(M):
    """Callable ``f -> M f`` for matrices, kernel objects and callables."""
    if isinstance(M, ReflectingKernel):
        A = M.matrix
        return lambda f: A @ f
    if isinstance(M, TransferMatrix):
        E = M.entries
        return lambda f: E @ f
    if callable(M) and not hasattr(M, "shape"):
        return M
    return lambda f: M @ f


def _dimension(M, start):
    if start is not None:
        return as_values(start).size
    return M.n if hasattr(M, "n") else M.shape[0]


def linear_fixed_density(M, tol=1e-12, max_iter=100_000, start=None, probe_steps=60):
    """Fixed probability density of a Markov operator by power iteration.

    Parameters
    ----------
    M : TransferMatrix, ReflectingKernel, matrix, LinearOperator or callable
    tol : float
        Stop when the L1 step falls below ``tol``.
    start : array_like, optional
        Warm start; uniform by default.
    probe_steps : int
        Iterations spent on a zero-mean probe vector to estimate the
        second eigenvalue modulus (the spectral-gap diagnostic).

    Returns
    -------
    FixedDensity

    Raises
    ------
    NumericalError
        If the step never falls below ``tol``.
    """
    op = as_operator(M)
    n = _dimension(M, start)
    f = np.ones(n) if start is None else np.array(as_values(start), dtype=float)
    f = f / f.mean()
    step = np.inf
    it = 0
    while it < max_iter:
        g = op(f)
        g = g / g.mean()
        step = float(np.abs(g - f).mean())
        f = g
        it += 1
        if step < tol:
            break
    second = _second_eig(op, n, probe_steps)
    if step >= tol:
        raise NumericalError(
            f"power iteration stalled at step {step:.3e} after {it} iterations",
            residual=step, diagnostics={"second_eig": second},
        )
    f = np.clip(f, 0.0, None)
    f = f / f.mean()
    res = float(np.abs(op(f) - f).mean())
    unique = second < 1.0 - 1e-9
    if not unique:
        log.warning("second eigenvalue estimate %.6f: fixed density may not be unique", second)
    return FixedDensity(GridDensity(f), it, step, second, unique, res)


def _second_eig(op, n, steps):
    """Geometric-mean contraction of a deterministic zero-mean probe."""
    rng = np.random.default_rng(12345)
    v = rng.standard_normal(n)
    v -= v.mean()
    norm0 = np.abs(v).mean()
    v /= norm0
    logs = []
    for _ in range(steps):
        w = op(v)
        w -= w.mean()
        r = np.abs(w).mean()
        if r < 1e-13:
            return 0.0  # nilpotent on the probe
        logs.append(np.log(r))
        v = w / r
    tail = logs[len(logs) // 2:]
    return float(np.exp(np.mean(tail)))
