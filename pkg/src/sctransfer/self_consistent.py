"""Self-consistent transfer operators and their fixed-point solvers.

The nonlinear operator is ``L_delta(f) = L_{delta, f}(f)``: the linear
operator is frozen at the current density and then applied to it. Four model
classes are supported:

* ``EXPANDING``: ``Q_{delta,f}(L_T f)`` with ``Q`` the pushforward by the
  mean-field diffeomorphism ``x + delta S_f(x)``.
* ``NOISE``: the same followed by circular convolution with a noise kernel.
* ``REFLECTING``: a tent-like interval map rescaled to
  ``T(x) / (1 + delta int x df)`` followed by reflected additive noise.
* ``TWO_POPULATION``: a pair of densities sharing one diffeomorphism built
  from ``delta (w1 int h1 f1 + w2 int h2 f2)``.

All iterates live on the grid, so the finite-rank truncation is structural.
"""
from __future__ import annotations

import csv
import enum
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator

from .densities import AtomicMeasure, GridDensity, as_values, hat_atom_project, like, midpoints
from .errors import ConfigurationError, NonContraction, RegimeError
from .maps import CircleMap, CouplingKernel, MeanFieldDiffeo, mean_field_displacement
from .transfer_ops import (NoiseKernel, convolve, convolution_matrix, diffeo_matrix,
                           linear_fixed_density, preimage_matrix, reflecting_kernel_matrix,
                           ulam_matrix)

__all__ = [
    "SystemClass",
    "SelfConsistentModel",
    "SolverTrace",
    "apply_self_consistent",
    "picard_fixed_point",
    "thm_existence_iteration",
    "atomic_self_consistent_step",
    "l1_distance",
]

log = logging.getLogger(__name__)


class SystemClass(str, enum.Enum):
    EXPANDING = "expanding"
    NOISE = "additive-noise-circle"
    REFLECTING = "reflecting-kernel-interval"
    TWO_POPULATION = "two-population"


def l1_distance(f, g):
    """L1 distance; pairs use the sum over populations."""
    return float(np.abs(np.asarray(f) - np.asarray(g)).mean(axis=-1).sum())


def _normalize(f):
    f = np.asarray(f, dtype=float)
    return f / f.mean(axis=-1, keepdims=True)


@dataclass(frozen=True)
class SelfConsistentModel:
    """Configuration of a self-consistent system.

    Parameters
    ----------
    system : SystemClass or str
    maps : sequence of CircleMap
        One map, or two for ``TWO_POPULATION``.
    couplings : sequence of CouplingKernel
        One kernel, or two for ``TWO_POPULATION``; unused by ``REFLECTING``.
    delta : float
        Coupling strength.
    n : int
        Grid resolution.
    noise : NoiseKernel, optional
        Required by ``NOISE`` (periodized) and ``REFLECTING`` (line profile
        supported in ``[-1, 1]``).
    transfer : {"ulam", "preimage"}
        Discretization of the uncoupled map.
    weights : pair of float
        Mixing weights of the two populations' mean fields.
    """

    system: SystemClass
    maps: Sequence[CircleMap]
    couplings: Sequence[CouplingKernel] = ()
    delta: float = 0.0
    n: int = 1024
    noise: Optional[NoiseKernel] = None
    transfer: str = "ulam"
    weights: tuple = (1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "system", SystemClass(self.system))
        if isinstance(self.maps, CircleMap):
            object.__setattr__(self, "maps", (self.maps,))
        if isinstance(self.couplings, CouplingKernel):
            object.__setattr__(self, "couplings", (self.couplings,))
        object.__setattr__(self, "maps", tuple(self.maps))
        object.__setattr__(self, "couplings", tuple(self.couplings))
        s = self.system
        if self.delta < 0:
            raise ConfigurationError("delta must be >= 0")
        if self.n < 4:
            raise ConfigurationError("grid needs at least 4 cells")
        if self.transfer not in ("ulam", "preimage"):
            raise ConfigurationError(f"unknown transfer discretization {self.transfer!r}")
        npop = 2 if s is SystemClass.TWO_POPULATION else 1
        if len(self.maps) != npop:
            raise ConfigurationError(f"{s.value} needs {npop} map(s)")
        if s is not SystemClass.REFLECTING and len(self.couplings) != npop:
            raise ConfigurationError(f"{s.value} needs {npop} coupling kernel(s)")
        if s in (SystemClass.NOISE, SystemClass.REFLECTING) and self.noise is None:
            raise ConfigurationError(f"{s.value} needs a noise kernel")
        if s is SystemClass.REFLECTING:
            if not self.maps[0].interval:
                raise ConfigurationError("the reflecting class needs an interval map")
            if not np.isfinite(self.noise.support) or self.noise.support > 1:
                raise ConfigurationError("reflecting noise must be supported in [-1, 1]")
        if s is SystemClass.NOISE:
            object.__setattr__(self, "noise", self.noise.on_grid(self.n))
        # eager regime check at the uniform density
        self.frozen_operator(self.uniform())

    # ------------------------------------------------------------ helpers
    @property
    def populations(self):
        return 2 if self.system is SystemClass.TWO_POPULATION else 1

    def uniform(self):
        shape = (2, self.n) if self.populations == 2 else (self.n,)
        return np.ones(shape)

    def with_delta(self, delta):
        return SelfConsistentModel(self.system, self.maps, self.couplings, delta, self.n,
                                   self.noise, self.transfer, self.weights)

    @cached_property
    def base_operators(self):
        """Sparse matrices of the uncoupled deterministic maps."""
        build = ulam_matrix if self.transfer == "ulam" else preimage_matrix
        if self.system is SystemClass.REFLECTING:
            return ()
        return tuple(build(T, self.n).entries for T in self.maps)

    def _check_shape(self, f):
        v = np.asarray(as_values(f), dtype=float)
        want = (2, self.n) if self.populations == 2 else (self.n,)
        if v.shape != want:
            raise ConfigurationError(f"state has shape {v.shape}, model expects {want}")
        return v

    def displacement(self, f):
        """Samples of ``S`` and ``S'`` generated by ``f`` (weighted sum for pairs)."""
        f = self._check_shape(f)
        if self.populations == 1:
            return mean_field_displacement(self.couplings[0], f)
        S = np.zeros(self.n)
        dS = np.zeros(self.n)
        for w, h, fk in zip(self.weights, self.couplings, f):
            s, ds = mean_field_displacement(h, fk)
            S += w * s
            dS += w * ds
        return S, dS

    def diffeo(self, f) -> MeanFieldDiffeo:
        S, dS = self.displacement(f)
        return MeanFieldDiffeo(self.delta, S, dS)

    def mean_position(self, f):
        f = self._check_shape(f)
        return float(np.mean(midpoints(self.n) * f))

    def effective_map_values(self, f):
        """``T(y) / (1 + delta m)`` at the midpoints (reflecting class)."""
        m = self.mean_position(f)
        scale = 1.0 + self.delta * m
        if scale <= 0:
            raise RegimeError("1 + delta * mean is not positive", scale)
        return self.maps[0](midpoints(self.n)) / scale

    # ------------------------------------------------------------ operators
    def frozen_operator(self, mu):
        """The linear operator ``L_{delta, mu}``.

        Returns a sparse matrix (expanding), a ``LinearOperator`` (noise), a
        dense matrix (reflecting) or a pair of sparse matrices (two
        populations).
        """
        mu = self._check_shape(mu)
        s = self.system
        if s is SystemClass.REFLECTING:
            return reflecting_kernel_matrix(self.effective_map_values(mu), self.noise, self.n).matrix
        Q = diffeo_matrix(self.diffeo(mu)).entries
        if s is SystemClass.EXPANDING:
            return (Q @ self.base_operators[0]).tocsr()
        if s is SystemClass.TWO_POPULATION:
            return tuple((Q @ L).tocsr() for L in self.base_operators)
        QL = (Q @ self.base_operators[0]).tocsr()
        rho = self.noise
        n = self.n
        return LinearOperator((n, n), matvec=lambda f: convolve(rho, QL @ f), dtype=float)

    def uncoupled_operator(self):
        """The operator at ``delta = 0`` (a pair for two populations)."""
        return self.with_delta(0.0).frozen_operator(self.uniform())

    def uncoupled_matrix(self, k=0):
        """Dense matrix of the uncoupled operator (population ``k``)."""
        s = self.system
        if s is SystemClass.REFLECTING:
            return np.asarray(self.uncoupled_operator())
        L = self.base_operators[k].toarray()
        if s is SystemClass.NOISE:
            return convolution_matrix(self.noise, self.n).entries @ L
        return L

    def apply(self, f):
        """One application of the self-consistent operator."""
        v = self._check_shape(f)
        op = self.frozen_operator(v)
        if self.populations == 2:
            out = np.stack([op[0] @ v[0], op[1] @ v[1]])
        else:
            out = op @ v
        return _normalize(out)


def apply_self_consistent(model: SelfConsistentModel, f):
    """``L_delta(f) = L_{delta, f}(f)``; returns the same kind as ``f``."""
    out = model.apply(f)
    if isinstance(f, GridDensity):
        return GridDensity.normalized(out)
    return out


# ---------------------------------------------------------------- traces

@dataclass
class SolverTrace:
    """Per-iteration record: ``(k, step, residual, ratio)``."""

    iterates: list = field(default_factory=list)
    converged: bool = False
    final_residual: float = np.inf
    damped: bool = False
    inner_iterations: list = field(default_factory=list)
    second_eig: float = np.nan

    def record(self, step, residual):
        k = len(self.iterates)
        prev = self.iterates[-1][1] if self.iterates else np.nan
        ratio = step / prev if self.iterates and prev > 0 else np.nan
        self.iterates.append((k, float(step), float(residual), float(ratio)))

    @property
    def steps(self):
        return np.array([it[1] for it in self.iterates])

    @property
    def ratios(self):
        return np.array([it[3] for it in self.iterates])

    def rate(self, floor=1e-7):
        """Geometric-mean contraction ratio over steps whose predecessor exceeds ``floor``.

        Steps close to roundoff are excluded so the estimate reflects the
        genuine contraction. Returns ``nan`` if fewer than one ratio qualifies.
        """
        s = self.steps
        if s.size < 2:
            return np.nan
        ok = (s[:-1] > floor) & (s[1:] > 0)
        if not np.any(ok):
            ok = (s[:-1] > 0) & (s[1:] > 0)
            if not np.any(ok):
                return 0.0
        r = s[1:][ok] / s[:-1][ok]
        return float(np.exp(np.mean(np.log(r))))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(["iteration", "step", "residual", "ratio"])
            for k, st, res, ra in self.iterates:
                w.writerow([k, f"{st:.17g}", f"{res:.17g}", f"{ra:.17g}"])


# ---------------------------------------------------------------- solvers

def picard_fixed_point(model: SelfConsistentModel, f0=None, tol=1e-10, max_iter=10_000,
                       damping: Optional[float] = None, patience=20):
    """Iterate ``f <- L_delta(f)`` until the L1 step is at most ``tol``.

    Parameters
    ----------
    model : SelfConsistentModel
    f0 : array_like, optional
        Start density (uniform by default).
    tol : float
    max_iter : int
    damping : float, optional
        If given, a run that stops contracting switches to
        ``f <- (1 - damping) f + damping L_delta(f)`` instead of failing. This
        is a heuristic probe; success does not certify uniqueness.
    patience : int
        Consecutive ratios ``>= 1`` tolerated before declaring non-contraction.

    Returns
    -------
    f : ndarray
    trace : SolverTrace

    Raises
    ------
    RegimeError
        The diffeomorphism condition fails at some iterate.
    NonContraction
        Ratios stay ``>= 1`` for ``patience`` steps (and damping is off or
        also failed), or ``max_iter`` is exhausted.
    """
    f = _normalize(model.uniform() if f0 is None else model._check_shape(f0))
    trace = SolverTrace()
    alpha = 1.0
    bad = 0
    for _ in range(max_iter):
        g = model.apply(f)
        if alpha < 1.0:
            g = (1 - alpha) * f + alpha * g
        step = l1_distance(g, f)
        trace.record(step, step)
        f = g
        if step <= tol:
            trace.converged = True
            trace.final_residual = l1_distance(model.apply(f), f)
            return f, trace
        ratio = trace.iterates[-1][3]
        bad = bad + 1 if ratio >= 1.0 else 0
        if bad >= patience:
            if damping is not None and alpha == 1.0:
                log.info("Picard stopped contracting; switching to damping %.2f", damping)
                alpha = float(damping)
                trace.damped = True
                bad = 0
                continue
            raise NonContraction(
                f"Picard iteration stopped contracting (ratio {ratio:.3f} for {patience} steps)",
                residual=step, diagnostics={"delta": model.delta, "damped": trace.damped},
                trace=trace)
    raise NonContraction(f"Picard iteration hit max_iter={max_iter}", residual=step,
                         diagnostics={"delta": model.delta}, trace=trace)


def _frozen_fixed(model, mu, inner_tol, warm):
    op = model.frozen_operator(mu)
    if model.populations == 2:
        res = [linear_fixed_density(op[k], tol=inner_tol, start=warm[k]) for k in range(2)]
        return (np.stack([r.density.values for r in res]),
                sum(r.iterations for r in res), max(r.second_eig for r in res))
    r = linear_fixed_density(op, tol=inner_tol, start=warm)
    return r.density.values.copy(), r.iterations, r.second_eig


def thm_existence_iteration(model: SelfConsistentModel, mu0=None, tol=1e-9, inner_tol=None,
                            max_outer=500, patience=20):
    """Outer iteration ``mu_i`` = fixed density of the frozen operator ``L_{delta, mu_{i-1}}``.

    Parameters
    ----------
    model : SelfConsistentModel
    mu0 : array_like, optional
        Start density (uniform by default).
    tol : float
        Outer L1 step tolerance.
    inner_tol : float, optional
        Power-iteration tolerance; ``tol / 10`` by default.

    Returns
    -------
    mu : ndarray
    trace : SolverTrace
        ``trace.rate()`` is the observed outer contraction ratio, an
        empirical estimate of the Lipschitz constant of ``mu -> fixed(L_mu)``.
    """
    inner_tol = tol / 10 if inner_tol is None else inner_tol
    mu = _normalize(model.uniform() if mu0 is None else model._check_shape(mu0))
    trace = SolverTrace()
    bad = 0
    for _ in range(max_outer):
        new, inner_it, second = _frozen_fixed(model, mu, inner_tol, mu)
        step = l1_distance(new, mu)
        mu = new
        trace.inner_iterations.append(inner_it)
        trace.second_eig = second
        trace.record(step, step)
        if model.delta == 0.0 or step <= tol:
            # at zero coupling the frozen operator does not depend on mu
            trace.converged = True
            trace.final_residual = l1_distance(model.apply(mu), mu)
            return mu, trace
        ratio = trace.iterates[-1][3]
        bad = bad + 1 if ratio >= 1.0 else 0
        if bad >= patience:
            raise NonContraction("outer iteration stopped contracting", residual=step,
                                 diagnostics={"delta": model.delta}, trace=trace)
    raise NonContraction(f"outer iteration hit max_outer={max_outer}", residual=step,
                         diagnostics={"delta": model.delta}, trace=trace)


# ---------------------------------------------------------------- atomic mode

def atomic_self_consistent_step(model: SelfConsistentModel, mu: AtomicMeasure) -> AtomicMeasure:
    """One step of the atomic finite-rank scheme for deterministic circle maps.

    The measure is projected onto hat-function atoms at the grid nodes, each
    atom is pushed through ``Phi_{delta, mu} o T`` (with the mean field taken
    exactly over the atoms) and the result is projected again.
    """
    if model.system is not SystemClass.EXPANDING:
        raise ConfigurationError("the atomic scheme is implemented for the expanding class")
    p = hat_atom_project(mu, model.n)
    T, h = model.maps[0], model.couplings[0]
    y = T(p.positions)
    S = h.eval(y[:, None], p.positions[None, :]) @ p.weights
    bound = model.delta * np.max(np.abs(h.dx_eval(y[:, None], p.positions[None, :]) @ p.weights))
    if bound >= 1.0:
        raise RegimeError("delta*max|S'| >= 1 at the atomic measure", float(bound))
    moved = AtomicMeasure(y + model.delta * S, p.weights, signed=p.signed)
    return hat_atom_project(moved, model.n)
