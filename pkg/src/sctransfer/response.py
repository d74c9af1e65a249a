"""Linear response of self-consistent fixed densities at zero coupling.

The response is ``R = (I - L0)^{-1} D`` where ``L0`` is the uncoupled
operator and ``D`` the derivative in ``delta`` of the coupled operator at
its fixed density. ``(I - L0)`` is inverted on zero-mean vectors by the rank
one deflation ``A = I - L0 + f0 1^T / n``, which has ``1^T A = 1^T`` and is
nonsingular whenever ``L0`` has a spectral gap.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg

from .densities import SignedGridFunction, as_values, cyclic_derivative, like, midpoints
from .errors import ConfigurationError, DomainError, NonContraction, RegimeError, SpectralGapError
from .maps import CircleMap, CouplingKernel, mean_field_displacement
from .self_consistent import SelfConsistentModel, SystemClass, thm_existence_iteration
from .transfer_ops import (NoiseKernel, TransferMatrix, convolve, linear_fixed_density,
                           reflecting_kernel_matrix)

__all__ = [
    "Resolvent",
    "resolvent_apply",
    "neumann_series",
    "derivative_term_expanding",
    "derivative_term_noise",
    "derivative_term_strange",
    "ResponseResult",
    "linear_response",
    "FDResult",
    "finite_difference_response",
]


def _dense(L0):
    if isinstance(L0, TransferMatrix):
        return L0.toarray()
    if hasattr(L0, "toarray"):
        return L0.toarray()
    return np.asarray(L0, dtype=float)


def _center(v):
    v = np.asarray(v, dtype=float)
    return v - v.mean()


class Resolvent:
    """Factorized ``(I - L0)^{-1}`` on the zero-mean subspace.

    Parameters
    ----------
    L0 : matrix or TransferMatrix
        Markov matrix (column convention).
    f0 : array_like, optional
        Its fixed density; computed by power iteration when omitted.

    Attributes
    ----------
    rcond : float
        LAPACK reciprocal condition estimate of the deflated matrix.
    """

    def __init__(self, L0, f0=None):
        L = _dense(L0)
        n = L.shape[0]
        if f0 is None:
            f0 = linear_fixed_density(L).density.values
        f0 = np.asarray(as_values(f0), dtype=float)
        self.L0 = L
        self.f0 = f0
        self.n = n
        A = np.eye(n) - L + np.outer(f0, np.ones(n)) / n
        anorm = np.abs(A).sum(axis=0).max()
        with warnings.catch_warnings():
            # an exactly singular factor is reported below as a spectral-gap error
            warnings.simplefilter("ignore", linalg.LinAlgWarning)
            self._lu = linalg.lu_factor(A, check_finite=False)
        rcond, info = linalg.lapack.dgecon(self._lu[0], anorm, norm="1")
        self.rcond = float(rcond)
        if not np.isfinite(self.rcond) or self.rcond < 1e-14:
            raise SpectralGapError(f"deflated resolvent is singular (rcond={self.rcond:.2e})")

    @property
    def condition(self):
        return 1.0 / self.rcond

    def _check(self, v):
        v = np.asarray(as_values(v), dtype=float)
        if abs(v.mean()) > 1e-10 * max(1.0, np.abs(v).mean()):
            raise DomainError("the resolvent acts on zero-mean functions only")
        return v

    def solve(self, v):
        """``u`` with ``(I - L0) u = v`` and ``mean(u) = 0``; columns of a 2-D ``v`` are solved together."""
        v = np.asarray(v, dtype=float)
        if v.ndim == 1:
            v = self._check(v)
        u = linalg.lu_solve(self._lu, v, check_finite=False)
        return u - u.mean(axis=0)

    def solve_adjoint(self, c):
        """``w`` with ``A^T w = c``; then ``<c, u> = <w, v>`` for ``u = solve(v)``."""
        return linalg.lu_solve(self._lu, np.asarray(c, dtype=float), trans=1, check_finite=False)

    def residual(self, u, v):
        """``||(I - L0) u - v||_1``."""
        return float(np.abs(u - self.L0 @ u - v).mean())


def resolvent_apply(L0, v, f0=None):
    """Solve ``(I - L0) u = v`` on zero-mean functions; returns the same kind as ``v``."""
    R = Resolvent(L0, f0)
    return like(v, R.solve(v))


def neumann_series(L0, v, tol=1e-12, max_terms=10_000):
    """Truncated ``sum_k L0^k v`` until the term drops below ``tol`` in L1.

    Returns
    -------
    u : ndarray
    terms : int
    tail_bound : float
        ``r^K / (1 - r)`` times the last term, with ``r`` the last observed
        term ratio (``inf`` when ``r >= 1``).
    """
    L = L0.entries if isinstance(L0, TransferMatrix) else L0
    term = np.array(as_values(v), dtype=float)
    u = term.copy()
    prev = np.abs(term).mean()
    r = 0.0
    k = 0
    for k in range(1, max_terms + 1):
        term = L @ term
        size = np.abs(term).mean()
        r = size / prev if prev > 0 else 0.0
        u += term
        prev = size
        if size < tol:
            break
    tail = prev * r / (1 - r) if r < 1 else np.inf
    return u, k, float(tail)


# ---------------------------------------------------------------- derivative terms

def _ddx(v):
    # central difference: antisymmetric, exact on the constant, zero mean
    return cyclic_derivative(v, "central")


def derivative_term_expanding(h: CouplingKernel, h0, T0: Optional[CircleMap] = None):
    """``-(h0 S)'`` with ``S(x) = int h(x, y) h0(y) dy``.

    ``h0`` must be invariant for the uncoupled map, so the transfer operator
    in front of ``h0`` drops out; ``T0`` is accepted for symmetry with the
    other classes.
    """
    f0 = np.asarray(as_values(h0), dtype=float)
    S, _ = mean_field_displacement(h, f0)
    return _center(-_ddx(f0 * S))


def derivative_term_noise(h: CouplingKernel, h0, L_T0, rho: NoiseKernel):
    """``-rho * (L_T0(h0) S)'`` with ``S`` generated by ``h0``.

    ``L_T0`` is the deterministic transfer operator (matrix or a map, in which
    case its Ulam matrix is used).
    """
    f0 = np.asarray(as_values(h0), dtype=float)
    if isinstance(L_T0, CircleMap):
        from .transfer_ops import ulam_matrix
        L_T0 = ulam_matrix(L_T0, f0.size)
    Lf = (L_T0 @ f0)
    S, _ = mean_field_displacement(h, f0)
    return _center(convolve(rho, -_ddx(Lf * S)))


def derivative_term_strange(T, f0, rho: NoiseKernel):
    """Derivative of the rescaled noisy tent operator at zero coupling.

    ``int D(x, y) a T(y) f0(y) dy`` with ``a = int t f0(t) dt`` and ``D`` the
    reflected kernel built from ``rho'``.

    Parameters
    ----------
    T : CircleMap, callable or array
        The uncoupled interval map (or its midpoint values).
    f0 : array_like
        Cell values of the uncoupled invariant density (any signed vector is
        accepted; the term is linear in ``a``).
    rho : NoiseKernel
        Line profile with a derivative.
    """
    f = np.asarray(as_values(f0), dtype=float)
    n = f.size
    x = midpoints(n)
    t = np.asarray(T if np.ndim(T) > 0 else T(x), dtype=float)
    a = float(np.mean(x * f))
    D = reflecting_kernel_matrix(t, rho, n, derivative=True).entries
    term = D @ (a * t * f) / n
    return term - term.mean()


# ---------------------------------------------------------------- response

@dataclass
class ResponseResult:
    """Derivative term, response and diagnostics.

    For two populations ``derivative_term`` and ``response`` have shape
    ``(2, n)``.
    """

    derivative_term: np.ndarray
    response: np.ndarray
    resolvent_residual: float
    f0: np.ndarray
    condition: float
    observable_value: Optional[float] = None

    def observable(self, c):
        """``int c dR`` by midpoint quadrature."""
        return float(np.mean(np.asarray(c) * self.response))


def _uncoupled_fixed(model, k=0):
    L = model.uncoupled_matrix(k)
    return L, linear_fixed_density(L).density.values


def derivative_term(model: SelfConsistentModel, f0=None):
    """Class-appropriate derivative term at the uncoupled fixed density."""
    s = model.system
    if s is SystemClass.TWO_POPULATION:
        f0 = np.stack([_uncoupled_fixed(model, k)[1] for k in range(2)]) if f0 is None else f0
        S, _ = model.displacement(f0)
        return np.stack([_center(-_ddx(f0[k] * S)) for k in range(2)])
    if f0 is None:
        f0 = _uncoupled_fixed(model)[1]
    if s is SystemClass.EXPANDING:
        return derivative_term_expanding(model.couplings[0], f0)
    if s is SystemClass.NOISE:
        return derivative_term_noise(model.couplings[0], f0, model.base_operators[0], model.noise)
    return derivative_term_strange(model.maps[0](midpoints(model.n)), f0, model.noise)


def linear_response(model: SelfConsistentModel, c=None) -> ResponseResult:
    """``R = (I - L0)^{-1} D`` for the model at zero coupling.

    ``model.delta`` is ignored. When ``c`` is given, ``int c dR`` is stored in
    ``observable_value``.
    """
    if model.populations == 2:
        Ls, f0s = zip(*[_uncoupled_fixed(model, k) for k in range(2)])
        f0 = np.stack(f0s)
        D = derivative_term(model, f0)
        res = [Resolvent(L, f) for L, f in zip(Ls, f0s)]
        R = np.stack([r.solve(d) for r, d in zip(res, D)])
        resid = sum(r.residual(u, d) for r, u, d in zip(res, R, D))
        cond = max(r.condition for r in res)
    else:
        L, f0 = _uncoupled_fixed(model)
        D = derivative_term(model, f0)
        res = Resolvent(L, f0)
        R = res.solve(D)
        resid = res.residual(R, D)
        cond = res.condition
    out = ResponseResult(D, R, resid, f0, cond)
    if c is not None:
        out.observable_value = out.observable(c)
    return out


@dataclass
class FDResult:
    """Difference quotients ``(f_delta - f_0) / delta`` at each ``delta``."""

    deltas: np.ndarray
    quotients: list
    f0: np.ndarray
    flags: list = field(default_factory=list)
    limit: Optional[np.ndarray] = None

    def gaps(self, R):
        """L1 gaps between each quotient and ``R`` (``nan`` where the solve failed)."""
        return np.array([np.nan if q is None else float(np.abs(q - R).mean(axis=-1).sum())
                         for q in self.quotients])

    def to_csv(self, path, R=None):
        gaps = self.gaps(R) if R is not None else [np.nan] * len(self.deltas)
        lim_gap = (float(np.abs(self.limit - R).mean(axis=-1).sum())
                   if R is not None and self.limit is not None else np.nan)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(["delta", "l1_gap", "quotient_l1", "extrapolated_l1_gap", "flag"])
            for d, q, g, fl in zip(self.deltas, self.quotients, gaps, self.flags):
                ql = np.nan if q is None else float(np.abs(q).mean(axis=-1).sum())
                w.writerow([f"{d:.17g}", f"{g:.17g}", f"{ql:.17g}", f"{lim_gap:.17g}", fl])


def finite_difference_response(model: SelfConsistentModel, deltas: Sequence[float], tol=1e-12):
    """Difference quotients of the self-consistent fixed density.

    Each ``f_delta`` comes from :func:`thm_existence_iteration`. The limit is
    estimated by linear Richardson extrapolation in ``delta`` from the two
    smallest successful ``delta`` values. Failures are flagged per ``delta``
    rather than raised.
    """
    deltas = np.asarray(sorted(deltas, reverse=True), dtype=float)
    if deltas.size == 0 or np.any(deltas <= 0):
        raise DomainError("finite differences need strictly positive deltas")
    f0, _ = thm_existence_iteration(model.with_delta(0.0), tol=tol)
    quotients, flags = [], []
    for d in deltas:
        try:
            fd, _ = thm_existence_iteration(model.with_delta(d), mu0=f0, tol=tol)
        except (NonContraction, RegimeError) as exc:
            quotients.append(None)
            flags.append(type(exc).__name__)
            continue
        quotients.append((fd - f0) / d)
        flags.append("ok")
    good = [(d, q) for d, q in zip(deltas, quotients) if q is not None]
    limit = None
    if len(good) >= 2:
        (d1, q1), (d2, q2) = good[-2], good[-1]
        limit = (d1 * q2 - d2 * q1) / (d1 - d2)
    elif good:
        limit = good[-1][1]
    return FDResult(deltas, quotients, f0, flags, limit)
