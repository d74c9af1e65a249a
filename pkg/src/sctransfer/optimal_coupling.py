"""Coupling directions that maximize the first-order change of an observable.

The response ``R(h)`` is linear in the coupling ``h``, so for an observable
``c`` the objective ``J(h) = int c dR(h)`` is a linear functional. In the
coordinates of a finite trigonometric basis ``J(h) = <g, coeffs(h)>`` and the
constrained maximization reduces to linear optimization over a convex set.

The feasible sets live in a weighted coefficient space with inner product
``<u, v>_w = sum w_m u_m v_m`` and Sobolev-type weights
``w_m = (1 + k^2 + l^2)^s``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .densities import midpoints
from .errors import ConfigurationError, NumericalError
from .maps import CouplingKernel, mean_field_displacement
from .response import Resolvent, _ddx, _uncoupled_fixed
from .self_consistent import SelfConsistentModel, SystemClass
from .transfer_ops import convolve

__all__ = [
    "PerturbationBasis",
    "ConvexConstraint",
    "Gradient",
    "response_gradient",
    "OptimResult",
    "optimize_ball",
    "optimize_box",
    "optimize_convex",
    "projected_ascent",
    "project",
    "kkt_ball_box",
    "sample_feasible",
    "certificate",
]

_FACTORS = ("1", "cos", "sin")


@dataclass(frozen=True)
class PerturbationBasis:
    """Tensor trigonometric modes ``e(x, y) = phi(x) chi(y)`` up to degree ``d``.

    Each factor is ``1``, ``sqrt(2) cos(2 pi k .)`` or ``sqrt(2) sin(2 pi k .)``
    (orthonormal in ``L2``), so coefficient vectors are coordinates in an
    orthonormal system and the weighted metric only rescales them.
    """

    degree: int = 8
    s: float = 7.0

    @property
    def labels(self):
        """Per-mode ``(x_kind, k, y_kind, l)``."""
        one = [("1", 0)] + [(kind, k) for k in range(1, self.degree + 1) for kind in ("cos", "sin")]
        return [(a, k, b, l) for a, k in one for b, l in one]

    @property
    def size(self):
        return (2 * self.degree + 1) ** 2

    @property
    def weights(self):
        return np.array([(1.0 + k * k + l * l) ** self.s for _, k, _, l in self.labels])

    @staticmethod
    def _scale(kind):
        return 1.0 if kind == "1" else np.sqrt(2.0)

    def kernel(self, coeffs, tol=0.0) -> CouplingKernel:
        """Coupling function with the given coefficients."""
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.size != self.size:
            raise ConfigurationError("coefficient vector does not match the basis")
        terms = [(c * self._scale(a) * self._scale(b), (a, k), (b, l))
                 for c, (a, k, b, l) in zip(coeffs, self.labels) if abs(c) > tol]
        if not terms:
            terms = [(0.0, ("1", 0), ("1", 0))]
        return CouplingKernel.trig(terms, name="basis-combination")

    def x_factors(self, x):
        """Matrices ``phi_m(x)`` and ``chi_m(x)`` with modes along the columns."""
        def f(kind, k):
            if kind == "1":
                return np.ones_like(x)
            g = np.cos if kind == "cos" else np.sin
            return np.sqrt(2.0) * g(2 * np.pi * k * x)

        phi = np.column_stack([f(a, k) for a, k, _, _ in self.labels])
        chi = np.column_stack([f(b, l) for _, _, b, l in self.labels])
        return phi, chi

    def to_csv(self, path, coeffs):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(["k", "l", "x_kind", "y_kind", "coefficient"])
            for c, (a, k, b, l) in zip(coeffs, self.labels):
                w.writerow([k, l, a, b, f"{c:.17g}"])

    def surface_csv(self, path, coeffs, n=64):
        """Sampled ``h(x_i, y_j)`` on midpoints, long format."""
        h = self.kernel(coeffs)
        x = midpoints(n)
        H = h.eval(x[:, None], x[None, :])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(["x", "y", "h"])
            for i in range(n):
                for j in range(n):
                    w.writerow([f"{x[i]:.17g}", f"{x[j]:.17g}", f"{H[i, j]:.17g}"])


@dataclass(frozen=True)
class ConvexConstraint:
    """``ball`` (weighted radius), ``box`` (per-coefficient bounds) or ``ball-box``."""

    kind: str
    radius: float = 1.0
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("ball", "box", "ball-box"):
            raise ConfigurationError(f"unknown constraint kind {self.kind!r}")
        if self.kind != "box" and not self.radius > 0:
            raise ConfigurationError("ball radius must be positive")
        if self.kind != "ball":
            if self.lower is None or self.upper is None:
                raise ConfigurationError("box constraints need lower and upper bounds")
            lo = np.asarray(self.lower, dtype=float)
            hi = np.asarray(self.upper, dtype=float)
            if np.any(lo > 0) or np.any(hi < 0):
                raise ConfigurationError("the feasible set must contain the zero vector")
            object.__setattr__(self, "lower", lo)
            object.__setattr__(self, "upper", hi)

    def bounds(self, m):
        lo = np.broadcast_to(self.lower, (m,)).astype(float)
        hi = np.broadcast_to(self.upper, (m,)).astype(float)
        return lo, hi


@dataclass
class Gradient:
    """``J(h) = <g, coeffs(h)>`` together with the metric weights."""

    g: np.ndarray
    weights: np.ndarray
    basis: PerturbationBasis
    method: str
    condition: float = np.nan

    @property
    def sharp(self):
        """Metric gradient ``g / w``."""
        return self.g / self.weights


def _mode_terms(model, basis, f0):
    """Derivative terms of every mode, as columns of an ``n x modes`` matrix."""
    n = model.n
    x = midpoints(n)
    phi, chi = basis.x_factors(x)
    moments = chi.T @ f0 / n  # int chi_m f0
    S = phi * moments[None, :]  # S_m(x) = phi_m(x) int chi_m f0
    if model.system is SystemClass.EXPANDING:
        D = -_ddx((f0[:, None] * S).T).T
    elif model.system is SystemClass.NOISE:
        Lf = model.base_operators[0] @ f0
        D = -convolve(model.noise, _ddx((Lf[:, None] * S).T)).T
    else:
        raise ConfigurationError("coupling optimization needs an expanding or noise model")
    return D - D.mean(axis=0, keepdims=True)


def response_gradient(c, model: SelfConsistentModel, basis: PerturbationBasis,
                      method: str = "per-mode") -> Gradient:
    """Coordinates of ``h -> int c dR(h)`` in the basis.

    ``per-mode`` solves one resolvent system per mode (sharing one
    factorization); ``adjoint`` solves a single transposed system.
    """
    c = np.asarray(c, dtype=float)
    L, f0 = _uncoupled_fixed(model)
    res = Resolvent(L, f0)
    D = _mode_terms(model, basis, f0)
    n = model.n
    if method == "per-mode":
        R = res.solve(D)
        g = c @ R / n
    elif method == "adjoint":
        w = res.solve_adjoint(c - c.mean())
        g = w @ D / n
    else:
        raise ConfigurationError(f"unknown gradient method {method!r}")
    return Gradient(g, basis.weights, basis, method, res.condition)


# ---------------------------------------------------------------- optimization

@dataclass
class OptimResult:
    coeffs: np.ndarray
    J: float
    flag: str = "ok"
    iterations: int = 0
    certificate: Optional[dict] = None


def _wnorm(u, w):
    return float(np.sqrt(np.sum(w * u * u)))


def optimize_ball(g, r, weights=None) -> OptimResult:
    """Maximizer of ``<g, h>`` over ``||h||_w <= r``: ``r g# / ||g#||_w``."""
    g = np.asarray(g, dtype=float)
    w = np.ones_like(g) if weights is None else np.asarray(weights, dtype=float)
    if r <= 0:
        raise ConfigurationError("ball radius must be positive")
    gs = g / w
    nrm = _wnorm(gs, w)
    if nrm == 0.0:
        return OptimResult(np.zeros_like(g), 0.0, "all-feasible-optimal")
    h = r * gs / nrm
    return OptimResult(h, float(g @ h))


def optimize_box(g, lower, upper) -> OptimResult:
    """Coordinatewise bound matching the sign of ``g`` (zero where ``g = 0``)."""
    g = np.asarray(g, dtype=float)
    lo = np.broadcast_to(lower, g.shape).astype(float)
    hi = np.broadcast_to(upper, g.shape).astype(float)
    h = np.where(g > 0, hi, np.where(g < 0, lo, 0.0))
    flag = "all-feasible-optimal" if not np.any(g) else "ok"
    return OptimResult(h, float(g @ h), flag)


def project(v, P: ConvexConstraint, weights, tol=1e-14, max_iter=10_000):
    """Projection onto ``P`` in the weighted metric.

    Box and ball projections are exact; their intersection uses Dykstra's
    alternating scheme (the diagonal metric keeps each step closed form).
    """
    w = np.asarray(weights, dtype=float)
    m = v.size

    def ball(u):
        nrm = _wnorm(u, w)
        return u if nrm <= P.radius else u * (P.radius / nrm)

    if P.kind == "ball":
        return ball(v)
    lo, hi = P.bounds(m)
    if P.kind == "box":
        return np.clip(v, lo, hi)
    x = v.copy()
    p = np.zeros(m)
    q = np.zeros(m)
    for _ in range(max_iter):
        y = np.clip(x + p, lo, hi)
        p = x + p - y
        x_new = ball(y + q)
        q = y + q - x_new
        if np.max(np.abs(x_new - x)) <= tol * max(1.0, np.max(np.abs(x_new))):
            return x_new
        x = x_new
    raise NumericalError("Dykstra projection did not converge",
                         residual=float(np.max(np.abs(x_new - x))))


def projected_ascent(g, P: ConvexConstraint, weights, start=None, tol=1e-13,
                     max_iter=10_000) -> OptimResult:
    """Projected gradient ascent on ``<g, h>`` over ``P`` with metric gradient ``g / w``.

    The step is the feasible-set scale over ``||g#||_w``, so iterates move by
    a full set diameter per step and the iteration ends once the projection
    stops moving.
    """
    g = np.asarray(g, dtype=float)
    w = np.asarray(weights, dtype=float)
    gs = g / w
    nrm = _wnorm(gs, w)
    h = np.zeros_like(g) if start is None else project(np.asarray(start, dtype=float), P, w)
    if nrm == 0:
        return OptimResult(h, 0.0, "all-feasible-optimal")
    if P.kind == "box":
        lo, hi = P.bounds(g.size)
        scale = _wnorm(np.maximum(np.abs(lo), np.abs(hi)), w)
    else:
        scale = P.radius
    t = 4.0 * scale / nrm
    for it in range(1, max_iter + 1):
        h_new = project(h + t * gs, P, w)
        step = _wnorm(h_new - h, w)
        h = h_new
        if step <= tol * max(1.0, scale):
            return OptimResult(h, float(g @ h), "ok", it)
    raise NumericalError("projected ascent did not converge", residual=step,
                         diagnostics={"last": h})


def kkt_ball_box(g, P: ConvexConstraint, weights, tol=1e-15) -> OptimResult:
    """Ball-box maximizer from the optimality conditions ``h = clip(lam g#, lo, hi)``.

    ``lam`` is found by bisection so that ``||h||_w = r`` (or ``lam = inf``
    when the box maximizer already lies in the ball).
    """
    g = np.asarray(g, dtype=float)
    w = np.asarray(weights, dtype=float)
    lo, hi = P.bounds(g.size)
    gs = g / w
    box = optimize_box(g, lo, hi).coeffs
    if _wnorm(box, w) <= P.radius:
        return OptimResult(box, float(g @ box))
    h_of = lambda lam: np.clip(lam * gs, lo, hi)
    a, b = 0.0, 1.0
    while _wnorm(h_of(b), w) < P.radius:
        b *= 2
    for _ in range(200):
        mid = 0.5 * (a + b)
        if _wnorm(h_of(mid), w) < P.radius:
            a = mid
        else:
            b = mid
        if b - a <= tol * b:
            break
    h = h_of(0.5 * (a + b))
    return OptimResult(h, float(g @ h))


def sample_feasible(P: ConvexConstraint, weights, m, count, rng):
    """Random points of ``P``: box samples are scaled into the ball when needed."""
    w = np.asarray(weights, dtype=float)
    if P.kind == "ball":
        z = rng.standard_normal((count, m)) / np.sqrt(w)
        z /= np.sqrt(np.sum(w * z * z, axis=1, keepdims=True))
        return z * (P.radius * rng.uniform(0, 1, size=(count, 1)) ** (1.0 / 4))
    lo, hi = P.bounds(m)
    z = lo + (hi - lo) * rng.uniform(size=(count, m))
    if P.kind == "ball-box":
        nrm = np.sqrt(np.sum(w * z * z, axis=1, keepdims=True))
        z *= np.minimum(1.0, P.radius / nrm)
    return z


def certificate(g, h_opt, P: ConvexConstraint, weights, samples=10_000, seed=0):
    """Compare ``J(h_opt)`` against ``samples`` random feasible points."""
    g = np.asarray(g, dtype=float)
    rng = np.random.default_rng(seed)
    Z = sample_feasible(P, weights, g.size, samples, rng)
    J = Z @ g
    best = float(J.max())
    J_opt = float(g @ h_opt)
    return {"samples": int(samples), "seed": int(seed), "J_opt": J_opt,
            "J_sample_max": best, "dominates": bool(J_opt >= best)}


def optimize_convex(g, P: ConvexConstraint, weights=None, max_iter=10_000, tol=1e-13,
                    certify=True, samples=10_000, seed=0) -> OptimResult:
    """Maximize ``<g, h>`` over ``P``; attaches a random-sampling certificate."""
    g = np.asarray(g, dtype=float)
    w = np.ones_like(g) if weights is None else np.asarray(weights, dtype=float)
    if P.kind == "ball":
        out = optimize_ball(g, P.radius, w)
    elif P.kind == "box":
        lo, hi = P.bounds(g.size)
        out = optimize_box(g, lo, hi)
    else:
        out = projected_ascent(g, P, w, tol=tol, max_iter=max_iter)
    if certify:
        out.certificate = certificate(g, out.coeffs, P, w, samples, seed)
    return out
