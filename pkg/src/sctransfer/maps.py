"""Circle and interval maps, coupling kernels and the mean-field diffeomorphism.

A map carries its monotone branches (domain plus inverse and inverse
derivative) so that transfer operators can be assembled from preimages.
Coupling kernels are preferably finite trigonometric sums

    h(x, y) = sum_t c_t * phi_t(x) * chi_t(y),   phi, chi in {1, cos 2 pi k ., sin 2 pi k .}

which makes the mean-field displacement, its x-derivative and the particle
coupling sums cheap. Arbitrary callables are accepted as well.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .densities import as_values, midpoints
from .errors import ConfigurationError, NumericalError, RegimeError

__all__ = [
    "Branch",
    "CircleMap",
    "doubling",
    "linear_expanding",
    "perturbed_doubling",
    "tent",
    "rotation",
    "identity",
    "get_map",
    "CouplingKernel",
    "get_kernel",
    "MeanFieldDiffeo",
    "mean_field_displacement",
    "apply_diffeo",
    "invert_diffeo",
]

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class Branch:
    """Monotone branch: ``eval`` maps ``domain`` bijectively onto the target.

    ``inverse`` sends a target point (in ``[0, 1]``) back into ``domain`` and
    ``inverse_deriv`` is its derivative (negative for decreasing branches).
    """

    domain: tuple
    inverse: Callable
    inverse_deriv: Callable


@dataclass(frozen=True)
class CircleMap:
    """A map of the circle ``[0, 1)`` (or of the interval ``[0, 1]``).

    Parameters
    ----------
    eval, deriv : callable
        Vectorized map and derivative.
    branches : list of Branch
        Monotone pieces; needed for the preimage and exact Ulam paths.
    smoothness_order : int
    min_slope : float
        Lower bound on ``|deriv|``; ``> 1`` for expanding maps.
    linear_pieces : list of (a, b, slope, intercept), optional
        Present when the map is affine on each ``[a, b)`` (before reduction
        mod 1). Used only as a marker that preimages are exact.
    interval : bool
        True for maps of ``[0, 1]`` with no wraparound (the tent).
    """

    eval: Callable
    deriv: Callable
    branches: Sequence[Branch] = ()
    smoothness_order: int = 1
    min_slope: float = 0.0
    name: str = "map"
    linear_pieces: Optional[Sequence[tuple]] = None
    interval: bool = False

    def __call__(self, x):
        return self.eval(np.asarray(x, dtype=float))

    @property
    def expanding(self):
        return self.min_slope > 1.0

    def check_branches(self, samples=257):
        """Largest ``|inverse(eval(x)) - x|`` over sample points of every branch."""
        worst = 0.0
        for br in self.branches:
            lo, hi = br.domain
            x = lo + (hi - lo) * (np.arange(samples) + 0.5) / samples
            y = self.eval(x)
            worst = max(worst, float(np.max(np.abs(br.inverse(y) - x))))
        return worst


def linear_expanding(k: int = 2) -> CircleMap:
    """``x -> k x mod 1`` for an integer ``k >= 2``."""
    if int(k) != k or k < 2:
        raise ConfigurationError("linear expanding map needs an integer factor >= 2")
    k = int(k)
    branches = [
        Branch((b / k, (b + 1) / k),
               (lambda y, b=b: (y + b) / k),
               (lambda y: np.full(np.shape(y), 1.0 / k)))
        for b in range(k)
    ]
    return CircleMap(
        eval=lambda x: np.mod(k * x, 1.0),
        deriv=lambda x: np.full(np.shape(x), float(k)),
        branches=branches,
        smoothness_order=np.inf,
        min_slope=float(k),
        name="doubling" if k == 2 else f"times{k}",
        linear_pieces=[(b / k, (b + 1) / k, float(k), -float(b)) for b in range(k)],
    )


def doubling() -> CircleMap:
    """``x -> 2x mod 1``."""
    return linear_expanding(2)


def _invert_increasing(F, dF, y, lo, hi, tol=1e-15, max_iter=100):
    """Solve ``F(x) = y`` on ``[lo, hi]`` for increasing ``F``; safeguarded Newton."""
    y = np.asarray(y, dtype=float)
    a = np.full(y.shape, float(lo))
    b = np.full(y.shape, float(hi))
    x = a + (b - a) * 0.5
    for _ in range(max_iter):
        r = F(x) - y
        a = np.where(r < 0, x, a)
        b = np.where(r > 0, x, b)
        xn = x - r / dF(x)
        bad = (xn <= a) | (xn >= b) | ~np.isfinite(xn)
        xn = np.where(bad, 0.5 * (a + b), xn)
        if np.max(np.abs(xn - x), initial=0.0) <= tol:
            x = xn
            break
        x = xn
    res = np.max(np.abs(F(x) - y), initial=0.0)
    if res > 1e-12:
        raise NumericalError("branch inversion did not converge", residual=float(res))
    return x


def perturbed_doubling(eps: float = 0.1) -> CircleMap:
    """``x -> 2x + eps sin(2 pi x) mod 1``; expanding for ``|eps| < 1/(2 pi)``."""
    if abs(eps) >= 1.0 / TWO_PI:
        raise ConfigurationError("perturbed doubling is expanding only for |eps| < 1/(2 pi)")
    F = lambda x: 2 * x + eps * np.sin(TWO_PI * x)
    dF = lambda x: 2 + TWO_PI * eps * np.cos(TWO_PI * x)

    def make(b):
        lo, hi = 0.5 * b, 0.5 * (b + 1)

        def inv(y):
            return _invert_increasing(F, dF, np.asarray(y, dtype=float) + b, lo, hi)

        def inv_d(y):
            return 1.0 / dF(inv(y))

        return Branch((lo, hi), inv, inv_d)

    return CircleMap(
        eval=lambda x: np.mod(F(x), 1.0),
        deriv=dF,
        branches=[make(0), make(1)],
        smoothness_order=np.inf,
        min_slope=2 - TWO_PI * abs(eps),
        name="perturbed-doubling",
    )


def tent() -> CircleMap:
    """Full tent ``x -> min(2x, 2 - 2x)`` on ``[0, 1]``."""
    return CircleMap(
        eval=lambda x: np.minimum(2 * x, 2 - 2 * x),
        deriv=lambda x: np.where(np.asarray(x) < 0.5, 2.0, -2.0),
        branches=[
            Branch((0.0, 0.5), lambda y: 0.5 * np.asarray(y),
                   lambda y: np.full(np.shape(y), 0.5)),
            Branch((0.5, 1.0), lambda y: 1.0 - 0.5 * np.asarray(y),
                   lambda y: np.full(np.shape(y), -0.5)),
        ],
        smoothness_order=0,
        min_slope=2.0,
        name="tent",
        linear_pieces=[(0.0, 0.5, 2.0, 0.0), (0.5, 1.0, -2.0, 2.0)],
        interval=True,
    )


def rotation(alpha: float) -> CircleMap:
    """``x -> x + alpha mod 1``."""
    alpha = float(np.mod(alpha, 1.0))
    # a single branch on the lifted domain, so the inverse is continuous in y
    return CircleMap(
        eval=lambda x: np.mod(np.asarray(x) + alpha, 1.0),
        deriv=lambda x: np.ones(np.shape(x)),
        branches=[Branch((-alpha, 1.0 - alpha), lambda y: np.asarray(y) - alpha,
                         lambda y: np.ones(np.shape(y)))],
        smoothness_order=np.inf,
        min_slope=1.0,
        name="rotation",
        linear_pieces=[(0.0, 1.0, 1.0, alpha)],
    )


def identity() -> CircleMap:
    m = rotation(0.0)
    return CircleMap(m.eval, m.deriv, m.branches, m.smoothness_order, 1.0,
                     "identity", m.linear_pieces)


_MAPS = {
    "doubling": lambda: doubling(),
    "linear-expanding": lambda k=2: linear_expanding(k),
    "perturbed-doubling": lambda eps=0.1: perturbed_doubling(eps),
    "tent": lambda: tent(),
    "rotation": lambda alpha=0.0: rotation(alpha),
    "identity": lambda: identity(),
}


def get_map(name: str, **params) -> CircleMap:
    """Builtin map by name (``doubling``, ``perturbed-doubling``, ``tent``, ...)."""
    try:
        factory = _MAPS[name]
    except KeyError:
        raise ConfigurationError(f"unknown map {name!r}; builtins: {sorted(_MAPS)}") from None
    try:
        return factory(**params)
    except TypeError as exc:
        raise ConfigurationError(f"bad parameters for map {name!r}: {exc}") from None


# ---------------------------------------------------------------- kernels

def _trig(kind, k, x):
    if kind == "1":
        return np.ones(np.shape(x))
    if kind == "cos":
        return np.cos(TWO_PI * k * x)
    if kind == "sin":
        return np.sin(TWO_PI * k * x)
    raise ConfigurationError(f"unknown trig factor {kind!r}")


def _dtrig(kind, k, x):
    if kind == "1":
        return np.zeros(np.shape(x))
    if kind == "cos":
        return -TWO_PI * k * np.sin(TWO_PI * k * x)
    return TWO_PI * k * np.cos(TWO_PI * k * x)


def _norm_factor(f):
    kind, k = f
    if kind != "1" and int(k) < 1:
        raise ConfigurationError("trig factors need frequency >= 1")
    return ("1", 0) if kind == "1" else (kind, int(k))


@dataclass(frozen=True)
class CouplingKernel:
    """Coupling function ``h(x, y)`` with its x-derivative.

    Use the constructors (:meth:`trig`, :meth:`sine_difference`,
    :meth:`product`, :meth:`from_callable`) rather than the raw fields.
    ``terms`` is a tuple ``((c, (kind, k), (kind, k)), ...)`` for trig sums,
    ``None`` for opaque callables.
    """

    eval: Callable
    dx_eval: Callable
    lipschitz_bound: float
    terms: Optional[tuple] = None
    name: str = "kernel"

    def __call__(self, x, y):
        return self.eval(np.asarray(x, dtype=float), np.asarray(y, dtype=float))

    @classmethod
    def trig(cls, terms, name="trig"):
        terms = tuple((float(c), _norm_factor(fx), _norm_factor(fy)) for c, fx, fy in terms)

        def ev(x, y):
            out = 0.0
            for c, (a, k), (b, l) in terms:
                out = out + c * _trig(a, k, x) * _trig(b, l, y)
            return out * np.ones(np.broadcast(x, y).shape)

        def dx(x, y):
            out = 0.0
            for c, (a, k), (b, l) in terms:
                out = out + c * _dtrig(a, k, x) * _trig(b, l, y)
            return out * np.ones(np.broadcast(x, y).shape)

        lip = sum(abs(c) * TWO_PI * (k + l) for c, (_, k), (_, l) in terms)
        return cls(ev, dx, float(lip), terms, name)

    @classmethod
    def sine_difference(cls, k=1, amplitude=1.0):
        """``amplitude * sin(2 pi k (y - x))``, translation invariant."""
        return cls.trig([(amplitude, ("cos", k), ("sin", k)),
                         (-amplitude, ("sin", k), ("cos", k))], name="sine-difference")

    @classmethod
    def product(cls, fx=("sin", 1), fy=("cos", 1), amplitude=1.0):
        """``amplitude * phi(x) * chi(y)`` for single trig factors."""
        return cls.trig([(amplitude, fx, fy)], name="product")

    @classmethod
    def from_callable(cls, h, dx=None, lipschitz_bound=np.nan, name="callable", step=1e-6):
        """Wrap arbitrary vectorized callables; ``dx`` defaults to a central difference."""
        if dx is None:
            dx = lambda x, y: (h(x + step, y) - h(x - step, y)) / (2 * step)
        return cls(h, dx, float(lipschitz_bound), None, name)

    def x_factors(self, x):
        """Rows ``c_t phi_t(x)`` and ``c_t phi_t'(x)`` for the trig representation."""
        phi = np.array([c * _trig(a, k, x) for c, (a, k), _ in self.terms])
        dphi = np.array([c * _dtrig(a, k, x) for c, (a, k), _ in self.terms])
        return phi, dphi

    def y_factors(self, y):
        return np.array([_trig(b, l, y) for _, _, (b, l) in self.terms])


def get_kernel(spec) -> CouplingKernel:
    """Kernel from a config spec: a name string or a dict with ``name`` / ``terms``."""
    if isinstance(spec, CouplingKernel):
        return spec
    if isinstance(spec, str):
        spec = {"name": spec}
    name = spec.get("name", "trig")
    amp = spec.get("amplitude", 1.0)
    if name == "sine-difference":
        return CouplingKernel.sine_difference(spec.get("k", 1), amp)
    if name == "product":
        return CouplingKernel.product(tuple(spec.get("fx", ("sin", 1))),
                                      tuple(spec.get("fy", ("cos", 1))), amp)
    if name == "one-plus-cos-times-sin":
        # (1 + cos 2 pi y) sin 2 pi x
        return CouplingKernel.trig([(amp, ("sin", 1), ("1", 0)),
                                    (amp, ("sin", 1), ("cos", 1))], name=name)
    if name in ("trig", "fourier"):
        terms = [(t["c"], (t["fx"], t.get("kx", 0)), (t["fy"], t.get("ky", 0)))
                 for t in spec["terms"]]
        return CouplingKernel.trig(terms, name="fourier")
    raise ConfigurationError(f"unknown kernel {name!r}")


# ---------------------------------------------------------------- mean field

def mean_field_displacement(h: CouplingKernel, psi, n: Optional[int] = None):
    """Midpoint-rule samples of ``S(x) = int h(x, y) psi(y) dy`` and of ``S'``.

    Parameters
    ----------
    h : CouplingKernel
    psi : array_like
        Cell values on ``n`` cells (a density or any signed function; the map
        is linear in ``psi``).
    n : int, optional
        Requested resolution; must equal ``len(psi)``.

    Returns
    -------
    S, dS : ndarray
        Samples at the cell midpoints.
    """
    v = as_values(psi)
    m = v.size
    if n is not None and n != m:
        raise ConfigurationError(f"density has {m} cells, displacement requested on {n}")
    x = midpoints(m)
    if h.terms is not None:
        moments = h.y_factors(x) @ v / m
        phi, dphi = h.x_factors(x)
        return moments @ phi, moments @ dphi
    X, Y = x[:, None], x[None, :]
    return h.eval(X, Y) @ v / m, h.dx_eval(X, Y) @ v / m


class MeanFieldDiffeo:
    """``Phi(x) = x + delta S(x) mod 1`` with ``S`` linear between cell midpoints.

    Parameters
    ----------
    delta : float
        Coupling strength, ``>= 0``.
    displacement, displacement_deriv : array_like
        Samples of ``S`` and ``S'`` at the ``n`` cell midpoints.

    Raises
    ------
    RegimeError
        If ``delta max|S'| >= 1``, if ``|delta S|`` reaches 1/2, or if the
        interpolated lift fails to be strictly increasing.
    """

    def __init__(self, delta, displacement, displacement_deriv=None):
        if delta < 0:
            raise ConfigurationError("coupling strength must be >= 0")
        S = np.array(displacement, dtype=float)
        dS = np.zeros_like(S) if displacement_deriv is None else np.array(displacement_deriv, dtype=float)
        if S.shape != dS.shape or S.ndim != 1:
            raise ConfigurationError("displacement samples must be 1-D and of equal length")
        self.delta = float(delta)
        self.n = S.size
        self.displacement = S
        self.displacement_deriv = dS
        S.setflags(write=False)
        dS.setflags(write=False)
        bound = self.delta * float(np.max(np.abs(dS), initial=0.0))
        if bound >= 1.0:
            raise RegimeError(f"delta*max|S'| = {bound:.4g} >= 1: not a diffeomorphism", bound)
        shift = self.delta * float(np.max(np.abs(S), initial=0.0))
        if shift >= 0.5:
            raise RegimeError(f"delta*max|S| = {shift:.4g} >= 1/2", shift)
        slopes = 1.0 + self.delta * self.n * (np.roll(S, -1) - S)
        if np.any(slopes <= 0):
            raise RegimeError("interpolated lift is not increasing",
                              float(self.delta * self.n * np.max(np.abs(np.diff(S)))))
        # lifted nodes over three periods, used for exact inversion
        x = midpoints(self.n)
        X = np.concatenate([x - 1.0, x, x + 1.0])
        self._X = X
        self._Y = X + self.delta * np.tile(S, 3)

    @classmethod
    def from_density(cls, h: CouplingKernel, psi, delta):
        S, dS = mean_field_displacement(h, psi)
        return cls(delta, S, dS)

    @property
    def is_identity(self):
        return self.delta == 0.0 or not np.any(self.displacement)

    def S(self, x):
        """Linear interpolation of the displacement."""
        return np.interp(np.mod(x, 1.0), self._X, np.tile(self.displacement, 3))

    def lift(self, x):
        x = np.asarray(x, dtype=float)
        return x + self.delta * self.S(x)

    def __call__(self, x):
        return np.mod(self.lift(x), 1.0)

    def deriv(self, x):
        """``1 + delta S'`` with ``S'`` interpolated from its samples."""
        return 1.0 + self.delta * np.interp(np.mod(x, 1.0), self._X,
                                            np.tile(self.displacement_deriv, 3))

    def invert_lift(self, y):
        """Lifted inverse: returns ``z`` with ``lift(z) = y`` for ``y`` in ``[0, 1]``."""
        y = np.asarray(y, dtype=float)
        if self.is_identity:
            return y.copy()
        # the lift is piecewise linear, so locating the bracketing nodes and
        # taking one secant step inverts it exactly
        return np.interp(y, self._Y, self._X)

    def invert(self, y):
        z = np.mod(self.invert_lift(np.mod(y, 1.0)), 1.0)
        res = np.max(np.abs(_circle_dist(self(z), np.mod(y, 1.0))), initial=0.0)
        if res > 1e-12:
            raise NumericalError("diffeomorphism inversion failed", residual=float(res))
        return z


def _circle_dist(a, b):
    d = np.mod(a - b, 1.0)
    return np.minimum(d, 1.0 - d)


def apply_diffeo(phi: MeanFieldDiffeo, x):
    """``(x + delta S(x)) mod 1``."""
    return phi(x)


def invert_diffeo(phi: MeanFieldDiffeo, y):
    """Point ``x`` with ``Phi(x) = y`` on the circle."""
    return phi.invert(y)
