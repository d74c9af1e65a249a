"""Contraction diagnostics: Lasota-Yorke fits, decay rates and the 2x2 matrix test.

Everything here is empirical. Constants are fitted on sampled test functions
and carry their sample counts and violation counts, not proofs.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import brentq

from .densities import midpoints, norm
from .errors import DomainError
from .transfer_ops import as_operator

__all__ = [
    "random_test_functions",
    "LYCoefficients",
    "fit_ly_coefficients",
    "DecayResult",
    "convergence_to_equilibrium",
    "equilibrium_decay",
    "ContractionReport",
    "contraction_matrix",
    "leading_eigenvalue",
    "critical_delta",
    "balanced_norm",
    "estimate_coupling_constant",
    "frozen_family",
    "sequential_ly_check",
]


def random_test_functions(n, count, rng, zero_mean=False, max_freq=None):
    """Rows of smooth and rough test functions on ``n`` cells.

    Half are sparse random trigonometric sums, half are narrow periodic
    Gaussian bumps (widths down to two cells) on a positive background, so
    both the smooth and the rough ends of the strong/weak ratio are covered.
    Without ``zero_mean`` the first row is the constant function, whose image
    under a Markov operator pins ``lambda1 + B >= 1``.
    """
    x = midpoints(n)
    max_freq = max(2, n // 8) if max_freq is None else max_freq
    out = np.empty((count, n))
    for r in range(count):
        if r % 2 == 0:
            m = rng.integers(1, 6)
            ks = rng.integers(1, max_freq + 1, size=m)
            amp = rng.standard_normal(m) / ks ** rng.uniform(0, 1.5)
            ph = rng.uniform(0, 2 * np.pi, size=m)
            f = 1.5 * np.abs(amp).sum() + (np.cos(2 * np.pi * np.outer(ks, x) + ph[:, None]) * amp[:, None]).sum(axis=0)
        else:
            w = np.exp(rng.uniform(np.log(2.0 / n), np.log(0.15)))
            c = rng.uniform()
            d = np.mod(x - c + 0.5, 1.0) - 0.5
            f = rng.uniform(0, 1) + np.exp(-0.5 * (d / w) ** 2) / w
        out[r] = f - f.mean() if zero_mean else f
    if not zero_mean and count:
        out[0] = 1.0
    return out


# ---------------------------------------------------------------- Lasota-Yorke

@dataclass
class LYCoefficients:
    """Fitted ``||L f||_s <= lambda1 ||f||_s + B ||f||_w``.

    ``lambda1`` and ``B`` are already inflated; ``violations`` counts failures
    on a fresh validation batch. ``regime_ok`` is ``lambda1 < 1``.
    """

    lambda1: float
    B: float
    strong_norm: str
    weak_norm: str
    samples: int
    violations: int
    residual: float
    regime_ok: bool
    raw_lambda1: float = np.nan
    raw_B: float = np.nan

    def to_dict(self):
        return {k: (float(v) if isinstance(v, (np.floating,)) else v) for k, v in asdict(self).items()}


def _op_dimension(op, n):
    if n is not None:
        return n
    for attr in ("n",):
        if hasattr(op, attr):
            return getattr(op, attr)
    return op.shape[0]


def fit_ly_coefficients(op, strong="W11", weak="L1", samples=100, n=None, seed=0,
                        inflate=0.05, zero_mean=False, rough_quantile=0.2):
    """Fit a one-step Lasota-Yorke inequality to sampled test functions.

    ``op`` may be a list of operators, in which case test function ``i`` is
    mapped by ``op[i % len(op)]`` and the fit covers the whole family (as
    needed for sequential compositions).

    With ``r = ||Lf||_s / ||f||_s`` and ``x = ||f||_w / ||f||_s``, the fit is
    the line ``r <= lambda1 + B x`` whose intercept is the largest ``r``
    among the roughest samples (the ``rough_quantile`` fraction with the
    smallest ``x``) and whose slope is the smallest that covers all samples.
    When the two norms coincide ``x`` is constant and the fit degenerates to
    ``B = 0``, ``lambda1 = max r``. Both coefficients are then inflated by
    ``inflate`` and checked on ``samples`` fresh functions.
    """
    ops = list(op) if isinstance(op, (list, tuple)) else [op]
    appliers = [as_operator(o) for o in ops]
    n = _op_dimension(ops[0], n)
    rng = np.random.default_rng(seed)

    def ratios(F):
        s_in = np.array([norm(f, strong) for f in F])
        w_in = np.array([norm(f, weak) for f in F])
        s_out = np.array([norm(appliers[i % len(appliers)](f), strong) for i, f in enumerate(F)])
        keep = s_in > 0
        return s_out[keep], s_in[keep], w_in[keep]

    so, si, wi = ratios(random_test_functions(n, samples, rng, zero_mean))
    r, x = so / si, wi / si
    if strong == weak or np.ptp(x) < 1e-12:
        lam, B = float(r.max()), 0.0
    else:
        # lambda1 is the contraction seen on the roughest functions (small x);
        # B is then the smallest slope that covers every sample
        rough = x <= np.quantile(x, rough_quantile)
        lam = float(r[rough].max())
        B = float(max(0.0, np.max((r - lam) / x)))
    resid = float(np.sum(np.maximum(0.0, r - lam - B * x) ** 2))
    lam_i, B_i = lam * (1 + inflate), B * (1 + inflate)
    so2, si2, wi2 = ratios(random_test_functions(n, samples, rng, zero_mean))
    viol = int(np.sum(so2 > lam_i * si2 + B_i * wi2 + 1e-12 * si2))
    return LYCoefficients(lam_i, B_i, strong, weak, samples, viol, resid, lam_i < 1.0, lam, B)


# ---------------------------------------------------------------- decay

@dataclass
class DecayResult:
    """Decay sequence ``a_n`` (``n = 1..N``) and fitted rate ``gamma``.

    ``flag`` is ``"ok"``, ``"annihilated"`` (sequence hits roundoff,
    ``gamma = inf``) or ``"no-decay"`` (``gamma`` indistinguishable from 0).
    """

    a: np.ndarray
    gamma: float
    flag: str
    prefactor: float = np.nan

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("n,a_n\r\n")
            for k, v in enumerate(self.a, start=1):
                fh.write(f"{k},{v:.17g}\r\n")


def _fit_rate(a, floor):
    a = np.asarray(a, dtype=float)
    N = a.size
    tail = np.arange(N // 2, N)
    good = tail[a[tail] > floor]
    if good.size == 0:
        return np.inf, 0.0, "annihilated"
    if good.size == 1:
        # a single usable point: rate from the start of the sequence to it
        k = good[0]
        gamma = -np.log(a[k] / a[0]) / max(k, 1)
        return float(gamma), float(a[0]), "ok" if gamma > 1e-6 else "no-decay"
    slope, icpt = np.polyfit(good + 1.0, np.log(a[good]), 1)
    gamma = -slope
    flag = "ok" if gamma > 1e-6 else "no-decay"
    return float(gamma), float(np.exp(icpt)), flag


def convergence_to_equilibrium(op, g, N=30, strong="W11", weak="L1", floor=1e-13):
    """``a_n = ||L^n g||_w / ||g||_s`` and a log-linear rate from the tail half.

    Raises
    ------
    DomainError
        If ``g`` does not have zero mean.
    """
    v = np.array(g, dtype=float)
    if abs(v.mean()) > 1e-10 * max(1.0, np.abs(v).mean()):
        raise DomainError("convergence to equilibrium needs a zero-mean function")
    apply = as_operator(op)
    s = norm(v, strong)
    a = np.empty(N)
    for k in range(N):
        v = apply(v)
        a[k] = norm(v, weak) / s
    gamma, pref, flag = _fit_rate(a, floor)
    return DecayResult(a, gamma, flag, pref)


def equilibrium_decay(model, nu, f_star, N=40, strong="W11", floor=1e-13):
    """``||L_delta^n(nu) - f*||_s`` for the nonlinear operator and its fitted rate."""
    f = np.asarray(nu, dtype=float)
    f = f / f.mean(axis=-1, keepdims=True)
    a = np.empty(N)
    for k in range(N):
        f = model.apply(f)
        a[k] = norm(f - f_star, strong)
    gamma, pref, flag = _fit_rate(a, floor)
    return DecayResult(a, gamma, flag, pref)


# ---------------------------------------------------------------- 2x2 matrix

@dataclass
class ContractionReport:
    """Matrix ``M``, its leading eigenvalue and the balancing weights."""

    n1: int
    matrix_M: np.ndarray
    rho: float
    eigvec_ab: tuple
    regime_ok: bool
    delta: float

    def to_dict(self):
        return {"n1": int(self.n1), "matrix_M": np.asarray(self.matrix_M).tolist(),
                "rho": float(self.rho), "eigvec_ab": [float(v) for v in self.eigvec_ab],
                "regime_ok": bool(self.regime_ok), "delta": float(self.delta)}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


def leading_eigenvalue(M):
    """Largest eigenvalue of a real 2x2 matrix with real spectrum, in closed form."""
    (p, q), (r, s) = np.asarray(M, dtype=float)
    half_tr = 0.5 * (p + s)
    disc = 0.25 * (p - s) ** 2 + q * r
    if disc < 0:
        return np.nan
    return float(half_tr + np.sqrt(disc))


def _leading_vector_T(M, rho):
    """Eigenvector of ``M^T`` for ``rho``, normalized to ``a + b = 1``."""
    (p, q), (r, s) = np.asarray(M, dtype=float)
    # rows of (M^T - rho I): (p - rho, r) and (q, s - rho)
    c1 = np.array([r, rho - p])
    c2 = np.array([rho - s, q])
    v = c1 if np.abs(c1).sum() >= np.abs(c2).sum() else c2
    if np.abs(v).sum() == 0:
        v = np.array([1.0, 0.0])
    if v.sum() < 0:
        v = -v
    tot = v.sum()
    return (float(v[0] / tot), float(v[1] / tot)) if tot != 0 else (np.nan, np.nan)


def contraction_matrix(ly, K, Q, C, a_n1, delta, n1) -> ContractionReport:
    """Assemble ``M`` and test whether the balanced norm contracts.

    ``M = [[l^n1, B/(1-l)], [delta Q K C + a_n1, delta Q K n1 B/(1-l)]]``
    with ``l = ly.lambda1``; ``ly`` may also be a ``(lambda1, B)`` pair.
    """
    lam, B = (ly.lambda1, ly.B) if hasattr(ly, "lambda1") else ly
    if not 0 <= lam < 1:
        raise DomainError("the contraction matrix needs 0 <= lambda1 < 1")
    tail = B / (1 - lam)
    M = np.array([[lam ** n1, tail],
                  [delta * Q * K * C + a_n1, delta * Q * K * n1 * tail]])
    rho = leading_eigenvalue(M)
    a, b = _leading_vector_T(M, rho)
    ok = bool(rho < 1 and a >= 0 and b >= 0)
    return ContractionReport(int(n1), M, rho, (a, b), ok, float(delta))


def critical_delta(ly, K, Q, C, a_n1, n1, delta_max=10.0, grid_points=200):
    """Smallest ``delta`` with ``rho(delta) = 1``: grid scan, then root bracketing.

    Returns ``nan`` if ``rho < 1`` on the whole of ``[0, delta_max]`` and
    ``0.0`` if already ``rho >= 1`` at ``delta = 0``.
    """
    f = lambda d: contraction_matrix(ly, K, Q, C, a_n1, d, n1).rho - 1.0
    if f(0.0) >= 0:
        return 0.0
    grid = np.linspace(0.0, delta_max, grid_points + 1)
    vals = np.array([f(d) for d in grid])
    idx = np.flatnonzero(vals >= 0)
    if idx.size == 0:
        return np.nan
    k = idx[0]
    return float(brentq(f, grid[k - 1], grid[k], xtol=1e-15, rtol=4 * np.finfo(float).eps))


def balanced_norm(g, a, b, strong="W11", weak="L1"):
    """``a ||g||_s + b ||g||_w``."""
    if a < 0 or b < 0:
        raise DomainError("balanced-norm weights must be nonnegative")
    return a * norm(g, strong) + b * norm(g, weak)


# ---------------------------------------------------------------- empirical constants

def _random_densities(n, count, rng):
    F = random_test_functions(n, count, rng)
    F = np.abs(F)
    return F / F.mean(axis=1, keepdims=True)


def estimate_coupling_constant(model, samples=30, strong="W11", weak="L1", seed=0):
    """Empirical ``K = max ||(L_{d,mu1} - L_{d,mu2}) f||_w / (d ||mu1 - mu2||_w ||f||_s)``."""
    if model.delta == 0:
        return 0.0
    rng = np.random.default_rng(seed)
    n = model.n
    M1 = _random_densities(n, samples, rng)
    M2 = _random_densities(n, samples, rng)
    F = _random_densities(n, samples, rng)
    best = 0.0
    for mu1, mu2, f in zip(M1, M2, F):
        if model.populations == 2:
            mu1, mu2, f = (np.stack([v, v]) for v in (mu1, mu2, f))
        A = model.frozen_operator(mu1)
        Bm = model.frozen_operator(mu2)
        if model.populations == 2:
            diff = np.stack([A[k] @ f[k] - Bm[k] @ f[k] for k in range(2)])
        else:
            diff = A @ f - Bm @ f
        denom = model.delta * norm(mu1 - mu2, weak) * norm(f, strong)
        if denom > 0:
            best = max(best, norm(diff, weak) / denom)
    return float(best)


def frozen_family(model, count=20, seed=0):
    """Frozen operators ``L_{delta, mu}`` at random densities ``mu``."""
    rng = np.random.default_rng(seed)
    mus = _random_densities(model.n, count, rng)
    if model.populations == 2:
        raise DomainError("frozen families are formed per population; pass a single-population model")
    return [model.frozen_operator(mu) for mu in mus]


def sequential_ly_check(model, ly, steps=10, trials=20, seed=0):
    """Largest ratio ``||L(n) f||_s / (l^n ||f||_s + B/(1-l) ||f||_w)`` over random sequences.

    ``L(n) = L_{d,mu_n} ... L_{d,mu_1}`` with random densities ``mu_i``;
    values ``<= 1`` mean the sequential inequality held on every sample.
    """
    rng = np.random.default_rng(seed)
    lam, B = ly.lambda1, ly.B
    worst = 0.0
    n = model.n
    for _ in range(trials):
        f0 = random_test_functions(n, 1, rng)[0]
        f = f0.copy()
        mus = _random_densities(n, steps, rng)
        for k, mu in enumerate(mus, start=1):
            f = model.frozen_operator(mu) @ f
            bound = lam ** k * norm(f0, ly.strong_norm) + B / (1 - lam) * norm(f0, ly.weak_norm)
            worst = max(worst, norm(f, ly.strong_norm) / bound)
    return float(worst)
