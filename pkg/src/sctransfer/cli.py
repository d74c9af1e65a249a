"""Command-line experiment runner.

Usage::

    sctransfer --config run.json [--out DIR] [--seed S] [--threads K] [--verbose]

The config is JSON validated against ``config_schema.json``. Every run
writes ``manifest.json`` plus command-specific CSV files (and SVG plots when
``"svg"`` is among the output formats) into the output directory.

Exit codes: 0 success, 2 configuration error, 3 regime error,
4 non-convergence or numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import platform
import sys
import time
from dataclasses import dataclass, field
from importlib import metadata, resources

import jsonschema
import numpy as np
import scipy

from .analysis import (contraction_matrix, convergence_to_equilibrium, critical_delta,
                       equilibrium_decay, estimate_coupling_constant, fit_ly_coefficients,
                       frozen_family, leading_eigenvalue, random_test_functions)
from .densities import midpoints, norm
from .errors import ConfigurationError, DomainError, NumericalError, RegimeError
from .io_utils import svg_line_plot, write_csv
from .maps import get_kernel, get_map
from .optimal_coupling import (ConvexConstraint, PerturbationBasis, optimize_convex,
                               response_gradient)
from .particle_sim import ParticleEnsemble, simulate
from .response import finite_difference_response, linear_response
from .self_consistent import (SelfConsistentModel, SystemClass, picard_fixed_point,
                              thm_existence_iteration)
from .transfer_ops import NoiseKernel

__all__ = ["ExperimentConfig", "load_schema", "build_model", "run", "main",
           "EXIT_OK", "EXIT_CONFIG", "EXIT_REGIME", "EXIT_NONCONVERGENCE"]

EXIT_OK, EXIT_CONFIG, EXIT_REGIME, EXIT_NONCONVERGENCE = 0, 2, 3, 4

log = logging.getLogger("sctransfer")


def load_schema():
    """The published JSON schema for experiment configs."""
    return json.loads(resources.files(__package__).joinpath("config_schema.json").read_text())


@dataclass
class ExperimentConfig:
    """Validated experiment description (see ``config_schema.json``)."""

    command: str
    model: dict
    solver: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d):
        try:
            jsonschema.validate(d, load_schema())
        except jsonschema.ValidationError as exc:
            path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigurationError(f"invalid config at {path}: {exc.message}") from None
        d = copy.deepcopy(d)
        return cls(d["command"], d["model"], d.get("solver", {}), d.get("output", {}),
                   d.get("params", {}))

    @classmethod
    def from_json(cls, text):
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(d)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                return cls.from_json(fh.read())
        except OSError as exc:
            raise ConfigurationError(f"cannot read config: {exc}") from None

    def to_dict(self):
        d = {"command": self.command, "model": self.model}
        for k in ("solver", "output", "params"):
            if getattr(self, k):
                d[k] = getattr(self, k)
        return copy.deepcopy(d)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    def digest(self):
        """SHA-256 of the canonical JSON form."""
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


# ---------------------------------------------------------------- builders

def _noise(spec):
    if spec is None:
        return None
    name = spec["name"]
    if name == "gaussian":
        return NoiseKernel.gaussian(spec.get("sigma", 0.1))
    if name == "truncated-gaussian":
        return NoiseKernel.truncated_gaussian(spec.get("sigma", 0.1), spec.get("width", 1.0))
    if name == "triangular":
        return NoiseKernel.triangular(spec.get("width", 0.1))
    if name == "uniform":
        return NoiseKernel.uniform(spec.get("width", 1.0))
    if name == "delta":
        return NoiseKernel.delta()
    raise ConfigurationError(f"unknown noise kernel {name!r}")


def build_model(model_cfg, delta=None) -> SelfConsistentModel:
    """:class:`SelfConsistentModel` from the ``model`` block of a config."""
    maps = [get_map(m["name"], **m.get("params", {})) for m in model_cfg["maps"]]
    kernels = [get_kernel(k) for k in model_cfg.get("couplings", [])]
    return SelfConsistentModel(
        system=model_cfg["class"], maps=maps, couplings=kernels,
        delta=float(model_cfg.get("delta", 0.0) if delta is None else delta),
        n=int(model_cfg.get("n", 1024)), noise=_noise(model_cfg.get("noise")),
        transfer=model_cfg.get("transfer", "ulam"),
        weights=tuple(model_cfg.get("weights", (1.0, 1.0))))


def _observable(spec, n):
    """Grid values of ``cos/sin(2 pi k x)`` (default ``cos(2 pi x)``)."""
    spec = spec or {}
    kind, k = spec.get("kind", "cos"), int(spec.get("k", 1))
    x = midpoints(n)
    if kind == "cos":
        return np.cos(2 * np.pi * k * x)
    if kind == "sin":
        return np.sin(2 * np.pi * k * x)
    raise ConfigurationError(f"unknown observable {kind!r}")


def _solve(model, solver, mu0=None):
    method = solver.get("method", "picard")
    tol = solver.get("tol", 1e-10)
    if method == "picard":
        return picard_fixed_point(model, mu0, tol=tol, max_iter=solver.get("max_iter", 10_000),
                                  damping=solver.get("damping"))
    return thm_existence_iteration(model, mu0, tol=tol, max_outer=solver.get("max_iter", 500))


def _density_rows(f):
    f = np.atleast_2d(f)
    n = f.shape[1]
    return [[i, i / n, *f[:, i]] for i in range(n)]


def _density_header(f, name="density"):
    return ["cell_index", "x_left"] + ([name] if np.ndim(f) == 1 else
                                       [f"{name}_{k + 1}" for k in range(np.shape(f)[0])])


class _Run:
    """Output directory bookkeeping for one command."""

    def __init__(self, cfg, out_dir, seed):
        self.cfg, self.out, self.seed = cfg, out_dir, seed
        self.files, self.results = [], {}
        self.svg = "svg" in cfg.output.get("formats", ["csv", "svg"])

    def csv(self, name, header, rows):
        write_csv(os.path.join(self.out, name), header, rows)
        self.files.append(name)

    def plot(self, name, series, **kw):
        if self.svg:
            svg_line_plot(os.path.join(self.out, name), series, **kw)
            self.files.append(name)


# ---------------------------------------------------------------- commands

def _cmd_fixed_point(r: _Run):
    model = build_model(r.cfg.model)
    f, trace = _solve(model, r.cfg.solver)
    r.csv("density.csv", _density_header(f), _density_rows(f))
    r.csv("trace.csv", ["iteration", "step", "residual", "ratio"], trace.iterates)
    x = midpoints(model.n)
    r.plot("density.svg", [(f"population {k + 1}", x, v) for k, v in enumerate(np.atleast_2d(f))],
           title="fixed density", xlabel="x", ylabel="density")
    r.results.update(converged=trace.converged, iterations=len(trace.iterates),
                     final_residual=trace.final_residual, rate=trace.rate(),
                     sup=float(np.max(f)), min=float(np.min(f)))


def _cmd_sweep_delta(r: _Run):
    deltas = r.cfg.model.get("deltas")
    if not deltas:
        raise ConfigurationError("sweep-delta needs model.deltas")
    solver = dict(r.cfg.solver)
    solver.setdefault("method", "thm")
    base = build_model(r.cfg.model, delta=0.0)
    f0, _ = _solve(base, solver)
    rows = []
    for d in sorted(deltas):
        try:
            f, trace = _solve(base.with_delta(d), solver, f0)
            rows.append([d, norm(f - f0, "L1"), trace.rate(), len(trace.iterates), "ok"])
        except (NumericalError, RegimeError) as exc:
            rows.append([d, np.nan, np.nan, 0, type(exc).__name__])
    r.csv("sweep.csv", ["delta", "l1_to_uncoupled", "rate", "iterations", "flag"], rows)
    ok = [(d, g) for d, g, *_rest in rows if _rest[-1] == "ok" and d > 0 and g > 0]
    slope = float(np.polyfit(np.log([d for d, _ in ok]), np.log([g for _, g in ok]), 1)[0]) \
        if len(ok) >= 2 else np.nan
    if ok:
        r.plot("sweep.svg", [("L1 gap", [d for d, _ in ok], [g for _, g in ok])],
               title="statistical stability", xlabel="delta", ylabel="||f_delta - f_0||", logy=True)
    r.results.update(loglog_slope=slope, failures=sum(1 for row in rows if row[-1] != "ok"))


def _cmd_converge_rate(r: _Run):
    p = r.cfg.params
    N = int(p.get("steps", 40))
    model = build_model(r.cfg.model)
    if model.populations != 1:
        raise ConfigurationError("converge-rate supports single-population models")
    g = _observable(p.get("observable"), model.n)
    g = g - g.mean()
    unc = convergence_to_equilibrium(model.uncoupled_matrix(0), g, N=N)
    f_star, _ = _solve(model, r.cfg.solver)
    coupled = equilibrium_decay(model, 1.0 + 0.5 * g / np.max(np.abs(g)), f_star, N=N)
    n_idx = np.arange(1, N + 1)
    r.csv("decay.csv", ["n", "a_uncoupled", "a_coupled"],
          [[k, a, b] for k, a, b in zip(n_idx, unc.a, coupled.a)])
    r.plot("decay.svg", [("uncoupled", n_idx, unc.a), ("coupled", n_idx, coupled.a)],
           title="convergence to equilibrium", xlabel="n", ylabel="norm", logy=True)
    r.results.update(gamma_uncoupled=unc.gamma, flag_uncoupled=unc.flag,
                     gamma_coupled=coupled.gamma, flag_coupled=coupled.flag)


def _cmd_response(r: _Run):
    model = build_model(r.cfg.model)
    c = _observable(r.cfg.params.get("observable"), model.n)
    res = linear_response(model, np.stack([c, c]) if model.populations == 2 else c)
    f0, D, R = (np.atleast_2d(a) for a in (res.f0, res.derivative_term, res.response))
    n = model.n
    header = ["cell_index", "x_left"]
    for k in range(f0.shape[0]):
        sfx = "" if f0.shape[0] == 1 else f"_{k + 1}"
        header += [f"f0{sfx}", f"derivative_term{sfx}", f"response{sfx}"]
    rows = [[i, i / n] + [v for k in range(f0.shape[0]) for v in (f0[k, i], D[k, i], R[k, i])]
            for i in range(n)]
    r.csv("response.csv", header, rows)
    x = midpoints(n)
    r.plot("response.svg", [("response", x, R[0]), ("derivative term", x, D[0])],
           title="linear response", xlabel="x", ylabel="value")
    r.results.update(resolvent_residual=res.resolvent_residual, condition=res.condition,
                     observable=res.observable_value, response_l1=float(np.abs(R).mean(axis=1).sum()))


def _cmd_fd_response(r: _Run):
    model = build_model(r.cfg.model)
    deltas = r.cfg.model.get("deltas", [1e-2, 5e-3, 2.5e-3])
    res = linear_response(model)
    fd = finite_difference_response(model, deltas, tol=r.cfg.solver.get("tol", 1e-12))
    R = res.response
    gaps = fd.gaps(R)
    qn = [np.nan if q is None else float(np.abs(q).mean(axis=-1).sum()) for q in fd.quotients]
    r.csv("fd_response.csv", ["delta", "l1_gap", "quotient_l1", "flag"],
          [[d, g, q, fl] for d, g, q, fl in zip(fd.deltas, gaps, qn, fd.flags)])
    x = midpoints(model.n)
    series = [("R", x, np.atleast_2d(R)[0])]
    series += [(f"quotient delta={d:g}", x, np.atleast_2d(q)[0])
               for d, q in zip(fd.deltas, fd.quotients) if q is not None]
    r.plot("fd_response.svg", series, title="response vs difference quotients",
           xlabel="x", ylabel="value")
    lim_gap = (float(np.abs(fd.limit - R).mean(axis=-1).sum()) if fd.limit is not None else np.nan)
    rn = float(np.abs(R).mean(axis=-1).sum())
    factors = [float(a / b) for a, b in zip(gaps[:-1], gaps[1:]) if b > 0]
    r.results.update(gaps=[float(v) for v in gaps], halving_factors=factors,
                     limit_gap=lim_gap, limit_relative_gap=lim_gap / rn if rn > 0 else np.nan,
                     response_l1=rn, max_quotient_l1=float(np.nanmax(qn)) if qn else np.nan)


def _cmd_optimal_coupling(r: _Run):
    p = r.cfg.params
    model = build_model(r.cfg.model)
    basis = PerturbationBasis(int(p.get("degree", 8)), float(p.get("s", 7.0)))
    c = _observable(p.get("observable"), model.n)
    con = p.get("constraint", {"kind": "ball", "radius": 1.0})
    P = ConvexConstraint(con.get("kind", "ball"), float(con.get("radius", 1.0)),
                         con.get("lower"), con.get("upper"))
    grad = response_gradient(c, model, basis, p.get("method", "adjoint"))
    out = optimize_convex(grad.g, P, grad.weights, samples=int(p.get("samples", 10_000)),
                          seed=r.seed)
    basis.to_csv(os.path.join(r.out, "coefficients.csv"), out.coeffs)
    basis.surface_csv(os.path.join(r.out, "surface.csv"), out.coeffs, int(p.get("surface_n", 64)))
    r.files += ["coefficients.csv", "surface.csv"]
    r.results.update(J=out.J, flag=out.flag, iterations=out.iterations,
                     certificate=out.certificate, gradient_method=grad.method,
                     condition=grad.condition)


def _cmd_simulate(r: _Run):
    p = r.cfg.params
    model = build_model(r.cfg.model)
    if model.populations != 1:
        raise ConfigurationError("simulate supports single-population models")
    mode = "interval" if model.system is SystemClass.REFLECTING else "circle"
    h = model.couplings[0] if model.couplings else None
    bins = int(p.get("bins", 64))
    ref = None
    if p.get("compare", True):
        ref, _ = _solve(model, r.cfg.solver)
    ens = ParticleEnsemble.uniform(int(p.get("agents", 200_000)), r.seed)
    sim = simulate(ens, model.maps[0], h, model.delta, int(p.get("steps", 100)), bins=bins,
                   burn_in=int(p.get("burn_in", 200)), noise=model.noise, mode=mode,
                   reference=ref, grid_n=model.n)
    rb = None
    if ref is not None:
        rb = np.asarray(ref).reshape(bins, -1).mean(axis=1)
    rows = [[i, i / bins, sim.averaged[i], np.nan if rb is None else rb[i]] for i in range(bins)]
    r.csv("histogram.csv", ["bin", "x_left", "empirical", "operator"], rows)
    r.csv("summary.csv", ["step", "mean", "l1_to_reference"], sim.summary)
    xb = (np.arange(bins) + 0.5) / bins
    series = [("empirical", xb, sim.averaged)] + ([("operator", xb, rb)] if rb is not None else [])
    r.plot("histogram.svg", series, title="particle histogram", xlabel="x", ylabel="density")
    r.results.update(l1_to_operator=float(np.abs(sim.averaged - rb).mean()) if rb is not None
                     else np.nan, mode=mode)


def _cmd_contraction_report(r: _Run):
    p = r.cfg.params
    model = build_model(r.cfg.model)
    if model.populations != 1:
        raise ConfigurationError("contraction-report supports single-population models")
    n1 = int(p.get("n1", 10))
    ops = frozen_family(model, int(p.get("family", 10)), seed=r.seed)
    ly = (fit_ly_coefficients(ops, seed=r.seed) if "lambda1" not in p
          else (float(p["lambda1"]), float(p["B"])))
    K = float(p["K"]) if "K" in p else estimate_coupling_constant(model, seed=r.seed)
    Q, C = float(p.get("Q", 1.0)), float(p.get("C", 1.0))
    if "a_n1" in p:
        a_n1 = float(p["a_n1"])
    else:
        L0 = model.uncoupled_matrix(0)
        G = random_test_functions(model.n, 20, np.random.default_rng(r.seed), zero_mean=True)
        a_n1 = max(convergence_to_equilibrium(L0, g, N=n1).a[-1] for g in G)
    rep = contraction_matrix(ly, K, Q, C, a_n1, model.delta, n1)
    dstar = critical_delta(ly, K, Q, C, a_n1, n1, float(p.get("delta_max", 10.0)))
    grid = np.linspace(0.0, 2 * dstar if np.isfinite(dstar) and dstar > 0 else 1.0, 41)
    rhos = [contraction_matrix(ly, K, Q, C, a_n1, d, n1).rho for d in grid]
    r.csv("rho.csv", ["delta", "rho"], list(zip(grid, rhos)))
    r.plot("rho.svg", [("rho", grid, rhos), ("1", grid, np.ones_like(grid))],
           title="leading eigenvalue of M", xlabel="delta", ylabel="rho")
    lyd = ly.to_dict() if hasattr(ly, "to_dict") else {"lambda1": ly[0], "B": ly[1],
                                                        "source": "user"}
    if hasattr(ly, "to_dict"):
        lyd["source"] = "empirical"
    r.results.update(ly=lyd, K=K, K_source="user" if "K" in p else "empirical", Q=Q, C=C,
                     a_n1=a_n1, report=rep.to_dict(), critical_delta=dstar,
                     rho_check=leading_eigenvalue(rep.matrix_M))
    with open(os.path.join(r.out, "contraction_report.json"), "w") as fh:
        fh.write(rep.to_json() + "\n")
    r.files.append("contraction_report.json")


_COMMANDS = {
    "fixed-point": _cmd_fixed_point,
    "sweep-delta": _cmd_sweep_delta,
    "converge-rate": _cmd_converge_rate,
    "response": _cmd_response,
    "fd-response": _cmd_fd_response,
    "optimal-coupling": _cmd_optimal_coupling,
    "simulate": _cmd_simulate,
    "contraction-report": _cmd_contraction_report,
}


# ---------------------------------------------------------------- runner

def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if np.isfinite(v) else str(v)
    return v


def _versions():
    try:
        own = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        own = "unknown"
    return {"artifact": own, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


def run(config, out_dir=None, seed=None, threads=None) -> int:
    """Execute one experiment and write its artifacts; returns the exit status.

    ``config`` may be an :class:`ExperimentConfig` or a plain dict. Command-line
    overrides for the output directory and seed take precedence over the
    config's ``output`` block. ``threads`` is recorded in the manifest; the
    numerical kernels are single-threaded.
    """
    t0 = time.perf_counter()
    cfg = None
    status, error = EXIT_OK, None
    try:
        cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.from_dict(config)
    except ConfigurationError as exc:
        status, error = EXIT_CONFIG, exc
    if out_dir is None:
        out_dir = cfg.output.get("directory", "out") if cfg is not None else "out"
    if cfg is not None:
        seed = int(seed if seed is not None else cfg.output.get("seed", 0))
    os.makedirs(out_dir, exist_ok=True)
    r = None
    if cfg is not None:
        r = _Run(cfg, out_dir, seed)
        try:
            _COMMANDS[cfg.command](r)
        except (ConfigurationError, DomainError) as exc:
            status, error = EXIT_CONFIG, exc
        except RegimeError as exc:
            status, error = EXIT_REGIME, exc
        except NumericalError as exc:
            status, error = EXIT_NONCONVERGENCE, exc
    if error is not None:
        log.error("%s: %s", type(error).__name__, error)
    manifest = {
        "command": cfg.command if cfg else None,
        "status": "ok" if status == EXIT_OK else "error",
        "exit_code": status,
        "error": None if error is None else {"type": type(error).__name__, "message": str(error)},
        "config_sha256": cfg.digest() if cfg else None,
        "config": cfg.to_dict() if cfg else (config if isinstance(config, dict) else None),
        "seed": seed,
        "threads": threads,
        "versions": _versions(),
        "wall_time_s": time.perf_counter() - t0,
        "results": r.results if r else {},
        "files": r.files if r else [],
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(_jsonable(manifest), fh, indent=2, sort_keys=False)
        fh.write("\n")
    return status


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="sctransfer",
                                 description="Self-consistent transfer operator experiments.")
    ap.add_argument("--config", required=True, help="JSON experiment config")
    ap.add_argument("--out", help="output directory (overrides output.directory)")
    ap.add_argument("--seed", type=int, help="random seed (overrides output.seed)")
    ap.add_argument("--threads", type=int, default=1, help="recorded in the manifest")
    ap.add_argument("--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2**64:
        ap.error("--seed must be an unsigned 64-bit integer")
    if args.threads is not None and args.threads < 1:
        ap.error("--threads must be positive")
    try:
        cfg = ExperimentConfig.load(args.config)
    except ConfigurationError as exc:
        out = args.out or "out"
        os.makedirs(out, exist_ok=True)
        manifest = {"command": None, "status": "error", "exit_code": EXIT_CONFIG,
                    "error": {"type": "ConfigurationError", "message": str(exc)},
                    "config_sha256": None, "config": None, "seed": args.seed,
                    "threads": args.threads, "versions": _versions(), "wall_time_s": 0.0,
                    "results": {}, "files": []}
        with open(os.path.join(out, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2)
            fh.write("\n")
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or cfg.output.get("directory", "out")
    return run(cfg, out, args.seed, args.threads)


if __name__ == "__main__":
    sys.exit(main())
