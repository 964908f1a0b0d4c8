"""Config-driven experiment runner.

Usage::

    optresponse run config.yaml [--set key=value ...]
    optresponse verify config.yaml

A config is a YAML (or JSON) mapping whose keys are the fields of
:class:`ExperimentConfig`; ``map`` and ``problem`` are required.  ``--set``
overrides use dotted keys (``map.alpha=0.4``) and YAML-parsed values.

Exit codes: 0 success, 2 config error, 3 numerical error, 4 verification failure.
"""
from __future__ import annotations

import argparse
import ast
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import yaml

from . import optimal, response
from .discretization import (QuadratureSpec, build_grid, cached_transfer_matrix, discrete_inner_product,
                             grid_header, project_observable, read_matrix_csv,
                             write_matrix_csv)
from .dynamics import MAP_BUILDERS, bump_noise, make_map
from .errors import ConfigError, OptResponseError
from .perturb import max_kernel_step
from .spectral import invariant_density, spectral_set, subdominant_eigenpair, write_eigenvector_csv

log = logging.getLogger("optresponse")

PROBLEMS = ("expectation-kernel", "mixing-kernel", "expectation-map", "mixing-map",
            "spectrum", "invariant-density", "verify-response")
SELECTORS = ("largest-modulus", "largest-modulus-real")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4

_EXPR_NAMES = {
    "sin": np.sin, "cos": np.cos, "tan": np.tan, "exp": np.exp, "log": np.log, "sqrt": np.sqrt,
    "abs": np.abs, "tanh": np.tanh, "sinh": np.sinh, "cosh": np.cosh, "arctan": np.arctan,
    "pi": math.pi, "e": math.e,
}
_EXPR_NODES = (ast.Expression, ast.BinOp, ast.UnaryOp, ast.Call, ast.Name, ast.Load, ast.Constant,
               ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow, ast.USub, ast.UAdd, ast.Mod)


def compile_expression(text: str, variables=("x",)):
    """Compile an arithmetic expression over numpy ufuncs; anything else is rejected."""
    try:
        tree = ast.parse(str(text), mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"cannot parse expression {text!r}: {exc.msg}") from exc
    for node in ast.walk(tree):
        if not isinstance(node, _EXPR_NODES):
            raise ConfigError(f"expression {text!r}: {type(node).__name__} is not allowed")
        if isinstance(node, ast.Name) and node.id not in _EXPR_NAMES and node.id not in variables:
            raise ConfigError(f"expression {text!r}: unknown name {node.id!r}")
        if isinstance(node, ast.Call) and not isinstance(node.func, ast.Name):
            raise ConfigError(f"expression {text!r}: only plain function calls are allowed")
    code = compile(tree, "<expr>", "eval")

    def f(*args):
        env = dict(_EXPR_NAMES, **dict(zip(variables, args)))
        return eval(code, {"__builtins__": {}}, env)  # noqa: S307  (AST whitelisted above)

    return f


def _number(value, name):
    if isinstance(value, bool):
        raise ConfigError(f"{name}: expected a number, got {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    try:
        return float(compile_expression(value, variables=())())
    except ConfigError as exc:
        raise ConfigError(f"{name}: {exc}") from exc


@dataclass
class ExperimentConfig:
    map: dict
    problem: str
    epsilon: float = 0.1
    n: int = 500
    quad_order: int = 8
    observable: str = "-cos(x)"
    l: float | None = None
    ell: float = 0.0
    selector: str = "largest-modulus-real"
    output_dir: str = "out"
    deltas: list = field(default_factory=lambda: [1e-3, 5e-4])
    seed: int = 0
    overlay_scale: float = 0.01
    verify_n: int = 200
    certify_n: int = 8
    certify_samples: int = 2000
    perturbation_file: str | None = None
    cache_dir: str | None = None

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a mapping")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        for required in ("map", "problem"):
            if required not in data:
                raise ConfigError(f"{required}: field is required")
        data = dict(data)
        if isinstance(data["map"], str):
            data["map"] = {"name": data["map"]}
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def validate(self):
        if not isinstance(self.map, dict) or "name" not in self.map:
            raise ConfigError("map: expected a mapping with a 'name' key")
        if self.map["name"] not in MAP_BUILDERS:
            raise ConfigError(f"map.name: unknown map {self.map['name']!r}; choose from {sorted(MAP_BUILDERS)}")
        if self.problem not in PROBLEMS:
            raise ConfigError(f"problem: {self.problem!r} is not one of {', '.join(PROBLEMS)}")
        self.epsilon = _number(self.epsilon, "epsilon")
        if not (0.0 < self.epsilon <= 1.0):
            raise ConfigError(f"epsilon: must lie in (0, 1], got {self.epsilon!r}")
        for name in ("n", "quad_order", "seed", "verify_n", "certify_n", "certify_samples"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(f"{name}: expected an integer, got {v!r}")
        if self.n < 1:
            raise ConfigError(f"n: must be >= 1, got {self.n}")
        if self.quad_order < 1:
            raise ConfigError(f"quad_order: must be >= 1, got {self.quad_order}")
        if not (2 <= self.certify_n <= 12):
            raise ConfigError(f"certify_n: must lie in [2, 12], got {self.certify_n}")
        if self.l is not None:
            self.l = _number(self.l, "l")
            if not (0.0 < self.l < 1.0):
                raise ConfigError(f"l: must lie in (0, 1), got {self.l}")
        self.ell = _number(self.ell, "ell")
        if not (0.0 <= self.ell < 0.5):
            raise ConfigError(f"ell: must lie in [0, 1/2), got {self.ell}")
        if self.selector not in SELECTORS:
            raise ConfigError(f"selector: {self.selector!r} is not one of {', '.join(SELECTORS)}")
        if not isinstance(self.deltas, (list, tuple)) or len(self.deltas) != 2:
            raise ConfigError("deltas: expected two step sizes")
        self.deltas = [_number(d, "deltas") for d in self.deltas]
        if not all(d > 0 for d in self.deltas):
            raise ConfigError("deltas: step sizes must be positive")
        self.overlay_scale = _number(self.overlay_scale, "overlay_scale")
        try:
            compile_expression(self.observable)
        except ConfigError as exc:
            raise ConfigError(f"observable: {exc}") from exc
        try:
            self.build_map()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"map: {exc}") from exc

    def build_map(self):
        params = {k: v for k, v in self.map.items() if k != "name"}
        return make_map(self.map["name"], **params)

    def observable_fn(self):
        f = compile_expression(self.observable)
        return lambda x: np.broadcast_to(np.asarray(f(x), dtype=float), np.shape(x))


def _set_dotted(d: dict, key: str, value):
    parts = key.split(".")
    for p in parts[:-1]:
        cur = d.get(p)
        if isinstance(cur, str) and p == "map":
            cur = {"name": cur}
        d[p] = cur if isinstance(cur, dict) else {}
        d = d[p]
    d[parts[-1]] = value


def load_config(path=None, overrides=()) -> ExperimentConfig:
    data = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                data = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _set_dotted(data, key.strip(), yaml.safe_load(raw))
    return ExperimentConfig.from_dict(data)


# ---------------------------------------------------------------------------
# outputs
# ---------------------------------------------------------------------------

def write_vector_csv(path, centers, columns: dict, **meta):
    n = len(centers)
    names = ["x"] + list(columns)
    data = np.column_stack([centers] + [np.asarray(v, dtype=float) for v in columns.values()])
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(grid_header(n, x="cell centre", **meta) + "\n")
        fh.write(",".join(names) + "\n")
        np.savetxt(fh, data, delimiter=",", fmt="%.17g")


def emit_overlay(map_, tdot, scale: float, path=None) -> np.ndarray:
    """``(x, T0(x), T0(x) + scale * Tdot(x))`` at cell centres; written as CSV when ``path`` is given."""
    t = np.asarray(getattr(tdot, "values", tdot), dtype=float)
    x = build_grid(t.size).centers
    t0 = map_(x)
    out = np.column_stack([x, t0, t0 + scale * t])
    if path is not None:
        write_vector_csv(path, x, {"T0": out[:, 1], "T0_plus_scaled_Tdot": out[:, 2]}, scale=scale)
    return out


def _complex_json(z):
    z = complex(z)
    return {"re": z.real, "im": z.imag, "abs": abs(z)}


def _finite_steps(deltas, dmax):
    d1, d2 = deltas
    if d1 < dmax:
        return [d1, d2]
    return [0.5 * dmax, 0.25 * dmax]


class VerificationFailed(Exception):
    def __init__(self, report):
        super().__init__("verification failed")
        self.report = report


# ---------------------------------------------------------------------------
# runners
# ---------------------------------------------------------------------------

class _Context:
    def __init__(self, cfg: ExperimentConfig, n=None):
        self.cfg = cfg
        self.map = cfg.build_map()
        self.noise = bump_noise(cfg.epsilon)
        self.quad = QuadratureSpec(order=cfg.quad_order)
        self.grid = build_grid(n or cfg.n)
        self.A = cached_transfer_matrix(cfg.cache_dir, self.grid, self.map, self.noise, self.quad)
        self.f0 = invariant_density(self.A)
        self.c = project_observable(self.grid, cfg.observable_fn())


def _spectrum_block(ctx, out_dir, timings):
    t = time.perf_counter()
    spec = spectral_set(ctx.A)
    spec.to_csv(os.path.join(out_dir, "spectrum.csv"), n=ctx.grid.n)
    timings["spectrum"] = time.perf_counter() - t
    lam = spec.eigenvalues
    block = {"leading": [_complex_json(z) for z in lam[:8]]}
    if ctx.grid.n > 1:
        pair = subdominant_eigenpair(ctx.A, ctx.cfg.selector, strict=False)
        block["subdominant"] = _complex_json(pair.lam)
        block["subdominant_index"] = pair.index
        block["simple"] = pair.geometric_multiplicity_check
        write_eigenvector_csv(os.path.join(out_dir, "eigenvector.csv"), pair, ctx.grid.centers)
    return block


def run(cfg: ExperimentConfig) -> dict:
    """Run one experiment; returns the report written to ``report.json``."""
    out_dir = cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    timings = {}
    report = {"config": asdict(cfg), "problem": cfg.problem}

    if cfg.problem == "verify-response":
        t = time.perf_counter()
        suite = verify_suite(cfg)
        timings["verify"] = time.perf_counter() - t
        report["verification"] = suite
        _write_report(out_dir, report, timings)
        if not suite["passed"]:
            raise VerificationFailed(report)
        return report

    t = time.perf_counter()
    ctx = _Context(cfg)
    timings["assembly"] = time.perf_counter() - t
    report["grid"] = {"n": ctx.grid.n, "cells": "equipartition of [0,1]"}
    report["assembly"] = {"max_renormalization": ctx.A.metadata.get("max_renormalization")}
    write_vector_csv(os.path.join(out_dir, "invariant_density.csv"), ctx.grid.centers, {"f0": ctx.f0})
    report["spectrum"] = _spectrum_block(ctx, out_dir, timings)
    report["invariant_density"] = {"integral": float(ctx.f0.sum() / ctx.grid.n),
                                   "residual": float(np.linalg.norm(ctx.A.apply(ctx.f0) - ctx.f0))}

    t = time.perf_counter()
    if cfg.problem in ("expectation-kernel", "mixing-kernel"):
        report["optimum"] = _solve_kernel_problem(ctx, out_dir)
    elif cfg.problem in ("expectation-map", "mixing-map"):
        report["optimum"] = _solve_map_problem(ctx, out_dir)
    timings["problem"] = time.perf_counter() - t
    _write_report(out_dir, report, timings)
    return report


def _write_report(out_dir, report, timings):
    # everything except "timings" is deterministic given the config
    report["timings"] = {k: round(v, 6) for k, v in timings.items()}
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, complex):
        return _complex_json(o)
    raise TypeError(f"not serialisable: {type(o).__name__}")


def _solve_kernel_problem(ctx, out_dir) -> dict:
    cfg = ctx.cfg
    feas = optimal.kernel_feasibility(ctx.A, cfg.l)
    block = {"l": feas.l, "mask_fraction": float(feas.mask.mean())}
    if cfg.problem == "expectation-kernel":
        kdot = optimal.optimal_kernel_for_expectation(ctx.A, ctx.f0, ctx.c, feas)
        block["objective"] = response.expectation_derivative(ctx.A, ctx.f0, kdot, ctx.c)
        block["expectation"] = discrete_inner_product(ctx.c, ctx.f0)
        check = lambda d: response.fd_density_kernel(ctx.A, kdot, ctx.f0, d)  # noqa: E731
    else:
        pair = subdominant_eigenpair(ctx.A, cfg.selector)
        kdot = optimal.optimal_kernel_for_mixing(pair, feas)
        block["lambda"] = _complex_json(pair.lam)
        block["objective"] = response.mixing_rate_derivative(pair, kdot)
        block["eigenvalue_derivative"] = _complex_json(response.eigenvalue_response_kernel(pair, kdot))
        check = lambda d: response.fd_mixing_rate(ctx.A, pair, kdot, d)  # noqa: E731
    write_matrix_csv(os.path.join(out_dir, "perturbation_matrix.csv"), kdot.values,
                     quantity="kdot(x,y)", problem=cfg.problem)
    dmax = max_kernel_step(ctx.A, kdot)
    steps = _finite_steps(cfg.deltas, dmax)
    block["max_admissible_step"] = dmax
    block["verification"] = check(steps).as_dict()
    return block


def _solve_map_problem(ctx, out_dir) -> dict:
    cfg = ctx.cfg
    feas = optimal.map_feasibility(ctx.grid, ctx.map, cfg.ell)
    G = response.factor_grid(ctx.A, ctx.map, ctx.noise, ctx.quad)
    block = {"ell": feas.ell, "mask_fraction": float(feas.mask.mean())}
    if cfg.problem == "expectation-map":
        tdot = optimal.optimal_map_for_expectation(ctx.A, ctx.f0, ctx.c, ctx.map, ctx.noise, feas, factor=G)
        w = response.density_response_map(ctx.A, ctx.f0, ctx.map, ctx.noise, tdot, factor=G)
        block["objective"] = discrete_inner_product(ctx.c, w)
        block["expectation"] = discrete_inner_product(ctx.c, ctx.f0)
        rep = response.fd_density_map(ctx.A, ctx.map, ctx.noise, tdot, ctx.f0, cfg.deltas, ctx.quad, G)
    else:
        pair = subdominant_eigenpair(ctx.A, cfg.selector)
        tdot = optimal.optimal_map_for_mixing(pair, ctx.map, ctx.noise, feas, factor=G)
        dlam = response.eigenvalue_response_map(pair, tdot, G)
        block["lambda"] = _complex_json(pair.lam)
        block["eigenvalue_derivative"] = _complex_json(dlam)
        block["objective"] = float(np.real(np.conj(pair.lam) * dlam) / abs(pair.lam) ** 2)
        rep = response.fd_eigenvalue_map(ctx.A, pair, ctx.map, ctx.noise, tdot, cfg.deltas, ctx.quad, G)
    write_vector_csv(os.path.join(out_dir, "perturbation.csv"), ctx.grid.centers, {"Tdot": tdot.values},
                     quantity="Tdot(x)", problem=cfg.problem)
    ov = emit_overlay(ctx.map, tdot, cfg.overlay_scale, os.path.join(out_dir, "overlay.csv"))
    block["overlay_range"] = [float(ov[:, 2].min()), float(ov[:, 2].max())]
    block["verification"] = rep.as_dict()
    return block


def verify_suite(cfg: ExperimentConfig) -> dict:
    """Finite-difference response checks plus small-n optimality certificates.

    Every check is recorded with a pass flag; exceptions from a check are
    recorded as failures rather than aborting the suite.
    """
    checks = []

    def record(label, fn):
        try:
            out = fn()
            d = out.as_dict()
            d["label"] = label
        except OptResponseError as exc:
            d = {"label": label, "passed": False, "error": f"{type(exc).__name__}: {exc}"}
        checks.append(d)

    rng = np.random.default_rng(cfg.seed)
    ctx = _Context(cfg, n=min(cfg.n, cfg.verify_n))
    A, deltas = ctx.A, cfg.deltas

    if cfg.perturbation_file:
        values, _ = read_matrix_csv(cfg.perturbation_file)
        user = response.KernelPerturbation(values)
        record("density/kernel (user kdot)", lambda: response.fd_density_kernel(A, user, ctx.f0, deltas))
    else:
        feas = optimal.kernel_feasibility(A, cfg.l)
        kdot = response.KernelPerturbation(optimal.random_feasible_kernels(feas, 1, rng)[0], feas.mask)
        steps = _finite_steps(deltas, max_kernel_step(A, kdot))
        tdot = optimal.random_feasible_maps(optimal.map_feasibility(ctx.grid, ctx.map, cfg.ell), 1, rng)[0]
        G = response.factor_grid(A, ctx.map, ctx.noise, ctx.quad)
        record("density/kernel", lambda: response.fd_density_kernel(A, kdot, ctx.f0, steps))
        record("density/map", lambda: response.fd_density_map(A, ctx.map, ctx.noise, tdot, ctx.f0, deltas,
                                                               ctx.quad, G))
        try:
            pair = subdominant_eigenpair(A, cfg.selector)
        except OptResponseError as exc:
            checks.append({"label": "eigenpair", "passed": False, "error": f"{type(exc).__name__}: {exc}"})
        else:
            record("eigenvalue/kernel", lambda: response.fd_eigenvalue_kernel(A, pair, kdot, steps))
            record("eigenvalue/map", lambda: response.fd_eigenvalue_map(A, pair, ctx.map, ctx.noise, tdot,
                                                                        deltas, ctx.quad, G))

        small = _Context(cfg, n=cfg.certify_n)
        m = cfg.certify_samples
        record("certify expectation/kernel",
               lambda: optimal.certify_expectation_kernel(small.A, small.c, samples=m, rng=rng))
        record("certify mixing/kernel", lambda: optimal.certify_mixing_kernel(small.A, samples=m, rng=rng))
        record("certify expectation/map",
               lambda: optimal.certify_expectation_map(small.A, small.c, small.map, small.noise,
                                                       samples=m, rng=rng, quad=small.quad))
        record("certify mixing/map",
               lambda: optimal.certify_mixing_map(small.A, small.map, small.noise, samples=m, rng=rng,
                                                  quad=small.quad))
    return {"checks": checks, "passed": all(c["passed"] for c in checks)}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="optresponse", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("run", "run the experiment described by a config"),
                        ("verify", "run the verification suite for a config")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("config", nargs="?", help="YAML or JSON config file")
        s.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field (dotted keys for map parameters)")
        s.add_argument("--output-dir", "-o", help="output directory (overrides the config)")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.overrides)
    if args.output_dir:
        overrides.append(f"output_dir={args.output_dir}")
    if args.command == "verify":
        overrides.append("problem=verify-response")
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        report = run(cfg)
    except VerificationFailed as exc:
        failed = [c["label"] for c in exc.report["verification"]["checks"] if not c["passed"]]
        print(f"verification failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VERIFY
    except OptResponseError as exc:
        print(f"numerical error in {cfg.problem}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except np.linalg.LinAlgError as exc:
        print(f"numerical error in {cfg.problem}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps({"problem": cfg.problem, "output_dir": cfg.output_dir,
                      "objective": report.get("optimum", {}).get("objective")}, default=_json_default))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
