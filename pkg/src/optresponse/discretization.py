"""Ulam discretisation on an equipartition of [0, 1].

Conventions used throughout the package:

* a density / observable is an array of ``n`` cell averages;
* ``<f, g> = (1/n) sum f_i g_i`` and kernels carry ``(1/n^2) sum k_ij^2``;
* a :class:`TransferMatrix` holds ``P_ij = n * int_{I_i} int_{I_j} k(x, y) dy dx``,
  which is column stochastic and acts on cell averages by ``f -> P @ f``;
* a kernel grid holds (approximate) kernel values ``k(x_i, y_j)``, rows are
  landing cells ``x`` and columns source cells ``y``; its operator has matrix
  ``K / n``.  In particular the kernel grid of ``P`` is ``n * P``.

With equal cell weights the adjoint of ``P`` in the discrete inner product
is ``P.T``.
"""
from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import dynamics
from .dynamics import MapModel, NoiseModel
from .errors import AssemblyError, GridMismatchError, InvalidInputError, InvalidParameterError

log = logging.getLogger(__name__)

COLUMN_SUM_TOL = 1e-6
# float64 elements of workspace per assembly chunk
_CHUNK_ELEMS = 2_000_000


@dataclass(frozen=True)
class Grid:
    n: int

    @property
    def cell_width(self) -> float:
        return 1.0 / self.n

    @property
    def edges(self) -> np.ndarray:
        return np.arange(self.n + 1) / self.n

    @property
    def centers(self) -> np.ndarray:
        return (np.arange(self.n) + 0.5) / self.n


def build_grid(n: int) -> Grid:
    if isinstance(n, bool) or int(n) != n or n < 1:
        raise InvalidParameterError(f"grid needs a positive cell count, got {n!r}")
    return Grid(int(n))


@dataclass(frozen=True)
class QuadratureSpec:
    """Gauss-Legendre order per panel in the source variable.

    The landing-cell integral is exact (cell increments of the noise CDF).
    With ``tol`` set, columns are bisected until order-``order`` results on
    a panel and its halves agree to ``tol`` per entry, at most ``max_depth``
    times.
    """

    order: int = 8
    tol: float | None = None
    max_depth: int = 8


@dataclass(frozen=True, eq=False)
class TransferMatrix:
    grid: Grid
    entries: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.grid.n

    @property
    def kernel(self) -> np.ndarray:
        """Cell-averaged kernel values, ``n * entries``."""
        return self.n * self.entries

    def apply(self, f):
        return self.entries @ f

    def apply_adjoint(self, g):
        return self.entries.T @ g


@dataclass(frozen=True, eq=False)
class KernelGrid:
    grid: Grid
    values: np.ndarray
    metadata: dict = field(default_factory=dict)


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def make_transfer_matrix(entries, metadata=None) -> TransferMatrix:
    """Wrap an explicit column-stochastic matrix (toy systems, tests)."""
    entries = np.asarray(entries, dtype=float)
    if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
        raise InvalidInputError("transfer matrix must be square")
    sums = entries.sum(axis=0)
    if np.any(np.abs(sums - 1.0) > COLUMN_SUM_TOL) or entries.min() < 0:
        raise InvalidInputError("transfer matrix must be nonnegative and column stochastic")
    return TransferMatrix(build_grid(entries.shape[0]), _frozen(entries / sums), dict(metadata or {}))


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

def _initial_panels(grid: Grid, map_: MapModel):
    edges = grid.edges
    bps = np.asarray(sorted(map_.breakpoints), dtype=float)
    panels = []
    for j in range(grid.n):
        a, b = edges[j], edges[j + 1]
        inner = bps[(bps > a) & (bps < b)]
        pts = np.concatenate([[a], inner, [b]])
        panels.append(np.column_stack([pts[:-1], pts[1:]]))
    return panels


def _integrate_columns(grid, map_, cols, panels, integrand, order):
    """``out[:, k] = int over panels[k] of integrand(T(y)) dy`` for source column ``cols[k]``."""
    t_ref, w_ref = np.polynomial.legendre.leggauss(order)
    n = grid.n
    counts = np.array([len(p) for p in panels])
    allp = np.concatenate(panels)
    mid, half = 0.5 * (allp[:, 0] + allp[:, 1]), 0.5 * (allp[:, 1] - allp[:, 0])
    ys = (mid[:, None] + half[:, None] * t_ref[None, :]).ravel()
    ws = (half[:, None] * w_ref[None, :]).ravel()
    slot = np.repeat(np.arange(len(cols)), counts * order)
    ts = map_(ys)
    out = np.zeros((n, len(cols)))
    chunk = max(order, _CHUNK_ELEMS // n)
    for start in range(0, ys.size, chunk):
        sl = slice(start, start + chunk)
        vals = integrand(ts[sl]) * ws[sl, None]
        k = slot[sl]
        bounds = np.flatnonzero(np.r_[True, k[1:] != k[:-1]])
        out[:, k[bounds]] += np.add.reduceat(vals, bounds, axis=0).T
    return out


def _split(panels):
    a, b = panels[:, 0], panels[:, 1]
    m = 0.5 * (a + b)
    out = np.empty((2 * len(panels), 2))
    out[0::2, 0], out[0::2, 1] = a, m
    out[1::2, 0], out[1::2, 1] = m, b
    return out


def _adaptive_columns(grid, map_, integrand, quad: QuadratureSpec, scale: float):
    panels = _initial_panels(grid, map_)
    cols = np.arange(grid.n)
    result = _integrate_columns(grid, map_, cols, panels, integrand, quad.order)
    if quad.tol is None:
        return result
    todo = cols
    for _ in range(quad.max_depth):
        finer = [_split(panels[j]) for j in todo]
        fine = _integrate_columns(grid, map_, todo, finer, integrand, quad.order)
        diff = scale * np.abs(fine - result[:, todo])
        result[:, todo] = fine
        for j, p in zip(todo, finer):
            panels[j] = p
        bad = diff.max(axis=0) > quad.tol
        if not bad.any():
            return result
        todo, diff = todo[bad], diff[:, bad]
    k = int(np.argmax(diff.max(axis=0)))
    i, j = int(np.argmax(diff[:, k])), int(todo[k])
    raise AssemblyError(f"quadrature did not reach tol={quad.tol:g} in cell (i={i}, j={j}) "
                        f"after {quad.max_depth} refinements", cell=(i, j))


def assemble_transfer_matrix(grid: Grid, map_: MapModel, noise: NoiseModel,
                             quad: QuadratureSpec | None = None) -> TransferMatrix:
    """Ulam matrix of the reflected additive-noise system.

    Raw column sums are checked against one (tolerance 1e-6) before the
    columns are renormalised; both factors are kept in ``metadata``.
    """
    quad = quad or QuadratureSpec()
    n = grid.n
    edges = grid.edges

    def masses(t):
        return dynamics.folded_cell_increments(noise.cdf, noise, t, edges)

    raw = n * _adaptive_columns(grid, map_, masses, quad, scale=n)
    clamped = np.where(raw < 0, -raw, 0.0).sum(axis=0)
    raw = np.where(raw < 0, 0.0, raw)
    sums = raw.sum(axis=0)
    dev = np.abs(sums - 1.0)
    if dev.max() > COLUMN_SUM_TOL:
        j = int(np.argmax(dev))
        raise AssemblyError(f"column {j} of the Ulam matrix sums to {sums[j]!r}", cell=(None, j))
    log.info("assembled n=%d %s %s: max |colsum-1|=%.3e, clamped mass %.3e",
             n, map_.cache_key, noise.name, dev.max(), clamped.max())
    meta = {
        "map": map_.cache_key,
        "noise": noise.name,
        "epsilon": noise.epsilon,
        "quad_order": quad.order,
        "raw_column_sums": sums,
        "max_renormalization": float(dev.max()),
        "max_clamped_mass": float(clamped.max()),
    }
    return TransferMatrix(grid, _frozen(raw / sums[None, :]), meta)


def map_derivative_factor(grid: Grid, map_: MapModel, noise: NoiseModel,
                          quad: QuadratureSpec | None = None) -> KernelGrid:
    """Cell averages of ``(P_pi tau_{-T(y)} rho')(x)`` on the grid.

    The continuum factor integrates to zero in ``x``; the residual column
    means left by quadrature are removed so that ``-factor * Tdot`` is
    exactly a zero-column-mean kernel.
    """
    return _cached_factor(grid, map_, noise, quad or QuadratureSpec())


_FACTOR_CACHE: dict = {}


def _cached_factor(grid, map_, noise, quad):
    key = (grid, id(map_), id(noise), quad)
    hit = _FACTOR_CACHE.get(key)
    if hit is not None and hit[0] is map_ and hit[1] is noise:
        return hit[2]
    n = grid.n
    edges = grid.edges

    def increments(t):
        return dynamics.folded_cell_increments(noise.density, noise, t, edges)

    raw = n * n * _adaptive_columns(grid, map_, increments, quad, scale=n * n)
    means = raw.mean(axis=0)
    vals = raw - means[None, :]
    kg = KernelGrid(grid, _frozen(vals), {"map": map_.cache_key, "noise": noise.name,
                                          "removed_column_mean": float(np.abs(means).max())})
    if len(_FACTOR_CACHE) > 16:
        _FACTOR_CACHE.clear()
    _FACTOR_CACHE[key] = (map_, noise, kg)
    return kg


# ---------------------------------------------------------------------------
# functions on the grid
# ---------------------------------------------------------------------------

def project_observable(grid: Grid, c, order: int = 8) -> np.ndarray:
    """Cell averages ``n * int_{I_i} c(x) dx`` by Gauss-Legendre per cell."""
    t, w = np.polynomial.legendre.leggauss(order)
    h = 0.5 / grid.n
    pts = grid.centers[:, None] + h * t[None, :]
    vals = np.asarray(c(pts), dtype=float)
    if vals.shape != pts.shape:
        vals = np.broadcast_to(vals, pts.shape)
    if not np.all(np.isfinite(vals)):
        raise InvalidInputError("observable has non-finite values on the grid")
    return 0.5 * (vals * w[None, :]).sum(axis=1)


def _check_same(f, g):
    if np.shape(f) != np.shape(g):
        raise GridMismatchError(f"grid mismatch: {np.shape(f)} vs {np.shape(g)}")


def discrete_inner_product(f, g) -> float:
    """``(1/n) sum f_i g_i`` (bilinear; no conjugation)."""
    f, g = np.asarray(f), np.asarray(g)
    _check_same(f, g)
    return (f * g).sum() / f.shape[0]


def discrete_integral(f):
    f = np.asarray(f)
    return f.sum() / f.shape[0]


def discrete_l2_norm(f) -> float:
    f = np.asarray(f)
    return float(np.sqrt((np.abs(f) ** 2).sum() / f.shape[0]))


def _values(k):
    return np.asarray(getattr(k, "values", k))


def discrete_kernel_norm(k) -> float:
    v = _values(k)
    return float(np.sqrt((np.abs(v) ** 2).sum()) / v.shape[0])


def kernel_inner_product(k, g) -> float:
    a, b = _values(k), _values(g)
    _check_same(a, b)
    return (a * b).sum() / a.shape[0] ** 2


# ---------------------------------------------------------------------------
# serialisation
# ---------------------------------------------------------------------------

def grid_header(n: int, **extra) -> str:
    parts = [f"n={n}", "cells=equipartition of [0,1]", "cell i=[i/n,(i+1)/n)"]
    parts += [f"{k}={v}" for k, v in extra.items()]
    return "# " + "; ".join(parts)


def write_matrix_csv(path, values, **meta):
    """Row-major CSV; rows are landing cells x, columns source cells y."""
    values = np.asarray(values)
    header = grid_header(values.shape[0], layout="rows=x (landing), columns=y (source)", **meta)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        np.savetxt(fh, values, delimiter=",", fmt="%.17g")


def read_matrix_csv(path) -> tuple[np.ndarray, dict]:
    meta = {}
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        for part in first.lstrip("# ").strip().split("; "):
            if "=" in part:
                k, v = part.split("=", 1)
                meta[k] = v
        values = np.loadtxt(fh, delimiter=",", ndmin=2)
    return values, meta


def cache_key(grid: Grid, map_: MapModel, noise: NoiseModel, quad: QuadratureSpec) -> str:
    raw = f"{map_.cache_key}|{noise.name}|n={grid.n}|order={quad.order}|tol={quad.tol}"
    return hashlib.sha256(raw.encode()).hexdigest()[:20]


def cached_transfer_matrix(cache_dir, grid, map_, noise, quad=None) -> TransferMatrix:
    """Assemble, or load a previous assembly keyed by (map, noise, n, quadrature)."""
    quad = quad or QuadratureSpec()
    if cache_dir is None:
        return assemble_transfer_matrix(grid, map_, noise, quad)
    os.makedirs(cache_dir, exist_ok=True)
    path = os.path.join(cache_dir, f"ulam-{cache_key(grid, map_, noise, quad)}.npz")
    if os.path.exists(path):
        with np.load(path, allow_pickle=False) as data:
            meta = {"map": str(data["map"]), "noise": str(data["noise"]),
                    "epsilon": float(data["epsilon"]), "quad_order": int(data["quad_order"]),
                    "raw_column_sums": data["raw_column_sums"], "cached": True,
                    "max_renormalization": float(np.abs(data["raw_column_sums"] - 1).max())}
            return TransferMatrix(grid, _frozen(data["entries"]), meta)
    tm = assemble_transfer_matrix(grid, map_, noise, quad)
    np.savez_compressed(path, entries=tm.entries, map=tm.metadata["map"], noise=tm.metadata["noise"],
                        epsilon=tm.metadata["epsilon"], quad_order=quad.order,
                        raw_column_sums=tm.metadata["raw_column_sums"])
    return tm
