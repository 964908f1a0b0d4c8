"""Linear response of the invariant density and of eigenvalues.

Kernel perturbations are kernel grids ``kdot[i, j] ~ kdot(x_i, y_j)`` whose
operator is ``f -> (kdot @ f) / n``.  A map perturbation ``Tdot`` enters as
the kernel perturbation ``-factor * Tdot(y)`` where ``factor`` is the cell
average of ``(P_pi tau_{-T0(y)} rho')(x)``
(:func:`optresponse.discretization.map_derivative_factor`).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
import scipy.linalg

from .discretization import (TransferMatrix, build_grid, discrete_inner_product, discrete_l2_norm,
                             kernel_inner_product, map_derivative_factor)
from .errors import PreconditionError, SpectralError
from .perturb import perturbed_map_operator, perturbed_operator
from .spectral import (EigenPair, invariant_density, project_out_constant, resolvent_solve,
                       resolvent_solve_adjoint)

VKER_TOL = 1e-9
DEFAULT_DELTAS = (1e-3, 5e-4)
RATIO_BAND = (1.3, 2.7)


@dataclass(frozen=True, eq=False)
class KernelPerturbation:
    values: np.ndarray
    support_mask: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class MapPerturbation:
    values: np.ndarray
    support_mask: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.values.shape[0]


def _kv(kdot):
    return np.asarray(getattr(kdot, "values", kdot))


def check_kernel_perturbation(kdot, tol: float = VKER_TOL) -> None:
    """Raise unless ``kdot`` has zero column means (over its mask) and vanishes off the mask."""
    k = _kv(kdot)
    n = k.shape[0]
    mask = getattr(kdot, "support_mask", None)
    scale = max(1.0, float(np.abs(k).max()))
    if mask is not None:
        off = np.abs(np.where(mask, 0.0, k)).max()
        if off > tol * scale:
            raise PreconditionError(f"kernel perturbation is nonzero off its support mask ({off:.3e})")
        k = np.where(mask, k, 0.0)
    means = k.sum(axis=0) / n
    worst = float(np.abs(means).max())
    if worst > tol * scale:
        raise PreconditionError(f"kernel perturbation has column mean {worst:.3e}; it must lie in V_ker")


def kernel_action(kdot, f):
    """``(L_dot f)(x_i) = (1/n) sum_j kdot[i, j] f[j]``."""
    k = _kv(kdot)
    return k @ f / k.shape[0]


def density_response_kernel(A: TransferMatrix, f0, kdot) -> np.ndarray:
    """``(Id - L0)^{-1} int kdot(x, y) f0(y) dy`` on the grid."""
    check_kernel_perturbation(kdot)
    v = kernel_action(kdot, f0)
    return resolvent_solve(A, v)


def expectation_derivative(A: TransferMatrix, f0, kdot, c) -> float:
    """Derivative of ``int c f_delta`` at ``delta = 0``."""
    w = density_response_kernel(A, f0, kdot)
    return float(discrete_inner_product(project_out_constant(c, f0), w))


def expectation_derivative_adjoint(A: TransferMatrix, f0, kdot, c) -> float:
    """Same derivative through the adjoint resolvent, ``<(Id - L0*)^{-1} c, int kdot f0>``."""
    check_kernel_perturbation(kdot)
    y = resolvent_solve_adjoint(A, c, f0)
    return float(discrete_inner_product(y, kernel_action(kdot, f0)))


def factor_grid(A_or_grid, map_, noise, quad=None, factor=None) -> np.ndarray:
    if factor is not None:
        return np.asarray(getattr(factor, "values", factor))
    grid = getattr(A_or_grid, "grid", A_or_grid)
    return map_derivative_factor(grid, map_, noise, quad).values


def map_to_kernel_perturbation(factor, tdot) -> KernelPerturbation:
    """``kdot(x, y) = -factor(x, y) * Tdot(y)``."""
    G = np.asarray(getattr(factor, "values", factor))
    t = np.asarray(getattr(tdot, "values", tdot), dtype=float)
    return KernelPerturbation(-G * t[None, :])


def apply_G(factor, f):
    """``(G f)(y_j) = int factor(x, y_j) f(x) dx``."""
    G = np.asarray(getattr(factor, "values", factor))
    return G.T @ f / G.shape[0]


def density_response_map(A: TransferMatrix, f0, map_, noise, tdot, quad=None, factor=None) -> np.ndarray:
    """Density response to ``T0 -> T0 + delta * Tdot``."""
    G = factor_grid(A, map_, noise, quad, factor)
    return density_response_kernel(A, f0, map_to_kernel_perturbation(G, tdot))


def eigenvalue_response_kernel(pair: EigenPair, kdot) -> complex:
    """``d lambda / d delta = (1/n^2) sum_ij kdot_ij left_i right_j``."""
    k = _kv(kdot)
    n = k.shape[0]
    val = pair.left @ k @ pair.right / n ** 2
    return complex(val)


def build_E_field(pair: EigenPair) -> np.ndarray:
    """``E(x, y) = Re(conj(lambda) * left(x) * right(y))``.

    For real pairs this is ``lambda * left(x) * right(y)``; ``<kdot, E>`` is
    ``|lambda|^2`` times the derivative of ``Re log lambda``.
    """
    return np.real(np.conj(pair.lam) * np.outer(pair.left, pair.right))


def mixing_rate_derivative(pair: EigenPair, kdot) -> float:
    """``d/d delta Re log lambda_delta = <kdot, E> / |lambda|^2``."""
    mod2 = abs(pair.lam) ** 2
    if np.sqrt(mod2) <= 1e-12:
        raise SpectralError("mixing-rate derivative is singular at lambda = 0")
    return float(kernel_inner_product(_kv(kdot), build_E_field(pair)) / mod2)


def _factor_for(n, map_, noise, quad, factor):
    if factor is not None:
        return np.asarray(getattr(factor, "values", factor))
    if map_ is None or noise is None:
        raise ValueError("need either factor= or both map and noise")
    return map_derivative_factor(build_grid(n), map_, noise, quad).values


def build_H_field(pair: EigenPair, map_=None, noise=None, quad=None, factor=None) -> np.ndarray:
    """``H(y) = -right(y) (G left)(y)``, so that ``d lambda = <H, Tdot>``."""
    G = _factor_for(pair.n, map_, noise, quad, factor)
    return -pair.right * apply_G(G, pair.left)


def build_Ehat_field(pair: EigenPair, map_=None, noise=None, quad=None, factor=None) -> np.ndarray:
    """``Ehat(y) = -int factor(x, y) E(x, y) dx``, so that ``<kdot(Tdot), E> = <Tdot, Ehat>``."""
    G = _factor_for(pair.n, map_, noise, quad, factor)
    return -(G * build_E_field(pair)).sum(axis=0) / G.shape[0]


def eigenvalue_response_map(pair: EigenPair, tdot, factor) -> complex:
    H = build_H_field(pair, factor=factor)
    t = np.asarray(getattr(tdot, "values", tdot), dtype=float)
    return complex((H * t).sum() / t.size)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

@dataclass
class ResponseReport:
    label: str
    predicted: object
    fd_delta: object
    fd_half_delta: object
    deltas: tuple
    err_delta: float
    err_half_delta: float
    ratio: float
    rel_err_delta: float
    passed: bool

    def as_dict(self):
        d = asdict(self)
        for key in ("predicted", "fd_delta", "fd_half_delta"):
            d[key] = _jsonable(d[key])
        d["deltas"] = list(self.deltas)
        return d

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)


def _jsonable(v):
    v = np.asarray(v)
    if np.iscomplexobj(v):
        return {"re": v.real.tolist(), "im": v.imag.tolist()}
    return v.tolist()


def _norm(v):
    v = np.asarray(v)
    return discrete_l2_norm(v) if v.ndim else abs(complex(v))


def make_report(label, predicted, fds, deltas, band=RATIO_BAND) -> ResponseReport:
    e1 = _norm(np.asarray(fds[0]) - predicted)
    e2 = _norm(np.asarray(fds[1]) - predicted)
    ratio = e1 / e2 if e2 > 0 else np.inf
    scale = _norm(predicted)
    rel = e1 / scale if scale > 0 else np.inf
    ok = bool(band[0] <= ratio <= band[1] and rel < 0.1)
    return ResponseReport(label, predicted, fds[0], fds[1], tuple(deltas), float(e1), float(e2),
                          float(ratio), float(rel), ok)


def fd_density_kernel(A, kdot, f0=None, deltas=DEFAULT_DELTAS) -> ResponseReport:
    f0 = invariant_density(A) if f0 is None else f0
    pred = density_response_kernel(A, f0, kdot)
    fds = [(invariant_density(perturbed_operator(A, kdot, d)) - f0) / d for d in deltas]
    return make_report("density/kernel", pred, fds, deltas)


def fd_density_map(A, map_, noise, tdot, f0=None, deltas=DEFAULT_DELTAS, quad=None, factor=None) -> ResponseReport:
    f0 = invariant_density(A) if f0 is None else f0
    pred = density_response_map(A, f0, map_, noise, tdot, quad, factor)
    fds = [(invariant_density(perturbed_map_operator(A.grid, map_, noise, tdot, d, quad)) - f0) / d
           for d in deltas]
    return make_report("density/map", pred, fds, deltas)


def tracked_eigenvalue(P, lam0) -> complex:
    """Eigenvalue of ``P`` closest to ``lam0``."""
    w = scipy.linalg.eigvals(np.asarray(getattr(P, "entries", P)))
    return complex(w[np.argmin(np.abs(w - lam0))])


def fd_eigenvalue_kernel(A, pair, kdot, deltas=DEFAULT_DELTAS) -> ResponseReport:
    pred = eigenvalue_response_kernel(pair, kdot)
    fds = [(tracked_eigenvalue(perturbed_operator(A, kdot, d), pair.lam) - pair.lam) / d for d in deltas]
    return make_report("eigenvalue/kernel", pred, fds, deltas)


def fd_eigenvalue_map(A, pair, map_, noise, tdot, deltas=DEFAULT_DELTAS, quad=None, factor=None) -> ResponseReport:
    G = factor_grid(A, map_, noise, quad, factor)
    pred = eigenvalue_response_map(pair, tdot, G)
    fds = [(tracked_eigenvalue(perturbed_map_operator(A.grid, map_, noise, tdot, d, quad), pair.lam) - pair.lam) / d
           for d in deltas]
    return make_report("eigenvalue/map", pred, fds, deltas)


def fd_mixing_rate(A, pair, kdot, deltas=DEFAULT_DELTAS) -> ResponseReport:
    pred = mixing_rate_derivative(pair, kdot)
    base = np.log(abs(pair.lam))
    fds = [(np.log(abs(tracked_eigenvalue(perturbed_operator(A, kdot, d), pair.lam))) - base) / d
           for d in deltas]
    return make_report("mixing-rate/kernel", pred, fds, deltas)
