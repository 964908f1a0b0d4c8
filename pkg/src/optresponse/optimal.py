"""Closed-form optimal kernel and map perturbations.

All four problems maximise (or minimise) a linear functional over the unit
sphere of a closed subspace, so the optimiser is the normalised projection of
the functional's Riesz representer onto that subspace:

* kernel problems: support in ``F_l = {k0 >= l}`` and zero column means over
  ``F_l^y``; the projection removes the per-column mean on the mask;
* map problems: support in ``{ell <= T0 <= 1 - ell}``.

The certification helpers compare an optimiser against random feasible
unit-norm candidates and check alignment with the feasible gradient built
from objective evaluations on an orthonormal basis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .discretization import Grid, TransferMatrix, build_grid, discrete_kernel_norm, discrete_l2_norm
from .dynamics import MapModel
from .errors import DegenerateObjectiveError, InfeasibleError, InvalidParameterError
from .perturb import perturbed_map_operator, perturbed_operator  # noqa: F401  (re-exported)
from .response import (KernelPerturbation, MapPerturbation, apply_G, build_E_field, build_Ehat_field,
                       factor_grid)
from .spectral import (EigenPair, invariant_density, project_out_constant, resolvent_solve_adjoint,
                       subdominant_eigenpair)

DEGENERACY_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class KernelFeasibility:
    l: float
    mask: np.ndarray

    @property
    def n(self) -> int:
        return self.mask.shape[0]

    @property
    def column_measure(self) -> np.ndarray:
        """``m(F_l^y)`` per source cell."""
        return self.mask.sum(axis=0) / self.n

    @property
    def active_columns(self) -> np.ndarray:
        return self.column_measure > 0


@dataclass(frozen=True, eq=False)
class MapFeasibility:
    ell: float
    mask: np.ndarray

    @property
    def n(self) -> int:
        return self.mask.shape[0]


def default_threshold(A: TransferMatrix) -> float:
    return min(1e-3 * float(A.kernel.max()), 0.5)


def kernel_feasibility(A: TransferMatrix, l: float | None = None) -> KernelFeasibility:
    """``F_l`` as a mask on the kernel grid ``n * A``; default ``l = 1e-3 max k0``."""
    l = default_threshold(A) if l is None else float(l)
    if not (0.0 < l < 1.0):
        raise InvalidParameterError(f"kernel threshold l must lie in (0, 1), got {l!r}")
    return KernelFeasibility(l, A.kernel >= l)


def map_feasibility(grid: Grid, map_: MapModel, ell: float = 0.0) -> MapFeasibility:
    """Cells whose centre maps into ``[ell, 1 - ell]``."""
    ell = float(ell)
    if not (0.0 <= ell < 0.5):
        raise InvalidParameterError(f"ell must lie in [0, 1/2), got {ell!r}")
    t = map_(grid.centers)
    return MapFeasibility(ell, (t >= ell) & (t <= 1.0 - ell))


def project_kernel_feasible(field, feas: KernelFeasibility) -> np.ndarray:
    """Zero ``field`` off ``F_l`` and remove its mean over each ``F_l^y``."""
    field = np.asarray(field, dtype=float)
    mask = feas.mask
    counts = mask.sum(axis=-2)
    masked = np.where(mask, field, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(counts > 0, masked.sum(axis=-2) / np.maximum(counts, 1), 0.0)
    return np.where(mask, masked - means[..., None, :], 0.0)


def project_map_feasible(field, feas: MapFeasibility) -> np.ndarray:
    return np.where(feas.mask, np.asarray(field, dtype=float), 0.0)


def _finish_kernel(M, feas, ref, what) -> KernelPerturbation:
    alpha = discrete_kernel_norm(M)
    if not np.isfinite(alpha) or alpha <= DEGENERACY_TOL * ref:
        raise DegenerateObjectiveError(f"{what}: the objective vanishes on the feasible set")
    return KernelPerturbation(M / alpha, feas.mask.copy())


def _finish_map(v, feas, ref, what) -> MapPerturbation:
    alpha = discrete_l2_norm(v)
    if not np.isfinite(alpha) or alpha <= DEGENERACY_TOL * ref:
        raise DegenerateObjectiveError(f"{what}: the objective vanishes on the feasible set")
    return MapPerturbation(v / alpha, feas.mask.copy())


def _require_mask(feas):
    if not feas.mask.any():
        raise InfeasibleError("the feasible set is empty (all-false support mask)")


def optimal_kernel_for_expectation(A: TransferMatrix, f0, c, feas: KernelFeasibility) -> KernelPerturbation:
    """Unit-norm kernel perturbation maximising the derivative of ``int c f_delta``.

    ``kdot(x, y) ~ f0(y) (y(x) - mean_{F_l^y} y)`` on ``F_l`` with
    ``y = (Id - L0*)^{-1} c``.
    """
    _require_mask(feas)
    y = resolvent_solve_adjoint(A, c, f0)
    M = project_kernel_feasible(np.outer(y, f0), feas)
    ref = discrete_l2_norm(c) * discrete_l2_norm(f0)
    return _finish_kernel(M, feas, ref, "expectation/kernel")


def optimal_kernel_for_mixing(pair: EigenPair, feas: KernelFeasibility) -> KernelPerturbation:
    """Unit-norm kernel perturbation minimising ``<kdot, E>`` (fastest decrease of ``Re log lambda``)."""
    _require_mask(feas)
    E = build_E_field(pair)
    M = project_kernel_feasible(-E, feas)
    return _finish_kernel(M, feas, discrete_kernel_norm(E), "mixing/kernel")


def optimal_map_for_expectation(A: TransferMatrix, f0, c, map_, noise, feas: MapFeasibility,
                                quad=None, factor=None) -> MapPerturbation:
    """Unit-norm ``Tdot`` maximising the derivative of ``int c f_delta``: ``-f0 * G((Id - L0*)^{-1} c)``."""
    _require_mask(feas)
    G = factor_grid(A, map_, noise, quad, factor)
    y = resolvent_solve_adjoint(A, c, f0)
    v = project_map_feasible(-f0 * apply_G(G, y), feas)
    ref = discrete_l2_norm(c) * discrete_l2_norm(f0) * discrete_kernel_norm(G)
    return _finish_map(v, feas, ref, "expectation/map")


def optimal_map_for_mixing(pair: EigenPair, map_, noise, feas: MapFeasibility,
                           quad=None, factor=None) -> MapPerturbation:
    """Unit-norm ``Tdot`` minimising ``<Tdot, Ehat>``, i.e. ``-Ehat`` restricted to the mask."""
    _require_mask(feas)
    G = factor_grid(build_grid(pair.n), map_, noise, quad, factor)
    Ehat = build_Ehat_field(pair, factor=G)
    ref = float(np.sqrt(((np.abs(G) * np.abs(build_E_field(pair))).sum(axis=0) ** 2).sum()) / pair.n ** 1.5)
    return _finish_map(project_map_feasible(-Ehat, feas), feas, ref, "mixing/map")


# ---------------------------------------------------------------------------
# certification
# ---------------------------------------------------------------------------

def random_feasible_kernels(feas: KernelFeasibility, count: int, rng) -> np.ndarray:
    """Gaussian fields projected onto the feasible subspace and normalised, shape ``(count, n, n)``."""
    n = feas.n
    Z = rng.standard_normal((count, n, n))
    Z = project_kernel_feasible(Z, feas)
    norms = np.sqrt((Z ** 2).sum(axis=(1, 2))) / n
    return Z / norms[:, None, None]


def random_feasible_maps(feas: MapFeasibility, count: int, rng) -> np.ndarray:
    n = feas.n
    Z = np.where(feas.mask, rng.standard_normal((count, n)), 0.0)
    return Z / (np.sqrt((Z ** 2).sum(axis=1) / n))[:, None]


def feasible_kernel_basis(feas: KernelFeasibility) -> np.ndarray:
    """Orthonormal basis (discrete kernel inner product) of zero-column-mean kernels supported on the mask."""
    n = feas.n
    out = []
    for j in range(n):
        rows = np.flatnonzero(feas.mask[:, j])
        m = rows.size
        if m < 2:
            continue
        centred = np.eye(m) - 1.0 / m
        q, _ = np.linalg.qr(centred[:, :-1])
        for k in range(m - 1):
            b = np.zeros((n, n))
            b[rows, j] = q[:, k] * n
            out.append(b)
    return np.array(out)


def feasible_map_basis(feas: MapFeasibility) -> np.ndarray:
    n = feas.n
    idx = np.flatnonzero(feas.mask)
    basis = np.zeros((idx.size, n))
    basis[np.arange(idx.size), idx] = np.sqrt(n)
    return basis


@dataclass
class Certificate:
    label: str
    objective: float
    best_random: float
    beaten_fraction: float
    strictly_beats_all: bool
    kkt_cosine: float
    unit_norm_error: float
    feasible: bool

    @property
    def passed(self) -> bool:
        return bool(self.strictly_beats_all and self.kkt_cosine >= 1 - 1e-8
                    and self.unit_norm_error <= 1e-12 and self.feasible)

    def as_dict(self):
        return {k: (float(v) if isinstance(v, (np.floating, float)) else v)
                for k, v in self.__dict__.items()} | {"passed": self.passed}


def certify(label, objective, candidate, samples, basis, maximize: bool, norm, feasible: bool) -> Certificate:
    """Compare ``objective(candidate)`` against ``objective`` on random samples and on a basis.

    ``objective`` maps a stacked array of perturbations to their objective values.
    """
    sign = 1.0 if maximize else -1.0
    j_star = float(objective(candidate[None])[0])
    j_rand = np.asarray(objective(samples))
    best = float(j_rand.max() if maximize else j_rand.min())
    beaten = float(np.mean(sign * j_rand < sign * j_star))
    coords = np.asarray(objective(basis))
    grad = np.tensordot(coords, basis, axes=1) * sign
    g, c = grad.ravel(), candidate.ravel()
    cos = float(g @ c / (np.linalg.norm(g) * np.linalg.norm(c)))
    return Certificate(label, j_star, best, beaten, bool(sign * j_star > sign * best), cos,
                       abs(norm(candidate) - 1.0), feasible)


def _fundamental_matrix(A) -> np.ndarray:
    # Z = (Id - P + f0 1^T / n)^{-1} inverts (Id - P) on zero-mean vectors
    P = A.entries
    n = P.shape[0]
    f0 = invariant_density(A)
    return np.linalg.inv(np.eye(n) - P + np.outer(f0, np.ones(n)) / n), f0


def _expectation_objective_kernel(A, c):
    Z, f0 = _fundamental_matrix(A)
    cp = project_out_constant(c, f0)
    n = A.n

    def J(K):
        v = K @ f0 / n                      # (m, n)
        return (v @ Z.T) @ cp / n

    return J


def _expectation_objective_map(A, c, G):
    Z, f0 = _fundamental_matrix(A)
    cp = project_out_constant(c, f0)
    n = A.n

    def J(T):
        v = -(T * f0[None, :]) @ G.T / n    # kdot = -G * Tdot(y)
        return (v @ Z.T) @ cp / n

    return J


def _mixing_objective_kernel(pair):
    n, lam = pair.n, pair.lam

    def J(K):
        dlam = np.einsum("i,mij,j->m", pair.left, K, pair.right) / n ** 2
        return np.real(np.conj(lam) * dlam) / abs(lam) ** 2

    return J


def _mixing_objective_map(pair, G):
    H = -pair.right * (G.T @ pair.left) / pair.n

    def J(T):
        return np.real(np.conj(pair.lam) * (T @ H) / pair.n) / abs(pair.lam) ** 2

    return J


def _kernel_feasible(kdot: KernelPerturbation, feas: KernelFeasibility) -> bool:
    k = kdot.values
    off = np.abs(np.where(feas.mask, 0.0, k)).max()
    means = np.abs(k.sum(axis=0)).max() / feas.n
    return bool(off == 0.0 and means <= 1e-12)


def certify_expectation_kernel(A, c, feas=None, samples=10_000, rng=None, f0=None) -> Certificate:
    rng = np.random.default_rng(rng)
    feas = kernel_feasibility(A) if feas is None else feas
    f0 = invariant_density(A) if f0 is None else f0
    kdot = optimal_kernel_for_expectation(A, f0, c, feas)
    return certify("expectation/kernel", _expectation_objective_kernel(A, c), kdot.values,
                   random_feasible_kernels(feas, samples, rng), feasible_kernel_basis(feas), True,
                   discrete_kernel_norm, _kernel_feasible(kdot, feas))


def certify_mixing_kernel(A, feas=None, samples=10_000, rng=None, selector="largest-modulus",
                          pair=None) -> Certificate:
    rng = np.random.default_rng(rng)
    feas = kernel_feasibility(A) if feas is None else feas
    pair = subdominant_eigenpair(A, selector) if pair is None else pair
    kdot = optimal_kernel_for_mixing(pair, feas)
    return certify("mixing/kernel", _mixing_objective_kernel(pair), kdot.values,
                   random_feasible_kernels(feas, samples, rng), feasible_kernel_basis(feas), False,
                   discrete_kernel_norm, _kernel_feasible(kdot, feas))


def certify_expectation_map(A, c, map_, noise, feas=None, samples=10_000, rng=None, quad=None) -> Certificate:
    rng = np.random.default_rng(rng)
    feas = map_feasibility(A.grid, map_) if feas is None else feas
    G = factor_grid(A, map_, noise, quad)
    tdot = optimal_map_for_expectation(A, invariant_density(A), c, map_, noise, feas, factor=G)
    ok = bool(np.all(tdot.values[~feas.mask] == 0.0))
    return certify("expectation/map", _expectation_objective_map(A, c, G), tdot.values,
                   random_feasible_maps(feas, samples, rng), feasible_map_basis(feas), True,
                   discrete_l2_norm, ok)


def certify_mixing_map(A, map_, noise, feas=None, samples=10_000, rng=None, selector="largest-modulus",
                       quad=None) -> Certificate:
    rng = np.random.default_rng(rng)
    feas = map_feasibility(A.grid, map_) if feas is None else feas
    pair = subdominant_eigenpair(A, selector)
    G = factor_grid(A, map_, noise, quad)
    tdot = optimal_map_for_mixing(pair, map_, noise, feas, factor=G)
    ok = bool(np.all(tdot.values[~feas.mask] == 0.0))
    return certify("mixing/map", _mixing_objective_map(pair, G), tdot.values,
                   random_feasible_maps(feas, samples, rng), feasible_map_basis(feas), False,
                   discrete_l2_norm, ok)
