"""Finite perturbations ``k0 + delta * kdot`` and ``T0 + delta * Tdot`` of a transfer operator."""
from __future__ import annotations

import numpy as np

from .discretization import TransferMatrix, _frozen, assemble_transfer_matrix
from .dynamics import MapModel
from .errors import PreconditionError, StepTooLargeError

RENORM_TOL = 1e-10
MAX_OVERSHOOT = 0.5


def _kvalues(kdot):
    return np.asarray(getattr(kdot, "values", kdot), dtype=float)


def max_kernel_step(A: TransferMatrix, kdot) -> float:
    """Largest ``delta`` keeping ``k0 + delta * kdot`` nonnegative on the grid."""
    k = _kvalues(kdot)
    neg = k < 0
    if not neg.any():
        return np.inf
    return float(np.min(A.kernel[neg] / -k[neg]))


def perturbed_operator(A: TransferMatrix, kdot, delta: float) -> TransferMatrix:
    """Ulam matrix of the kernel ``k0 + delta * kdot``."""
    if delta == 0:
        return A
    k = _kvalues(kdot)
    dmax = max_kernel_step(A, k)
    if delta > dmax:
        raise StepTooLargeError(f"step {delta:g} makes the kernel negative; max admissible step {dmax:.6g}",
                                max_delta=dmax)
    P = A.entries + delta * k / A.n
    sums = P.sum(axis=0)
    dev = float(np.abs(sums - 1.0).max())
    if dev > RENORM_TOL:
        raise PreconditionError(f"perturbation changes column sums by {dev:.3e}; kdot must have zero column means")
    P = np.clip(P, 0.0, None) / sums[None, :]
    meta = dict(A.metadata, perturbation="kernel", delta=delta)
    return TransferMatrix(A.grid, _frozen(P), meta)


def piecewise_constant(values):
    values = np.asarray(values, dtype=float)
    n = values.size

    def f(y):
        idx = np.clip(np.floor(np.asarray(y) * n).astype(int), 0, n - 1)
        return values[idx]

    return f


def perturbed_map(map_: MapModel, tdot, delta: float, samples_per_cell: int = 16) -> MapModel:
    """``T0 + delta * Tdot`` with ``Tdot`` constant on grid cells.

    The perturbed map may overshoot ``[0, 1]`` slightly near the boundary;
    the reflecting fold absorbs that.  Overshoots beyond ``MAX_OVERSHOOT``
    are rejected.
    """
    tvals = np.asarray(getattr(tdot, "values", tdot), dtype=float)
    n = tvals.size
    step = piecewise_constant(tvals)
    # sample every cell (edges nudged inwards) to bound the admissible step
    u = np.linspace(0.0, 1.0, samples_per_cell)
    ys = ((np.arange(n)[:, None] + 1e-9 + u[None, :] * (1 - 2e-9)) / n).ravel()
    t0 = map_(ys)
    d = step(ys)
    with np.errstate(divide="ignore", invalid="ignore"):
        room = np.where(d > 0, (1.0 + MAX_OVERSHOOT - t0) / d, np.where(d < 0, (t0 + MAX_OVERSHOOT) / -d, np.inf))
    dmax = float(room.min())
    if delta > dmax:
        raise StepTooLargeError(f"map step {delta:g} overshoots [0, 1] by more than {MAX_OVERSHOOT:g}; "
                                f"max admissible step {dmax:.6g}", max_delta=dmax)
    t1 = t0 + delta * d
    over = max(0.0, -float(t1.min()), float(t1.max()) - 1.0)

    def T(x):
        return map_.func(x) + delta * step(x)

    params = dict(map_.parameters, delta=delta)
    return MapModel(T, f"{map_.description} + {delta:g}*Tdot", params,
                    breakpoints=map_.breakpoints, name=map_.name + "+pert",
                    overshoot=min(MAX_OVERSHOOT, 2 * over + abs(delta) * float(np.abs(tvals).max())))


def perturbed_map_operator(grid, map_, noise, tdot, delta, quad=None) -> TransferMatrix:
    """Ulam matrix reassembled with the map ``T0 + delta * Tdot``."""
    return assemble_transfer_matrix(grid, perturbed_map(map_, tdot, delta), noise, quad)
