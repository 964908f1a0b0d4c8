"""Invariant densities, biorthonormal eigenpairs and resolvent solves.

Eigenvectors are stored with the bilinear normalisation
``(1/n) sum_i left_i * right_i = 1`` where ``A @ right = lam * right`` and
``A.T @ left = lam * left``.  For real eigenvalues this is the usual
``<e, e_hat> = 1``; for complex ones it is the pairing under which the
first-order eigenvalue shift is ``(1/n^2) left @ Kdot @ right``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .discretization import discrete_inner_product, grid_header
from .errors import (DegeneracyError, EigenvalueNotFoundError, LinearAlgebraError,
                     PreconditionError, SpectralError)

SIMPLICITY_TOL = 1e-8
REAL_TOL = 1e-12
SELECTORS = ("largest-modulus", "largest-modulus-real")


def _entries(A):
    return np.asarray(getattr(A, "entries", A), dtype=float)


@dataclass(frozen=True, eq=False)
class EigenPair:
    lam: complex
    right: np.ndarray
    left: np.ndarray
    geometric_multiplicity_check: bool = True
    index: int | None = None

    @property
    def n(self) -> int:
        return self.right.shape[0]

    @property
    def is_real(self) -> bool:
        return not np.iscomplexobj(self.right) and np.isreal(self.lam)

    def conjugate(self) -> "EigenPair":
        return EigenPair(np.conj(self.lam), np.conj(self.right), np.conj(self.left),
                         self.geometric_multiplicity_check, self.index)


@dataclass(frozen=True)
class SpectralSet:
    pairs: list

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.array([p.lam for p in self.pairs])

    def to_csv(self, path, n=None):
        lam = self.eigenvalues.astype(complex)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(grid_header(n if n is not None else self.pairs[0].n) + "\n")
            fh.write("index,re_lambda,im_lambda,abs_lambda\n")
            for k, z in enumerate(lam):
                fh.write(f"{k},{z.real:.17g},{z.imag:.17g},{abs(z):.17g}\n")


def sort_order(lam) -> np.ndarray:
    """Indices sorting by modulus (desc), then real part (desc), then imaginary part (asc)."""
    lam = np.asarray(lam, dtype=complex)
    mod = np.round(np.abs(lam), 12)
    re = np.round(lam.real, 12)
    return np.lexsort((lam.imag, -re, -mod))


def _is_real(z) -> bool:
    return abs(z.imag) <= REAL_TOL * max(1.0, abs(z))


def _normalise_pair(lam, right, left, n):
    """Fix the phase of ``right`` and scale ``left`` to the bilinear pairing."""
    k = int(np.argmax(np.abs(right)))
    right = right * (np.conj(right[k]) / abs(right[k]))
    right = right / np.sqrt((np.abs(right) ** 2).sum() / n)
    s = (left * right).sum() / n
    if abs(s) < 1e-13:
        return lam, right, left, False
    left = left / s
    if _is_real(lam):
        lam, right, left = lam.real, right.real.copy(), left.real.copy()
    return lam, right, left, True


def _eig(A):
    try:
        return scipy.linalg.eig(A, left=True, right=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SpectralError(f"eigendecomposition failed: {exc}") from exc


def spectral_set(A) -> SpectralSet:
    """All eigenpairs of a transfer matrix, sorted by modulus."""
    P = _entries(A)
    n = P.shape[0]
    w, vl, vr = _eig(P)
    order = sort_order(w)
    pairs = []
    for idx in order:
        # scipy's left vectors satisfy vl^H P = w vl^H, i.e. P.T conj(vl) = w conj(vl)
        lam, e, eh, ok = _normalise_pair(w[idx], vr[:, idx], np.conj(vl[:, idx]), n)
        others = np.delete(w, idx)
        simple = ok and (others.size == 0 or np.min(np.abs(others - w[idx])) > SIMPLICITY_TOL)
        pairs.append(EigenPair(lam, e, eh, bool(simple), len(pairs)))
    return SpectralSet(pairs)


def _leading_index(w):
    return int(np.argmin(np.abs(w - 1.0)))


def subdominant_eigenpair(A, selector: str = "largest-modulus", strict: bool = True) -> EigenPair:
    """Eigenpair of the largest-modulus eigenvalue other than 1 (optionally the largest real one).

    With ``strict`` a non-isolated eigenvalue raises :class:`DegeneracyError`;
    otherwise the pair is returned with ``geometric_multiplicity_check=False``.
    """
    if selector not in SELECTORS:
        raise ValueError(f"selector must be one of {SELECTORS}")
    P = _entries(A)
    n = P.shape[0]
    if n < 2:
        raise EigenvalueNotFoundError("a 1x1 transfer matrix has no subdominant eigenvalue")
    w, vl, vr = _eig(P)
    lead = _leading_index(w)
    cand = np.array([i for i in sort_order(w) if i != lead])
    if abs(w[cand[0]]) >= 1.0 - 1e-8:
        raise SpectralError(f"no spectral gap: |lambda_2| = {abs(w[cand[0]]):.3g}")
    if selector == "largest-modulus-real":
        cand = np.array([i for i in cand if _is_real(w[i])])
        if cand.size == 0 or abs(w[cand[0]]) <= 0.1:
            raise EigenvalueNotFoundError("no real subdominant eigenvalue of modulus > 0.1")
    idx = int(cand[0])
    others = np.delete(w, idx)
    sep = float(np.min(np.abs(others - w[idx])))
    simple = sep > SIMPLICITY_TOL
    if strict and not simple:
        raise DegeneracyError(f"eigenvalue {w[idx]:.6g} is not isolated (separation {sep:.2e})")
    lam, e, eh, ok = _normalise_pair(w[idx], vr[:, idx], np.conj(vl[:, idx]), n)
    if strict and not ok:
        raise DegeneracyError(f"left and right eigenvectors of {w[idx]:.6g} are orthogonal")
    pos = int(np.flatnonzero(sort_order(w) == idx)[0])
    resid = np.linalg.norm(P @ e - lam * e)
    if ok and resid > 1e-8 * max(1.0, np.linalg.norm(P, 2)) * np.linalg.norm(e):
        raise SpectralError(f"eigenvector residual {resid:.2e} too large")
    return EigenPair(lam, e, eh, bool(simple and ok), pos)


def invariant_density(A, tol: float = 1e-10) -> np.ndarray:
    """Fixed point of ``A`` with discrete integral one."""
    P = _entries(A)
    n = P.shape[0]
    M = np.eye(n) - P
    M[-1, :] = 1.0 / n
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    try:
        f = np.linalg.solve(M, rhs)
        f = f + np.linalg.solve(M, rhs - M @ f)  # one step of iterative refinement
    except np.linalg.LinAlgError as exc:
        raise SpectralError(f"invariant density is not unique: {exc}") from exc
    if f.min() < -tol * max(1.0, np.abs(f).max()):
        raise SpectralError(f"invariant density has negative entries (min {f.min():.3e})")
    f = np.clip(f, 0.0, None)
    f = f / (f.sum() / n)
    resid = np.linalg.norm(P @ f - f)
    if not np.isfinite(resid) or resid > tol:
        raise SpectralError(f"invariant density residual {resid:.3e} exceeds {tol:g}")
    return f


def _bordered_solve(M, border, rhs, what):
    n = M.shape[0]
    B = np.zeros((n + 1, n + 1))
    B[:n, :n] = M
    B[:n, n] = border
    B[n, :n] = border
    try:
        sol = np.linalg.solve(B, np.r_[rhs, 0.0])
        sol = sol + np.linalg.solve(B, np.r_[rhs, 0.0] - B @ sol)
    except np.linalg.LinAlgError as exc:
        raise LinearAlgebraError(f"{what}: singular system ({exc})") from exc
    y = sol[:n]
    resid = np.linalg.norm(M @ y - rhs)
    if not np.isfinite(resid) or resid > 1e-10 * max(1.0, np.linalg.norm(rhs)):
        raise LinearAlgebraError(f"{what}: residual {resid:.3e}; (Id - A) is singular beyond its known kernel")
    return y


def project_out_constant(c, f0) -> np.ndarray:
    """``c - <c, f0> 1``, the representative of ``c`` orthogonal to ``f0``."""
    c = np.asarray(c, dtype=float)
    return c - discrete_inner_product(c, f0) * np.ones_like(c)


def resolvent_solve_adjoint(A, c, f0) -> np.ndarray:
    """Solve ``(Id - A^T) y = c`` with ``<y, f0> = 0`` after projecting ``c`` orthogonal to ``f0``."""
    P = _entries(A)
    c = project_out_constant(c, f0)
    return _bordered_solve(np.eye(P.shape[0]) - P.T, np.asarray(f0, dtype=float), c, "adjoint resolvent")


def resolvent_solve(A, v, tol: float = 1e-8) -> np.ndarray:
    """Solve ``(Id - A) w = v`` on zero-mean vectors."""
    P = _entries(A)
    v = np.asarray(v)
    mean = v.sum() / v.shape[0]
    if abs(mean) > tol * max(1.0, np.abs(v).max()):
        raise PreconditionError(f"resolvent_solve needs a zero-mean right-hand side (mean {mean:.3e})")
    M = np.eye(P.shape[0]) - P
    ones = np.ones(P.shape[0])
    if np.iscomplexobj(v):
        return (_bordered_solve(M, ones, v.real, "resolvent")
                + 1j * _bordered_solve(M, ones, v.imag, "resolvent"))
    return _bordered_solve(M, ones, v, "resolvent")


@dataclass(frozen=True)
class MixingReport:
    max_norm_ratio: float
    fitted_rate: float
    lambda2_modulus: float
    passed: bool
    norms: np.ndarray

    def as_dict(self):
        return {"max_norm_ratio": self.max_norm_ratio, "fitted_rate": self.fitted_rate,
                "lambda2_modulus": self.lambda2_modulus, "passed": self.passed}


def mixing_check(A, trials: int = 8, horizon: int = 100, seed: int = 0) -> MixingReport:
    """Empirical decay of ``A^k g`` for random zero-mean ``g``.

    The fitted rate is the geometric decay of the worst trial over the second
    half of the horizon (only iterates above round-off are used).
    """
    P = _entries(A)
    n = P.shape[0]
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((n, trials))
    g -= g.mean(axis=0)
    g /= np.linalg.norm(g, axis=0)
    norms = np.empty((horizon + 1, trials))
    x = g
    norms[0] = 1.0
    for k in range(1, horizon + 1):
        x = P @ x
        norms[k] = np.linalg.norm(x, axis=0)
    env = norms.max(axis=1)
    ks = np.arange(horizon + 1)
    use = (ks >= horizon // 2) & (env > 1e-12)
    if use.sum() >= 2:
        slope = np.polyfit(ks[use], np.log(env[use]), 1)[0]
        rate = float(np.exp(slope))
    else:
        usable = env[1:] > 1e-12
        rate = 0.0 if not usable.any() else float(env[1:][usable][-1] ** (1.0 / (np.flatnonzero(usable)[-1] + 1)))
    w = scipy.linalg.eigvals(P)
    lead = _leading_index(w)
    lam2 = float(np.max(np.abs(np.delete(w, lead)))) if n > 1 else 0.0
    ratio = float(env[-1])
    close = abs(rate - lam2) <= 0.1 * lam2 if lam2 > 1e-8 else rate < 1e-8
    return MixingReport(ratio, rate, lam2, bool(ratio < 1e-3 and close), norms)


def write_eigenvector_csv(path, pair: EigenPair, centers):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(grid_header(pair.n, eigenvalue=complex(pair.lam)) + "\n")
        fh.write("x,re_right,im_right,re_left,im_left\n")
        for x, e, eh in zip(centers, np.asarray(pair.right, complex), np.asarray(pair.left, complex)):
            fh.write(f"{x:.17g},{e.real:.17g},{e.imag:.17g},{eh.real:.17g},{eh.imag:.17g}\n")
